//! Synthetic patient cohorts with recurring patterns at fixed sites.
//!
//! Patients are assigned to appearance clusters by `id % clusters`. A
//! cluster fixes a site layout (pattern shapes at canonical coordinates)
//! and a smooth background field; each patient re-renders that scene under
//! its own translation, elastic warp and additive noise.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed;
use crate::tensor::{file, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Blob,
    Ring,
    Bar,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Blob, ShapeKind::Ring, ShapeKind::Bar, ShapeKind::Cross];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Blob => "blob",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
            ShapeKind::Cross => "cross",
        }
    }

    /// Profile in `[0, 1]` at offset `(dz, dy, dx)` from the center.
    fn profile(self, d: [f64; 3], r: f64) -> f64 {
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let edge = |a: f64, half: f64| 1.0 / (1.0 + ((a.abs() - half) / 0.5).exp());
        let bar_x = edge(d[2], r) * edge(d[1], 0.3 * r) * edge(d[0], 0.3 * r);
        match self {
            ShapeKind::Blob => (-rho * rho / (2.0 * (0.5 * r).powi(2))).exp(),
            ShapeKind::Ring => (-(rho - 0.7 * r).powi(2) / (2.0 * (0.2 * r).powi(2))).exp(),
            ShapeKind::Bar => bar_x,
            ShapeKind::Cross => {
                let bar_y = edge(d[1], r) * edge(d[2], 0.3 * r) * edge(d[0], 0.3 * r);
                bar_x.max(bar_y)
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth label of a coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Background,
    Shape(ShapeKind),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Background => f.write_str("background"),
            Label::Shape(s) => s.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Spatial extents, `[h, w]` or `[d, h, w]`.
    pub grid: Vec<usize>,
    /// Pattern sites per cluster.
    pub sites: usize,
    pub vocabulary: Vec<ShapeKind>,
    /// Half-extent of a site's pattern and ground-truth region, in voxels.
    pub site_radius: usize,
    /// Minimum distance from a site center to the border, per axis.
    pub margin: Vec<usize>,
    /// Bound on elastic control-point displacement, in voxels; the global
    /// translation is bounded by half of it.
    pub deformation: f64,
    pub noise: f64,
    pub clusters: usize,
    pub pattern_amplitude: f64,
    pub background_amplitude: f64,
    /// Range the background waves' per-axis wavelengths are drawn from.
    pub background_wavelength: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            grid: vec![64, 64],
            sites: 8,
            vocabulary: ShapeKind::ALL.to_vec(),
            site_radius: 5,
            margin: vec![10, 10],
            deformation: 1.0,
            noise: 0.03,
            clusters: 2,
            pattern_amplitude: 0.8,
            background_amplitude: 0.5,
            background_wavelength: [8.0, 20.0],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn default_3d() -> Self {
        PhantomConfig {
            grid: vec![16, 32, 32],
            margin: vec![4, 8, 8],
            site_radius: 3,
            sites: 4,
            ..PhantomConfig::default()
        }
    }

    pub fn dims(&self) -> usize {
        self.grid.len()
    }

    /// Grid shape as `[d, h, w]`.
    pub fn shape3(&self) -> [usize; 3] {
        to3(&self.grid, 1)
    }

    /// Largest displacement any voxel can undergo, per axis.
    pub fn max_displacement(&self) -> f64 {
        1.5 * self.deformation
    }

    /// Required Chebyshev distance between site centers.
    pub fn min_spacing(&self) -> usize {
        2 * self.site_radius + 2 + (2.0 * self.max_displacement()).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d != 2 && d != 3 {
            return Err(Error::config(format!("phantom.grid must have 2 or 3 extents, got {d}")));
        }
        if self.margin.len() != d {
            return Err(Error::config("phantom.margin must list one value per grid axis"));
        }
        if self.sites == 0 {
            return Err(Error::config("phantom.sites must be at least 1"));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::config("phantom.vocabulary is empty"));
        }
        if self.clusters == 0 {
            return Err(Error::config("phantom.clusters must be at least 1"));
        }
        for (name, v) in [
            ("deformation", self.deformation),
            ("noise", self.noise),
            ("pattern_amplitude", self.pattern_amplitude),
            ("background_amplitude", self.background_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("phantom.{name} must be finite and >= 0")));
            }
        }
        let [lo, hi] = self.background_wavelength;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
            return Err(Error::config(
                "phantom.background_wavelength must be a positive, increasing range",
            ));
        }
        if self.max_displacement() >= self.min_spacing() as f64 / 2.0 {
            return Err(Error::config(
                "phantom.deformation must stay below half the site spacing",
            ));
        }
        for a in 0..d {
            let lo = self.margin[a].max(self.site_radius);
            if self.grid[a] < 2 * lo + 1 {
                return Err(Error::config(format!(
                    "grid axis {a} (extent {}) cannot hold sites with margin {lo}",
                    self.grid[a]
                )));
            }
        }
        Ok(())
    }
}

fn to3(v: &[usize], fill: usize) -> [usize; 3] {
    if v.len() == 2 {
        [fill, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    /// `[z, y, x]`; `z = 0` for 2D grids.
    pub center: [usize; 3],
    pub shape: ShapeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    k: [f64; 3],
    phase: f64,
}

/// Scene shared by all patients of one appearance cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub cluster: usize,
    pub sites: Vec<Site>,
    base: f64,
    waves: Vec<Wave>,
}

impl ClusterLayout {
    fn generate(config: &PhantomConfig, cluster: usize) -> Result<Self> {
        let mut rng = seed::derived_rng(config.seed, "phantom.layout", cluster as u64);
        let shape = config.shape3();
        let dims = config.dims();
        let margin = to3(&config.margin, 0);
        let spacing = config.min_spacing();
        let mut sites: Vec<Site> = Vec::with_capacity(config.sites);
        let mut attempts = 0;
        let mut restarts = 0;
        while sites.len() < config.sites {
            attempts += 1;
            if attempts > 2_000 {
                restarts += 1;
                attempts = 0;
                sites.clear();
                if restarts > 200 {
                    return Err(Error::config(format!(
                        "cannot place {} sites with spacing {spacing} inside grid {:?}",
                        config.sites, config.grid
                    )));
                }
            }
            let mut c = [0usize; 3];
            for a in 0..3 {
                if a == 0 && dims == 2 {
                    continue;
                }
                let lo = margin[a].max(config.site_radius);
                let hi = shape[a] - 1 - lo;
                c[a] = rng.random_range(lo..=hi);
            }
            let clear = sites
                .iter()
                .all(|s| (0..3).map(|a| s.center[a].abs_diff(c[a])).max().unwrap_or(0) >= spacing);
            if clear {
                let k = config.vocabulary.len();
                let shape = config.vocabulary[(sites.len() + cluster) % k];
                sites.push(Site { center: c, shape });
            }
        }
        let mut waves = Vec::new();
        for _ in 0..3 {
            let mut k = [0.0; 3];
            for (a, ka) in k.iter_mut().enumerate() {
                if a == 0 && dims == 2 {
                    continue;
                }
                let [lo, hi] = config.background_wavelength;
                let wavelength = rng.random_range(lo..hi);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                *ka = sign * std::f64::consts::TAU / wavelength;
            }
            waves.push(Wave {
                k,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            });
        }
        let base = rng.random_range(0.25..0.35);
        Ok(ClusterLayout {
            cluster,
            sites,
            base,
            waves,
        })
    }

    /// Noise-free intensity at continuous position `p`.
    fn intensity(&self, config: &PhantomConfig, p: [f64; 3]) -> f64 {
        let mut bg = 0.0;
        for w in &self.waves {
            bg += (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).sin();
        }
        let mut v = self.base + config.background_amplitude * bg / self.waves.len() as f64;
        let r = config.site_radius as f64;
        for s in &self.sites {
            let d = [
                p[0] - s.center[0] as f64,
                p[1] - s.center[1] as f64,
                p[2] - s.center[2] as f64,
            ];
            if d.iter().all(|x| x.abs() <= 2.0 * r + 2.0) {
                v += config.pattern_amplitude * s.shape.profile(d, r);
            }
        }
        v
    }

    pub fn label_at(&self, radius: usize, c: [usize; 3]) -> Label {
        for s in &self.sites {
            if (0..3).all(|a| s.center[a].abs_diff(c[a]) <= radius) {
                return Label::Shape(s.shape);
            }
        }
        Label::Background
    }
}

/// Per-patient smooth displacement field: translation plus an elastic
/// 4-point-per-axis control grid interpolated multilinearly.
struct Warp {
    translation: [f64; 3],
    control: Vec<[f64; 3]>,
    shape: [usize; 3],
    active: [bool; 3],
}

const CONTROL: usize = 4;

impl Warp {
    fn sample(config: &PhantomConfig, rng: &mut seed::Rng) -> Self {
        let active = [config.dims() == 3, true, true];
        let s = config.deformation;
        let draw = |scale: f64, rng: &mut seed::Rng| -> [f64; 3] {
            let mut v = [0.0; 3];
            for a in 0..3 {
                if active[a] && scale > 0.0 {
                    v[a] = rng.random_range(-scale..=scale);
                }
            }
            v
        };
        let translation = draw(0.5 * s, rng);
        let n = if active[0] {
            CONTROL * CONTROL * CONTROL
        } else {
            CONTROL * CONTROL
        };
        let control = (0..n).map(|_| draw(s, rng)).collect();
        Warp {
            translation,
            control,
            shape: config.shape3(),
            active,
        }
    }

    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut idx = [[0usize; 2]; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !self.active[a] {
                continue;
            }
            let span = (self.shape[a].max(2) - 1) as f64;
            let u = (p[a] / span).clamp(0.0, 1.0) * (CONTROL - 1) as f64;
            let i0 = (u.floor() as usize).min(CONTROL - 2);
            idx[a] = [i0, i0 + 1];
            frac[a] = u - i0 as f64;
        }
        let zs = if self.active[0] { 2 } else { 1 };
        let mut out = self.translation;
        for zi in 0..zs {
            for yi in 0..2 {
                for xi in 0..2 {
                    let wz = if self.active[0] {
                        if zi == 0 {
                            1.0 - frac[0]
                        } else {
                            frac[0]
                        }
                    } else {
                        1.0
                    };
                    let wy = if yi == 0 { 1.0 - frac[1] } else { frac[1] };
                    let wx = if xi == 0 { 1.0 - frac[2] } else { frac[2] };
                    let z = if self.active[0] { idx[0][zi] } else { 0 };
                    let c = (z * CONTROL + idx[1][yi]) * CONTROL + idx[2][xi];
                    let w = wz * wy * wx;
                    for a in 0..3 {
                        out[a] += w * self.control[c][a];
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: usize,
    pub cluster: usize,
    pub seed: u64,
    pub volume: Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCohort {
    pub config: PhantomConfig,
    pub layouts: Vec<ClusterLayout>,
    pub patients: Vec<Patient>,
}

/// Generates patients `0..n_patients`.
pub fn generate_cohort(config: &PhantomConfig, n_patients: usize) -> Result<PhantomCohort> {
    generate_patients(config, 0, n_patients)
}

/// Generates patients `first_id..first_id + n`. Patient content depends only
/// on `(config, id)`, so disjoint id ranges give disjoint, consistent cohorts.
pub fn generate_patients(config: &PhantomConfig, first_id: usize, n: usize) -> Result<PhantomCohort> {
    config.validate()?;
    if n < 2 {
        return Err(Error::config("a cohort needs at least 2 patients"));
    }
    let layouts = (0..config.clusters)
        .map(|c| ClusterLayout::generate(config, c))
        .collect::<Result<Vec<_>>>()?;
    let patients = (first_id..first_id + n)
        .map(|id| render_patient(config, &layouts, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomCohort {
        config: config.clone(),
        layouts,
        patients,
    })
}

/// Renders patient `id` over `layouts` (indexed by cluster), which may be
/// altered copies of a cohort's layouts.
pub fn render_patient(config: &PhantomConfig, layouts: &[ClusterLayout], id: usize) -> Result<Patient> {
    let cluster = id % config.clusters;
    let layout = &layouts[cluster];
    let pseed = seed::derive(config.seed, "phantom.patient", id as u64);
    let mut rng = seed::rng(pseed);
    let warp = Warp::sample(config, &mut rng);
    let noise = if config.noise > 0.0 {
        Some(Normal::new(0.0, config.noise).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let shape = config.shape3();
    let mut data = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [z as f64, y as f64, x as f64];
                let d = warp.displacement(p);
                let q = [p[0] - d[0], p[1] - d[1], p[2] - d[2]];
                let mut v = layout.intensity(config, q);
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Patient {
        id,
        cluster,
        seed: pseed,
        volume: Grid::new(config.dims(), shape, data)?,
    })
}

impl PhantomCohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: usize) -> Option<&Patient> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// Label of the canonical site region containing `coord` in `cluster`'s
    /// layout. `coord` has one entry per grid axis.
    pub fn ground_truth_at(&self, cluster: usize, coord: &[usize]) -> Result<Label> {
        let layout = self
            .layouts
            .get(cluster)
            .ok_or_else(|| Error::usage(format!("no cluster {cluster}")))?;
        if coord.len() != self.config.dims() || coord.iter().zip(&self.config.grid).any(|(c, e)| c >= e) {
            return Err(Error::usage(format!(
                "coordinate {coord:?} outside grid {:?}",
                self.config.grid
            )));
        }
        Ok(layout.label_at(self.config.site_radius, to3(coord, 0)))
    }

    /// Writes `patient{id}.bin` tensor files and `manifest.json`; the
    /// `provenance` entries are copied into every file.
    pub fn save(&self, dir: &Path, provenance: &BTreeMap<String, String>) -> Result<()> {
        let mut entries = Vec::new();
        for p in &self.patients {
            let name = format!("patient{}.bin", p.id);
            let t = Tensor::<f32>::new(self.config.grid.clone(), p.volume.data().to_vec())?;
            let mut meta = provenance.clone();
            meta.insert("patient_id".to_string(), p.id.to_string());
            meta.insert("cluster".to_string(), p.cluster.to_string());
            meta.insert("seed".to_string(), p.seed.to_string());
            let bytes = file::encode(&meta, &[("volume", &t)])?;
            artifact::write_atomic(&dir.join(&name), &bytes)?;
            entries.push(ManifestPatient {
                id: p.id,
                cluster: p.cluster,
                seed: p.seed,
                file: name,
                sha256: seed::sha256_hex(&bytes),
            });
        }
        let manifest = CohortManifest {
            provenance: provenance.clone(),
            config: self.config.clone(),
            layouts: self.layouts.clone(),
            patients: entries,
        };
        artifact::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CohortManifest = artifact::read_json(&dir.join("manifest.json"))?;
        m.config.validate()?;
        let mut patients = Vec::with_capacity(m.patients.len());
        for e in &m.patients {
            let bytes = artifact::read(&dir.join(&e.file))?;
            if seed::sha256_hex(&bytes) != e.sha256 {
                return Err(Error::integrity(format!(
                    "{} does not match its manifest digest",
                    e.file
                )));
            }
            let (_, tensors) = file::decode::<f32>(&bytes)?;
            let t = tensors
                .into_iter()
                .next()
                .ok_or_else(|| Error::integrity(format!("{} holds no tensor", e.file)))?
                .1;
            let volume = Grid::new(m.config.dims(), m.config.shape3(), t.into_data())
                .map_err(|err| Error::integrity(err.to_string()))?;
            patients.push(Patient {
                id: e.id,
                cluster: e.cluster,
                seed: e.seed,
                volume,
            });
        }
        Ok(PhantomCohort {
            config: m.config,
            layouts: m.layouts,
            patients,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPatient {
    id: usize,
    cluster: usize,
    seed: u64,
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortManifest {
    #[serde(default)]
    provenance: BTreeMap<String, String>,
    config: PhantomConfig,
    layouts: Vec<ClusterLayout>,
    patients: Vec<ManifestPatient>,
}
