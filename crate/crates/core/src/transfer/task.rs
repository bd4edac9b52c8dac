//! Labeled target tasks cut from phantom patients that never took part in
//! pre-training.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::phantom::{generate_patients, render_patient, Label, PhantomCohort, PhantomConfig, ShapeKind};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Patch contains shape `s` (1) or not (0).
    Classification,
    /// Per-voxel mask of shape `s`'s region.
    Segmentation,
    /// Patch centered on a site whose shape differs from the cluster
    /// layout (1) or on an unaltered site (0).
    Anomaly,
}

impl TaskKind {
    /// Classification-like tasks share the two-class head.
    pub fn head_task(self) -> TaskKind {
        match self {
            TaskKind::Segmentation => TaskKind::Segmentation,
            _ => TaskKind::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub shape: ShapeKind,
    /// Id of the first target patient; ids below it are left to pre-training.
    pub first_patient: usize,
    pub patients: usize,
    pub crop: Vec<usize>,
    /// Bound on the random offset of a positive crop from its site center.
    pub jitter: usize,
    pub crops_per_site: usize,
    /// Share of negatives cropped at random centers; the rest are cropped
    /// around sites of other shapes.
    pub random_negatives: f64,
    /// Altered sites per patient in anomaly tasks.
    pub anomalies: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Anomaly,
            shape: ShapeKind::Ring,
            first_patient: 100_000,
            patients: 60,
            crop: vec![16, 16],
            jitter: 0,
            crops_per_site: 1,
            random_negatives: 0.0,
            anomalies: 3,
            train_fraction: 0.5,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, phantom: &PhantomConfig) -> Result<()> {
        if self.crop.len() != phantom.dims() {
            return Err(Error::config(
                "transfer.task.crop rank differs from the phantom grid rank",
            ));
        }
        if self.crop.iter().zip(&phantom.grid).any(|(c, g)| *c == 0 || c > g) {
            return Err(Error::config(format!(
                "transfer.task.crop {:?} does not fit the grid {:?}",
                self.crop, phantom.grid
            )));
        }
        if !phantom.vocabulary.contains(&self.shape) {
            return Err(Error::config(format!(
                "transfer.task.shape `{}` is not in the phantom vocabulary",
                self.shape
            )));
        }
        if self.crops_per_site == 0 {
            return Err(Error::config("transfer.task.crops_per_site must be positive"));
        }
        if !(0.0..=1.0).contains(&self.random_negatives) {
            return Err(Error::config("transfer.task.random_negatives must lie in [0, 1]"));
        }
        if self.kind == TaskKind::Anomaly && (self.anomalies == 0 || self.anomalies >= phantom.sites) {
            return Err(Error::config(
                "transfer.task.anomalies must be positive and below phantom.sites",
            ));
        }
        if self.kind == TaskKind::Anomaly && phantom.vocabulary.len() < 2 {
            return Err(Error::config(
                "anomaly tasks need at least two shapes in the vocabulary",
            ));
        }
        let (t, v) = (self.train_fraction, self.validation_fraction);
        if !(t > 0.0 && v > 0.0 && t + v < 1.0) {
            return Err(Error::config(
                "transfer.task train and validation fractions must be positive and leave room for a test split",
            ));
        }
        let n_train = (t * self.patients as f64).round() as usize;
        let n_val = (v * self.patients as f64).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= self.patients {
            return Err(Error::config(format!(
                "transfer.task.patients = {} is too few for three patient splits",
                self.patients
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub patch: Grid,
    pub label: u8,
    /// Present for segmentation tasks.
    pub mask: Option<Grid>,
    pub patient: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTask {
    pub kind: TaskKind,
    pub crop: Vec<usize>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Share of the full training split kept, in `(0, 1]`.
    pub label_fraction: f64,
}

fn extent3(crop: &[usize]) -> [usize; 3] {
    match crop {
        [h, w] => [1, *h, *w],
        [d, h, w] => [*d, *h, *w],
        _ => [0; 3],
    }
}

fn crop_start(center: [usize; 3], extent: [usize; 3], grid: [usize; 3]) -> [usize; 3] {
    let mut start = [0; 3];
    for a in 0..3 {
        start[a] = center[a].saturating_sub(extent[a] / 2).min(grid[a] - extent[a]);
    }
    start
}

fn crop_at(volume: &Grid, center: [usize; 3], extent: [usize; 3]) -> Result<Grid> {
    volume.crop(crop_start(center, extent, volume.shape()), extent)
}

fn mask_at(
    cohort: &PhantomCohort,
    cluster: usize,
    shape: ShapeKind,
    center: [usize; 3],
    extent: [usize; 3],
) -> Result<Grid> {
    let grid = cohort.config.shape3();
    let mut start = [0; 3];
    for a in 0..3 {
        start[a] = center[a].saturating_sub(extent[a] / 2).min(grid[a] - extent[a]);
    }
    let layout = &cohort.layouts[cluster];
    let mut m = Grid::zeros(cohort.config.dims(), extent)?;
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            for x in 0..extent[2] {
                let c = [start[0] + z, start[1] + y, start[2] + x];
                if layout.label_at(cohort.config.site_radius, c) == Label::Shape(shape) {
                    m.set(z, y, x, 1.0);
                }
            }
        }
    }
    Ok(m)
}

fn jittered(rng: &mut seed::Rng, c: [usize; 3], j: usize, grid: [usize; 3]) -> [usize; 3] {
    let mut out = c;
    for a in 0..3 {
        if grid[a] > 1 {
            let off = rng.random_range(-(j as i64)..=j as i64);
            out[a] = (c[a] as i64 + off).clamp(0, grid[a] as i64 - 1) as usize;
        }
    }
    out
}

fn anomaly_examples(
    phantom: &PhantomConfig,
    cohort: &PhantomCohort,
    id: usize,
    config: &TaskConfig,
) -> Result<Vec<Example>> {
    let mut rng = seed::derived_rng(config.seed, "transfer.anomaly", id as u64);
    let extent = extent3(&config.crop);
    let grid = phantom.shape3();
    let cluster = id % phantom.clusters;
    let mut layouts = cohort.layouts.clone();
    let n_sites = layouts[cluster].sites.len();
    let mut order: Vec<usize> = (0..n_sites).collect();
    order.shuffle(&mut rng);
    let (altered, normal) = order.split_at(config.anomalies);
    for &i in altered {
        let site = &mut layouts[cluster].sites[i];
        let others: Vec<ShapeKind> = phantom
            .vocabulary
            .iter()
            .copied()
            .filter(|k| *k != site.shape)
            .collect();
        site.shape = others[rng.random_range(0..others.len())];
    }
    let volume = render_patient(phantom, &layouts, id)?.volume;
    let sites = &layouts[cluster].sites;
    let r = phantom.site_radius;
    let overlaps = |c: [usize; 3]| {
        let start = crop_start(c, extent, grid);
        altered.iter().any(|&i| {
            (0..3).all(|a| {
                let s = sites[i].center[a];
                s + r >= start[a] && s.saturating_sub(r) < start[a] + extent[a]
            })
        })
    };
    let clean: Vec<usize> = normal.iter().copied().filter(|&i| !overlaps(sites[i].center)).collect();
    if clean.is_empty() {
        return Err(Error::config(
            "no unaltered site lies clear of the altered ones; lower transfer.task.anomalies",
        ));
    }
    let mut centers = Vec::new();
    for &i in altered {
        for _ in 0..config.crops_per_site {
            centers.push((jittered(&mut rng, sites[i].center, config.jitter, grid), 1));
        }
    }
    let wanted = centers.len();
    while centers.len() < 2 * wanted {
        let i = clean[rng.random_range(0..clean.len())];
        centers.push((jittered(&mut rng, sites[i].center, config.jitter, grid), 0));
    }
    centers
        .into_iter()
        .map(|(c, label)| {
            Ok(Example {
                patch: crop_at(&volume, c, extent)?,
                label,
                mask: None,
                patient: id,
            })
        })
        .collect()
}

/// Builds the task from target patients `first_patient..first_patient + patients`,
/// split by patient into train, validation, and test.
pub fn build_task(phantom: &PhantomConfig, config: &TaskConfig) -> Result<TargetTask> {
    config.validate(phantom)?;
    let cohort = generate_patients(phantom, config.first_patient, config.patients)?;
    let extent = extent3(&config.crop);
    let grid = phantom.shape3();
    let mut examples: Vec<Vec<Example>> = Vec::new();
    if config.kind == TaskKind::Anomaly {
        for p in &cohort.patients {
            examples.push(anomaly_examples(phantom, &cohort, p.id, config)?);
        }
    }
    for p in cohort.patients.iter().filter(|_| config.kind != TaskKind::Anomaly) {
        let mut rng = seed::derived_rng(config.seed, "transfer.task", p.id as u64);
        let layout = &cohort.layouts[p.cluster];
        let targets: Vec<[usize; 3]> = layout
            .sites
            .iter()
            .filter(|s| s.shape == config.shape)
            .map(|s| s.center)
            .collect();
        let others: Vec<[usize; 3]> = layout
            .sites
            .iter()
            .filter(|s| s.shape != config.shape)
            .map(|s| s.center)
            .collect();
        let mut centers: Vec<([usize; 3], u8)> = Vec::new();
        for &t in &targets {
            for _ in 0..config.crops_per_site {
                centers.push((jittered(&mut rng, t, config.jitter, grid), 1));
            }
        }
        let wanted = centers.len().max(config.crops_per_site);
        let contains_target = |c: [usize; 3]| {
            targets
                .iter()
                .any(|t| (0..3).all(|a| t[a].abs_diff(c[a]) * 2 < extent[a].max(2)))
        };
        let mut negatives = 0;
        let mut attempts = 0;
        while negatives < wanted {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::config(
                    "could not place negative target crops; the grid is too crowded",
                ));
            }
            let c = if !others.is_empty() && !rng.random_bool(config.random_negatives) {
                let o = others[rng.random_range(0..others.len())];
                jittered(&mut rng, o, config.jitter, grid)
            } else {
                let mut c = [0; 3];
                for a in 0..3 {
                    c[a] = rng.random_range(0..grid[a]);
                }
                c
            };
            if !contains_target(c) {
                centers.push((c, 0));
                negatives += 1;
            }
        }
        let mut list = Vec::new();
        for (c, label) in centers {
            let mask = match config.kind {
                TaskKind::Segmentation => Some(mask_at(&cohort, p.cluster, config.shape, c, extent)?),
                TaskKind::Classification | TaskKind::Anomaly => None,
            };
            list.push(Example {
                patch: crop_at(&p.volume, c, extent)?,
                label,
                mask,
                patient: p.id,
            });
        }
        examples.push(list);
    }
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut seed::derived_rng(config.seed, "transfer.split", 0));
    let n_train = (config.train_fraction * config.patients as f64).round() as usize;
    let n_val = (config.validation_fraction * config.patients as f64).round() as usize;
    let take = |idx: &[usize]| -> Vec<Example> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted.iter().flat_map(|&i| examples[i].clone()).collect()
    };
    Ok(TargetTask {
        kind: config.kind,
        crop: config.crop.clone(),
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
        label_fraction: 1.0,
    })
}

impl TargetTask {
    pub fn patients(&self) -> BTreeSet<usize> {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(|e| e.patient)
            .collect()
    }

    /// Indices of the training examples kept at `fraction`. Each label keeps
    /// `ceil(fraction * n_label)` examples from a fixed per-label shuffle, so
    /// smaller fractions are subsets of larger ones.
    pub fn subset_indices(&self, fraction: f64, seed: u64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::usage(format!("label fraction {fraction} is outside (0, 1]")));
        }
        let mut keep = Vec::new();
        for label in 0..=1u8 {
            let mut idx: Vec<usize> = (0..self.train.len())
                .filter(|&i| self.train[i].label == label)
                .collect();
            idx.shuffle(&mut seed::derived_rng(seed, "transfer.fraction", label as u64));
            let n = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
            keep.extend_from_slice(&idx[..n]);
        }
        keep.sort_unstable();
        Ok(keep)
    }

    pub fn with_fraction(&self, fraction: f64, seed: u64) -> Result<TargetTask> {
        let keep = self.subset_indices(fraction, seed)?;
        Ok(TargetTask {
            train: keep.iter().map(|&i| self.train[i].clone()).collect(),
            label_fraction: fraction * self.label_fraction,
            ..self.clone()
        })
    }
}
