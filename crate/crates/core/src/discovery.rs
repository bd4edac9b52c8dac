//! Self-discovery of visual words.
//!
//! An autoencoder is trained to reproduce downsampled whole volumes; its
//! flattened bottleneck is the patient embedding. Each visual word anchors
//! on one reference patient, takes its nearest patients in embedding space,
//! and crops one instance per patient around a shared random coordinate.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::phantom::{Label, PhantomCohort};
use crate::seed;
use crate::tensor::network::batch_from_grids;
use crate::tensor::{file, AdamConfig, AdamState, Network, NetworkSpec, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of patients held out to check reconstruction.
    pub holdout_fraction: f64,
    /// Held-out mean squared error the trained extractor must reach.
    pub threshold: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            widths: vec![4, 8, 8],
            epochs: 100,
            batch_size: 8,
            learning_rate: 3e-3,
            holdout_fraction: 0.1,
            threshold: 0.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    /// Number of visual words C.
    pub words: usize,
    /// Instances per word K (the reference and its K-1 nearest patients).
    pub instances: usize,
    /// Canonical crop extent, one entry per grid axis.
    pub crop: Vec<usize>,
    pub scales: Vec<f64>,
    /// Per-axis jitter bound in voxels.
    pub jitter: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub extractor: ExtractorConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            words: 10,
            instances: 20,
            crop: vec![16, 16],
            scales: vec![0.8, 1.0, 1.2],
            jitter: 2,
            validation_fraction: 0.1,
            seed: 0,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.words == 0 || self.instances == 0 {
            return Err(Error::config(
                "discovery.words and discovery.instances must be positive",
            ));
        }
        if self.crop.is_empty() || self.crop.contains(&0) {
            return Err(Error::config("discovery.crop extents must be positive"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("discovery.scales must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("discovery.validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    fn max_scale(&self) -> f64 {
        self.scales.iter().cloned().fold(0.0, f64::max)
    }
}

fn to3(v: &[usize], fill: usize) -> [usize; 3] {
    if v.len() == 2 {
        [fill, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

fn scaled(extent: usize, s: f64) -> usize {
    ((extent as f64 * s).round() as usize).max(1)
}

pub struct FeatureExtractor {
    pub network: Network<f32>,
    /// Extent volumes are downsampled to before encoding.
    pub input_extent: Vec<usize>,
    pub holdout_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl FeatureExtractor {
    pub fn latent_dim(&self) -> usize {
        let spec = self.network.spec();
        let deepest: usize = spec.stage_extents().last().map(|e| e.iter().product()).unwrap_or(0);
        deepest * spec.widths.last().copied().unwrap_or(0)
    }

    fn prepare(&self, v: &Grid) -> Result<Grid> {
        v.downsample_to(to3(&self.input_extent, 1))
    }

    /// Flattened bottleneck activations, one row per volume.
    pub fn embed(&self, volumes: &[&Grid]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(16) {
            let small = chunk.iter().map(|v| self.prepare(v)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Grid> = small.iter().collect();
            let x = batch_from_grids::<f32>(&refs)?;
            let mut tape = Tape::new();
            let bound = self.network.bind(&mut tape, |_| false);
            let xv = tape.constant(x);
            let o = self.network.forward(&mut tape, &bound, xv, false, &[])?;
            let z = tape.value(*o.stages.last().expect("at least one stage"));
            let row = z.len() / chunk.len();
            out.extend(z.data().chunks(row).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

fn shuffled(n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn mse_over(net: &Network<f32>, inputs: &[Grid]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in inputs.chunks(16) {
        let refs: Vec<&Grid> = chunk.iter().collect();
        let x = batch_from_grids::<f32>(&refs)?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |_| false);
        let xv = tape.constant(x);
        let o = net.forward(&mut tape, &bound, xv, true, &[])?;
        let l = tape.mse(o.restoration.expect("autoencoder has a decoder"), xv)?;
        total += tape.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Trains the autoencoder on downsampled whole volumes with an MSE loss.
pub fn train_feature_extractor(
    cohort: &PhantomCohort,
    crop: &[usize],
    config: &ExtractorConfig,
    seed: u64,
) -> Result<FeatureExtractor> {
    let n = cohort.len();
    if n < 2 {
        return Err(Error::config("feature extractor needs at least 2 patients"));
    }
    if crop.len() != cohort.config.dims() {
        return Err(Error::config("discovery.crop rank differs from the phantom grid rank"));
    }
    let spec = NetworkSpec {
        convs_per_stage: 1,
        input_extent: crop.to_vec(),
        in_channels: 1,
        widths: config.widths.clone(),
        decoder: true,
        skips: false,
        out_channels: 1,
        heads: vec![],
    };
    let mut net = Network::<f32>::new(spec, seed::derive(seed, "extractor.init", 0))?;
    let inputs = cohort
        .patients
        .iter()
        .map(|p| p.volume.downsample_to(to3(crop, 1)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seed::derived_rng(seed, "extractor.holdout", 0);
    let order = shuffled(n, &mut rng);
    let n_hold = ((n as f64 * config.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let hold: Vec<Grid> = hold_idx.iter().map(|&i| inputs[i].clone()).collect();
    let mut adam = AdamState::<f32>::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    })?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut erng = seed::derived_rng(seed, "extractor.epoch", epoch as u64);
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut erng);
        let mut sum = 0.0;
        for chunk in idx.chunks(config.batch_size.max(1)) {
            let refs: Vec<&Grid> = chunk.iter().map(|&i| &inputs[i]).collect();
            let x = batch_from_grids::<f32>(&refs)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, |_| true);
            let xv = tape.constant(x);
            let o = net.forward(&mut tape, &bound, xv, true, &[])?;
            let l = tape.mse(o.restoration.expect("decoder"), xv)?;
            let lv = tape.value(l).item() as f64;
            if !lv.is_finite() {
                return Err(Error::numerical(format!("extractor loss diverged at epoch {epoch}")));
            }
            sum += lv * chunk.len() as f64;
            let mut grads = tape.backward(l).map_err(|e| match e {
                Error::Numerical(m) => Error::numerical(format!("extractor epoch {epoch}: {m}")),
                other => other,
            })?;
            let g = bound.gradients(&mut grads);
            adam.step(net.params_mut(), &g)?;
        }
        epoch_losses.push(sum / train_idx.len() as f64);
    }
    let holdout_loss = mse_over(&net, &hold)?;
    if !holdout_loss.is_finite() {
        return Err(Error::numerical("extractor held-out loss is not finite"));
    }
    if holdout_loss > config.threshold {
        return Err(Error::numerical(format!(
            "extractor held-out reconstruction loss {holdout_loss:.5} exceeds threshold {}",
            config.threshold
        )));
    }
    Ok(FeatureExtractor {
        network: net,
        input_extent: crop.to_vec(),
        holdout_loss,
        epoch_losses,
    })
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// The reference followed by its `k - 1` nearest patients by latent L2
/// distance, ties broken by ascending id.
pub fn nearest_in(latents: &[(usize, Vec<f32>)], reference: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > latents.len() {
        return Err(Error::usage(format!(
            "cannot take {k} neighbours from {} patients",
            latents.len()
        )));
    }
    let r = latents
        .iter()
        .find(|(id, _)| *id == reference)
        .ok_or_else(|| Error::usage(format!("unknown reference patient {reference}")))?;
    let mut others: Vec<(f64, usize)> = latents
        .iter()
        .filter(|(id, _)| *id != reference)
        .map(|(id, z)| (sq_dist(&r.1, z), *id))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = vec![reference];
    out.extend(others.into_iter().take(k - 1).map(|(_, id)| id));
    Ok(out)
}

pub fn nearest_patients(
    extractor: &FeatureExtractor,
    cohort: &PhantomCohort,
    reference: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let vols: Vec<&Grid> = cohort.patients.iter().map(|p| &p.volume).collect();
    let z = extractor.embed(&vols)?;
    let latents: Vec<(usize, Vec<f32>)> = cohort.patients.iter().map(|p| p.id).zip(z).collect();
    nearest_in(&latents, reference, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualWordInstance {
    pub patch: Grid,
    pub label: usize,
    pub patient: usize,
    pub coordinate: Vec<usize>,
    pub scale: f64,
    pub jitter: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub patient: usize,
    pub scale: f64,
    pub jitter: Vec<i64>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordRecord {
    pub label: usize,
    pub reference: usize,
    pub neighbors: Vec<usize>,
    pub coordinate: Vec<usize>,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DiscoveryConfig,
    pub extractor_digest: String,
    pub words: Vec<WordRecord>,
    /// Instance indices (`label * K + k`) of each split.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualWordDataset {
    pub instances: Vec<VisualWordInstance>,
    pub manifest: DatasetManifest,
}

impl VisualWordDataset {
    pub fn words(&self) -> usize {
        self.manifest.config.words
    }

    pub fn per_word(&self) -> usize {
        self.manifest.config.instances
    }

    pub fn crop(&self) -> &[usize] {
        &self.manifest.config.crop
    }

    pub fn train(&self) -> &[usize] {
        &self.manifest.train
    }

    pub fn validation(&self) -> &[usize] {
        &self.manifest.validation
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.words()];
        for i in &self.instances {
            h[i.label] += 1;
        }
        h
    }

    /// Every patient any instance was cropped from.
    pub fn source_patients(&self) -> std::collections::BTreeSet<usize> {
        self.instances.iter().map(|i| i.patient).collect()
    }
}

/// Picks words and neighbourhoods, then crops instances.
pub fn extract_visual_words(
    extractor: &FeatureExtractor,
    cohort: &PhantomCohort,
    config: &DiscoveryConfig,
) -> Result<VisualWordDataset> {
    config.validate()?;
    let dims = cohort.config.dims();
    if config.crop.len() != dims {
        return Err(Error::config("discovery.crop rank differs from the phantom grid rank"));
    }
    if config.instances > cohort.len() {
        return Err(Error::config(format!(
            "discovery.instances = {} exceeds the cohort size {}",
            config.instances,
            cohort.len()
        )));
    }
    let (lo, hi) = valid_interior(&cohort.config.grid, config)?;
    let vols: Vec<&Grid> = cohort.patients.iter().map(|p| &p.volume).collect();
    let z = extractor.embed(&vols)?;
    let latents: Vec<(usize, Vec<f32>)> = cohort.patients.iter().map(|p| p.id).zip(z).collect();

    let mut words = Vec::with_capacity(config.words);
    for c in 0..config.words {
        let mut rng = seed::derived_rng(config.seed, "discovery.word", c as u64);
        let reference = cohort.patients[rng.random_range(0..cohort.len())].id;
        let neighbors = nearest_in(&latents, reference, config.instances)?;
        let coordinate: Vec<usize> = (0..dims).map(|a| rng.random_range(lo[a]..=hi[a])).collect();
        let instances = neighbors
            .iter()
            .enumerate()
            .map(|(k, &patient)| {
                let scale = config.scales[rng.random_range(0..config.scales.len())];
                let j = config.jitter as i64;
                let jitter = (0..dims).map(|_| rng.random_range(-j..=j)).collect();
                InstanceRecord {
                    patient,
                    scale,
                    jitter,
                    file: format!("word{c}_inst{k}.bin"),
                    sha256: String::new(),
                }
            })
            .collect();
        words.push(WordRecord {
            label: c,
            reference,
            neighbors,
            coordinate,
            instances,
        });
    }
    let (train, validation) = stratified_split(config);
    let mut manifest = DatasetManifest {
        seed: config.seed,
        config: config.clone(),
        extractor_digest: extractor.network.digest(),
        words,
        train,
        validation,
    };
    let instances = crop_all(cohort, &manifest)?;
    for (w, word) in manifest.words.iter_mut().enumerate() {
        for (k, rec) in word.instances.iter_mut().enumerate() {
            rec.sha256 = seed::sha256_hex(&patch_bytes(&instances[w * config.instances + k].patch)?);
        }
    }
    Ok(VisualWordDataset { instances, manifest })
}

/// Per-axis inclusive range of word coordinates whose largest jittered
/// crop stays inside the grid.
pub fn valid_interior(grid: &[usize], config: &DiscoveryConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for (a, &extent) in grid.iter().enumerate() {
        let e = scaled(config.crop[a], config.max_scale());
        let l = e / 2 + config.jitter;
        let need = l + (e - e / 2) + config.jitter;
        if need > extent {
            return Err(Error::config(format!(
                "no valid coordinate on axis {a}: crop {e} with jitter {} exceeds extent {extent}",
                config.jitter
            )));
        }
        lo.push(l);
        hi.push(extent - (e - e / 2) - config.jitter);
    }
    Ok((lo, hi))
}

pub(crate) fn stratified_split(config: &DiscoveryConfig) -> (Vec<usize>, Vec<usize>) {
    let k = config.instances;
    let n_val = if k < 2 || config.validation_fraction == 0.0 {
        0
    } else {
        ((k as f64 * config.validation_fraction).round() as usize).clamp(1, k - 1)
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..config.words {
        let mut rng = seed::derived_rng(config.seed, "discovery.split", c as u64);
        let order = shuffled(k, &mut rng);
        let mut v: Vec<usize> = order[..n_val].iter().map(|&i| c * k + i).collect();
        let mut t: Vec<usize> = order[n_val..].iter().map(|&i| c * k + i).collect();
        v.sort_unstable();
        t.sort_unstable();
        val.extend(v);
        train.extend(t);
    }
    (train, val)
}

/// Crops one instance from `volume` at `coordinate` + `jitter`, with extent
/// `crop * scale`, resized to `crop`.
pub fn crop_instance(volume: &Grid, crop: &[usize], coordinate: &[usize], scale: f64, jitter: &[i64]) -> Result<Grid> {
    let dims = volume.dims();
    let mut start = [0usize; 3];
    let mut extent = [1usize; 3];
    let off = if dims == 2 { 1 } else { 0 };
    for a in 0..dims {
        let e = scaled(crop[a], scale);
        let s = coordinate[a] as i64 + jitter[a] - (e / 2) as i64;
        if s < 0 {
            return Err(Error::config(format!("crop leaves the grid on axis {a}")));
        }
        start[a + off] = s as usize;
        extent[a + off] = e;
    }
    volume.crop(start, extent)?.resize_linear(to3(crop, 1))
}

fn crop_all(cohort: &PhantomCohort, manifest: &DatasetManifest) -> Result<Vec<VisualWordInstance>> {
    let crop = &manifest.config.crop;
    let mut out = Vec::new();
    for w in &manifest.words {
        for rec in &w.instances {
            let p = cohort
                .patient(rec.patient)
                .ok_or_else(|| Error::integrity(format!("patient {} is not in the cohort", rec.patient)))?;
            out.push(VisualWordInstance {
                patch: crop_instance(&p.volume, crop, &w.coordinate, rec.scale, &rec.jitter)?,
                label: w.label,
                patient: rec.patient,
                coordinate: w.coordinate.clone(),
                scale: rec.scale,
                jitter: rec.jitter.clone(),
            });
        }
    }
    Ok(out)
}

/// Regenerates every patch from the cohort and the manifest alone.
pub fn replay(cohort: &PhantomCohort, manifest: &DatasetManifest) -> Result<VisualWordDataset> {
    let instances = crop_all(cohort, manifest)?;
    Ok(VisualWordDataset {
        instances,
        manifest: manifest.clone(),
    })
}

fn patch_bytes(g: &Grid) -> Result<Vec<u8>> {
    let t = Tensor::<f32>::new(g.spatial_shape(), g.data().to_vec())?;
    file::encode(&BTreeMap::new(), &[("patch", &t)])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    provenance: BTreeMap<String, String>,
    manifest: DatasetManifest,
}

/// Writes every patch and `manifest.json` (the manifest plus `provenance`).
pub fn persist_dataset(dataset: &VisualWordDataset, dir: &Path, provenance: &BTreeMap<String, String>) -> Result<()> {
    let k = dataset.per_word();
    for (w, word) in dataset.manifest.words.iter().enumerate() {
        for (i, rec) in word.instances.iter().enumerate() {
            artifact::write_atomic(&dir.join(&rec.file), &patch_bytes(&dataset.instances[w * k + i].patch)?)?;
        }
    }
    let file = DatasetFile {
        provenance: provenance.clone(),
        manifest: dataset.manifest.clone(),
    };
    artifact::write_json(&dir.join("manifest.json"), &file)
}

pub fn load_dataset(dir: &Path) -> Result<VisualWordDataset> {
    let manifest = artifact::read_json::<DatasetFile>(&dir.join("manifest.json"))?.manifest;
    manifest.config.validate()?;
    let dims = manifest.config.crop.len();
    let mut instances = Vec::new();
    for w in &manifest.words {
        for rec in &w.instances {
            let bytes = artifact::read(&dir.join(&rec.file))?;
            if seed::sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::integrity(format!(
                    "{} does not match its manifest digest",
                    rec.file
                )));
            }
            let (_, t) = file::decode::<f32>(&bytes)?;
            let data = t
                .into_iter()
                .next()
                .ok_or_else(|| Error::integrity(format!("{} holds no tensor", rec.file)))?
                .1
                .into_data();
            let patch = Grid::new(dims, to3(&manifest.config.crop, 1), data)
                .map_err(|e| Error::integrity(format!("{}: {e}", rec.file)))?;
            instances.push(VisualWordInstance {
                patch,
                label: w.label,
                patient: rec.patient,
                coordinate: w.coordinate.clone(),
                scale: rec.scale,
                jitter: rec.jitter.clone(),
            });
        }
    }
    Ok(VisualWordDataset { instances, manifest })
}

/// Mean over words of the majority ground-truth label's share among the
/// word's instances, judged at the word coordinate in each source
/// patient's cluster layout.
pub fn purity(dataset: &VisualWordDataset, cohort: &PhantomCohort) -> Result<f64> {
    let mut total = 0.0;
    for w in &dataset.manifest.words {
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for rec in &w.instances {
            let cluster = rec.patient % cohort.config.clusters;
            *counts
                .entry(cohort.ground_truth_at(cluster, &w.coordinate)?)
                .or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        total += best as f64 / w.instances.len() as f64;
    }
    Ok(total / dataset.manifest.words.len() as f64)
}

/// Mean pairwise patch L2 distance within words and across words.
pub fn word_distances(dataset: &VisualWordDataset) -> (f64, f64) {
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    let inst = &dataset.instances;
    for i in 0..inst.len() {
        for j in i + 1..inst.len() {
            let d = inst[i].patch.l2_distance(&inst[j].patch);
            if inst[i].label == inst[j].label {
                ws += d;
                wn += 1;
            } else {
                cs += d;
                cn += 1;
            }
        }
    }
    (ws / wn.max(1) as f64, cs / cn.max(1) as f64)
}
