//! Joint self-classification and self-restoration pre-training, and the
//! baseline pretext tasks with an optional visual-word add-on.
//!
//! All variants share one trainer. A step draws a distorted input for each
//! instance, runs the shared encoder, and sums whichever loss terms the
//! variant enables:
//!
//! | variant               | input                | terms                      |
//! |-----------------------|----------------------|----------------------------|
//! | `transvw`             | perturbation chain   | λ_cls·L_cls + λ_rec·L_rec  |
//! | `restoration_only`    | perturbation chain   | λ_rec·L_rec                |
//! | `classification_only` | perturbation chain   | λ_cls·L_cls                |
//! | `genesis`             | perturbation chain   | λ_rec·L_rec                |
//! | `inpainting`          | noise blocks         | λ_rec·L_rec                |
//! | `context_restoration` | swapped blocks       | λ_rec·L_rec                |
//! | `rotation`            | quarter-turn         | L_rot                      |
//!
//! `add_vw` adds λ_cls·L_cls on the same input to the last four.

pub mod losses;
pub mod report;

#[cfg(test)]
use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use losses::{categorical_cross_entropy, joint_loss, restoration_loss};
pub use report::{EpochRow, RunReport, Split};

use crate::discovery::VisualWordDataset;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::perturb::{self, PerturbPolicy};
use crate::seed;
use crate::tensor::network::batch_from_grids;
use crate::tensor::{AdamConfig, AdamState, HeadSpec, Network, NetworkSpec, Restoration, Tape, Tensor, Var};

pub const VW_HEAD: &str = "vw";
pub const ROTATION_HEAD: &str = "rotation";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretext {
    Transvw,
    RestorationOnly,
    ClassificationOnly,
    Rotation,
    Inpainting,
    ContextRestoration,
    Genesis,
}

impl Pretext {
    pub const ALL: [Pretext; 7] = [
        Pretext::Transvw,
        Pretext::RestorationOnly,
        Pretext::ClassificationOnly,
        Pretext::Rotation,
        Pretext::Inpainting,
        Pretext::ContextRestoration,
        Pretext::Genesis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pretext::Transvw => "transvw",
            Pretext::RestorationOnly => "restoration_only",
            Pretext::ClassificationOnly => "classification_only",
            Pretext::Rotation => "rotation",
            Pretext::Inpainting => "inpainting",
            Pretext::ContextRestoration => "context_restoration",
            Pretext::Genesis => "genesis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Pretext::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pretext variant `{s}`")))
    }

    /// Variants whose own objective already includes the visual-word term
    /// (possibly with weight zero).
    pub fn is_visual_word_variant(self) -> bool {
        matches!(
            self,
            Pretext::Transvw | Pretext::RestorationOnly | Pretext::ClassificationOnly
        )
    }

    pub fn has_decoder(self) -> bool {
        self != Pretext::Rotation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub inpaint_blocks: usize,
    pub inpaint_extent: [f64; 2],
    pub swap_pairs: usize,
    pub swap_window: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            inpaint_blocks: 3,
            inpaint_extent: [0.2, 0.4],
            swap_pairs: 4,
            swap_window: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub variant: Pretext,
    pub add_vw: bool,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub restoration: Restoration,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub head_hidden: usize,
    pub skips: bool,
    pub perturb: PerturbPolicy,
    pub baselines: BaselineConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            variant: Pretext::Transvw,
            add_vw: false,
            lambda_cls: 0.01,
            lambda_rec: 1.0,
            restoration: Restoration::L2Norm,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-4,
            seed: 0,
            widths: vec![8, 16, 32],
            convs_per_stage: 2,
            head_hidden: 64,
            skips: true,
            perturb: PerturbPolicy::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

/// Loss weights a run actually uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub cls: f64,
    pub rec: f64,
    pub rot: f64,
    /// Whether the network carries a visual-word head.
    pub vw_head: bool,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_rec", self.lambda_rec)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "pretrain.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("pretrain.learning_rate must be positive"));
        }
        if self.widths.is_empty() {
            return Err(Error::config("pretrain.widths must list at least one stage"));
        }
        if self.add_vw && self.variant.is_visual_word_variant() {
            return Err(Error::config(format!(
                "pretrain.add_vw applies to baseline variants, not `{}`",
                self.variant.name()
            )));
        }
        self.perturb.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }

    pub fn weights(&self, words: usize) -> Weights {
        let vw_head = words >= 2 && (self.variant.is_visual_word_variant() || self.add_vw);
        let cls = if !vw_head || self.variant == Pretext::RestorationOnly {
            0.0
        } else {
            self.lambda_cls
        };
        let rec = match self.variant {
            Pretext::Rotation | Pretext::ClassificationOnly => 0.0,
            _ => self.lambda_rec,
        };
        let rot = if self.variant == Pretext::Rotation { 1.0 } else { 0.0 };
        Weights { cls, rec, rot, vw_head }
    }

    pub fn digest(&self) -> String {
        seed::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Encoder-decoder with skips and, for `words >= 2`, a visual-word head.
pub fn build_transvw_network(
    input_extent: &[usize],
    words: usize,
    widths: &[usize],
    head_hidden: usize,
    convs_per_stage: usize,
    skips: bool,
    seed: u64,
) -> Result<Network<f32>> {
    let mut heads = Vec::new();
    if words >= 2 {
        heads.push(HeadSpec {
            name: VW_HEAD.into(),
            hidden: head_hidden,
            classes: words,
            flatten: false,
        });
    }
    let spec = NetworkSpec {
        convs_per_stage,
        input_extent: input_extent.to_vec(),
        in_channels: 1,
        widths: widths.to_vec(),
        decoder: true,
        skips,
        out_channels: 1,
        heads,
    };
    Network::new(spec, seed)
}

fn network_for(config: &PretrainConfig, dataset: &VisualWordDataset) -> Result<Network<f32>> {
    let convs_per_stage = config.convs_per_stage;
    let w = config.weights(dataset.words());
    let mut heads = Vec::new();
    if w.vw_head {
        heads.push(HeadSpec {
            name: VW_HEAD.into(),
            hidden: config.head_hidden,
            classes: dataset.words(),
            flatten: false,
        });
    }
    if config.variant == Pretext::Rotation {
        heads.push(HeadSpec {
            name: ROTATION_HEAD.into(),
            hidden: config.head_hidden,
            classes: 4,
            flatten: false,
        });
    }
    let spec = NetworkSpec {
        convs_per_stage,
        input_extent: dataset.crop().to_vec(),
        in_channels: 1,
        widths: config.widths.clone(),
        decoder: config.variant.has_decoder(),
        skips: config.skips && config.variant.has_decoder(),
        out_channels: 1,
        heads,
    };
    Network::new(spec, seed::derive(config.seed, "pretrain.init", 0))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut y = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::usage(format!("label {l} out of range for {classes} classes")));
        }
        y.data_mut()[b * classes + l] = 1.0;
    }
    Ok(y)
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(p: &Tensor<f32>) -> Vec<usize> {
    let c = p.shape()[1];
    p.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One network input with everything its loss terms need.
struct Sample {
    input: Grid,
    target: Grid,
    label: usize,
    rotation: usize,
}

fn distort(config: &PretrainConfig, x: &Grid, s: u64) -> Result<(Grid, usize)> {
    let b = &config.baselines;
    Ok(match config.variant {
        Pretext::Transvw | Pretext::RestorationOnly | Pretext::ClassificationOnly | Pretext::Genesis => {
            (perturb::sample_perturbation(x, s, &config.perturb)?.0, 0)
        }
        Pretext::Inpainting => (perturb::inpaint_distort(x, b.inpaint_blocks, b.inpaint_extent, s)?, 0),
        Pretext::ContextRestoration => {
            let w = b.swap_window.min(x.shape()[1]).min(x.shape()[2]);
            let w = if x.shape()[0] > 1 { w.min(x.shape()[0]) } else { w };
            let op = perturb::sample_swap(x.shape(), w, b.swap_pairs, s)?;
            (perturb::apply_op(&op, x)?, 0)
        }
        Pretext::Rotation => {
            let k = seed::rng(s).random_range(0..4);
            (x.rotate90(k)?, k)
        }
    })
}

struct BatchOut {
    loss: Option<Var>,
    cls: Option<f64>,
    rec: Option<f64>,
    rot: Option<f64>,
    vw_hits: usize,
    rot_hits: usize,
}

/// Which terms a pass computes.
struct Want {
    cls: bool,
    rec: bool,
    rot: bool,
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    net: &Network<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::tensor::network::Bound,
    samples: &[&Sample],
    words: usize,
    weights: &Weights,
    want: &Want,
    mode: Restoration,
) -> Result<BatchOut> {
    let inputs: Vec<&Grid> = samples.iter().map(|s| &s.input).collect();
    let x = tape.constant(batch_from_grids::<f32>(&inputs)?);
    let mut heads = Vec::new();
    if want.cls {
        heads.push(VW_HEAD);
    }
    if want.rot {
        heads.push(ROTATION_HEAD);
    }
    let o = net.forward(tape, bound, x, want.rec, &heads)?;
    let mut terms = Vec::new();
    let mut out = BatchOut {
        loss: None,
        cls: None,
        rec: None,
        rot: None,
        vw_hits: 0,
        rot_hits: 0,
    };
    if want.cls {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let p = o.head_probs[VW_HEAD];
        out.vw_hits = hits(tape.value(p), &labels);
        let l = tape.cross_entropy(p, one_hot(&labels, words)?)?;
        out.cls = Some(tape.value(l).item() as f64);
        terms.push((l, weights.cls));
    }
    if want.rec {
        let targets: Vec<&Grid> = samples.iter().map(|s| &s.target).collect();
        let t = tape.constant(batch_from_grids::<f32>(&targets)?);
        let restored = o.restoration.ok_or_else(|| Error::config("network has no decoder"))?;
        let l = tape.restoration_loss(restored, t, mode)?;
        out.rec = Some(tape.value(l).item() as f64);
        terms.push((l, weights.rec));
    }
    if want.rot {
        let labels: Vec<usize> = samples.iter().map(|s| s.rotation).collect();
        let p = o.head_probs[ROTATION_HEAD];
        out.rot_hits = hits(tape.value(p), &labels);
        let l = tape.cross_entropy(p, one_hot(&labels, 4)?)?;
        out.rot = Some(tape.value(l).item() as f64);
        terms.push((l, weights.rot));
    }
    let active: Vec<(Var, f64)> = terms.into_iter().filter(|t| t.1 != 0.0).collect();
    if !active.is_empty() {
        out.loss = Some(tape.weighted_sum(&active)?);
    }
    Ok(out)
}

fn hits(p: &Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(p).iter().zip(labels).filter(|(a, b)| a == b).count()
}

#[derive(Default)]
struct Sums {
    n: usize,
    cls: Option<f64>,
    rec: Option<f64>,
    rot: Option<f64>,
    vw_hits: usize,
    rot_hits: usize,
}

fn accumulate(acc: &mut Option<f64>, v: Option<f64>, count: usize) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v * count as f64);
    }
}

impl Sums {
    fn add(&mut self, b: &BatchOut, count: usize) {
        self.n += count;
        accumulate(&mut self.cls, b.cls, count);
        accumulate(&mut self.rec, b.rec, count);
        accumulate(&mut self.rot, b.rot, count);
        self.vw_hits += b.vw_hits;
        self.rot_hits += b.rot_hits;
    }

    fn row(&self, epoch: usize, split: Split, weights: &Weights, secs: f64) -> Result<EpochRow> {
        let n = self.n.max(1) as f64;
        let l_cls = self.cls.map(|v| v / n);
        let l_rec = self.rec.map(|v| v / n);
        let l_rot = self.rot.map(|v| v / n);
        let mut l = joint_loss(l_cls.unwrap_or(0.0), l_rec.unwrap_or(0.0), weights.cls, weights.rec)?;
        if weights.rot != 0.0 {
            l += weights.rot * l_rot.unwrap_or(0.0);
        }
        Ok(EpochRow {
            epoch,
            split,
            l_cls,
            l_rec,
            l_rot,
            l,
            acc_vw: l_cls.map(|_| self.vw_hits as f64 / n),
            acc_rot: l_rot.map(|_| self.rot_hits as f64 / n),
            wall_clock_secs: secs,
        })
    }
}

fn trainable(name: &str, want: &Want) -> bool {
    if let Some(rest) = name.strip_prefix("head.") {
        if rest.starts_with(&format!("{VW_HEAD}.")) {
            want.cls
        } else {
            want.rot
        }
    } else if name.starts_with("dec") || name.starts_with("out.") {
        want.rec
    } else {
        true
    }
}

fn make_sample(config: &PretrainConfig, dataset: &VisualWordDataset, index: usize, s: u64) -> Result<Sample> {
    let inst = &dataset.instances[index];
    let (input, rotation) = distort(config, &inst.patch, s)?;
    Ok(Sample {
        input,
        target: inst.patch.clone(),
        label: inst.label,
        rotation,
    })
}

fn validation_samples(config: &PretrainConfig, dataset: &VisualWordDataset) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &i in dataset.validation() {
        let inst = &dataset.instances[i];
        if config.variant == Pretext::Rotation {
            for k in 0..4 {
                out.push(Sample {
                    input: inst.patch.rotate90(k)?,
                    target: inst.patch.clone(),
                    label: inst.label,
                    rotation: k,
                });
            }
        } else {
            out.push(make_sample(
                config,
                dataset,
                i,
                seed::derive(config.seed, "pretrain.validation", i as u64),
            )?);
        }
    }
    Ok(out)
}

fn train_step(
    net: &mut Network<f32>,
    adam: &mut AdamState<f32>,
    samples: &[&Sample],
    words: usize,
    weights: &Weights,
    want: &Want,
    mode: Restoration,
) -> Result<BatchOut> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, |n| trainable(n, want));
    let out = run_batch(net, &mut tape, &bound, samples, words, weights, want, mode)?;
    let loss = out.loss.ok_or_else(|| Error::config("every loss weight is zero"))?;
    let mut grads = tape.backward(loss)?;
    let g = bound.gradients(&mut grads);
    adam.step(net.params_mut(), &g)?;
    Ok(out)
}

fn evaluate(
    net: &Network<f32>,
    samples: &[Sample],
    batch_size: usize,
    words: usize,
    weights: &Weights,
    want: &Want,
    mode: Restoration,
) -> Result<Sums> {
    let mut sums = Sums::default();
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |_| false);
        let out = run_batch(net, &mut tape, &bound, chunk, words, weights, want, mode)?;
        sums.add(&out, chunk.len());
    }
    Ok(sums)
}

/// Validation metrics of `network` under `config`, with every available
/// head and the decoder evaluated.
pub fn validate_network(
    network: &Network<f32>,
    dataset: &VisualWordDataset,
    config: &PretrainConfig,
) -> Result<EpochRow> {
    let weights = config.weights(dataset.words());
    let want = Want {
        cls: weights.vw_head,
        rec: config.variant.has_decoder(),
        rot: config.variant == Pretext::Rotation,
    };
    let samples = validation_samples(config, dataset)?;
    evaluate(
        network,
        &samples,
        config.batch_size,
        dataset.words(),
        &weights,
        &want,
        config.restoration,
    )?
    .row(0, Split::Validation, &weights, 0.0)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub network: Network<f32>,
    pub report: RunReport,
}

/// Trains one of the visual-word variants.
pub fn train_transvw(dataset: &VisualWordDataset, config: &PretrainConfig) -> Result<PretrainOutcome> {
    if !config.variant.is_visual_word_variant() {
        return Err(Error::config(format!(
            "`{}` is a baseline pretext; use train_pretext",
            config.variant.name()
        )));
    }
    train_pretext(dataset, config)
}

/// Trains any pretext variant on the visual-word dataset. Non-finite
/// values stop training early; the report then records why in `aborted`.
pub fn train_pretext(dataset: &VisualWordDataset, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if dataset.train().is_empty() || dataset.validation().is_empty() {
        return Err(Error::config("pretraining needs non-empty train and validation splits"));
    }
    let words = dataset.words();
    let weights = config.weights(words);
    let has_decoder = config.variant.has_decoder();
    let want = Want {
        cls: weights.vw_head && weights.cls != 0.0,
        rec: has_decoder && weights.rec != 0.0,
        rot: weights.rot != 0.0,
    };
    if !(want.cls || want.rec || want.rot) {
        return Err(Error::config(format!(
            "every loss weight of `{}` is zero",
            config.variant.name()
        )));
    }
    let want_val = Want {
        cls: weights.vw_head,
        rec: has_decoder,
        rot: config.variant == Pretext::Rotation,
    };

    let mut net = network_for(config, dataset)?;
    let mut adam = AdamState::new(config.adam())?;
    let val = validation_samples(config, dataset)?;
    let start = Instant::now();
    let mut report = RunReport {
        variant: config.variant.name().to_string(),
        add_vw: config.add_vw,
        lambda_cls: config.lambda_cls,
        lambda_rec: config.lambda_rec,
        seed: config.seed,
        config_digest: config.digest(),
        rows: Vec::new(),
        best_epoch: 0,
        last_epoch: 0,
        checkpoint_digest: String::new(),
        aborted: None,
    };
    let validate = |net: &Network<f32>, epoch: usize| -> Result<EpochRow> {
        evaluate(
            net,
            &val,
            config.batch_size,
            words,
            &weights,
            &want_val,
            config.restoration,
        )?
        .row(epoch, Split::Validation, &weights, start.elapsed().as_secs_f64())
    };

    let first = validate(&net, 0)?;
    let mut best_loss = first.l;
    let mut best = net.clone();
    report.rows.push(first);
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let mut order = dataset.train().to_vec();
        order.shuffle(&mut seed::derived_rng(config.seed, "pretrain.epoch", epoch as u64));
        let mut sums = Sums::default();
        let mut failure = None;
        for chunk in order.chunks(config.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = seed::derive(config.seed, "pretrain.sample", ((epoch as u64) << 32) | i as u64);
                    make_sample(config, dataset, i, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            match train_step(&mut net, &mut adam, &refs, words, &weights, &want, config.restoration) {
                Ok(out) => sums.add(&out, chunk.len()),
                Err(Error::Numerical(m)) => {
                    failure = Some(m);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let row = match failure {
            None => validate(&net, epoch),
            Some(m) => Err(Error::numerical(m)),
        };
        let row = match row {
            Ok(r) => r,
            Err(Error::Numerical(m)) => {
                report.aborted = Some(format!("epoch {epoch}: {m}"));
                break;
            }
            Err(e) => return Err(e),
        };
        report
            .rows
            .push(sums.row(epoch, Split::Train, &weights, start.elapsed().as_secs_f64())?);
        let l = row.l;
        report.rows.push(row);
        report.last_epoch = epoch;
        if l < best_loss - config.min_delta {
            best_loss = l;
            best = net.clone();
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    report.checkpoint_digest = best.digest();
    Ok(PretrainOutcome { network: best, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::{stratified_split, DatasetManifest, DiscoveryConfig, VisualWordInstance};
    use rand::Rng;

    /// Words are distinct smooth ramps plus per-instance noise.
    fn synthetic(words: usize, per_word: usize, seed: u64) -> VisualWordDataset {
        let config = DiscoveryConfig {
            words,
            instances: per_word,
            crop: vec![8, 8],
            validation_fraction: 0.25,
            seed,
            ..DiscoveryConfig::default()
        };
        let mut rng = seed::rng(seed);
        let mut instances = Vec::new();
        for c in 0..words {
            let angle = c as f64 * std::f64::consts::PI / words as f64;
            for k in 0..per_word {
                let mut g = Grid::zeros(2, [1, 8, 8]).unwrap();
                for y in 0..8 {
                    for x in 0..8 {
                        let v = 0.5
                            + 0.3 * ((x as f64 * angle.cos() + y as f64 * angle.sin()) / 3.0).sin()
                            + rng.random_range(-0.05..0.05);
                        g.set(0, y, x, v as f32);
                    }
                }
                instances.push(VisualWordInstance {
                    patch: g,
                    label: c,
                    patient: k,
                    coordinate: vec![4, 4],
                    scale: 1.0,
                    jitter: vec![0, 0],
                });
            }
        }
        let (train, validation) = stratified_split(&config);
        VisualWordDataset {
            instances,
            manifest: DatasetManifest {
                seed,
                config,
                extractor_digest: String::new(),
                words: Vec::new(),
                train,
                validation,
            },
        }
    }

    fn quick(variant: Pretext) -> PretrainConfig {
        PretrainConfig {
            variant,
            widths: vec![4, 8],
            convs_per_stage: 1,
            head_hidden: 8,
            batch_size: 8,
            max_epochs: 3,
            seed: 5,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn reruns_are_identical() {
        let ds = synthetic(3, 8, 1);
        let a = train_pretext(&ds, &quick(Pretext::Transvw)).unwrap();
        let b = train_pretext(&ds, &quick(Pretext::Transvw)).unwrap();
        assert_eq!(a.report.without_timing(), b.report.without_timing());
        assert_eq!(a.network.digest(), b.network.digest());
    }

    #[test]
    fn reported_loss_decomposes() {
        let ds = synthetic(3, 8, 2);
        let cfg = PretrainConfig {
            lambda_cls: 0.3,
            lambda_rec: 0.7,
            ..quick(Pretext::Transvw)
        };
        let out = train_pretext(&ds, &cfg).unwrap();
        assert_eq!(out.report.rows.len(), 1 + 2 * 3);
        for r in &out.report.rows {
            let expect = 0.3 * r.l_cls.unwrap() + 0.7 * r.l_rec.unwrap();
            assert!((r.l - expect).abs() < 1e-9, "{r:?}");
        }
        let epochs: Vec<usize> = out.report.validation_rows().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_weight_variants_match_their_standalone_trainers() {
        let ds = synthetic(3, 8, 3);
        let restore = train_pretext(&ds, &quick(Pretext::RestorationOnly)).unwrap();
        let zero_cls = train_pretext(
            &ds,
            &PretrainConfig {
                lambda_cls: 0.0,
                ..quick(Pretext::Transvw)
            },
        )
        .unwrap();
        assert_eq!(restore.network.params(), zero_cls.network.params());

        let classify = train_pretext(&ds, &quick(Pretext::ClassificationOnly)).unwrap();
        let zero_rec = train_pretext(
            &ds,
            &PretrainConfig {
                lambda_rec: 0.0,
                ..quick(Pretext::Transvw)
            },
        )
        .unwrap();
        assert_eq!(classify.network.params(), zero_rec.network.params());

        let genesis = train_pretext(&ds, &quick(Pretext::Genesis)).unwrap();
        for (name, t) in genesis.network.params() {
            assert_eq!(t, &zero_cls.network.params()[name], "{name}");
        }
        assert!(genesis.network.spec().heads.is_empty());
    }

    fn encoder_gradients(
        net: &Network<f32>,
        samples: &[Sample],
        weights: &Weights,
        want: &Want,
    ) -> BTreeMap<String, Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |n| trainable(n, want));
        let refs: Vec<&Sample> = samples.iter().collect();
        let out = run_batch(net, &mut tape, &bound, &refs, 3, weights, want, Restoration::L2Norm).unwrap();
        let mut g = tape.backward(out.loss.unwrap()).unwrap();
        bound
            .gradients(&mut g)
            .into_iter()
            .filter(|(n, _)| Network::<f32>::is_encoder_param(n))
            .collect()
    }

    #[test]
    fn both_heads_reach_the_encoder_and_add_up() {
        let ds = synthetic(3, 8, 4);
        let cfg = quick(Pretext::Transvw);
        let net = network_for(&cfg, &ds).unwrap();
        let samples: Vec<Sample> = (0..6)
            .map(|i| make_sample(&cfg, &ds, i * 4, i as u64).unwrap())
            .collect();
        let w = Weights {
            cls: 0.01,
            rec: 1.0,
            rot: 0.0,
            vw_head: true,
        };
        let only = |cls: bool, rec: bool| encoder_gradients(&net, &samples, &w, &Want { cls, rec, rot: false });
        let (gc, gr, gj) = (only(true, false), only(false, true), only(true, true));
        for (name, j) in &gj {
            let (c, r) = (&gc[name], &gr[name]);
            assert!(
                c.data().iter().any(|v| *v != 0.0),
                "no classification gradient at {name}"
            );
            assert!(r.data().iter().any(|v| *v != 0.0), "no restoration gradient at {name}");
            for i in 0..j.len() {
                let sum = c.data()[i] + r.data()[i];
                assert!((j.data()[i] - sum).abs() <= 1e-5 * (1.0 + sum.abs()), "{name}[{i}]");
            }
        }
    }

    #[test]
    fn rotation_of_constant_patches_is_at_chance() {
        let mut ds = synthetic(2, 4, 5);
        for inst in &mut ds.instances {
            inst.patch = Grid::filled(2, [1, 8, 8], 0.4).unwrap();
        }
        let cfg = quick(Pretext::Rotation);
        let net = network_for(&cfg, &ds).unwrap();
        let row = validate_network(&net, &ds, &cfg).unwrap();
        assert_eq!(row.acc_rot, Some(0.25));
        assert_eq!(row.l_rec, None);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let ds = synthetic(3, 8, 6);
        let add = PretrainConfig {
            add_vw: true,
            ..quick(Pretext::Transvw)
        };
        assert!(matches!(train_pretext(&ds, &add), Err(Error::Config(_))));
        let none = PretrainConfig {
            lambda_cls: 0.0,
            ..quick(Pretext::ClassificationOnly)
        };
        assert!(matches!(train_pretext(&ds, &none), Err(Error::Config(_))));
        let negative = PretrainConfig {
            lambda_rec: -1.0,
            ..quick(Pretext::Genesis)
        };
        assert!(matches!(train_pretext(&ds, &negative), Err(Error::Config(_))));
        assert!(matches!(
            train_transvw(&ds, &quick(Pretext::Rotation)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn add_on_builds_a_word_head_for_baselines() {
        let ds = synthetic(3, 8, 7);
        for variant in [
            Pretext::Rotation,
            Pretext::Inpainting,
            Pretext::ContextRestoration,
            Pretext::Genesis,
        ] {
            let cfg = PretrainConfig {
                add_vw: true,
                max_epochs: 1,
                ..quick(variant)
            };
            let out = train_pretext(&ds, &cfg).unwrap();
            assert!(out.network.spec().head(VW_HEAD).is_some(), "{variant:?}");
            let last = out.report.validation_rows().last().unwrap();
            assert!(last.l_cls.is_some());
            let rot = last.l_rot.unwrap_or(0.0);
            let expect = 0.01 * last.l_cls.unwrap() + cfg.weights(3).rec * last.l_rec.unwrap_or(0.0) + rot;
            assert!((last.l - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_stops_training_with_a_reason() {
        let ds = synthetic(3, 8, 8);
        let cfg = PretrainConfig {
            learning_rate: 1e30,
            max_epochs: 5,
            ..quick(Pretext::Transvw)
        };
        let out = train_pretext(&ds, &cfg).unwrap();
        assert!(out.report.aborted.is_some(), "{:?}", out.report.rows);
        assert_eq!(out.report.checkpoint_digest, out.network.digest());
    }
}
