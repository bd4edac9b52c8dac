//! Transfer evaluation: fine-tuning, linear probes, annotation sweeps, and
//! the number-of-words ablation.

pub mod metrics;
pub mod task;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, dice_iou, median, ttest_independent, ttest_paired, EvalResult, TTest};
pub use task::{build_task, Example, TargetTask, TaskConfig, TaskKind};

use crate::artifact;
use crate::discovery::{extract_visual_words, train_feature_extractor, DiscoveryConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::phantom::PhantomCohort;
use crate::pretrain::{one_hot, train_transvw, PretrainConfig};
use crate::seed;
use crate::tensor::network::batch_from_grids;
use crate::tensor::{AdamConfig, AdamState, HeadSpec, Network, NetworkSpec, Tape, Tensor};

pub const TARGET_HEAD: &str = "target";

/// Starting point of a target-task model.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Scratch,
    Pretrained(&'a Network<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub head_hidden: usize,
    /// Target head reads the flattened deepest feature map.
    pub head_flatten: bool,
    /// Validation metric a learning curve has to reach to count as converged.
    pub target_metric: f64,
    /// Architecture of randomly initialized models.
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub skips: bool,
    pub probe_learning_rate: f64,
    pub probe_epochs: usize,
    /// Significance level of the equivalence test in annotation sweeps.
    pub alpha: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 25,
            head_hidden: 64,
            head_flatten: true,
            target_metric: 0.9,
            widths: vec![8, 16, 32],
            convs_per_stage: 2,
            skips: true,
            probe_learning_rate: 1e-2,
            probe_epochs: 200,
            alpha: 0.05,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("transfer.learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config(
                "transfer.batch_size and transfer.max_epochs must be positive",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("transfer.alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// One point of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Absent on training rows.
    pub metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub metric: String,
    /// Test metric of the best-validation epoch.
    pub test_metric: f64,
    pub best_epoch: usize,
    /// First epoch whose validation metric reached the target.
    pub epochs_to_target: Option<usize>,
    pub curve: Vec<CurveRow>,
    pub network: Network<f32>,
}

impl FinetuneOutcome {
    /// Epochs to target, counting a run that never got there as one past
    /// the budget.
    pub fn epochs_to_target_or(&self, budget: usize) -> usize {
        self.epochs_to_target.unwrap_or(budget + 1)
    }
}

fn metric_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification | TaskKind::Anomaly => "auc",
        TaskKind::Segmentation => "iou",
    }
}

fn scratch_spec(task: &TargetTask, config: &FinetuneConfig, heads: Vec<HeadSpec>, decoder: bool) -> NetworkSpec {
    NetworkSpec {
        input_extent: task.crop.clone(),
        in_channels: 1,
        widths: config.widths.clone(),
        convs_per_stage: config.convs_per_stage,
        decoder,
        skips: decoder && config.skips,
        out_channels: 1,
        heads,
    }
}

/// The target model: encoder (plus decoder for segmentation) from `init`
/// with a fresh task head or output layer.
pub fn prepare_network(init: Init, task: &TargetTask, config: &FinetuneConfig, seed: u64) -> Result<Network<f32>> {
    let head = HeadSpec {
        name: TARGET_HEAD.into(),
        hidden: config.head_hidden,
        classes: 2,
        flatten: config.head_flatten,
    };
    let fresh = seed::derive(seed, "finetune.head", 0);
    match (init, task.kind.head_task()) {
        (Init::Scratch, TaskKind::Classification | TaskKind::Anomaly) => Network::new(
            scratch_spec(task, config, vec![head], false),
            seed::derive(seed, "finetune.init", 0),
        ),
        (Init::Scratch, TaskKind::Segmentation) => Network::new(
            scratch_spec(task, config, Vec::new(), true),
            seed::derive(seed, "finetune.init", 0),
        ),
        (Init::Pretrained(net), kind) => {
            net.check_input(&task.crop)?;
            let base = net.without_heads()?;
            match kind.head_task() {
                TaskKind::Classification | TaskKind::Anomaly => base.without_decoder()?.with_fresh_head(head, fresh),
                TaskKind::Segmentation => {
                    if !net.spec().decoder {
                        return Err(Error::config(
                            "segmentation fine-tuning needs a checkpoint with a decoder",
                        ));
                    }
                    base.with_fresh_output(1, fresh)
                }
            }
        }
    }
}

fn batch_loss(
    net: &Network<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::tensor::network::Bound,
    kind: TaskKind,
    examples: &[&Example],
) -> Result<(crate::tensor::Var, Tensor<f32>)> {
    let patches: Vec<&Grid> = examples.iter().map(|e| &e.patch).collect();
    let x = tape.constant(batch_from_grids::<f32>(&patches)?);
    match kind.head_task() {
        TaskKind::Classification | TaskKind::Anomaly => {
            let o = net.forward(tape, bound, x, false, &[TARGET_HEAD])?;
            let p = o.head_probs[TARGET_HEAD];
            let labels: Vec<usize> = examples.iter().map(|e| e.label as usize).collect();
            let l = tape.cross_entropy(p, one_hot(&labels, 2)?)?;
            Ok((l, tape.value(p).clone()))
        }
        TaskKind::Segmentation => {
            let o = net.forward(tape, bound, x, true, &[])?;
            let p = o
                .restoration
                .ok_or_else(|| Error::config("segmentation model has no decoder"))?;
            let masks = examples
                .iter()
                .map(|e| {
                    e.mask
                        .as_ref()
                        .ok_or_else(|| Error::usage("segmentation example without a mask"))
                })
                .collect::<Result<Vec<_>>>()?;
            let y = batch_from_grids::<f32>(&masks)?;
            let l = tape.binary_cross_entropy(p, y)?;
            Ok((l, tape.value(p).clone()))
        }
    }
}

/// Mean loss and task metric of `net` on `examples`.
pub fn evaluate(net: &Network<f32>, kind: TaskKind, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty split"));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let mut loss = 0.0;
    let mut outputs: Vec<f32> = Vec::new();
    for chunk in refs.chunks(batch_size) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |_| false);
        let (l, out) = batch_loss(net, &mut tape, &bound, kind, chunk)?;
        loss += tape.value(l).item() as f64 * chunk.len() as f64;
        outputs.extend_from_slice(out.data());
    }
    let metric = match kind.head_task() {
        TaskKind::Classification | TaskKind::Anomaly => {
            let scores: Vec<f64> = outputs.chunks(2).map(|p| p[1] as f64).collect();
            let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
            auc(&scores, &labels)?
        }
        TaskKind::Segmentation => {
            let pred: Vec<f32> = outputs.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
            let truth: Vec<f32> = examples
                .iter()
                .flat_map(|e| e.mask.as_ref().map(|m| m.data().to_vec()).unwrap_or_default())
                .collect();
            dice_iou(&pred, &truth)?.1
        }
    };
    Ok((loss / examples.len() as f64, metric))
}

/// Fine-tunes every parameter on the task's training split, early-stopping
/// on the validation metric, and scores the best epoch on the test split.
pub fn finetune(init: Init, task: &TargetTask, config: &FinetuneConfig, seed: u64) -> Result<FinetuneOutcome> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(Error::usage("the training split is empty"));
    }
    let mut net = prepare_network(init, task, config, seed)?;
    let mut adam = AdamState::new(config.adam(config.learning_rate))?;
    let metric = metric_name(task.kind);
    let (l0, m0) = evaluate(&net, task.kind, &task.validation, config.batch_size)?;
    let mut curve = vec![CurveRow {
        epoch: 0,
        split: "validation".into(),
        loss: l0,
        metric: Some(m0),
    }];
    let mut best = (m0, 0, net.clone());
    let mut reached = (m0 >= config.target_metric).then_some(0);
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut seed::derived_rng(seed, "finetune.epoch", epoch as u64));
        let mut train_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, |_| true);
            let (l, _) = batch_loss(&net, &mut tape, &bound, task.kind, &batch)?;
            train_loss += tape.value(l).item() as f64 * chunk.len() as f64;
            let mut g = tape.backward(l)?;
            let grads = bound.gradients(&mut g);
            adam.step(net.params_mut(), &grads)?;
        }
        curve.push(CurveRow {
            epoch,
            split: "train".into(),
            loss: train_loss / task.train.len() as f64,
            metric: None,
        });
        let (vl, vm) = evaluate(&net, task.kind, &task.validation, config.batch_size)?;
        curve.push(CurveRow {
            epoch,
            split: "validation".into(),
            loss: vl,
            metric: Some(vm),
        });
        if reached.is_none() && vm >= config.target_metric {
            reached = Some(epoch);
        }
        if vm > best.0 {
            best = (vm, epoch, net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, test_metric) = evaluate(&best.2, task.kind, &task.test, config.batch_size)?;
    Ok(FinetuneOutcome {
        metric: metric.into(),
        test_metric,
        best_epoch: best.1,
        epochs_to_target: reached,
        curve,
        network: best.2,
    })
}

/// Fine-tunes once per seed.
pub fn finetune_runs(
    init: Init,
    task: &TargetTask,
    config: &FinetuneConfig,
    seeds: &[u64],
) -> Result<(EvalResult, Vec<FinetuneOutcome>)> {
    let runs = seeds
        .iter()
        .map(|&s| finetune(init, task, config, s))
        .collect::<Result<Vec<_>>>()?;
    let result = EvalResult::new(
        metric_name(task.kind),
        runs.iter().map(|r| r.test_metric).collect(),
        seeds.to_vec(),
    )?;
    Ok((result, runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub stage: usize,
    pub test_auc: f64,
    pub best_epoch: usize,
}

fn pooled_features(net: &Network<f32>, stage: usize, flatten: bool, examples: &[Example]) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in examples.chunks(64) {
        let patches: Vec<&Grid> = chunk.iter().map(|e| &e.patch).collect();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, |_| false);
        let x = tape.constant(batch_from_grids::<f32>(&patches)?);
        let o = net.forward(&mut tape, &bound, x, false, &[])?;
        let f = if flatten {
            tape.flatten(o.stages[stage])?
        } else {
            tape.global_avg_pool(o.stages[stage])?
        };
        width = tape.value(f).shape()[1];
        rows.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(vec![examples.len(), width], rows)
}

/// Trains a softmax classifier on frozen activations of encoder stage
/// `stage` (0-based; flattened or spatially averaged like the target head)
/// and reports its test AUC at the best validation epoch.
pub fn linear_probe(
    init: Init,
    task: &TargetTask,
    stage: usize,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    config.validate()?;
    if task.kind.head_task() != TaskKind::Classification {
        return Err(Error::usage("linear probes need a classification task"));
    }
    let net = match init {
        Init::Scratch => Network::new(
            scratch_spec(task, config, Vec::new(), false),
            seed::derive(seed, "finetune.init", 0),
        )?,
        Init::Pretrained(n) => {
            n.check_input(&task.crop)?;
            n.clone()
        }
    };
    let depth = net.spec().depth();
    if stage >= depth {
        return Err(Error::usage(format!(
            "probe stage {stage} does not exist; the encoder has {depth} stages"
        )));
    }
    let splits =
        [&task.train, &task.validation, &task.test].map(|s| pooled_features(&net, stage, config.head_flatten, s));
    let [train, val, test] = splits;
    probe_features(
        &train?,
        &labels_of(&task.train),
        &val?,
        &labels_of(&task.validation),
        &test?,
        &labels_of(&task.test),
        config,
        seed,
    )
    .map(|(test_auc, best_epoch)| ProbeOutcome {
        stage,
        test_auc,
        best_epoch,
    })
}

fn labels_of(examples: &[Example]) -> Vec<u8> {
    examples.iter().map(|e| e.label).collect()
}

/// Full-batch training of `dense + softmax` on fixed features; returns the
/// test AUC at the best validation epoch and that epoch.
#[allow(clippy::too_many_arguments)]
pub fn probe_features(
    train: &Tensor<f32>,
    train_labels: &[u8],
    val: &Tensor<f32>,
    val_labels: &[u8],
    test: &Tensor<f32>,
    test_labels: &[u8],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(f64, usize)> {
    let width = train.shape()[1];
    let mut rng = seed::derived_rng(seed, "probe.init", 0);
    let bound = (1.0 / width as f64).sqrt();
    let w: Vec<f64> = (0..2 * width)
        .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
        .collect();
    let mut params = std::collections::BTreeMap::new();
    params.insert("bias".to_string(), Tensor::<f32>::zeros(&[2]));
    params.insert("weight".to_string(), Tensor::from_f64(vec![2, width], &w)?);
    let y = one_hot(&train_labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), 2)?;
    let mut adam = AdamState::new(config.adam(config.probe_learning_rate))?;
    let scores = |params: &std::collections::BTreeMap<String, Tensor<f32>>, x: &Tensor<f32>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(params["weight"].clone());
        let bv = tape.constant(params["bias"].clone());
        let z = tape.dense(xv, wv, bv)?;
        let p = tape.softmax(z)?;
        Ok(tape.value(p).data().chunks(2).map(|r| r[1] as f64).collect())
    };
    let mut best = (auc(&scores(&params, val)?, val_labels)?, 0, params.clone());
    for epoch in 1..=config.probe_epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(train.clone());
        let wv = tape.param(params["weight"].clone());
        let bv = tape.param(params["bias"].clone());
        let z = tape.dense(xv, wv, bv)?;
        let p = tape.softmax(z)?;
        let l = tape.cross_entropy(p, y.clone())?;
        let mut g = tape.backward(l)?;
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("weight".to_string(), g.take(wv).expect("weight gradient"));
        grads.insert("bias".to_string(), g.take(bv).expect("bias gradient"));
        adam.step(&mut params, &grads)?;
        let a = auc(&scores(&params, val)?, val_labels)?;
        if a > best.0 {
            best = (a, epoch, params.clone());
        }
    }
    Ok((auc(&scores(&best.2, test)?, test_labels)?, best.1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub init: String,
    pub fraction: f64,
    pub seed: u64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub init: String,
    pub fraction: f64,
    pub result: EvalResult,
    /// Two-sided p of the comparison with scratch at the full label set.
    pub p_vs_reference: f64,
    pub equivalent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub fractions: Vec<f64>,
    pub alpha: f64,
    pub reference: EvalResult,
    pub cells: Vec<SweepCell>,
    /// Smallest equivalent fraction per init, `None` if no fraction is.
    pub min_equivalent: Vec<(String, Option<f64>)>,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut out = Vec::new();
        for c in &self.cells {
            for (s, m) in c.result.seeds.iter().zip(&c.result.scores) {
                out.push(SweepRow {
                    init: c.init.clone(),
                    fraction: c.fraction,
                    seed: *s,
                    metric: *m,
                });
            }
        }
        out
    }

    pub fn min_equivalent_of(&self, init: &str) -> Option<f64> {
        self.min_equivalent
            .iter()
            .find(|(n, _)| n == init)
            .and_then(|(_, f)| *f)
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        artifact::csv_bytes(&self.rows())
    }
}

/// Fine-tunes every init at every label fraction over `seeds` (run `s`
/// keeps the subset drawn with seed `s`). A cell counts as equivalent to
/// scratch at the full label set when its mean is at least the reference
/// mean or a two-sided pooled t-test cannot tell them apart at `alpha`.
pub fn annotation_sweep(
    inits: &[(String, Init)],
    task: &TargetTask,
    fractions: &[f64],
    config: &FinetuneConfig,
    seeds: &[u64],
) -> Result<SweepReport> {
    if fractions.is_empty() {
        return Err(Error::usage("annotation sweep needs at least one label fraction"));
    }
    if inits.is_empty() || seeds.is_empty() {
        return Err(Error::usage("annotation sweep needs at least one init and one seed"));
    }
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let run_cell = |init: Init, f: f64| -> Result<EvalResult> {
        let mut scores = Vec::new();
        for &s in seeds {
            let sub = task.with_fraction(f, s)?;
            scores.push(finetune(init, &sub, config, s)?.test_metric);
        }
        EvalResult::new(metric_name(task.kind), scores, seeds.to_vec())
    };
    let mut raw = Vec::new();
    for (name, init) in inits {
        for &f in &fractions {
            raw.push((name.clone(), matches!(init, Init::Scratch), f, run_cell(*init, f)?));
        }
    }
    let reference = match raw.iter().find(|(_, scratch, f, _)| *scratch && *f == 1.0) {
        Some((_, _, _, r)) => r.clone(),
        None => run_cell(Init::Scratch, 1.0)?,
    };
    let mut cells = Vec::new();
    for (name, _, f, result) in raw {
        let p = if seeds.len() >= 2 {
            ttest_independent(&result.scores, &reference.scores)?.p
        } else {
            f64::NAN
        };
        let equivalent = result.mean >= reference.mean || p >= config.alpha;
        cells.push(SweepCell {
            init: name,
            fraction: f,
            result,
            p_vs_reference: p,
            equivalent,
        });
    }
    let min_equivalent = inits
        .iter()
        .map(|(name, _)| {
            let f = cells
                .iter()
                .filter(|c| &c.init == name && c.equivalent)
                .map(|c| c.fraction)
                .reduce(f64::min);
            (name.clone(), f)
        })
        .collect();
    Ok(SweepReport {
        fractions,
        alpha: config.alpha,
        reference,
        cells,
        min_equivalent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub words: usize,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn csv(&self) -> Result<Vec<u8>> {
        artifact::csv_bytes(&self.rows)
    }
}

/// Runs discovery, pre-training, and fine-tuning for each vocabulary size.
/// The feature extractor is trained once; configuration and numerical
/// failures of one size are recorded in its row.
#[allow(clippy::too_many_arguments)]
pub fn ablate_num_words(
    cohort: &PhantomCohort,
    discovery: &DiscoveryConfig,
    words: &[usize],
    pretrain: &PretrainConfig,
    task: &TargetTask,
    config: &FinetuneConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if words.is_empty() {
        return Err(Error::usage("the ablation needs at least one vocabulary size"));
    }
    let extractor = train_feature_extractor(cohort, &discovery.crop, &discovery.extractor, discovery.seed)?;
    let mut rows = Vec::new();
    for &c in words {
        let cfg = DiscoveryConfig {
            words: c,
            ..discovery.clone()
        };
        let outcome = extract_visual_words(&extractor, cohort, &cfg)
            .and_then(|ds| train_transvw(&ds, pretrain))
            .and_then(|pre| finetune_runs(Init::Pretrained(&pre.network), task, config, seeds));
        rows.push(match outcome {
            Ok((r, _)) => AblationRow {
                words: c,
                metric: r.metric,
                mean: Some(r.mean),
                std: Some(r.std),
                runs: r.scores.len(),
                error: None,
            },
            Err(e @ (Error::Config(_) | Error::Numerical(_))) => AblationRow {
                words: c,
                metric: metric_name(task.kind).into(),
                mean: None,
                std: None,
                runs: 0,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    }
    Ok(AblationReport { rows })
}
