//! Command-line front end. Every command resolves a [`RunConfig`], writes
//! its outputs atomically under `--out`, stamps each one with the config
//! digest and seed, and lists them with SHA-256 sums in a `MANIFEST.json`
//! that `verify` re-checks.

pub mod config;
pub mod montage;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::discovery::{
    extract_visual_words, load_dataset, persist_dataset, purity, train_feature_extractor, word_distances,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::phantom::generate_cohort;
use crate::pretrain::train_pretext;
use crate::seed;
use crate::tensor::{file, Network};
use crate::transfer::{self, build_task, EvalResult, Init, TargetTask};

pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "transvw",
    version,
    about = "Self-discovered visual words on synthetic phantoms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set pretrain.max_epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every stage, applied after the overrides.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, short, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the pre-training cohort.
    GenPhantoms(Common),
    /// Train the feature extractor and extract the visual-word dataset.
    Discover(Common),
    /// Pre-train with `pretrain.variant`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Visual-word dataset directory (default `<out>/discovery/dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fine-tune on the target task once per evaluation seed.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fit linear classifiers on frozen encoder features.
    LinearProbe {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on the target validation and test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint written by `finetune`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune at every label fraction, against random initialization.
    SweepAnnotation {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint compared with random initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Discover, pre-train, and fine-tune for each vocabulary size.
    AblateC(Common),
    /// Write a PGM montage of phantoms, visual words, or target patches.
    ExportMontage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = MontageSource::Phantoms)]
        source: MontageSource,
        /// Visual-word dataset directory for `--source words` (default `<out>/discovery/dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Re-check every file listed in the manifests under `path`.
    Verify {
        #[arg(default_value = "out")]
        path: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MontageSource {
    Phantoms,
    Words,
    Task,
}

impl MontageSource {
    fn name(self) -> &'static str {
        match self {
            MontageSource::Phantoms => "phantoms",
            MontageSource::Words => "words",
            MontageSource::Task => "task",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub config: RunConfig,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST: &str = "MANIFEST.json";

#[derive(Serialize)]
struct Envelope<'a, T> {
    command: &'a str,
    config_digest: &'a str,
    seed: u64,
    result: &'a T,
}

/// Output directory of one command invocation.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    config: RunConfig,
    digest: String,
    seed: u64,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: PathBuf, command: &'static str, config: &RunConfig, seed: u64) -> Outputs {
        Outputs {
            dir,
            command,
            digest: config.digest(),
            config: config.clone(),
            seed,
            files: Vec::new(),
        }
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("command".into(), self.command.into());
        m.insert("config_digest".into(), self.digest.clone());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        artifact::write_atomic(&self.dir.join(rel), bytes)?;
        self.files.push(FileEntry {
            path: rel.into(),
            sha256: seed::sha256_hex(bytes),
        });
        Ok(())
    }

    /// Records a file some library routine already wrote.
    fn existing(&mut self, rel: &str) -> Result<()> {
        let bytes = artifact::read(&self.dir.join(rel))?;
        self.files.push(FileEntry {
            path: rel.into(),
            sha256: seed::sha256_hex(&bytes),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let env = Envelope {
            command: self.command,
            config_digest: &self.digest,
            seed: self.seed,
            result: value,
        };
        let text = artifact::to_json(&env)?;
        self.bytes(rel, text.as_bytes())
    }

    fn csv(&mut self, rel: &str, body: &[u8]) -> Result<()> {
        let mut out = format!(
            "# config_digest={} seed={} command={}\n",
            self.digest, self.seed, self.command
        )
        .into_bytes();
        out.extend_from_slice(body);
        self.bytes(rel, &out)
    }

    fn network(&mut self, rel: &str, net: &Network<f32>, extra: &[(&str, String)]) -> Result<()> {
        let mut meta = self.meta();
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        self.bytes(rel, &net.to_bytes(&meta)?)
    }

    fn finish(mut self) -> Result<PathBuf> {
        let toml = self.config.to_toml()?;
        self.bytes("config.toml", toml.as_bytes())?;
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let manifest = Manifest {
            command: self.command.into(),
            config_digest: self.digest.clone(),
            seed: self.seed,
            created_at,
            config: self.config.clone(),
            files: self.files.clone(),
        };
        artifact::write_json(&self.dir.join(MANIFEST), &manifest)?;
        Ok(self.dir)
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => {
            artifact::read_string(p).map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut cfg = RunConfig::resolve(&text, &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn load_init(path: &Option<PathBuf>) -> Result<(String, Option<Network<f32>>)> {
    match path {
        None => Ok(("scratch".into(), None)),
        Some(p) => {
            let (net, _) = Network::<f32>::load(p)?;
            Ok((checkpoint_name(p), Some(net)))
        }
    }
}

/// `<dir>` for `.../<dir>/checkpoint.bin`, else the file stem.
fn checkpoint_name(p: &Path) -> String {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("init");
    if stem == "checkpoint" {
        if let Some(d) = p.parent().and_then(|d| d.file_name()).and_then(|d| d.to_str()) {
            return d.to_string();
        }
    }
    stem.to_string()
}

fn init_of(net: &Option<Network<f32>>) -> Init<'_> {
    match net {
        Some(n) => Init::Pretrained(n),
        None => Init::Scratch,
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("transvw: {}", msg.as_ref());
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    test_metric: f64,
    best_epoch: usize,
    epochs_to_target: Option<usize>,
}

#[derive(Serialize)]
struct FinetuneSummary {
    init: String,
    task: transfer::TaskKind,
    result: EvalResult,
    median_epochs_to_target: f64,
    runs: Vec<RunSummary>,
}

#[derive(Serialize)]
struct DiscoveryReport {
    words: usize,
    instances: usize,
    purity: f64,
    within_word_l2: f64,
    cross_word_l2: f64,
    extractor_holdout_loss: f64,
    extractor_digest: String,
}

#[derive(Serialize)]
struct EvaluateReport {
    checkpoint: String,
    metric: String,
    validation_loss: f64,
    validation_metric: f64,
    test_loss: f64,
    test_metric: f64,
}

fn target_task(cfg: &RunConfig) -> Result<TargetTask> {
    build_task(&cfg.phantom, &cfg.task)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantoms(common) => {
            let cfg = resolve(&common)?;
            let dir = common.out.join("phantoms");
            let mut out = Outputs::new(dir.clone(), "gen-phantoms", &cfg, cfg.phantom.seed);
            let cohort = generate_cohort(&cfg.phantom, cfg.cohort.patients)?;
            cohort.save(&dir, &out.meta())?;
            out.existing("manifest.json")?;
            for p in &cohort.patients {
                out.existing(&format!("patient{}.bin", p.id))?;
            }
            log(format!(
                "{} patients written to {}",
                cohort.len(),
                out.finish()?.display()
            ));
        }
        Command::Discover(common) => {
            let cfg = resolve(&common)?;
            let dir = common.out.join("discovery");
            let mut out = Outputs::new(dir.clone(), "discover", &cfg, cfg.discovery.seed);
            let d = &cfg.discovery;
            let cohort = generate_cohort(&cfg.phantom, cfg.cohort.patients)?;
            let extractor = train_feature_extractor(&cohort, &d.crop, &d.extractor, d.seed)?;
            log(format!("extractor held-out loss {:.5}", extractor.holdout_loss));
            let ds = extract_visual_words(&extractor, &cohort, d)?;
            persist_dataset(&ds, &dir.join("dataset"), &out.meta())?;
            out.existing("dataset/manifest.json")?;
            for w in &ds.manifest.words {
                for rec in &w.instances {
                    out.existing(&format!("dataset/{}", rec.file))?;
                }
            }
            out.network("extractor.bin", &extractor.network, &[])?;
            let (within, cross) = word_distances(&ds);
            let report = DiscoveryReport {
                words: ds.words(),
                instances: ds.per_word(),
                purity: purity(&ds, &cohort)?,
                within_word_l2: within,
                cross_word_l2: cross,
                extractor_holdout_loss: extractor.holdout_loss,
                extractor_digest: ds.manifest.extractor_digest.clone(),
            };
            log(format!(
                "purity {:.3}, cross/within L2 {:.3}",
                report.purity,
                cross / within
            ));
            out.json("report.json", &report)?;
            out.finish()?;
        }
        Command::Pretrain { common, dataset } => {
            let cfg = resolve(&common)?;
            let ds_dir = dataset.unwrap_or_else(|| common.out.join("discovery").join("dataset"));
            let ds = load_dataset(&ds_dir)?;
            let p = &cfg.pretrain;
            let name = if p.add_vw {
                format!("{}_vw", p.variant.name())
            } else {
                p.variant.name().to_string()
            };
            let mut out = Outputs::new(common.out.join("pretrain").join(&name), "pretrain", &cfg, p.seed);
            log(format!("pre-training {name} on {} words", ds.words()));
            let outcome = train_pretext(&ds, p)?;
            let r = &outcome.report;
            out.network(
                "checkpoint.bin",
                &outcome.network,
                &[("variant", name.clone()), ("best_epoch", r.best_epoch.to_string())],
            )?;
            out.csv("epochs.csv", &r.csv()?)?;
            out.json("report.json", r)?;
            out.finish()?;
            if let Some(reason) = &r.aborted {
                return Err(Error::numerical(format!("pre-training aborted: {reason}")));
            }
            log(format!("best epoch {} of {}", r.best_epoch, r.last_epoch));
        }
        Command::Finetune { common, init } => {
            let cfg = resolve(&common)?;
            let (name, net) = load_init(&init)?;
            let task = target_task(&cfg)?;
            let mut out = Outputs::new(common.out.join("finetune").join(&name), "finetune", &cfg, cfg.task.seed);
            let mut runs = Vec::new();
            let mut scores = Vec::new();
            let mut epochs = Vec::new();
            for &s in &cfg.evaluation.seeds {
                let r = transfer::finetune(init_of(&net), &task, &cfg.finetune, s)?;
                log(format!("{name} seed {s}: test {} {:.4}", r.metric, r.test_metric));
                out.network(
                    &format!("seed{s}/checkpoint.bin"),
                    &r.network,
                    &[("run_seed", s.to_string())],
                )?;
                out.csv(&format!("seed{s}/curve.csv"), &artifact::csv_bytes(&r.curve)?)?;
                scores.push(r.test_metric);
                epochs.push(r.epochs_to_target_or(cfg.finetune.max_epochs) as f64);
                runs.push(RunSummary {
                    seed: s,
                    test_metric: r.test_metric,
                    best_epoch: r.best_epoch,
                    epochs_to_target: r.epochs_to_target,
                });
            }
            let summary = FinetuneSummary {
                init: name,
                task: task.kind,
                result: EvalResult::new(transfer_metric(&task), scores, cfg.evaluation.seeds.clone())?,
                median_epochs_to_target: transfer::median(&epochs),
                runs,
            };
            out.json("summary.json", &summary)?;
            out.finish()?;
        }
        Command::LinearProbe { common, init } => {
            let cfg = resolve(&common)?;
            let (name, net) = load_init(&init)?;
            let task = target_task(&cfg)?;
            let depth = match &net {
                Some(n) => n.spec().depth(),
                None => cfg.finetune.widths.len(),
            };
            let stage = cfg.evaluation.probe_stage.unwrap_or(depth.saturating_sub(1));
            let mut out = Outputs::new(
                common.out.join("probe").join(&name),
                "linear-probe",
                &cfg,
                cfg.task.seed,
            );
            let runs = cfg
                .evaluation
                .seeds
                .iter()
                .map(|&s| transfer::linear_probe(init_of(&net), &task, stage, &cfg.finetune, s))
                .collect::<Result<Vec<_>>>()?;
            let result = EvalResult::new(
                "auc",
                runs.iter().map(|r| r.test_auc).collect(),
                cfg.evaluation.seeds.clone(),
            )?;
            log(format!("{name} stage {stage}: mean test AUC {:.4}", result.mean));
            out.json(&format!("stage{stage}.json"), &(result, runs))?;
            out.finish()?;
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let (net, _) = Network::<f32>::load(&checkpoint)?;
            net.check_input(&cfg.task.crop)?;
            let task = target_task(&cfg)?;
            let name = checkpoint
                .parent()
                .and_then(|d| {
                    let run = d.file_name()?.to_str()?;
                    let init = d.parent()?.file_name()?.to_str()?;
                    Some(format!("{init}_{run}"))
                })
                .unwrap_or_else(|| checkpoint_name(&checkpoint));
            let mut out = Outputs::new(common.out.join("evaluate").join(&name), "evaluate", &cfg, cfg.task.seed);
            let bs = cfg.finetune.batch_size;
            let (vl, vm) = transfer::evaluate(&net, task.kind, &task.validation, bs)?;
            let (tl, tm) = transfer::evaluate(&net, task.kind, &task.test, bs)?;
            log(format!("{name}: validation {vm:.4}, test {tm:.4}"));
            out.json(
                "report.json",
                &EvaluateReport {
                    checkpoint: checkpoint.display().to_string(),
                    metric: transfer_metric(&task).into(),
                    validation_loss: vl,
                    validation_metric: vm,
                    test_loss: tl,
                    test_metric: tm,
                },
            )?;
            out.finish()?;
        }
        Command::SweepAnnotation { common, init } => {
            let cfg = resolve(&common)?;
            let (name, net) = load_init(&init)?;
            let task = target_task(&cfg)?;
            let mut inits = vec![("scratch".to_string(), Init::Scratch)];
            if let Some(n) = &net {
                inits.push((name.clone(), Init::Pretrained(n)));
            }
            let mut out = Outputs::new(
                common.out.join("sweep").join(&name),
                "sweep-annotation",
                &cfg,
                cfg.task.seed,
            );
            let rep = transfer::annotation_sweep(
                &inits,
                &task,
                &cfg.evaluation.fractions,
                &cfg.finetune,
                &cfg.evaluation.seeds,
            )?;
            for (n, f) in &rep.min_equivalent {
                log(format!("{n}: smallest fraction equivalent to scratch at 100%: {f:?}"));
            }
            out.csv("cells.csv", &rep.csv()?)?;
            out.json("report.json", &rep)?;
            out.finish()?;
        }
        Command::AblateC(common) => {
            let cfg = resolve(&common)?;
            let mut out = Outputs::new(common.out.join("ablation"), "ablate-c", &cfg, cfg.discovery.seed);
            let cohort = generate_cohort(&cfg.phantom, cfg.cohort.patients)?;
            let task = target_task(&cfg)?;
            let rep = transfer::ablate_num_words(
                &cohort,
                &cfg.discovery,
                &cfg.evaluation.words,
                &cfg.pretrain,
                &task,
                &cfg.finetune,
                &cfg.evaluation.seeds,
            )?;
            for r in &rep.rows {
                log(format!(
                    "C={}: mean {:?} std {:?} {}",
                    r.words,
                    r.mean,
                    r.std,
                    r.error.as_deref().unwrap_or("")
                ));
            }
            out.csv("ablation.csv", &rep.csv()?)?;
            out.json("report.json", &rep)?;
            out.finish()?;
        }
        Command::ExportMontage {
            common,
            source,
            dataset,
        } => {
            let cfg = resolve(&common)?;
            let (tiles, cols): (Vec<Grid>, usize) = match source {
                MontageSource::Phantoms => {
                    let cohort = generate_cohort(&cfg.phantom, cfg.cohort.patients.min(16))?;
                    (cohort.patients.into_iter().map(|p| p.volume).collect(), 4)
                }
                MontageSource::Words => {
                    let dir = dataset.unwrap_or_else(|| common.out.join("discovery").join("dataset"));
                    let ds = load_dataset(&dir)?;
                    let per = ds.per_word().min(8);
                    let tiles = ds
                        .instances
                        .chunks(ds.per_word())
                        .flat_map(|w| w[..per].iter().map(|i| i.patch.clone()))
                        .collect();
                    (tiles, per)
                }
                MontageSource::Task => {
                    let task = target_task(&cfg)?;
                    let pos = task.train.iter().filter(|e| e.label == 1).take(8);
                    let neg = task.train.iter().filter(|e| e.label == 0).take(8);
                    (pos.chain(neg).map(|e| e.patch.clone()).collect(), 8)
                }
            };
            let mut out = Outputs::new(common.out.join("montage"), "export-montage", &cfg, cfg.phantom.seed);
            let (w, h, px) = montage::montage(&tiles, cols)?;
            let comments = vec![
                format!("config_digest={}", out.digest),
                format!("seed={}", out.seed),
                format!("source={}", source.name()),
            ];
            out.bytes(
                &format!("{}.pgm", source.name()),
                &montage::pgm_bytes(w, h, &px, &comments)?,
            )?;
            out.finish()?;
        }
        Command::Verify { path } => {
            let (manifests, files) = verify(&path)?;
            log(format!("verified {files} files in {manifests} manifests"));
        }
    }
    Ok(())
}

fn transfer_metric(task: &TargetTask) -> &'static str {
    match task.kind {
        transfer::TaskKind::Segmentation => "iou",
        _ => "auc",
    }
}

fn find_manifests(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_manifests(&e, out)?;
        } else if e.file_name().and_then(|n| n.to_str()) == Some(MANIFEST) {
            out.push(e);
        }
    }
    Ok(())
}

/// Checks every manifest under `path` (a directory or one manifest file):
/// each listed file must exist with its recorded SHA-256, tensor files must
/// decode, and the stored config must hash to the recorded digest. Returns
/// the number of manifests and files checked.
pub fn verify(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(Error::integrity(format!("{} does not exist", path.display())));
    }
    let mut manifests = Vec::new();
    find_manifests(path, &mut manifests)?;
    if manifests.is_empty() {
        return Err(Error::integrity(format!("no {MANIFEST} under {}", path.display())));
    }
    let mut files = 0;
    for m in &manifests {
        let dir = m.parent().unwrap_or(Path::new("."));
        let text = artifact::read_string(m)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(format!("{}: unreadable manifest: {e}", m.display())))?;
        if manifest.config.digest() != manifest.config_digest {
            return Err(Error::integrity(format!(
                "{}: config does not match its digest",
                m.display()
            )));
        }
        for f in &manifest.files {
            let p = dir.join(&f.path);
            let bytes = std::fs::read(&p).map_err(|e| Error::integrity(format!("{}: {e}", p.display())))?;
            if seed::sha256_hex(&bytes) != f.sha256 {
                return Err(Error::integrity(format!(
                    "{} does not match its recorded SHA-256",
                    p.display()
                )));
            }
            if f.path.ends_with(".bin") {
                file::decode::<f32>(&bytes).map_err(|e| Error::integrity(format!("{}: {e}", p.display())))?;
            }
            files += 1;
        }
    }
    Ok((manifests.len(), files))
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("transvw: {e}");
            e.exit_code()
        }
    }
}
