//! Run configuration: one TOML document covering every stage, with
//! `section.key=value` overrides and a content digest.

use serde::{Deserialize, Serialize};

use crate::discovery::DiscoveryConfig;
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::pretrain::PretrainConfig;
use crate::seed;
use crate::transfer::{FinetuneConfig, TaskConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    /// Patients `0..patients` form the pre-training cohort.
    pub patients: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { patients: 48 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Fine-tuning seeds of every multi-run comparison.
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// Vocabulary sizes of the number-of-words ablation.
    pub words: Vec<usize>,
    /// Encoder stage read by linear probes; `None` is the deepest.
    pub probe_stage: Option<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            seeds: (0..5).collect(),
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            words: vec![5, 10, 20],
            probe_stage: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    pub phantom: PhantomConfig,
    pub discovery: DiscoveryConfig,
    pub pretrain: PretrainConfig,
    pub task: TaskConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Parses `text` (a TOML document, possibly empty), applies `overrides`
    /// in order, and validates the result.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cohort.patients < 2 {
            return Err(Error::config("cohort.patients must be at least 2"));
        }
        self.phantom.validate()?;
        self.discovery.validate()?;
        if self.discovery.instances > self.cohort.patients {
            return Err(Error::config(format!(
                "discovery.instances = {} exceeds cohort.patients = {}",
                self.discovery.instances, self.cohort.patients
            )));
        }
        if self.discovery.crop.len() != self.phantom.dims() {
            return Err(Error::config("discovery.crop rank differs from the phantom grid rank"));
        }
        self.pretrain.validate()?;
        self.task.validate(&self.phantom)?;
        if self.task.first_patient < self.cohort.patients {
            return Err(Error::config("task.first_patient overlaps the pre-training cohort"));
        }
        if self.task.crop != self.discovery.crop {
            return Err(Error::config(
                "task.crop must equal discovery.crop so checkpoints transfer",
            ));
        }
        self.finetune.validate()?;
        let e = &self.evaluation;
        if e.seeds.is_empty() {
            return Err(Error::config("evaluation.seeds must not be empty"));
        }
        if e.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || e.fractions.is_empty() {
            return Err(Error::config(
                "evaluation.fractions must be non-empty and lie in (0, 1]",
            ));
        }
        if e.words.contains(&0) || e.words.is_empty() {
            return Err(Error::config("evaluation.words must be non-empty and positive"));
        }
        Ok(())
    }

    /// Canonical TOML rendering of the resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        seed::sha256_hex(&serde_json::to_vec(self).expect("configs serialize"))
    }

    /// Sets the seed of every stage.
    pub fn set_seed(&mut self, s: u64) {
        self.phantom.seed = s;
        self.discovery.seed = s;
        self.pretrain.seed = s;
        self.task.seed = s;
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override; `value` is read as TOML and falls
/// back to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{spec}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
