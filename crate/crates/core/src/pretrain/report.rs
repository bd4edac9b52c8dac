//! Per-epoch training records.

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One split's metrics after one epoch. Epoch 0 is the untrained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: Split,
    pub l_cls: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_rot: Option<f64>,
    pub l: f64,
    pub acc_vw: Option<f64>,
    pub acc_rot: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub add_vw: bool,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub checkpoint_digest: String,
    pub aborted: Option<String>,
}

impl RunReport {
    pub fn validation_rows(&self) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(|r| r.split == Split::Validation)
    }

    pub fn validation_at(&self, epoch: usize) -> Option<&EpochRow> {
        self.validation_rows().find(|r| r.epoch == epoch)
    }

    /// The report with every wall-clock field zeroed, for determinism checks.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.wall_clock_secs = 0.0;
        }
        r
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        artifact::csv_bytes(&self.rows)
    }
}
