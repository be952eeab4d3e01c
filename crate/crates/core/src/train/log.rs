use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ctc_loss: f64,
    /// Unweighted load-balancing loss summed over MoE layers; 0 for dense.
    pub load_balance_loss: f64,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `usage[l][j]`: fraction of tokens routed to expert `j` in MoE layer `l`.
    pub usage: Vec<Vec<f64>>,
}

/// Append-only per-step training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub moe_layers: usize,
    pub experts: usize,
    pub records: Vec<StepRecord>,
}

const FIXED_COLUMNS: [&str; 6] = [
    "step",
    "lr",
    "ctc_loss",
    "load_balance_loss",
    "total_loss",
    "grad_norm",
];

impl TrainLog {
    pub fn new(moe_layers: usize, experts: usize) -> Self {
        TrainLog {
            moe_layers,
            experts,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        let expected = self.records.last().map_or(1, |r| r.step + 1);
        if record.step != expected {
            return Err(Error::Contract(format!(
                "log expects step {expected}, got {}",
                record.step
            )));
        }
        if record.usage.len() != self.moe_layers
            || record.usage.iter().any(|u| u.len() != self.experts)
        {
            return Err(Error::Contract(
                "usage fractions do not match the log layout".into(),
            ));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fixed columns, then `f_l{l}_e{j}` for every MoE layer and expert.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for l in 0..self.moe_layers {
            for j in 0..self.experts {
                cols.push(format!("f_l{l}_e{j}"));
            }
        }
        cols
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns())?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.lr.to_string(),
                r.ctc_loss.to_string(),
                r.load_balance_loss.to_string(),
                r.total_loss.to_string(),
                r.grad_norm.to_string(),
            ];
            row.extend(r.usage.iter().flatten().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Trailing mean of the CTC loss over `window` steps, one value per step.
    pub fn smoothed_ctc(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let losses: Vec<f64> = self.records.iter().map(|r| r.ctc_loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Mean CTC loss of the last `window` steps.
    pub fn final_smoothed_ctc(&self, window: usize) -> Option<f64> {
        self.smoothed_ctc(window).last().copied()
    }

    /// Means of consecutive non-overlapping `window`-step blocks (a trailing
    /// partial block is dropped).
    pub fn block_means(&self, window: usize) -> Vec<f64> {
        self.records
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(|r| r.ctc_loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Largest single-expert usage fraction per MoE layer at the last step.
    pub fn final_max_usage(&self) -> Vec<f64> {
        self.records.last().map_or_else(Vec::new, |r| {
            r.usage
                .iter()
                .map(|u| u.iter().copied().fold(0.0, f64::max))
                .collect()
        })
    }
}
