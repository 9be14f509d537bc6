//! Per-epoch training records shared by the detector and classifier harnesses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Name of the validation metric column, e.g. `val_f1`.
    pub metric_name: String,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn new(metric_name: &str) -> Self {
        TrainingLog { metric_name: metric_name.to_string(), epochs: Vec::new(), step_losses: Vec::new() }
    }

    /// `epoch,loss,<metric>` rows; the metric cell is empty when no
    /// validation metric was available.
    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,loss,{}\n", self.metric_name);
        for r in &self.epochs {
            let metric = r.val_metric.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.6},{}\n", r.epoch, r.loss, metric));
        }
        out
    }
}

pub(crate) fn ensure_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}, step {step}")))
    }
}
