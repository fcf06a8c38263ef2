use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// `counts[true][predicted]` for the two classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Evaluation(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t > 1 || p > 1 {
                return Err(Error::Evaluation(format!(
                    "class index out of range: ({t}, {p})"
                )));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

/// Chance-corrected agreement `(p_o - p_e) / (1 - p_e)`, with `p_e` the
/// product of the marginals. Returns 0 when `p_e == 1`.
pub fn cohen_kappa(c: &Confusion) -> Result<f64> {
    let n = c.total() as f64;
    if n == 0.0 {
        return Err(Error::Evaluation(
            "kappa of an empty confusion matrix".into(),
        ));
    }
    let p_o = c.correct() as f64 / n;
    let p_e: f64 = (0..2)
        .map(|k| {
            let truth = (c.counts[k][0] + c.counts[k][1]) as f64 / n;
            let pred = (c.counts[0][k] + c.counts[1][k]) as f64 / n;
            truth * pred
        })
        .sum();
    if p_e >= 1.0 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: Confusion,
}

impl EvalResult {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        Ok(EvalResult {
            accuracy: confusion.accuracy(),
            kappa: cohen_kappa(&confusion)?,
            confusion,
        })
    }
}

/// One row of the per-epoch CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_c: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub test_accuracy: Option<f64>,
    pub test_kappa: Option<f64>,
    pub wall_clock_s: f64,
}

impl EpochMetrics {
    pub fn from_losses(epoch: usize, losses: &[LossBreakdown], wall_clock_s: f64) -> Self {
        let n = losses.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        EpochMetrics {
            epoch,
            l_c: mean(|l| l.l_c),
            l_d: mean(|l| l.l_d),
            l_total: mean(|l| l.l_total),
            test_accuracy: None,
            test_kappa: None,
            wall_clock_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped once the test accuracy reached the configured target.
    ReachedTarget {
        epoch: usize,
    },
    /// `|L_d|` exceeded the divergence guard; a margin bounds the loss.
    Diverged {
        epoch: usize,
        step: usize,
        l_d: f64,
        suggestion: String,
    },
}

/// Summary statistics over the evaluated epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_accuracy: Option<f64>,
    /// Mean over the last (up to) 100 evaluated epochs.
    pub mean_accuracy_last_100: Option<f64>,
    /// Test accuracy at the epoch with the lowest mean training loss.
    pub accuracy_at_min_train_loss: Option<f64>,
    pub epochs_run: usize,
}

pub const LAST_EPOCHS_WINDOW: usize = 100;

impl Summary {
    pub fn from_epochs(epochs: &[EpochMetrics]) -> Self {
        let evaluated: Vec<&EpochMetrics> = epochs
            .iter()
            .filter(|e| e.test_accuracy.is_some())
            .collect();
        let acc = |e: &EpochMetrics| e.test_accuracy.expect("evaluated epoch");
        let max_accuracy = evaluated.iter().map(|e| acc(e)).reduce(f64::max);
        let tail = &evaluated[evaluated.len().saturating_sub(LAST_EPOCHS_WINDOW)..];
        let mean_accuracy_last_100 = (!tail.is_empty())
            .then(|| tail.iter().map(|e| acc(e)).sum::<f64>() / tail.len() as f64);
        // First epoch attaining the minimum on ties.
        let accuracy_at_min_train_loss = evaluated
            .iter()
            .fold(None::<&&EpochMetrics>, |best, e| match best {
                Some(b) if b.l_total <= e.l_total => Some(b),
                _ => Some(e),
            })
            .map(|e| acc(e));
        Summary {
            max_accuracy,
            mean_accuracy_last_100,
            accuracy_at_min_train_loss,
            epochs_run: epochs.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub status: RunStatus,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn new(epochs: Vec<EpochMetrics>, status: RunStatus) -> Self {
        let summary = Summary::from_epochs(&epochs);
        MetricsReport {
            epochs,
            status,
            summary,
        }
    }

    pub fn loss_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.l_total).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        for e in &self.epochs {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Status and summary (without the per-epoch series).
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            status: &'a RunStatus,
            summary: &'a Summary,
        }
        let out = Out {
            status: &self.status,
            summary: &self.summary,
        };
        std::fs::write(path, serde_json::to_string_pretty(&out)?)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Evaluation(format!("csv: {other:?}")),
    }
}
