//! Confusion matrices, WAR and UAR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of all instances predicted correctly.
    pub war: f64,
    /// Mean recall over classes that have at least one instance.
    pub uar: f64,
    /// `None` for classes with no instances.
    pub per_class_recall: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|row| row.len() != c) {
            return Err(Error::Config("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let uar = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let war = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        Ok(Self {
            confusion,
            war,
            uar,
            per_class_recall,
        })
    }

    /// Tallies `(true, predicted)` pairs.
    pub fn from_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut confusion = vec![vec![0u64; classes]; classes];
        for &(t, p) in pairs {
            let out = t.max(p);
            if out >= classes {
                return Err(Error::TargetOutOfRange { target: out, classes });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Confusion matrix as CSV with a header row of predicted class names.
    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
        let mut out = String::from("true\\pred");
        for k in 0..self.classes() {
            out.push(',');
            out.push_str(&name(k));
        }
        out.push('\n');
        for (k, row) in self.confusion.iter().enumerate() {
            out.push_str(&name(k));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}
