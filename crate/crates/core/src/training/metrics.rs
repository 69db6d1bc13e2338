use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

/// Classification results over a labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub total: usize,
    pub per_class: Vec<ClassStats>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Builds counts from `(label, predicted)` pairs. Both must be below
    /// `classes`.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        classes: usize,
        names: &[String],
    ) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (label, pred) in pairs {
            confusion[label][pred] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = (0..classes)
            .map(|c| {
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
                ClassStats {
                    label: c,
                    name: names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    precision: ratio(confusion[c][c], predicted),
                    recall: ratio(confusion[c][c], support),
                    support,
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            total,
            per_class,
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// `epoch,train_loss,val_accuracy` rows.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_accuracy).expect("string write");
    }
    out
}
