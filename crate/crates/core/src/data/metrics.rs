use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Confusion matrix (rows true, columns predicted) and summary scores.
/// Precision, recall and F1 of a class with a zero denominator are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} true labels, {} predictions", truth.len(), predicted.len()),
        ));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::OutOfRange {
                op: "compute_metrics",
                detail: format!("label pair ({t}, {p}) with {num_classes} classes"),
            });
        }
        confusion[t][p] += 1;
    }
    let total = truth.len() as u64;
    let correct: u64 = (0..num_classes).map(|i| confusion[i][i]).sum();

    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();

    let k = num_classes as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        }
    };
    Ok(MetricsReport {
        samples: total,
        accuracy: ratio(correct, total),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        per_class,
        confusion,
    })
}

impl MetricsReport {
    /// Confusion matrix as CSV with a header of class names.
    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        for n in class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in class_names.iter().zip(&self.confusion) {
            s.push_str(name);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}
