use std::fmt::Write;

use crate::error::{Error, Result};

/// Classification results on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub mean_loss: f64,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], n_classes: usize, mean_loss: f64) -> Result<Self> {
        if labels.is_empty() || labels.len() != predictions.len() {
            return Err(Error::Data(format!(
                "{} labels against {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= n_classes || p >= n_classes {
                return Err(Error::Label(format!("class index beyond {n_classes}")));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
            mean_loss,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Human-readable summary with the confusion matrix.
    pub fn report(&self, class_names: &[String]) -> String {
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        let mut s = String::new();
        let _ = writeln!(s, "accuracy  {:.4} ({} samples)", self.accuracy, self.total());
        let _ = writeln!(s, "mean loss {:.6}", self.mean_loss);
        let _ = writeln!(s, "per-class accuracy:");
        for (k, a) in self.per_class_accuracy.iter().enumerate() {
            let _ = writeln!(s, "  {:<10} {:.4}", name(k), a);
        }
        let _ = writeln!(s, "confusion (rows true, columns predicted):");
        for (k, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            let _ = writeln!(s, "  {:<10}{}", name(k), cells.join(""));
        }
        s
    }

    /// One `key=value` line per field.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "mean_loss={}", self.mean_loss);
        let _ = writeln!(s, "n_classes={}", self.n_classes());
        let _ = writeln!(s, "n_samples={}", self.total());
        for (k, a) in self.per_class_accuracy.iter().enumerate() {
            let _ = writeln!(s, "class_accuracy.{k}={a}");
        }
        s
    }

    /// Parses the accuracy and loss back out of [`to_records`](Self::to_records) text.
    pub fn parse_record(text: &str, key: &str) -> Option<f64> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .and_then(|(_, v)| v.trim().parse().ok())
    }

    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        let mut s = String::from("true\\pred");
        for k in 0..self.n_classes() {
            s.push(',');
            s.push_str(&name(k));
        }
        s.push('\n');
        for (k, row) in self.confusion.iter().enumerate() {
            s.push_str(&name(k));
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bookkeeping_identities() {
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let preds = [0, 1, 1, 1, 2, 0, 2];
        let m = Metrics::from_predictions(&labels, &preds, 3, 0.5).unwrap();
        let trace: usize = (0..3).map(|k| m.confusion[k][k]).sum();
        assert_eq!(m.accuracy, trace as f64 / 7.0);
        let row_sums: Vec<usize> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 2, 3]);
        assert_eq!(m.per_class_accuracy, vec![0.5, 1.0, 2.0 / 3.0]);
        assert_eq!(Metrics::parse_record(&m.to_records(), "accuracy"), Some(m.accuracy));
        let csv = m.confusion_csv(&[]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("class0,1,1,0"));
    }

    #[test]
    fn label_permutation_permutes_confusion() {
        let labels = [0, 1, 2, 2, 1];
        let preds = [1, 1, 2, 0, 0];
        let perm = [2, 0, 1];
        let a = Metrics::from_predictions(&labels, &preds, 3, 0.0).unwrap();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let b = Metrics::from_predictions(&pl, &pp, 3, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.confusion[i][j], b.confusion[perm[i]][perm[j]]);
            }
        }
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert!(Metrics::from_predictions(&[], &[], 2, 0.0).is_err());
    }
}
