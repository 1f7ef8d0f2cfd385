use super::metrics::{argmax, Metrics};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub iterations: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            l2: 1e-3,
            iterations: 500,
        }
    }
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent with an L2 penalty on the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `K x D`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    n_classes: usize,
    /// Penalized training loss before each gradient step.
    pub loss_history: Vec<f64>,
}

fn standardizer(features: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for f in features {
        var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    // Constant features are centred but left unscaled.
    let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

impl LogisticRegression {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], cfg: &LogisticConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature vectors against {} labels",
                features.len(),
                labels.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors must share a positive length".into()));
        }
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        if k < 2 {
            return Err(Error::Data("the baseline needs at least 2 classes".into()));
        }
        let (mean, scale) = standardizer(features, d);
        let mut model = Self {
            mean,
            scale,
            weights: vec![0.0; k * d],
            bias: vec![0.0; k],
            n_classes: k,
            loss_history: Vec::with_capacity(cfg.iterations),
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| model.standardize(f)).collect();
        let n = xs.len() as f64;
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            let mut loss = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let p = model.probabilities_std(x);
                loss -= p[y].max(1e-300).ln() / n;
                for c in 0..k {
                    let e = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                    gb[c] += e;
                    gw[c * d..(c + 1) * d].iter_mut().zip(x).for_each(|(g, v)| *g += e * v);
                }
            }
            loss += 0.5 * cfg.l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
            model.loss_history.push(loss);
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * (g + cfg.l2 * *w);
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= cfg.learning_rate * g;
            }
        }
        Ok(model)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probabilities_std(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let logits: Vec<f64> = (0..self.n_classes)
            .map(|c| self.bias[c] + self.weights[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                self.mean.len(),
                features.len()
            )));
        }
        Ok(self.probabilities_std(&self.standardize(features)))
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        self.probabilities(features).map(|p| argmax(&p))
    }

    /// Metrics over a labelled set. Classes unseen in training count as errors.
    pub fn evaluate(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<Metrics> {
        let k = self.n_classes.max(labels.iter().max().map_or(0, |&m| m + 1));
        let mut preds = Vec::with_capacity(features.len());
        let mut loss = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let p = self.probabilities(f)?;
            loss -= p.get(y).copied().unwrap_or(0.0).max(1e-300).ln();
            preds.push(argmax(&p));
        }
        Metrics::from_predictions(labels, &preds, k, loss / features.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_two_clusters() {
        let xs = vec![vec![0.0, 0.0], vec![0.5, 0.2], vec![3.0, 3.0], vec![2.6, 3.4]];
        let ys = [0, 0, 1, 1];
        let m = LogisticRegression::fit(&xs, &ys, &LogisticConfig::default()).unwrap();
        assert_eq!(m.evaluate(&xs, &ys).unwrap().accuracy, 1.0);
    }

    #[test]
    fn loss_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let cfg = LogisticConfig {
            learning_rate: 0.1,
            ..LogisticConfig::default()
        };
        let m = LogisticRegression::fit(&xs, &ys, &cfg).unwrap();
        for w in m.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn permuted_labels_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let ys: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let xs: Vec<Vec<f64>> = ys
                .iter()
                .map(|&y| vec![y as f64 * 2.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)])
                .collect();
            (xs, ys)
        };
        let (xs, mut ys) = make(&mut rng, 200);
        ys.shuffle(&mut rng);
        let (tx, ty) = make(&mut rng, 400);
        let m = LogisticRegression::fit(&xs, &ys, &LogisticConfig::default()).unwrap();
        let acc = m.evaluate(&tx, &ty).unwrap().accuracy;
        assert!((acc - 0.5).abs() < 0.12, "accuracy {acc}");
    }

    #[test]
    fn degenerate_data_is_handled() {
        let xs = vec![vec![1.0, 1.0]; 4];
        let m = LogisticRegression::fit(&xs, &[0, 1, 0, 1], &LogisticConfig::default()).unwrap();
        assert!(m.probabilities(&[1.0, 1.0]).unwrap().iter().all(|p| p.is_finite()));
        assert!(LogisticRegression::fit(&xs, &[0, 0, 0, 0], &LogisticConfig::default()).is_err());
    }
}
