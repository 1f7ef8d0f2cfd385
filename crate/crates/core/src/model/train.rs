use std::fmt::Write;

use rand::seq::SliceRandom;

use super::metrics::{argmax, Metrics};
use super::C3dBiLstm;
use crate::error::{Error, Result};
use crate::gmm::SgmmTensor;
use crate::nn::{adam_step, one_hot, softmax_cross_entropy, AdamConfig, AdamState, Mode};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            lr_decay_every: 30,
            lr_decay_factor: 0.1,
            epochs: 100,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::Config(format!("initial learning rate {} must be > 0", self.initial_lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "learning-rate decay factor {} must lie in (0, 1)",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay interval and batch size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`: `initial_lr * factor^floor((epoch-1)/every)`.
    ///
    /// Computed by dividing by the integer power of `1/factor`, which keeps
    /// decimal schedules such as 0.1 -> 0.01 -> 0.001 exact in binary.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.lr_decay_every;
        let k = i32::try_from(k).unwrap_or(i32::MAX);
        self.initial_lr / (1.0 / self.lr_decay_factor).powi(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// The optimizer's step size during this epoch.
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,train_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.loss, e.train_accuracy);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

fn check_classes(labels: &[usize], n_classes: usize) -> Result<()> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Label(format!("label {l} outside {n_classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {k} has no training samples")));
    }
    Ok(())
}

/// Trains with seeded shuffled mini-batches, cross-entropy and Adam.
pub fn train(model: &mut C3dBiLstm, samples: &[(SgmmTensor, usize)], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let k = model.arch().n_classes;
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();
    check_classes(&labels, k)?;
    let all: Vec<&SgmmTensor> = samples.iter().map(|(s, _)| s).collect();
    model.fit_input_standardization(&all)?;
    let mut adam = AdamState::new(
        model.store(),
        AdamConfig {
            lr: cfg.initial_lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        adam.config.lr = cfg.lr_at_epoch(epoch);
        let mut rng = seed::rng_for(cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&SgmmTensor> = batch.iter().map(|&i| &samples[i].0).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| samples[i].1).collect();
            let x = model.batch_input(&inputs)?;
            model.store_mut().zero_grads();
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &one_hot(&batch_labels, k)?)?;
            model.backward(&grad)?;
            adam_step(model.store_mut(), &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("training diverged at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += logits
                .data()
                .chunks_exact(k)
                .zip(&batch_labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr: adam.config.lr,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(history)
}

/// Inference-mode evaluation with argmax decisions.
pub fn evaluate(model: &mut C3dBiLstm, samples: &[(SgmmTensor, usize)]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let k = model.arch().n_classes;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for batch in samples.chunks(32) {
        let inputs: Vec<&SgmmTensor> = batch.iter().map(|(s, _)| s).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let logits = model.forward(&model.batch_input(&inputs)?, Mode::Infer)?;
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(&labels, k)?)?;
        loss_sum += loss * batch.len() as f64;
        predictions.extend(logits.data().chunks_exact(k).map(argmax));
    }
    let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();
    Metrics::from_predictions(&labels, &predictions, k, loss_sum / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::SgmmMeta;
    use crate::model::ArchitectureConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> SgmmMeta {
        SgmmMeta {
            n_components: 8,
            frames_per_segment: 10,
            relevance: 16.0,
            append_covariances: false,
        }
    }

    /// Class `c` brightens the block of rows starting at `3c`.
    fn toy_samples(n_per_class: usize, classes: usize, t: usize, seed: u64) -> Vec<(SgmmTensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, g) = (12, 8);
        let mut out = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                let data = (0..m * g * t)
                    .map(|i| {
                        let row = i / (g * t);
                        let base = if row / 3 == c { 0.8 } else { 0.2 };
                        (base + rng.gen_range(-0.15..0.15_f64)).clamp(0.0, 1.0)
                    })
                    .collect();
                out.push((SgmmTensor::new(data, (m, g, t), meta()).unwrap(), c));
            }
        }
        out
    }

    fn small_arch(classes: usize, t: usize) -> ArchitectureConfig {
        let mut a = ArchitectureConfig::toy(12, 8, t, classes);
        a.hidden = 8;
        a
    }

    #[test]
    fn schedule_law_is_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(1), 0.1);
        assert_eq!(cfg.lr_at_epoch(30), 0.1);
        assert_eq!(cfg.lr_at_epoch(31), 0.01);
        assert_eq!(cfg.lr_at_epoch(61), 0.001);
        let bad = TrainConfig {
            lr_decay_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overfits_a_single_batch() {
        let samples = toy_samples(4, 2, 2, 1);
        let mut model = C3dBiLstm::new(&small_arch(2, 2), 3).unwrap();
        let cfg = TrainConfig {
            initial_lr: 0.01,
            epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &samples, &cfg).unwrap();
        assert!(h.epochs.iter().any(|e| e.train_accuracy == 1.0));
        let m = evaluate(&mut model, &samples).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let samples = toy_samples(3, 3, 2, 2);
        let cfg = TrainConfig {
            initial_lr: 0.01,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = C3dBiLstm::new(&small_arch(3, 2), 5).unwrap();
            let h = train(&mut model, &samples, &cfg).unwrap();
            (h, evaluate(&mut model, &samples).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.final_loss().unwrap().to_bits(), b.0.final_loss().unwrap().to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.epochs.len(), 3);
        assert!(a.0.to_csv().starts_with("epoch,lr,loss,train_acc\n1,0.01,"));
    }

    #[test]
    fn random_model_is_near_chance() {
        let samples = toy_samples(40, 4, 1, 3);
        let mut correct = 0.0;
        for s in 0..5 {
            let mut model = C3dBiLstm::new(&small_arch(4, 1), 100 + s).unwrap();
            correct += evaluate(&mut model, &samples).unwrap().accuracy;
        }
        // 5 x 160 predictions; chance is 0.25 with per-model correlation, so
        // keep the band wide.
        let mean = correct / 5.0;
        assert!(mean > 0.05 && mean < 0.6, "mean accuracy {mean}");
    }

    #[test]
    fn empty_class_is_rejected() {
        let samples: Vec<_> = toy_samples(2, 3, 1, 4).into_iter().filter(|(_, l)| *l != 1).collect();
        let mut model = C3dBiLstm::new(&small_arch(3, 1), 1).unwrap();
        assert!(matches!(train(&mut model, &samples, &TrainConfig::default()), Err(Error::Data(_))));
    }
}
