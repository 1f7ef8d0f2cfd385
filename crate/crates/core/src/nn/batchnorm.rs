use super::{Layer, Mode, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Per-channel running statistics used in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    /// Weight on the old value: `run = momentum * run + (1 - momentum) * batch`.
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

fn channel_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    x.expect_rank(5, "batchnorm3d")?;
    if x.shape()[1] != channels {
        return Err(Error::Shape(format!(
            "batchnorm3d has {channels} channels, input shape {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[2..].iter().product()))
}

/// 3D batch normalization over `[B, C, T, H, W]`, statistics per channel.
///
/// Train mode normalizes with the batch mean and population variance and
/// updates `stats`; infer mode uses `stats` and returns no cache.
pub fn batchnorm3d(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor, Option<BnCache>)> {
    let c = gamma.len();
    if beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape("batchnorm3d parameter lengths disagree".into()));
    }
    if !(stats.eps > 0.0) || !(0.0..1.0).contains(&stats.momentum) {
        return Err(Error::Config(format!(
            "batchnorm3d needs eps > 0 and momentum in [0, 1), got {} and {}",
            stats.eps, stats.momentum
        )));
    }
    let (b, spatial) = channel_layout(x, c)?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    let block = |bi: usize, ch: usize| (bi * c + ch) * spatial..(bi * c + ch + 1) * spatial;
    match mode {
        Mode::Infer => {
            for ch in 0..c {
                let inv = 1.0 / (stats.var[ch] + stats.eps).sqrt();
                for bi in 0..b {
                    for i in block(bi, ch) {
                        out[i] = gamma[ch] * (xs[i] - stats.mean[ch]) * inv + beta[ch];
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, None))
        }
        Mode::Train => {
            let n = b * spatial;
            if n < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batchnorm3d in train mode needs at least 2 values per channel, got {n}"
                )));
            }
            let mut x_hat = vec![0.0; xs.len()];
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let sum: f64 = (0..b).flat_map(|bi| block(bi, ch)).map(|i| xs[i]).sum();
                let mean = sum / n as f64;
                let var = (0..b)
                    .flat_map(|bi| block(bi, ch))
                    .map(|i| (xs[i] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + stats.eps).sqrt();
                for i in (0..b).flat_map(|bi| block(bi, ch)) {
                    x_hat[i] = (xs[i] - mean) * inv;
                    out[i] = gamma[ch] * x_hat[i] + beta[ch];
                }
                inv_std[ch] = inv;
                stats.mean[ch] = stats.momentum * stats.mean[ch] + (1.0 - stats.momentum) * mean;
                stats.var[ch] = stats.momentum * stats.var[ch] + (1.0 - stats.momentum) * var;
            }
            let cache = BnCache {
                x_hat,
                inv_std,
                shape: x.shape().to_vec(),
            };
            Ok((Tensor::new(x.shape().to_vec(), out)?, Some(cache)))
        }
    }
}

/// Returns `(d_x, d_gamma, d_beta)` for a train-mode forward.
pub fn batchnorm3d_backward(grad_out: &Tensor, cache: &BnCache, gamma: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "batchnorm3d gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let c = gamma.len();
    let (b, spatial) = channel_layout(grad_out, c)?;
    let n = (b * spatial) as f64;
    let g = grad_out.data();
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = || (0..b).flat_map(move |bi| (bi * c + ch) * spatial..(bi * c + ch + 1) * spatial);
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for i in idx() {
            sum_g += g[i];
            sum_gx += g[i] * cache.x_hat[i];
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        let k = gamma[ch] * cache.inv_std[ch] / n;
        for i in idx() {
            dx[i] = k * (n * g[i] - sum_g - cache.x_hat[i] * sum_gx);
        }
    }
    Ok((Tensor::new(cache.shape.clone(), dx)?, dgamma, dbeta))
}

/// Batch norm layer. `gamma` and `beta` are trainable; running statistics
/// are stored as non-trainable buffers so checkpoints carry them.
pub struct BatchNorm3d {
    name: String,
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache>,
}

impl BatchNorm3d {
    pub fn new(name: &str, store: &mut ParamStore, channels: usize) -> Result<Self> {
        let defaults = RunningStats::new(channels);
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::filled(&[channels], 1.0))?,
            eps: defaults.eps,
            momentum: defaults.momentum,
            cache: None,
        })
    }
}

impl Layer for BatchNorm3d {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 || input[1] != self.channels {
            return Err(Error::Shape(format!(
                "{} expects [B, {}, T, H, W], got {input:?}",
                self.name, self.channels
            )));
        }
        Ok(input.to_vec())
    }

    fn forward(&mut self, store: &mut ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut stats = RunningStats {
            mean: store.value(self.running_mean).data().to_vec(),
            var: store.value(self.running_var).data().to_vec(),
            eps: self.eps,
            momentum: self.momentum,
        };
        let (out, cache) = batchnorm3d(
            x,
            store.value(self.gamma).data(),
            store.value(self.beta).data(),
            &mut stats,
            mode,
        )?;
        store.value_mut(self.running_mean).data_mut().copy_from_slice(&stats.mean);
        store.value_mut(self.running_var).data_mut().copy_from_slice(&stats.var);
        self.cache = cache;
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward needs a train-mode forward", self.name)))?;
        let (dx, dg, db) = batchnorm3d_backward(grad_out, cache, store.value(self.gamma).data())?;
        for (id, d) in [(self.gamma, dg), (self.beta, db)] {
            store.grad_mut(id).data_mut().iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let spatial: usize = s[2..].iter().product();
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|b| {
                let start = (b * s[1] + ch) * spatial;
                t.data()[start..start + spatial].to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(vec![3, 2, 2, 3, 2], (0..72).map(|_| rng.gen_range(-4.0..9.0)).collect()).unwrap();
        let mut stats = RunningStats::new(2);
        let (y, _) = batchnorm3d(&x, &[1.0, 1.0], &[0.0, 0.0], &mut stats, Mode::Train).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 10.0 * stats.eps);
        }
        let (y2, _) = batchnorm3d(&y, &[2.0, 2.0], &[3.0, 3.0], &mut RunningStats::new(2), Mode::Train).unwrap();
        let (m, v) = channel_moments(&y2, 1);
        assert!((m - 3.0).abs() < 1e-9);
        assert!((v.sqrt() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(vec![2, 1, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut stats = RunningStats::new(1);
        batchnorm3d(&x, &[1.0], &[0.0], &mut stats, Mode::Train).unwrap();
        assert!((stats.mean[0] - 0.4).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
        let (y, cache) = batchnorm3d(&x, &[1.0], &[0.0], &mut stats, Mode::Infer).unwrap();
        assert!(cache.is_none());
        let expect = (1.0 - stats.mean[0]) / (stats.var[0] + stats.eps).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::zeros(&[1, 1, 1, 1, 1]);
        let r = batchnorm3d(&x, &[1.0], &[0.0], &mut RunningStats::new(1), Mode::Train);
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
    }
}
