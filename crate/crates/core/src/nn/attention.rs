use super::{Layer, Mode, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Scaled dot-product self-attention with `Q = K = V = x`.
///
/// For each batch item, `A = softmax(x xᵀ / sqrt(D))` row-wise over time and
/// the output is `A x`. Returns the output `[B, T, D]` and weights `[B, T, T]`.
pub fn self_attention(x: &Tensor) -> Result<(Tensor, Tensor)> {
    x.expect_rank(3, "self_attention")?;
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if d == 0 {
        return Err(Error::Shape("self_attention needs D >= 1".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; b * t * d];
    let mut weights = vec![0.0; b * t * t];
    for bi in 0..b {
        let xs = &x.data()[bi * t * d..(bi + 1) * t * d];
        let a = &mut weights[bi * t * t..(bi + 1) * t * t];
        for i in 0..t {
            let qi = &xs[i * d..(i + 1) * d];
            let row = &mut a[i * t..(i + 1) * t];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * qi.iter().zip(&xs[j * d..(j + 1) * d]).map(|(p, q)| p * q).sum::<f64>();
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
            let o = &mut out[(bi * t + i) * d..(bi * t + i + 1) * d];
            for (j, &w) in row.iter().enumerate() {
                o.iter_mut().zip(&xs[j * d..(j + 1) * d]).for_each(|(acc, v)| *acc += w * v);
            }
        }
    }
    Ok((Tensor::new(vec![b, t, d], out)?, Tensor::new(vec![b, t, t], weights)?))
}

/// Gradient with respect to `x`, which feeds queries, keys and values at once.
pub fn self_attention_backward(grad_out: &Tensor, x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    x.expect_rank(3, "self_attention")?;
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if grad_out.shape() != x.shape() || weights.shape() != [b, t, t] {
        return Err(Error::Shape(format!(
            "self_attention backward got grad {:?}, x {:?}, weights {:?}",
            grad_out.shape(),
            x.shape(),
            weights.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = vec![0.0; b * t * d];
    for bi in 0..b {
        let xs = &x.data()[bi * t * d..(bi + 1) * t * d];
        let gy = &grad_out.data()[bi * t * d..(bi + 1) * t * d];
        let a = &weights.data()[bi * t * t..(bi + 1) * t * t];
        let dxb = &mut dx[bi * t * d..(bi + 1) * t * d];
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let gi = &gy[i * d..(i + 1) * d];
            // Value path: dX_j += A_ij dY_i.
            for j in 0..t {
                let w = a[i * t + j];
                dxb[j * d..(j + 1) * d].iter_mut().zip(gi).for_each(|(acc, g)| *acc += w * g);
            }
            let da: Vec<f64> = (0..t)
                .map(|j| gi.iter().zip(&xs[j * d..(j + 1) * d]).map(|(g, v)| g * v).sum())
                .collect();
            let dot: f64 = (0..t).map(|j| da[j] * a[i * t + j]).sum();
            for j in 0..t {
                ds[i * t + j] = a[i * t + j] * (da[j] - dot) * scale;
            }
        }
        // Score path: S = X Xᵀ, so dX = (dS + dSᵀ) X.
        for i in 0..t {
            for j in 0..t {
                let w = ds[i * t + j] + ds[j * t + i];
                if w != 0.0 {
                    let (xj, di) = (&xs[j * d..(j + 1) * d], i * d);
                    dxb[di..di + d].iter_mut().zip(xj).for_each(|(acc, v)| *acc += w * v);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub struct SelfAttention {
    name: String,
    cache: Option<(Tensor, Tensor)>,
}

impl SelfAttention {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cache: None,
        }
    }

    /// Attention weights from the last forward pass.
    pub fn weights(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|(_, w)| w)
    }
}

impl Layer for SelfAttention {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [_, _, d] if *d > 0 => Ok(input.to_vec()),
            _ => Err(Error::Shape(format!("{} expects [B, T, D>0], got {input:?}", self.name))),
        }
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (out, w) = self_attention(x)?;
        self.cache = Some((x.clone(), w));
        Ok(out)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let (x, w) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        self_attention_backward(grad_out, x, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_is_identity() {
        let x = Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let (y, w) = self_attention(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn weight_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![2, 5, 4], (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let (_, w) = self_attention(&x).unwrap();
        for row in w.data().chunks_exact(5) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
