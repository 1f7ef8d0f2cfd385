use rand::Rng;

use super::{Layer, Mode, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer `[B, D] -> [B, K]`, weight stored as `[K, D]`.
pub struct Dense {
    name: String,
    weight: ParamId,
    bias: ParamId,
    input: usize,
    output: usize,
    cached_input: Option<Tensor>,
}

impl Dense {
    pub fn new(name: &str, store: &mut ParamStore, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        Ok(Self {
            name: name.to_string(),
            weight: store.add_uniform(&format!("{name}.weight"), &[output, input], bound, rng)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[output]))?,
            input,
            output,
            cached_input: None,
        })
    }
}

impl Layer for Dense {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [b, d] if *d == self.input => Ok(vec![*b, self.output]),
            _ => Err(Error::Shape(format!(
                "{} expects [B, {}], got {input:?}",
                self.name, self.input
            ))),
        }
    }

    fn forward(&mut self, store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let shape = self.output_shape(x.shape())?;
        let (w, b) = (store.value(self.weight).data(), store.value(self.bias).data());
        let mut out = Vec::with_capacity(shape[0] * self.output);
        for row in x.data().chunks_exact(self.input) {
            for (k, wk) in w.chunks_exact(self.input).enumerate() {
                out.push(b[k] + wk.iter().zip(row).map(|(a, v)| a * v).sum::<f64>());
            }
        }
        self.cached_input = Some(x.clone());
        Tensor::new(shape, out)
    }

    fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        let batch = x.shape()[0];
        if grad_out.shape() != [batch, self.output] {
            return Err(Error::Shape(format!(
                "{} gradient shape {:?}, expected [{batch}, {}]",
                self.name,
                grad_out.shape(),
                self.output
            )));
        }
        let (d, k) = (self.input, self.output);
        let mut dx = vec![0.0; batch * d];
        {
            let w = store.value(self.weight).data();
            for (g, dxr) in grad_out.data().chunks_exact(k).zip(dx.chunks_exact_mut(d)) {
                for (gk, wk) in g.iter().zip(w.chunks_exact(d)) {
                    dxr.iter_mut().zip(wk).for_each(|(a, b)| *a += gk * b);
                }
            }
        }
        let gw = store.grad_mut(self.weight).data_mut();
        for (g, xr) in grad_out.data().chunks_exact(k).zip(x.data().chunks_exact(d)) {
            for (gk, row) in g.iter().zip(gw.chunks_exact_mut(d)) {
                row.iter_mut().zip(xr).for_each(|(a, b)| *a += gk * b);
            }
        }
        let gb = store.grad_mut(self.bias).data_mut();
        for g in grad_out.data().chunks_exact(k) {
            gb.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Tensor::new(vec![batch, d], dx)
    }
}
