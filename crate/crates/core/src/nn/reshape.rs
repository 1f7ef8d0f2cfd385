use super::{Layer, Mode, ParamStore, Tensor};
use crate::error::{Error, Result};

fn missing(name: &str) -> Error {
    Error::Shape(format!("{name}: backward before forward"))
}

/// Elementwise `max(0, x)`. The gradient at exactly zero is taken as zero.
pub struct Relu {
    name: String,
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            mask: None,
        }
    }
}

impl Layer for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.mask = Some(mask);
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.mask.as_ref().ok_or_else(|| missing(&self.name))?;
        if mask.len() != grad_out.len() {
            return Err(Error::Shape(format!("{}: gradient size changed", self.name)));
        }
        let g = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(grad_out.shape().to_vec(), g)
    }
}

/// `[B, C, T, H, W]` to `[B, T, C*H*W]`: one feature vector per time step.
pub struct FlattenSteps {
    name: String,
    input_shape: Option<Vec<usize>>,
}

impl FlattenSteps {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            input_shape: None,
        }
    }
}

fn permute_ct(data: &[f64], a: usize, b: usize, inner: usize, batch: usize) -> Vec<f64> {
    // [batch, a, b, inner] -> [batch, b, a, inner]
    let mut out = vec![0.0; data.len()];
    for n in 0..batch {
        for i in 0..a {
            for j in 0..b {
                let src = ((n * a + i) * b + j) * inner;
                let dst = ((n * b + j) * a + i) * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
    }
    out
}

impl Layer for FlattenSteps {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [b, c, t, h, w] => Ok(vec![*b, *t, c * h * w]),
            _ => Err(Error::Shape(format!("{} expects rank 5, got {input:?}", self.name))),
        }
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let s = x.shape();
        let out = permute_ct(x.data(), s[1], s[2], s[3] * s[4], s[0]);
        self.input_shape = Some(s.to_vec());
        Tensor::new(out_shape, out)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let s = self.input_shape.as_ref().ok_or_else(|| missing(&self.name))?;
        if grad_out.len() != s.iter().product::<usize>() {
            return Err(Error::Shape(format!("{}: gradient size changed", self.name)));
        }
        let g = permute_ct(grad_out.data(), s[2], s[1], s[3] * s[4], s[0]);
        Tensor::new(s.clone(), g)
    }
}

/// `[B, T, D]` to `[B, D]` by averaging over time steps.
pub struct MeanOverTime {
    name: String,
    input_shape: Option<Vec<usize>>,
}

impl MeanOverTime {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            input_shape: None,
        }
    }
}

impl Layer for MeanOverTime {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [b, t, d] if *t > 0 => Ok(vec![*b, *d]),
            _ => Err(Error::Shape(format!("{} expects [B, T>0, D], got {input:?}", self.name))),
        }
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let (t, d) = (x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; out_shape[0] * d];
        for (o, seq) in out.chunks_exact_mut(d).zip(x.data().chunks_exact(t * d)) {
            for step in seq.chunks_exact(d) {
                o.iter_mut().zip(step).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|v| *v /= t as f64);
        }
        self.input_shape = Some(x.shape().to_vec());
        Tensor::new(out_shape, out)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let s = self.input_shape.as_ref().ok_or_else(|| missing(&self.name))?;
        let (b, t, d) = (s[0], s[1], s[2]);
        if grad_out.shape() != [b, d] {
            return Err(Error::Shape(format!("{}: gradient shape {:?}", self.name, grad_out.shape())));
        }
        let mut g = Vec::with_capacity(b * t * d);
        for row in grad_out.data().chunks_exact(d) {
            for _ in 0..t {
                g.extend(row.iter().map(|v| v / t as f64));
            }
        }
        Tensor::new(s.clone(), g)
    }
}
