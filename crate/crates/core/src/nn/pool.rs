use super::{Layer, Mode, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Window and stride per (T, H, W) axis, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl PoolGeometry {
    /// Non-overlapping window of the given extent.
    pub fn square(window: [usize; 3]) -> Self {
        Self { window, stride: window }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 {
            return Err(Error::Shape(format!("pooling needs [B,C,T,H,W], got {input:?}")));
        }
        let mut out = input[..2].to_vec();
        for a in 0..3 {
            let (n, w, s) = (input[2 + a], self.window[a], self.stride[a]);
            if w == 0 || s == 0 || w > n {
                return Err(Error::Shape(format!(
                    "pool window {:?} does not fit input {input:?}",
                    self.window
                )));
            }
            out.push((n - w) / s + 1);
        }
        Ok(out)
    }
}

/// Calls `f(output_index, window_input_indices)` for every output cell.
fn for_each_window(input: &[usize], out: &[usize], geom: &PoolGeometry, mut f: impl FnMut(usize, &[usize])) {
    let [ti, hi, wi] = [input[2], input[3], input[4]];
    let [to, ho, wo] = [out[2], out[3], out[4]];
    let mut idx = Vec::with_capacity(geom.window.iter().product());
    let mut o = 0;
    for bc in 0..input[0] * input[1] {
        let base = bc * ti * hi * wi;
        for t in 0..to {
            for h in 0..ho {
                for w in 0..wo {
                    idx.clear();
                    for dt in 0..geom.window[0] {
                        for dh in 0..geom.window[1] {
                            for dw in 0..geom.window[2] {
                                let (tt, hh, ww) = (
                                    t * geom.stride[0] + dt,
                                    h * geom.stride[1] + dh,
                                    w * geom.stride[2] + dw,
                                );
                                idx.push(base + (tt * hi + hh) * wi + ww);
                            }
                        }
                    }
                    f(o, &idx);
                    o += 1;
                }
            }
        }
    }
}

/// Max pooling. Also returns, per output cell, the flat input index of the
/// maximum (the first one on ties), used to route gradients.
pub fn maxpool3d(x: &Tensor, geom: &PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let shape = geom.output_shape(x.shape())?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let mut argmax = vec![0; n];
    let xs = x.data();
    for_each_window(x.shape(), &shape, geom, |o, idx| {
        let mut best = idx[0];
        for &i in &idx[1..] {
            if xs[i] > xs[best] {
                best = i;
            }
        }
        out[o] = xs[best];
        argmax[o] = best;
    });
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn maxpool3d_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "max-pool gradient has {} values for {} windows",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

pub fn avgpool3d(x: &Tensor, geom: &PoolGeometry) -> Result<Tensor> {
    let shape = geom.output_shape(x.shape())?;
    let mut out = vec![0.0; shape.iter().product()];
    let xs = x.data();
    for_each_window(x.shape(), &shape, geom, |o, idx| {
        out[o] = idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64;
    });
    Tensor::new(shape, out)
}

pub fn avgpool3d_backward(grad_out: &Tensor, input_shape: &[usize], geom: &PoolGeometry) -> Result<Tensor> {
    let shape = geom.output_shape(input_shape)?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "avg-pool gradient shape {:?}, expected {shape:?}",
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0; input_shape.iter().product()];
    let g = grad_out.data();
    for_each_window(input_shape, &shape, geom, |o, idx| {
        let share = g[o] / idx.len() as f64;
        idx.iter().for_each(|&i| gx[i] += share);
    });
    Tensor::new(input_shape.to_vec(), gx)
}

pub struct MaxPool3d {
    name: String,
    geom: PoolGeometry,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new(name: &str, geom: PoolGeometry) -> Self {
        Self {
            name: name.to_string(),
            geom,
            cache: None,
        }
    }
}

impl Layer for MaxPool3d {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_shape(input)
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (out, argmax) = maxpool3d(x, &self.geom)?;
        self.cache = Some((argmax, x.shape().to_vec()));
        Ok(out)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        maxpool3d_backward(grad_out, argmax, shape)
    }
}

pub struct AvgPool3d {
    name: String,
    geom: PoolGeometry,
    input_shape: Option<Vec<usize>>,
}

impl AvgPool3d {
    pub fn new(name: &str, geom: PoolGeometry) -> Self {
        Self {
            name: name.to_string(),
            geom,
            input_shape: None,
        }
    }
}

impl Layer for AvgPool3d {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_shape(input)
    }

    fn forward(&mut self, _store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        avgpool3d(x, &self.geom)
    }

    fn backward(&mut self, _store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        avgpool3d_backward(grad_out, shape, &self.geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_is_preserved() {
        let x = Tensor::filled(&[1, 2, 2, 4, 4], 3.5);
        let g = PoolGeometry::square([1, 2, 2]);
        let (m, _) = maxpool3d(&x, &g).unwrap();
        let a = avgpool3d(&x, &g).unwrap();
        assert_eq!(m.shape(), &[1, 2, 2, 2, 2]);
        assert!(m.data().iter().chain(a.data()).all(|&v| v == 3.5));
    }

    #[test]
    fn average_of_patch() {
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = avgpool3d(&x, &PoolGeometry::square([1, 2, 2])).unwrap();
        assert_eq!(a.data(), &[2.5]);
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 4.0, 4.0, 0.0]).unwrap();
        let (m, argmax) = maxpool3d(&x, &PoolGeometry::square([1, 2, 2])).unwrap();
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(argmax, vec![1]);
        let g = maxpool3d_backward(&Tensor::filled(&[1, 1, 1, 1, 1], 2.0), &argmax, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 1, 1, 3]);
        assert!(maxpool3d(&x, &PoolGeometry::square([1, 2, 2])).is_err());
        let g = PoolGeometry::square([1, 2, 2]);
        assert_eq!(g.output_shape(&[2, 3, 5, 5, 4]).unwrap(), vec![2, 3, 5, 2, 2]);
    }
}
