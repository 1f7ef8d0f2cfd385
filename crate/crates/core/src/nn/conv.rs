use rand::Rng;

use super::{Layer, Mode, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding per (T, H, W) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dGeometry {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
        }
    }
}

struct Dims {
    b: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
}

fn dims(x: &[usize], k: &[usize], geom: &Conv3dGeometry) -> Result<Dims> {
    if x.len() != 5 || k.len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d needs [B,C,T,H,W] input and [Co,Ci,kT,kH,kW] kernel, got {x:?} and {k:?}"
        )));
    }
    if x[1] != k[1] {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            x[1], k[1]
        )));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = x[2 + a] + 2 * geom.padding[a];
        if geom.stride[a] == 0 || k[2 + a] == 0 || k[2 + a] > padded {
            return Err(Error::Shape(format!(
                "kernel {k:?} does not fit padded input {x:?} on axis {a}"
            )));
        }
        out[a] = (padded - k[2 + a]) / geom.stride[a] + 1;
    }
    Ok(Dims {
        b: x[0],
        ci: x[1],
        co: k[0],
        input: [x[2], x[3], x[4]],
        kernel: [k[2], k[3], k[4]],
        out,
    })
}

/// Output positions `o` on one axis for which `o * stride + tap - pad` is in range.
fn valid_range(out: usize, input: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // o * stride + tap >= pad  and  o * stride + tap - pad < input
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi_excl = if input + pad > tap {
        ((input + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// Visits every (output, input, weight) index triple that contributes to the convolution.
#[inline(always)]
fn for_each_tap(d: &Dims, geom: &Conv3dGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [ti_n, hi_n, wi_n] = d.input;
    let [kt_n, kh_n, kw_n] = d.kernel;
    let [to_n, ho_n, wo_n] = d.out;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    for b in 0..d.b {
        for co in 0..d.co {
            let out_base = (b * d.co + co) * to_n * ho_n * wo_n;
            for ci in 0..d.ci {
                let in_base = (b * d.ci + ci) * ti_n * hi_n * wi_n;
                let k_base = (co * d.ci + ci) * kt_n * kh_n * kw_n;
                for kt in 0..kt_n {
                    let (t_lo, t_hi) = valid_range(to_n, ti_n, st, kt, pt);
                    for kh in 0..kh_n {
                        let (h_lo, h_hi) = valid_range(ho_n, hi_n, sh, kh, ph);
                        for kw in 0..kw_n {
                            let (w_lo, w_hi) = valid_range(wo_n, wi_n, sw, kw, pw);
                            let ki = k_base + (kt * kh_n + kh) * kw_n + kw;
                            for to in t_lo..t_hi {
                                let ti = to * st + kt - pt;
                                for ho in h_lo..h_hi {
                                    let hi = ho * sh + kh - ph;
                                    let o_row = out_base + (to * ho_n + ho) * wo_n;
                                    let i_row = in_base + (ti * hi_n + hi) * wi_n;
                                    for wo in w_lo..w_hi {
                                        f(o_row + wo, i_row + wo * sw + kw - pw, ki);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Linear 3D convolution `W * X + b` (no activation).
///
/// `x` is `[B, C_in, T, H, W]`, `kernel` is `[C_out, C_in, kT, kH, kW]`,
/// `bias` has `C_out` entries. Output extent per axis is
/// `(in + 2 pad - k) / stride + 1`.
pub fn conv3d_forward(x: &Tensor, kernel: &Tensor, bias: &[f64], geom: &Conv3dGeometry) -> Result<Tensor> {
    let d = dims(x.shape(), kernel.shape(), geom)?;
    if bias.len() != d.co {
        return Err(Error::Shape(format!("{} biases for {} output channels", bias.len(), d.co)));
    }
    let spatial: usize = d.out.iter().product();
    let mut out = vec![0.0; d.b * d.co * spatial];
    for (i, chunk) in out.chunks_exact_mut(spatial).enumerate() {
        chunk.fill(bias[i % d.co]);
    }
    let (xs, ks) = (x.data(), kernel.data());
    for_each_tap(&d, geom, |o, i, k| out[o] += ks[k] * xs[i]);
    Tensor::new(vec![d.b, d.co, d.out[0], d.out[1], d.out[2]], out)
}

/// Gradients `(d_x, d_kernel, d_bias)` of the convolution given `d_out`.
pub fn conv3d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    kernel: &Tensor,
    geom: &Conv3dGeometry,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = dims(x.shape(), kernel.shape(), geom)?;
    let expected = [d.b, d.co, d.out[0], d.out[1], d.out[2]];
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv3d gradient has shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (xs, ks, gs) = (x.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; xs.len()];
    let mut gk = vec![0.0; ks.len()];
    for_each_tap(&d, geom, |o, i, k| {
        gx[i] += ks[k] * gs[o];
        gk[k] += gs[o] * xs[i];
    });
    let spatial: usize = d.out.iter().product();
    let mut gb = vec![0.0; d.co];
    for (i, chunk) in gs.chunks_exact(spatial).enumerate() {
        gb[i % d.co] += chunk.iter().sum::<f64>();
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        gb,
    ))
}

/// 3D convolution layer. A `1x1x1` kernel gives the pointwise variant.
pub struct Conv3d {
    name: String,
    kernel: ParamId,
    bias: ParamId,
    geom: Conv3dGeometry,
    in_channels: usize,
    out_channels: usize,
    kernel_dims: [usize; 3],
    cached_input: Option<Tensor>,
}

impl Conv3d {
    /// Kernel drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`; bias starts at zero.
    pub fn new(
        name: &str,
        store: &mut ParamStore,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kernel_dims = kernel;
        let fan_in = (in_channels * kernel.iter().product::<usize>()) as f64;
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let kernel = store.add_uniform(&format!("{name}.weight"), &shape, (6.0 / fan_in).sqrt(), rng)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            name: name.to_string(),
            kernel,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel_dims,
            cached_input: None,
        })
    }
}

impl Layer for Conv3d {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [kt, kh, kw] = self.kernel_dims;
        let d = dims(input, &[self.out_channels, self.in_channels, kt, kh, kw], &self.geom)?;
        Ok(vec![d.b, d.co, d.out[0], d.out[1], d.out[2]])
    }

    fn forward(&mut self, store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = conv3d_forward(x, store.value(self.kernel), store.value(self.bias).data(), &self.geom)?;
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        let (gx, gk, gb) = conv3d_backward(grad_out, x, store.value(self.kernel), &self.geom)?;
        store.grad_mut(self.kernel).add_assign(&gk)?;
        store
            .grad_mut(self.bias)
            .data_mut()
            .iter_mut()
            .zip(gb)
            .for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}
