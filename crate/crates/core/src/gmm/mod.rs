//! Diagonal-covariance Gaussian mixtures: EM training of the universal
//! background model, MAP mean adaptation per time segment, and assembly of
//! the normalized temporal mean tensor (`M x G x T`).

mod em;
mod io;
mod map;
mod sgmm;

pub use em::{em_fit, EmConfig, EmFit};
pub use io::{read_sgmm, read_ubm, write_sgmm, write_ubm, DGMM_MAGIC, SGMM_MAGIC};
pub use map::{map_adapt_means, map_statistics, minmax_normalize, segment_frames, MapStats, SegmentedMfcc};
pub use sgmm::{extract_sgmm, extract_sgmm_segments, SgmmConfig, SgmmMeta, SgmmTensor};

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A set of feature vectors stored frame-major: `len()` rows of `dim()` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    data: Vec<f64>,
    dim: usize,
}

impl Frames {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values cannot form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged frame rows".into()));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Appends all rows of `other`.
    pub fn extend(&mut self, other: &Frames) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Shape(format!(
                "cannot append dimension {} frames to dimension {}",
                other.dim, self.dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }
}

impl From<&crate::dsp::MfccMatrix> for Frames {
    fn from(m: &crate::dsp::MfccMatrix) -> Self {
        Frames {
            data: m.frames_major(),
            dim: m.n_ceps(),
        }
    }
}

/// Mixture of `G` Gaussians with diagonal covariances over `M` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
}

impl DiagGmm {
    /// `means` and `variances` are `G x M` row-major.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let g = weights.len();
        if g == 0 || dim == 0 || means.len() != g * dim || variances.len() != g * dim {
            return Err(Error::Shape(format!(
                "GMM with {g} weights, {} means, {} variances, dim {dim}",
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("GMM weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("GMM weights sum to {total}")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite GMM mean".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("GMM variances must be finite and > 0".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row-major `G x M`.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Row-major `G x M`.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, g: usize) -> &[f64] {
        &self.means[g * self.dim..(g + 1) * self.dim]
    }

    pub fn variance(&self, g: usize) -> &[f64] {
        &self.variances[g * self.dim..(g + 1) * self.dim]
    }

    pub(crate) fn scorer(&self) -> Scorer<'_> {
        let log_norm = (0..self.n_components())
            .map(|g| {
                self.weights[g].ln()
                    - 0.5
                        * self
                            .variance(g)
                            .iter()
                            .map(|v| (2.0 * PI * v).ln())
                            .sum::<f64>()
            })
            .collect();
        let inv_var = self.variances.iter().map(|v| 1.0 / v).collect();
        Scorer {
            gmm: self,
            log_norm,
            inv_var,
        }
    }
}

/// Precomputed per-component constants for evaluating log densities.
pub(crate) struct Scorer<'a> {
    gmm: &'a DiagGmm,
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl Scorer<'_> {
    /// Writes `ln w_g + ln N(x; mu_g, var_g)` into `out` and returns their log-sum-exp.
    pub fn log_joint(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.gmm.dim;
        for (g, o) in out.iter_mut().enumerate() {
            let mu = &self.gmm.means[g * d..(g + 1) * d];
            let iv = &self.inv_var[g * d..(g + 1) * d];
            let q: f64 = x
                .iter()
                .zip(mu)
                .zip(iv)
                .map(|((xi, mi), ivi)| (xi - mi) * (xi - mi) * ivi)
                .sum();
            *o = self.log_norm[g] - 0.5 * q;
        }
        log_sum_exp(out)
    }

    /// Posterior responsibilities of each component for `x`; returns the frame's log-likelihood.
    pub fn responsibilities(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let lse = self.log_joint(x, out);
        for o in out.iter_mut() {
            *o = (*o - lse).exp();
        }
        lse
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Total log-likelihood `sum_i log sum_g w_g N(x_i; mu_g, var_g)`.
pub fn log_likelihood(gmm: &DiagGmm, frames: &Frames) -> Result<f64> {
    if frames.dim() != gmm.dim() {
        return Err(Error::Shape(format!(
            "frames of dimension {} scored against a dimension {} GMM",
            frames.dim(),
            gmm.dim()
        )));
    }
    let scorer = gmm.scorer();
    let mut buf = vec![0.0; gmm.n_components()];
    Ok(frames.rows().map(|x| scorer.log_joint(x, &mut buf)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_at_mode() {
        let gmm = DiagGmm::new(vec![1.0], vec![0.5, -1.0], vec![1.0, 1.0], 2).unwrap();
        let frames = Frames::new(vec![0.5, -1.0], 2).unwrap();
        let ll = log_likelihood(&gmm, &frames).unwrap();
        assert!((ll - (1.0 / (2.0 * PI)).ln()).abs() < 1e-12);
    }

    #[test]
    fn additive_over_frames() {
        let gmm = DiagGmm::new(vec![0.3, 0.7], vec![0.0, 1.0, 2.0, -1.0], vec![1.0, 0.5, 2.0, 1.5], 2).unwrap();
        let f = Frames::new(vec![0.1, 0.2, 1.5, -0.3, 3.0, 0.0], 2).unwrap();
        let mut doubled = f.clone();
        doubled.extend(&f).unwrap();
        let a = log_likelihood(&gmm, &f).unwrap();
        let b = log_likelihood(&gmm, &doubled).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, d) = (3, 4);
        let mut w: Vec<f64> = (0..g).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let mu: Vec<f64> = (0..g * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..g * d).map(|_| rng.gen_range(0.5..2.0)).collect();
        let gmm = DiagGmm::new(w.clone(), mu.clone(), var.clone(), d).unwrap();
        let x: Vec<f64> = (0..10 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let frames = Frames::new(x.clone(), d).unwrap();
        let naive: f64 = x
            .chunks(d)
            .map(|xi| {
                (0..g)
                    .map(|k| {
                        let mut p = w[k];
                        for j in 0..d {
                            let v = var[k * d + j];
                            let z = xi[j] - mu[k * d + j];
                            p *= (-z * z / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                        }
                        p
                    })
                    .sum::<f64>()
                    .ln()
            })
            .sum();
        assert!((log_likelihood(&gmm, &frames).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let gmm = DiagGmm::new(vec![1.0], vec![0.0; 3], vec![1.0; 3], 3).unwrap();
        let frames = Frames::new(vec![0.0; 4], 2).unwrap();
        assert!(matches!(log_likelihood(&gmm, &frames), Err(Error::Shape(_))));
        assert!(DiagGmm::new(vec![0.5, 0.4], vec![0.0; 2], vec![1.0; 2], 1).is_err());
        assert!(DiagGmm::new(vec![1.0], vec![0.0], vec![0.0], 1).is_err());
        assert!(Frames::new(vec![0.0; 5], 2).is_err());
    }

    #[test]
    fn log_sum_exp_handles_zero_weights() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[f64::NEG_INFINITY, 0.0]) - 0.0).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
