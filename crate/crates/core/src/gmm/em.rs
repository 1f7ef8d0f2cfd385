use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::{DiagGmm, Frames};
use crate::error::{Error, Result};
use crate::seed;

/// Frames per accumulation block. Blocks are reduced in index order so the
/// result does not depend on the thread count.
const BLOCK: usize = 256;
/// Frames used for k-means++ seeding.
const SEED_SUBSAMPLE: usize = 2048;
/// Relative variance floor (times the global per-dimension variance).
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-3;
/// Absolute lower bound on the floor for constant dimensions.
pub const VARIANCE_FLOOR_MIN: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    /// Stop when the per-frame log-likelihood gain drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_components: 64,
            max_iters: 100,
            tol: 1e-6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: DiagGmm,
    /// Total log-likelihood evaluated at the start of each iteration, plus the final model.
    pub log_likelihoods: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Every frame was identical while more than one component was requested.
    pub degenerate: bool,
    pub variance_floor: Vec<f64>,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("at least one evaluation")
    }
}

fn global_moments(frames: &Frames) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (frames.len() as f64, frames.dim());
    let mut mean = vec![0.0; d];
    for x in frames.rows() {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in frames.rows() {
        var.iter_mut()
            .zip(x)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ centers drawn from a seeded subsample.
fn kmeans_pp(frames: &Frames, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = frames.len();
    let pool: Vec<usize> = if n > SEED_SUBSAMPLE {
        let mut idx = sample(rng, n, SEED_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let mut centers = vec![frames.row(pool[rng.gen_range(0..pool.len())]).to_vec()];
    let mut d2: Vec<f64> = pool.iter().map(|&i| sq_dist(frames.row(i), &centers[0])).collect();
    while centers.len() < k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.gen_range(0..pool.len()),
        };
        let c = frames.row(pool[pick]).to_vec();
        for (d, &i) in d2.iter_mut().zip(&pool) {
            *d = d.min(sq_dist(frames.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// One hard-assignment pass from the seeded centers.
fn hard_init(frames: &Frames, centers: &[Vec<f64>], global_var: &[f64], floor: &[f64]) -> Result<DiagGmm> {
    let (k, d) = (centers.len(), frames.dim());
    let mut count = vec![0usize; k];
    let mut sum = vec![0.0; k * d];
    let assign: Vec<usize> = frames
        .rows()
        .map(|x| {
            let best = (0..k)
                .map(|g| sq_dist(x, &centers[g]))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (g, dist)| if dist < acc.1 { (g, dist) } else { acc })
                .0;
            count[best] += 1;
            sum[best * d..(best + 1) * d].iter_mut().zip(x).for_each(|(s, v)| *s += v);
            best
        })
        .collect();
    let mut means = vec![0.0; k * d];
    for g in 0..k {
        for j in 0..d {
            means[g * d + j] = if count[g] > 0 {
                sum[g * d + j] / count[g] as f64
            } else {
                centers[g][j]
            };
        }
    }
    let mut sq = vec![0.0; k * d];
    for (x, &g) in frames.rows().zip(&assign) {
        for j in 0..d {
            let z = x[j] - means[g * d + j];
            sq[g * d + j] += z * z;
        }
    }
    let mut variances = vec![0.0; k * d];
    for g in 0..k {
        for j in 0..d {
            let v = if count[g] > 1 {
                sq[g * d + j] / count[g] as f64
            } else {
                global_var[j]
            };
            variances[g * d + j] = v.max(floor[j]);
        }
    }
    // Empty clusters keep a token weight so EM can still move them.
    let pseudo: Vec<f64> = count.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = pseudo.iter().sum();
    let weights = pseudo.iter().map(|c| c / total).collect();
    DiagGmm::new(weights, means, variances, d)
}

/// Fills `resp` (`N x G`) with posteriors and returns the total log-likelihood.
fn e_step(gmm: &DiagGmm, frames: &Frames, resp: &mut [f64]) -> f64 {
    let (g, d) = (gmm.n_components(), frames.dim());
    let scorer = gmm.scorer();
    let partial: Vec<f64> = frames
        .as_slice()
        .par_chunks(BLOCK * d)
        .zip(resp.par_chunks_mut(BLOCK * g))
        .map(|(xs, rs)| {
            xs.chunks_exact(d)
                .zip(rs.chunks_exact_mut(g))
                .map(|(x, r)| scorer.responsibilities(x, r))
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

fn reduce_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    parts.into_iter().fold(vec![0.0; len], |mut acc, p| {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        acc
    })
}

/// Closed-form diagonal M-step with variance flooring.
fn m_step(prev: &DiagGmm, frames: &Frames, resp: &[f64], floor: &[f64]) -> Result<DiagGmm> {
    let (k, d, n) = (prev.n_components(), frames.dim(), frames.len());
    let first = frames
        .as_slice()
        .par_chunks(BLOCK * d)
        .zip(resp.par_chunks(BLOCK * k))
        .map(|(xs, rs)| {
            let mut acc = vec![0.0; k + k * d];
            for (x, r) in xs.chunks_exact(d).zip(rs.chunks_exact(k)) {
                for g in 0..k {
                    acc[g] += r[g];
                    for j in 0..d {
                        acc[k + g * d + j] += r[g] * x[j];
                    }
                }
            }
            acc
        })
        .collect();
    let first = reduce_in_order(first, k + k * d);
    let (occ, sums) = first.split_at(k);

    let mut means = prev.means().to_vec();
    for g in 0..k {
        if occ[g] > 1e-12 {
            for j in 0..d {
                means[g * d + j] = sums[g * d + j] / occ[g];
            }
        }
    }
    let second = frames
        .as_slice()
        .par_chunks(BLOCK * d)
        .zip(resp.par_chunks(BLOCK * k))
        .map(|(xs, rs)| {
            let mut acc = vec![0.0; k * d];
            for (x, r) in xs.chunks_exact(d).zip(rs.chunks_exact(k)) {
                for g in 0..k {
                    for j in 0..d {
                        let z = x[j] - means[g * d + j];
                        acc[g * d + j] += r[g] * z * z;
                    }
                }
            }
            acc
        })
        .collect();
    let second = reduce_in_order(second, k * d);

    let mut variances = prev.variances().to_vec();
    for g in 0..k {
        if occ[g] > 1e-12 {
            for j in 0..d {
                variances[g * d + j] = (second[g * d + j] / occ[g]).max(floor[j]);
            }
        }
    }
    let mut weights: Vec<f64> = occ.iter().map(|o| o / n as f64).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    DiagGmm::new(weights, means, variances, d)
}

/// Fits a diagonal GMM by EM.
///
/// Initialisation: k-means++ seeding on a subsample, one hard-assignment
/// pass, then soft EM until `max_iters` M-steps or until the per-frame
/// log-likelihood gain falls below `tol`.
pub fn em_fit(frames: &Frames, cfg: &EmConfig) -> Result<EmFit> {
    let (n, k) = (frames.len(), cfg.n_components);
    if k == 0 {
        return Err(Error::InvalidArgument("GMM needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Data(format!("{n} frames cannot fit {k} components")));
    }
    let (_, global_var) = global_moments(frames);
    let floor: Vec<f64> = global_var
        .iter()
        .map(|v| (VARIANCE_FLOOR_RATIO * v).max(VARIANCE_FLOOR_MIN))
        .collect();
    let degenerate = k > 1 && frames.rows().all(|x| x == frames.row(0));

    let mut rng = seed::rng_for(cfg.seed, &[0x656d]);
    let centers = kmeans_pp(frames, k, &mut rng);
    let mut gmm = hard_init(frames, &centers, &global_var, &floor)?;

    let mut resp = vec![0.0; n * k];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let ll = e_step(&gmm, frames, &mut resp);
        if let Some(&prev) = history.last() {
            if (ll - prev) / (n as f64) < cfg.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if iterations == cfg.max_iters {
            break;
        }
        gmm = m_step(&gmm, frames, &resp, &floor)?;
        iterations += 1;
    }
    Ok(EmFit {
        gmm,
        log_likelihoods: history,
        iterations,
        converged,
        degenerate,
        variance_floor: floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_frames(n: usize, d: usize, seed: u64) -> Frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d)
            .map(|i| rng.sample::<f64, _>(StandardNormal) * (1.0 + (i % d) as f64) + (i % d) as f64)
            .collect();
        Frames::new(data, d).unwrap()
    }

    #[test]
    fn single_component_is_closed_form() {
        let frames = gaussian_frames(200, 3, 1);
        let fit = em_fit(
            &frames,
            &EmConfig {
                n_components: 1,
                ..EmConfig::default()
            },
        )
        .unwrap();
        assert_eq!(fit.iterations, 1);
        assert_eq!(fit.gmm.weights(), &[1.0]);
        let n = frames.len() as f64;
        for j in 0..3 {
            let mean: f64 = frames.rows().map(|x| x[j]).sum::<f64>() / n;
            let var: f64 = frames.rows().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
            assert!((fit.gmm.mean(0)[j] - mean).abs() < 1e-12);
            assert!((fit.gmm.variance(0)[j] - var.max(fit.variance_floor[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_two_separated_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..1000)
            .map(|i| rng.sample::<f64, _>(StandardNormal) + if i < 500 { 0.0 } else { 10.0 })
            .collect();
        let frames = Frames::new(data, 1).unwrap();
        let fit = em_fit(
            &frames,
            &EmConfig {
                n_components: 2,
                seed: 5,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let mut comps: Vec<(f64, f64)> = (0..2).map(|g| (fit.gmm.mean(g)[0], fit.gmm.weights()[g])).collect();
        comps.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((comps[0].0 - 0.0).abs() < 0.2, "{comps:?}");
        assert!((comps[1].0 - 10.0).abs() < 0.2, "{comps:?}");
        assert!((comps[0].1 - 0.5).abs() < 0.05 && (comps[1].1 - 0.5).abs() < 0.05);
    }

    #[test]
    fn likelihood_never_decreases() {
        for seed in 0..10 {
            let frames = gaussian_frames(300, 4, seed);
            let fit = em_fit(
                &frames,
                &EmConfig {
                    n_components: 4,
                    max_iters: 50,
                    tol: 0.0,
                    seed,
                },
            )
            .unwrap();
            for w in fit.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn degenerate_input_is_flagged_not_fatal() {
        let frames = Frames::new(vec![1.5; 40], 2).unwrap();
        let fit = em_fit(
            &frames,
            &EmConfig {
                n_components: 3,
                ..EmConfig::default()
            },
        )
        .unwrap();
        assert!(fit.degenerate);
        assert!(fit.gmm.variances().iter().all(|v| *v == VARIANCE_FLOOR_MIN));
    }

    #[test]
    fn too_few_frames() {
        let frames = gaussian_frames(3, 2, 0);
        let cfg = EmConfig {
            n_components: 4,
            ..EmConfig::default()
        };
        assert!(matches!(em_fit(&frames, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let frames = gaussian_frames(2000, 3, 4);
        let cfg = EmConfig {
            n_components: 5,
            max_iters: 20,
            ..EmConfig::default()
        };
        let a = em_fit(&frames, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| em_fit(&frames, &cfg)).unwrap();
        assert_eq!(a.gmm, b.gmm);
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
    }
}
