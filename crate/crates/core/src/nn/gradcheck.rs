//! Central finite-difference checks of every layer's backward pass.
//!
//! Each layer is wrapped in the scalar loss `L = sum(out * R)` for a fixed
//! random `R`, so `dL/d out = R` feeds the backward pass directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lstm::lstm_sequence_with_grads;
use super::{
    one_hot, softmax_cross_entropy, AvgPool3d, BatchNorm3d, BiLstm, Conv3d, Conv3dGeometry, Dense, Layer,
    LstmParams, MaxPool3d, Mode, ParamStore, PoolGeometry, SelfAttention, Tensor,
};
use crate::error::Result;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor in the relative error, so that near-zero gradients
/// are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

/// `|a - n| / max(|a| + |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape product")
}

/// Compares `analytic[i]` with `(f(i, +h) - f(i, -h)) / 2h` for every `i`.
fn compare(analytic: &[f64], mut loss_at: impl FnMut(usize, f64) -> Result<f64>) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (loss_at(i, STEP)? - loss_at(i, -STEP)?) / (2.0 * STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok((worst, analytic.len()))
}

/// Checks input and parameter gradients of a layer at input `x`.
pub fn check_layer(
    name: &str,
    layer: &mut dyn Layer,
    store: &mut ParamStore,
    x: &Tensor,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let out = layer.forward(store, x, Mode::Train)?;
    let r = random_tensor(out.shape(), rng);
    let dx = layer.backward(store, &r)?;
    let analytic_params: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let loss = |layer: &mut dyn Layer, store: &mut ParamStore, x: &Tensor| -> Result<f64> {
        Ok(layer.forward(store, x, Mode::Train)?.dot(&r))
    };

    let mut xp = x.clone();
    let (mut worst, mut count) = compare(dx.data(), |i, d| {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + d;
        let l = loss(layer, store, &xp);
        xp.data_mut()[i] = orig;
        l
    })?;
    let trainable: Vec<_> = store.ids().enumerate().filter(|&(k, _)| store.params()[k].trainable).collect();
    for (k, id) in trainable {
        let (w, n) = compare(&analytic_params[k], |i, d| {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + d;
            let l = loss(layer, store, x);
            store.value_mut(id).data_mut()[i] = orig;
            l
        })?;
        worst = worst.max(w);
        count += n;
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        n_checked: count,
    })
}

/// Full BPTT check of a single-direction LSTM over `t` steps.
pub fn check_lstm_sequence(t: usize, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let mut p = LstmParams::random(input, hidden, rng);
    // Nonzero biases and peepholes so every term is exercised.
    for f in p.fields_mut().into_iter().skip(8) {
        f.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let mut xs: Vec<f64> = (0..t * input).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..t * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, dxs, grads) = lstm_sequence_with_grads(&xs, &p, &r);
    let loss = |xs: &[f64], p: &LstmParams| -> f64 {
        let (hs, _, _) = lstm_sequence_with_grads(xs, p, &r);
        hs.iter().zip(&r).map(|(h, r)| h * r).sum()
    };
    let (mut worst, mut count) = compare(&dxs, |i, d| {
        let orig = xs[i];
        xs[i] = orig + d;
        let l = loss(&xs, &p);
        xs[i] = orig;
        Ok(l)
    })?;
    for f in 0..15 {
        let analytic = grads.fields()[f].clone();
        let (w, n) = compare(&analytic, |i, d| {
            let orig = p.fields()[f][i];
            p.fields_mut()[f][i] = orig + d;
            let l = loss(&xs, &p);
            p.fields_mut()[f][i] = orig;
            Ok(l)
        })?;
        worst = worst.max(w);
        count += n;
    }
    Ok(GradCheckReport {
        name: format!("lstm_step (T={t}, D={input}, H={hidden})"),
        max_rel_error: worst,
        n_checked: count,
    })
}

/// Gradient of mean softmax cross-entropy with respect to the logits.
pub fn check_softmax_xent(batch: usize, classes: usize, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let mut logits = random_tensor(&[batch, classes], rng);
    logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let y = one_hot(&labels, classes)?;
    let (_, grad) = softmax_cross_entropy(&logits, &y)?;
    let (worst, count) = compare(grad.data(), |i, d| {
        let orig = logits.data()[i];
        logits.data_mut()[i] = orig + d;
        let l = softmax_cross_entropy(&logits, &y).map(|(l, _)| l);
        logits.data_mut()[i] = orig;
        l
    })?;
    Ok(GradCheckReport {
        name: format!("softmax_xent (B={batch}, K={classes})"),
        max_rel_error: worst,
        n_checked: count,
    })
}

/// Runs every layer check on small randomized shapes.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let mut store = ParamStore::new();
    let geom = Conv3dGeometry {
        stride: [1, 2, 1],
        padding: [1, 0, 1],
    };
    let mut conv = Conv3d::new("conv", &mut store, 2, 3, [2, 2, 2], geom, &mut rng)?;
    perturb_params(&mut store, &mut rng);
    let x = random_tensor(&[1, 2, 4, 4, 4], &mut rng);
    reports.push(check_layer("conv3d", &mut conv, &mut store, &x, &mut rng)?);

    let mut store = ParamStore::new();
    let mut pw = Conv3d::new("pointwise", &mut store, 3, 2, [1, 1, 1], Conv3dGeometry::default(), &mut rng)?;
    perturb_params(&mut store, &mut rng);
    let x = random_tensor(&[2, 3, 2, 3, 2], &mut rng);
    reports.push(check_layer("pointwise conv", &mut pw, &mut store, &x, &mut rng)?);

    let mut store = ParamStore::new();
    let mut bn = BatchNorm3d::new("bn", &mut store, 2)?;
    perturb_params(&mut store, &mut rng);
    let x = random_tensor(&[2, 2, 2, 2, 2], &mut rng);
    reports.push(check_layer("batchnorm3d (train)", &mut bn, &mut store, &x, &mut rng)?);

    let mut store = ParamStore::new();
    let mut mp = MaxPool3d::new("maxpool", PoolGeometry::square([1, 2, 2]));
    let x = random_tensor(&[2, 2, 3, 4, 4], &mut rng);
    reports.push(check_layer("maxpool3d", &mut mp, &mut store, &x, &mut rng)?);

    let mut ap = AvgPool3d::new(
        "avgpool",
        PoolGeometry {
            window: [1, 2, 2],
            stride: [1, 1, 2],
        },
    );
    let x = random_tensor(&[2, 2, 3, 4, 4], &mut rng);
    reports.push(check_layer("avgpool3d", &mut ap, &mut store, &x, &mut rng)?);

    reports.push(check_lstm_sequence(3, 3, 4, &mut rng)?);

    let mut store = ParamStore::new();
    let mut bi = BiLstm::new("bilstm", &mut store, 3, 4, &mut rng)?;
    perturb_params(&mut store, &mut rng);
    let x = random_tensor(&[2, 4, 3], &mut rng);
    reports.push(check_layer("bilstm (T=4)", &mut bi, &mut store, &x, &mut rng)?);

    let mut store = ParamStore::new();
    let mut att = SelfAttention::new("attention");
    let x = random_tensor(&[1, 3, 4], &mut rng);
    reports.push(check_layer("self-attention (1,3,4)", &mut att, &mut store, &x, &mut rng)?);
    let x = random_tensor(&[2, 5, 3], &mut rng);
    reports.push(check_layer("self-attention (2,5,3)", &mut att, &mut store, &x, &mut rng)?);

    let mut store = ParamStore::new();
    let mut dense = Dense::new("dense", &mut store, 6, 4, &mut rng)?;
    perturb_params(&mut store, &mut rng);
    let x = random_tensor(&[3, 6], &mut rng);
    reports.push(check_layer("dense", &mut dense, &mut store, &x, &mut rng)?);

    reports.push(check_softmax_xent(2, 5, &mut rng)?);
    Ok(reports)
}

/// Replaces zero-initialised biases and unit scales with random values.
fn perturb_params(store: &mut ParamStore, rng: &mut impl Rng) {
    for p in store.params_mut().iter_mut().filter(|p| p.trainable) {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
}
