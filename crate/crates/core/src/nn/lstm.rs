use rand::Rng;

use super::{Layer, Mode, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Peephole LSTM weights for one direction.
///
/// Input weights are `H x D`, recurrent weights `H x H`, peepholes and
/// biases length `H`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub w_ix: Vec<f64>,
    pub w_fx: Vec<f64>,
    pub w_ox: Vec<f64>,
    pub w_cx: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_fh: Vec<f64>,
    pub w_oh: Vec<f64>,
    pub w_ch: Vec<f64>,
    pub w_ic: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub w_oc: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
}

const FIELD_NAMES: [&str; 15] = [
    "w_ix", "w_fx", "w_ox", "w_cx", "w_ih", "w_fh", "w_oh", "w_ch", "w_ic", "w_fc", "w_oc", "b_i", "b_f", "b_o", "b_c",
];

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let (hd, hh, h) = (vec![0.0; hidden * input], vec![0.0; hidden * hidden], vec![0.0; hidden]);
        Self {
            input,
            hidden,
            w_ix: hd.clone(),
            w_fx: hd.clone(),
            w_ox: hd.clone(),
            w_cx: hd,
            w_ih: hh.clone(),
            w_fh: hh.clone(),
            w_oh: hh.clone(),
            w_ch: hh,
            w_ic: h.clone(),
            w_fc: h.clone(),
            w_oc: h.clone(),
            b_i: h.clone(),
            b_f: h.clone(),
            b_o: h.clone(),
            b_c: h,
        }
    }

    /// Weights from `U(-1/sqrt(H), 1/sqrt(H))`, biases zero.
    pub fn random(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        for (i, field) in p.fields_mut().into_iter().enumerate() {
            if i < 11 {
                field.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
            }
        }
        p
    }

    pub fn field_names() -> &'static [&'static str; 15] {
        &FIELD_NAMES
    }

    /// Shape of each field, in [`field_names`](Self::field_names) order.
    pub fn field_shapes(&self) -> [Vec<usize>; 15] {
        let (d, h) = (self.input, self.hidden);
        std::array::from_fn(|i| match i {
            0..=3 => vec![h, d],
            4..=7 => vec![h, h],
            _ => vec![h],
        })
    }

    pub fn fields(&self) -> [&Vec<f64>; 15] {
        [
            &self.w_ix, &self.w_fx, &self.w_ox, &self.w_cx, &self.w_ih, &self.w_fh, &self.w_oh, &self.w_ch,
            &self.w_ic, &self.w_fc, &self.w_oc, &self.b_i, &self.b_f, &self.b_o, &self.b_c,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 15] {
        [
            &mut self.w_ix, &mut self.w_fx, &mut self.w_ox, &mut self.w_cx, &mut self.w_ih, &mut self.w_fh,
            &mut self.w_oh, &mut self.w_ch, &mut self.w_ic, &mut self.w_fc, &mut self.w_oc, &mut self.b_i,
            &mut self.b_f, &mut self.b_o, &mut self.b_c,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.fields().iter().map(|f| f.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, field), shape) in FIELD_NAMES.iter().zip(self.fields()).zip(self.field_shapes()) {
            let n: usize = shape.iter().product();
            if field.len() != n {
                return Err(Error::Shape(format!(
                    "LSTM {name} has {} values, expected {n} for D={} H={}",
                    field.len(),
                    self.input,
                    self.hidden
                )));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W v` for a row-major `rows x v.len()` matrix.
fn matvec_acc(out: &mut [f64], w: &[f64], v: &[f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ u` for a row-major `u.len() x out.len()` matrix.
fn matvec_t_acc(out: &mut [f64], w: &[f64], u: &[f64]) {
    let cols = out.len();
    for (&ui, row) in u.iter().zip(w.chunks_exact(cols)) {
        if ui != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += ui * a);
        }
    }
}

/// `g += u vᵀ`.
fn outer_acc(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (&ui, row) in u.iter().zip(g.chunks_exact_mut(cols)) {
        row.iter_mut().zip(v).for_each(|(a, b)| *a += ui * b);
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
}

fn step_cached(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> StepCache {
    let h = p.hidden;
    let gate = |wx: &[f64], wh: &[f64], b: &[f64]| {
        let mut a = b.to_vec();
        matvec_acc(&mut a, wx, x);
        matvec_acc(&mut a, wh, h_prev);
        a
    };
    let mut i = gate(&p.w_ix, &p.w_ih, &p.b_i);
    let mut f = gate(&p.w_fx, &p.w_fh, &p.b_f);
    let mut g = gate(&p.w_cx, &p.w_ch, &p.b_c);
    let mut o = gate(&p.w_ox, &p.w_oh, &p.b_o);
    let mut c = vec![0.0; h];
    for k in 0..h {
        i[k] = sigmoid(i[k] + p.w_ic[k] * c_prev[k]);
        f[k] = sigmoid(f[k] + p.w_fc[k] * c_prev[k]);
        g[k] = g[k].tanh();
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        // The output gate looks at the updated cell state.
        o[k] = sigmoid(o[k] + p.w_oc[k] * c[k]);
    }
    StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        o,
        g,
        c,
    }
}

impl StepCache {
    fn h(&self) -> Vec<f64> {
        self.o.iter().zip(&self.c).map(|(o, c)| o * c.tanh()).collect()
    }

    /// Returns `(dx, dh_prev, dc_prev)` and accumulates weight gradients.
    fn backward(&self, dh: &[f64], dc_next: &[f64], p: &LstmParams, grads: &mut LstmParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = p.hidden;
        let (mut da_i, mut da_f, mut da_o, mut da_g) = (vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]);
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let tc = self.c[k].tanh();
            da_o[k] = dh[k] * tc * self.o[k] * (1.0 - self.o[k]);
            let dc = dc_next[k] + dh[k] * self.o[k] * (1.0 - tc * tc) + da_o[k] * p.w_oc[k];
            da_i[k] = dc * self.g[k] * self.i[k] * (1.0 - self.i[k]);
            da_f[k] = dc * self.c_prev[k] * self.f[k] * (1.0 - self.f[k]);
            da_g[k] = dc * self.i[k] * (1.0 - self.g[k] * self.g[k]);
            dc_prev[k] = dc * self.f[k] + da_i[k] * p.w_ic[k] + da_f[k] * p.w_fc[k];
            grads.w_ic[k] += da_i[k] * self.c_prev[k];
            grads.w_fc[k] += da_f[k] * self.c_prev[k];
            grads.w_oc[k] += da_o[k] * self.c[k];
            grads.b_i[k] += da_i[k];
            grads.b_f[k] += da_f[k];
            grads.b_o[k] += da_o[k];
            grads.b_c[k] += da_g[k];
        }
        outer_acc(&mut grads.w_ix, &da_i, &self.x);
        outer_acc(&mut grads.w_fx, &da_f, &self.x);
        outer_acc(&mut grads.w_ox, &da_o, &self.x);
        outer_acc(&mut grads.w_cx, &da_g, &self.x);
        outer_acc(&mut grads.w_ih, &da_i, &self.h_prev);
        outer_acc(&mut grads.w_fh, &da_f, &self.h_prev);
        outer_acc(&mut grads.w_oh, &da_o, &self.h_prev);
        outer_acc(&mut grads.w_ch, &da_g, &self.h_prev);
        let mut dx = vec![0.0; p.input];
        let mut dh_prev = vec![0.0; h];
        for (wx, wh, da) in [
            (&p.w_ix, &p.w_ih, &da_i),
            (&p.w_fx, &p.w_fh, &da_f),
            (&p.w_ox, &p.w_oh, &da_o),
            (&p.w_cx, &p.w_ch, &da_g),
        ] {
            matvec_t_acc(&mut dx, wx, da);
            matvec_t_acc(&mut dh_prev, wh, da);
        }
        (dx, dh_prev, dc_prev)
    }
}

/// One peephole LSTM step, returning `(h_t, C_t)`.
pub fn lstm_step(x: &[f64], h_prev: &[f64], c_prev: &[f64], params: &LstmParams) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    if x.len() != params.input || h_prev.len() != params.hidden || c_prev.len() != params.hidden {
        return Err(Error::Shape(format!(
            "lstm_step got x={} h={} c={} for D={} H={}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.input,
            params.hidden
        )));
    }
    let cache = step_cached(x, h_prev, c_prev, params);
    Ok((cache.h(), cache.c))
}

/// Runs a zero-initialised LSTM over `T x D` rows, returning `T x H` outputs.
fn run_sequence(xs: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<StepCache>) {
    let mut h = vec![0.0; p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut hs = Vec::with_capacity(xs.len() / p.input.max(1) * p.hidden);
    let mut caches = Vec::new();
    for x in xs.chunks_exact(p.input) {
        let cache = step_cached(x, &h, &c, p);
        h = cache.h();
        c.clone_from(&cache.c);
        hs.extend_from_slice(&h);
        caches.push(cache);
    }
    (hs, caches)
}

/// Backpropagation through time. `dhs` is `T x H`; returns `T x D`.
fn backward_sequence(caches: &[StepCache], dhs: &[f64], p: &LstmParams, grads: &mut LstmParams) -> Vec<f64> {
    let (h, d) = (p.hidden, p.input);
    let mut dxs = vec![0.0; caches.len() * d];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for (t, cache) in caches.iter().enumerate().rev() {
        let dh: Vec<f64> = dhs[t * h..(t + 1) * h].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dx, dh_prev, dc_prev) = cache.backward(&dh, &dc_next, p, grads);
        dxs[t * d..(t + 1) * d].copy_from_slice(&dx);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dxs
}

/// Outputs of a zero-initialised LSTM over `T x D` rows, plus the input
/// and parameter gradients for upstream gradient `dhs` (`T x H`).
pub(crate) fn lstm_sequence_with_grads(xs: &[f64], p: &LstmParams, dhs: &[f64]) -> (Vec<f64>, Vec<f64>, LstmParams) {
    let (hs, caches) = run_sequence(xs, p);
    let mut grads = LstmParams::zeros(p.input, p.hidden);
    let dxs = backward_sequence(&caches, dhs, p, &mut grads);
    (hs, dxs, grads)
}

fn reversed_rows(xs: &[f64], width: usize) -> Vec<f64> {
    xs.chunks_exact(width).rev().flatten().copied().collect()
}

fn check_seq(seq: &Tensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<(usize, usize, usize)> {
    seq.expect_rank(3, "bilstm")?;
    fwd.validate()?;
    bwd.validate()?;
    let (b, t, d) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    if t == 0 {
        return Err(Error::Shape("bilstm needs at least one time step".into()));
    }
    if fwd.input != d || bwd.input != d || fwd.hidden != bwd.hidden {
        return Err(Error::Shape(format!(
            "bilstm input width {d} does not match directions (D={}/{}, H={}/{})",
            fwd.input, bwd.input, fwd.hidden, bwd.hidden
        )));
    }
    Ok((b, t, d))
}

struct BiCache {
    fwd: Vec<StepCache>,
    bwd: Vec<StepCache>,
}

fn bilstm_cached(seq: &Tensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<(Tensor, Vec<BiCache>)> {
    let (b, t, d) = check_seq(seq, fwd, bwd)?;
    let h = fwd.hidden;
    let mut out = vec![0.0; b * t * 2 * h];
    let mut caches = Vec::with_capacity(b);
    for (bi, xs) in seq.data().chunks_exact(t * d).enumerate() {
        let (hf, cf) = run_sequence(xs, fwd);
        let (hb, cb) = run_sequence(&reversed_rows(xs, d), bwd);
        for s in 0..t {
            let row = &mut out[(bi * t + s) * 2 * h..(bi * t + s + 1) * 2 * h];
            row[..h].copy_from_slice(&hf[s * h..(s + 1) * h]);
            let r = t - 1 - s;
            row[h..].copy_from_slice(&hb[r * h..(r + 1) * h]);
        }
        caches.push(BiCache { fwd: cf, bwd: cb });
    }
    Ok((Tensor::new(vec![b, t, 2 * h], out)?, caches))
}

/// Bidirectional LSTM over `[B, T, D]`, giving `[B, T, 2H]` with the
/// forward half first at each step.
pub fn bilstm_forward(seq: &Tensor, fwd: &LstmParams, bwd: &LstmParams) -> Result<Tensor> {
    bilstm_cached(seq, fwd, bwd).map(|(out, _)| out)
}

/// BiLSTM layer whose two directions live in a [`ParamStore`].
pub struct BiLstm {
    name: String,
    input: usize,
    hidden: usize,
    fwd_ids: [ParamId; 15],
    bwd_ids: [ParamId; 15],
    cache: Option<(LstmParams, LstmParams, Vec<BiCache>, usize)>,
}

fn register(store: &mut ParamStore, prefix: &str, p: &LstmParams) -> Result<[ParamId; 15]> {
    let mut ids = Vec::with_capacity(15);
    for ((name, field), shape) in FIELD_NAMES.iter().zip(p.fields()).zip(p.field_shapes()) {
        ids.push(store.add(&format!("{prefix}.{name}"), Tensor::new(shape, field.clone())?)?);
    }
    Ok(ids.try_into().expect("fifteen LSTM fields"))
}

fn gather(store: &ParamStore, ids: &[ParamId; 15], input: usize, hidden: usize) -> LstmParams {
    let mut p = LstmParams::zeros(input, hidden);
    for (field, &id) in p.fields_mut().into_iter().zip(ids) {
        field.copy_from_slice(store.value(id).data());
    }
    p
}

fn scatter_grads(store: &mut ParamStore, ids: &[ParamId; 15], grads: &LstmParams) {
    for (field, &id) in grads.fields().into_iter().zip(ids) {
        store.grad_mut(id).data_mut().iter_mut().zip(field).for_each(|(a, b)| *a += b);
    }
}

impl BiLstm {
    pub fn new(name: &str, store: &mut ParamStore, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let fwd = LstmParams::random(input, hidden, rng);
        let bwd = LstmParams::random(input, hidden, rng);
        Ok(Self {
            name: name.to_string(),
            input,
            hidden,
            fwd_ids: register(store, &format!("{name}.fwd"), &fwd)?,
            bwd_ids: register(store, &format!("{name}.bwd"), &bwd)?,
            cache: None,
        })
    }

    pub fn directions(&self, store: &ParamStore) -> (LstmParams, LstmParams) {
        (
            gather(store, &self.fwd_ids, self.input, self.hidden),
            gather(store, &self.bwd_ids, self.input, self.hidden),
        )
    }
}

impl Layer for BiLstm {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [b, t, d] if *d == self.input && *t > 0 => Ok(vec![*b, *t, 2 * self.hidden]),
            _ => Err(Error::Shape(format!(
                "{} expects [B, T, {}], got {input:?}",
                self.name, self.input
            ))),
        }
    }

    fn forward(&mut self, store: &mut ParamStore, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (fwd, bwd) = self.directions(store);
        let (out, caches) = bilstm_cached(x, &fwd, &bwd)?;
        self.cache = Some((fwd, bwd, caches, x.shape()[1]));
        Ok(out)
    }

    fn backward(&mut self, store: &mut ParamStore, grad_out: &Tensor) -> Result<Tensor> {
        let (fwd, bwd, caches, t) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("{}: backward before forward", self.name)))?;
        let (h, d, t) = (self.hidden, self.input, *t);
        let b = caches.len();
        if grad_out.shape() != [b, t, 2 * h] {
            return Err(Error::Shape(format!(
                "{} gradient has shape {:?}, expected [{b}, {t}, {}]",
                self.name,
                grad_out.shape(),
                2 * h
            )));
        }
        let mut gf = LstmParams::zeros(d, h);
        let mut gb = LstmParams::zeros(d, h);
        let mut dx = vec![0.0; b * t * d];
        for (bi, cache) in caches.iter().enumerate() {
            let g = &grad_out.data()[bi * t * 2 * h..(bi + 1) * t * 2 * h];
            let dhf: Vec<f64> = g.chunks_exact(2 * h).flat_map(|r| r[..h].to_vec()).collect();
            let dhb: Vec<f64> = g.chunks_exact(2 * h).rev().flat_map(|r| r[h..].to_vec()).collect();
            let dxf = backward_sequence(&cache.fwd, &dhf, fwd, &mut gf);
            let dxb = reversed_rows(&backward_sequence(&cache.bwd, &dhb, bwd, &mut gb), d);
            for (o, (a, c)) in dx[bi * t * d..(bi + 1) * t * d].iter_mut().zip(dxf.iter().zip(&dxb)) {
                *o = a + c;
            }
        }
        scatter_grads(store, &self.fwd_ids, &gf);
        scatter_grads(store, &self.bwd_ids, &gb);
        Tensor::new(vec![b, t, d], dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = LstmParams::zeros(3, 4);
        let (h, c) = lstm_step(&[1.0, -2.0, 0.5], &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_pass_memory_through() {
        let mut p = LstmParams::random(3, 4, &mut rng());
        p.b_f = vec![50.0; 4];
        p.b_i = vec![-50.0; 4];
        let c_prev = [0.3, -0.7, 0.1, 0.9];
        let (_, c) = lstm_step(&[0.2, 0.1, -0.4], &[0.1, 0.2, 0.3, 0.4], &c_prev, &p).unwrap();
        for (a, b) in c.iter().zip(&c_prev) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shapes_are_checked() {
        let p = LstmParams::zeros(3, 4);
        assert!(lstm_step(&[0.0; 2], &[0.0; 4], &[0.0; 4], &p).is_err());
        let mut bad = p.clone();
        bad.w_ih.pop();
        assert!(bad.validate().is_err());
        assert_eq!(p.n_params(), 4 * 12 + 4 * 16 + 3 * 4 + 4 * 4);
    }

    #[test]
    fn single_step_bilstm_is_concat_of_steps() {
        let mut r = rng();
        let fwd = LstmParams::random(3, 2, &mut r);
        let bwd = LstmParams::random(3, 2, &mut r);
        let x = [0.5, -0.1, 0.3];
        let out = bilstm_forward(&Tensor::new(vec![1, 1, 3], x.to_vec()).unwrap(), &fwd, &bwd).unwrap();
        let (hf, _) = lstm_step(&x, &[0.0; 2], &[0.0; 2], &fwd).unwrap();
        let (hb, _) = lstm_step(&x, &[0.0; 2], &[0.0; 2], &bwd).unwrap();
        assert_eq!(out.data(), [hf, hb].concat().as_slice());
    }

    #[test]
    fn reversal_swaps_halves() {
        let mut r = rng();
        let (t, d, h) = (5, 3, 2);
        let fwd = LstmParams::random(d, h, &mut r);
        let bwd = LstmParams::random(d, h, &mut r);
        let xs: Vec<f64> = (0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let seq = Tensor::new(vec![1, t, d], xs.clone()).unwrap();
        let rev = Tensor::new(vec![1, t, d], reversed_rows(&xs, d)).unwrap();
        let a = bilstm_forward(&seq, &fwd, &bwd).unwrap();
        let b = bilstm_forward(&rev, &bwd, &fwd).unwrap();
        for s in 0..t {
            let ra = &a.data()[s * 2 * h..(s + 1) * 2 * h];
            let rb = &b.data()[(t - 1 - s) * 2 * h..(t - s) * 2 * h];
            assert_eq!(&ra[..h], &rb[h..]);
            assert_eq!(&ra[h..], &rb[..h]);
        }
    }
}
