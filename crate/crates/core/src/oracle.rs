//! Reference implementation for gradient checking.
//!
//! Everything here is written as plain `f64` loops over owned vectors and
//! shares no code with the model, objectives or engines. The forward keeps
//! the same per-element summation order as the kernels so losses can be
//! compared bit for bit; the backward is a direct transcription of the
//! chain rule over the whole sequence.

use crate::engines::GradStore;
use crate::error::{Error, Result};
use crate::metering::Tag;
use crate::model::{LayerTensor, ModelParams, ParamId};
use crate::objectives::LossSpec;
use crate::tensor::{Element, Matrix};

/// Longest sequence the reference accepts.
pub const MAX_SEQ_LEN: usize = 64;

#[derive(Clone)]
struct Mat {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Self {
        Mat { r, c, v: vec![0.0; r * c] }
    }

    fn of<T: Element>(m: &Matrix<T>) -> Self {
        Mat {
            r: m.rows(),
            c: m.cols(),
            v: m.to_f64(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    fn add(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.c + j] += x;
    }

    fn into_matrix(self) -> Matrix<f64> {
        Matrix::from_vec(self.r, self.c, self.v, Tag::Scratch, None).expect("sizes agree")
    }
}

/// `a · b`, accumulated over the inner index in ascending order.
fn mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            let mut acc = 0.0;
            for p in 0..a.c {
                acc += a.at(i, p) * b.at(p, j);
            }
            out.v[i * b.c + j] = acc;
        }
    }
    out
}

/// `a · bᵀ`.
fn mul_t(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.r, b.r);
    for i in 0..a.r {
        for j in 0..b.r {
            let mut acc = 0.0;
            for p in 0..a.c {
                acc += a.at(i, p) * b.at(j, p);
            }
            out.v[i * b.r + j] = acc;
        }
    }
    out
}

/// `aᵀ · b`.
fn t_mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.c, b.c);
    for i in 0..a.c {
        for j in 0..b.c {
            let mut acc = 0.0;
            for p in 0..a.r {
                acc += a.at(p, i) * b.at(p, j);
            }
            out.v[i * b.c + j] = acc;
        }
    }
    out
}

fn add_into(dst: &mut Mat, src: &Mat) {
    for (d, s) in dst.v.iter_mut().zip(&src.v) {
        *d += s;
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse(x: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        m = m.max(v);
    }
    let mut s = 0.0;
    for &v in x {
        s += (v - m).exp();
    }
    m + s.ln()
}

fn softplus_neg(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Naive triple-loop product.
pub fn naive_matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<f64>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("naive_matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    Ok(mul(&Mat::of(a), &Mat::of(b)).into_matrix())
}

struct Layer {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    w_up: Mat,
    w_gate: Mat,
    w_down: Mat,
}

struct Net {
    layers: Vec<Layer>,
    head: Mat,
    group: usize,
}

impl Net {
    fn of<T: Element>(p: &ModelParams<T>) -> Self {
        Net {
            layers: p
                .layers
                .iter()
                .map(|l| Layer {
                    wq: Mat::of(&l.wq),
                    wk: Mat::of(&l.wk),
                    wv: Mat::of(&l.wv),
                    w_up: Mat::of(&l.w_up),
                    w_gate: Mat::of(&l.w_gate),
                    w_down: Mat::of(&l.w_down),
                })
                .collect(),
            head: Mat::of(&p.lm_head),
            group: p.config.kv_share,
        }
    }
}

/// Everything one layer's forward produced for one sequence.
struct Trace {
    h: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
    o: Mat,
    up: Mat,
    gate: Mat,
    a: Mat,
}

fn layer_forward(l: &Layer, h: &Mat, g: usize) -> (Mat, Trace) {
    let t = h.r;
    let q = mul(h, &l.wq);
    let k = mul(h, &l.wk);
    let v = mul(h, &l.wv);
    let d = q.c;
    let mut p = Mat::zeros(t, t);
    for i in 0..t {
        let mut s = vec![0.0; i + 1];
        for (c, sc) in s.iter_mut().enumerate() {
            let mut acc = 0.0;
            for x in 0..d {
                acc += q.at(i, x) * k.at(c, x / g);
            }
            *sc = acc;
        }
        let mut m = f64::NEG_INFINITY;
        for &x in &s {
            if x > m {
                m = x;
            }
        }
        let mut sum = 0.0;
        for x in s.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for (c, &x) in s.iter().enumerate() {
            p.v[i * t + c] = x / sum;
        }
    }
    let mut o = Mat::zeros(t, d);
    for i in 0..t {
        for x in 0..d {
            let mut acc = 0.0;
            for c in 0..=i {
                acc += p.at(i, c) * v.at(c, x / g);
            }
            o.v[i * d + x] = acc;
        }
    }
    let up = mul(&o, &l.w_up);
    let gate = mul(&o, &l.w_gate);
    let mut a = Mat::zeros(up.r, up.c);
    for i in 0..a.v.len() {
        let z = gate.v[i];
        a.v[i] = z * logistic(z) * up.v[i];
    }
    let out = mul(&a, &l.w_down);
    (
        out,
        Trace {
            h: h.clone(),
            q,
            k,
            v,
            p,
            o,
            up,
            gate,
            a,
        },
    )
}

/// Loss and `∂loss/∂logits` for every sequence.
fn head(net: &Net, finals: &[Mat], spec: &LossSpec) -> (f64, Vec<Mat>) {
    let c = net.head.c;
    let logits: Vec<Mat> = finals.iter().map(|h| mul(h, &net.head)).collect();
    let mut dlogits: Vec<Mat> = logits.iter().map(|l| Mat::zeros(l.r, l.c)).collect();
    let row = |l: &Mat, t: usize| l.v[t * c..(t + 1) * c].to_vec();
    match spec {
        LossSpec::Sft(s) => {
            let n = s.labels.len();
            let scale = if s.mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
            let mut sum = 0.0;
            for (t, &y) in s.labels.iter().enumerate() {
                let x = row(&logits[0], t);
                let z = lse(&x);
                sum += z - x[y];
                for j in 0..c {
                    let ind = if j == y { 1.0 } else { 0.0 };
                    dlogits[0].v[t * c + j] = ((x[j] - z).exp() - ind) * scale;
                }
            }
            (sum * scale, dlogits)
        }
        LossSpec::Grpo(g) => {
            let n = (g.tokens.len() * finals[0].r) as f64;
            let mut sum = 0.0;
            for (b, toks) in g.tokens.iter().enumerate() {
                for (t, &a) in toks.iter().enumerate() {
                    let x = row(&logits[b], t);
                    let z = lse(&x);
                    let logp = x[a] - z;
                    let old = &g.old_logits[b][t * c..(t + 1) * c];
                    let rf = &g.ref_logits[b][t * c..(t + 1) * c];
                    let r = (logp - (old[a] - lse(old))).exp();
                    let adv = g.advantages[b][t];
                    let lo = r * adv;
                    let hi = r.clamp(1.0 - g.epsilon, 1.0 + g.epsilon) * adv;
                    let kl = logp - (rf[a] - lse(rf));
                    let (term, dterm) = if lo <= hi { (lo, lo) } else { (hi, 0.0) };
                    sum += term - g.beta * kl;
                    let dlogp = -(dterm - g.beta) / n;
                    for j in 0..c {
                        let ind = if j == a { 1.0 } else { 0.0 };
                        dlogits[b].v[t * c + j] = dlogp * (ind - (x[j] - z).exp());
                    }
                }
            }
            (sum * (-1.0 / n), dlogits)
        }
        LossSpec::Dpo(p) => {
            let mut ell = 0.0;
            let pairs = [(&p.chosen, &p.ref_chosen_logits, 1.0), (&p.rejected, &p.ref_rejected_logits, -1.0)];
            for (b, (toks, rf, sign)) in pairs.iter().enumerate() {
                for (t, &a) in toks.iter().enumerate() {
                    let x = row(&logits[b], t);
                    let rr = &rf[t * c..(t + 1) * c];
                    ell += sign * ((x[a] - lse(&x)) - (rr[a] - lse(rr)));
                }
            }
            let z = p.beta * ell;
            // d(−log σ(z))/dℓ = β (σ(z) − 1).
            let dell = p.beta * (logistic(z) - 1.0);
            for (b, (toks, _, sign)) in pairs.iter().enumerate() {
                for (t, &a) in toks.iter().enumerate() {
                    let x = row(&logits[b], t);
                    let zz = lse(&x);
                    for j in 0..c {
                        let ind = if j == a { 1.0 } else { 0.0 };
                        dlogits[b].v[t * c + j] = dell * sign * (ind - (x[j] - zz).exp());
                    }
                }
            }
            (softplus_neg(z), dlogits)
        }
    }
}

fn check<T: Element>(params: &ModelParams<T>, inputs: &[Matrix<T>], spec: &LossSpec) -> Result<()> {
    params.config.validate()?;
    if inputs.is_empty() || inputs.len() != spec.sequences() {
        return Err(Error::shape("reference", "input count does not match the objective"));
    }
    let t = inputs[0].rows();
    if t > MAX_SEQ_LEN {
        return Err(Error::Guard(format!(
            "reference implementation limited to {MAX_SEQ_LEN} positions, got {t}"
        )));
    }
    if inputs.iter().any(|h| h.shape() != (t, params.config.hidden)) {
        return Err(Error::shape("reference", "inputs must share one shape"));
    }
    spec.validate(t, params.config.vocab)
}

fn forward_all(net: &Net, inputs: &[Mat]) -> (Vec<Mat>, Vec<Vec<Trace>>) {
    let mut traces: Vec<Vec<Trace>> = Vec::new();
    let mut finals = Vec::new();
    for h0 in inputs {
        let mut h = h0.clone();
        let mut tr = Vec::new();
        for l in &net.layers {
            let (out, trace) = layer_forward(l, &h, net.group);
            tr.push(trace);
            h = out;
        }
        finals.push(h);
        traces.push(tr);
    }
    (finals, traces)
}

/// Loss of the model on `inputs`, computed in `f64`.
pub fn reference_forward_loss<T: Element>(params: &ModelParams<T>, inputs: &[Matrix<T>], spec: &LossSpec) -> Result<f64> {
    check(params, inputs, spec)?;
    let net = Net::of(params);
    let hs: Vec<Mat> = inputs.iter().map(Mat::of).collect();
    let (finals, _) = forward_all(&net, &hs);
    Ok(head(&net, &finals, spec).0)
}

/// Loss and exact gradients, by one full-sequence backward in `f64`.
pub fn reference_gradients<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
) -> Result<(f64, GradStore<f64>)> {
    check(params, inputs, spec)?;
    let net = Net::of(params);
    let g = net.group;
    let hs: Vec<Mat> = inputs.iter().map(Mat::of).collect();
    let (finals, traces) = forward_all(&net, &hs);
    let (loss, dlogits) = head(&net, &finals, spec);

    let nl = net.layers.len();
    let mut grads: Vec<[Mat; 6]> = net
        .layers
        .iter()
        .map(|l| {
            [&l.wq, &l.wk, &l.wv, &l.w_up, &l.w_gate, &l.w_down].map(|w| Mat::zeros(w.r, w.c))
        })
        .collect();
    let mut g_head = Mat::zeros(net.head.r, net.head.c);
    let mut g_inputs = Vec::new();

    for (b, dl) in dlogits.iter().enumerate() {
        add_into(&mut g_head, &t_mul(&finals[b], dl));
        let mut dh = mul_t(dl, &net.head);
        for li in (0..nl).rev() {
            let l = &net.layers[li];
            let tr = &traces[b][li];
            let gl = &mut grads[li];
            let t = tr.h.r;

            add_into(&mut gl[5], &t_mul(&tr.a, &dh));
            let da = mul_t(&dh, &l.w_down);
            let mut dup = Mat::zeros(da.r, da.c);
            let mut dgate = Mat::zeros(da.r, da.c);
            for i in 0..da.v.len() {
                let z = tr.gate.v[i];
                let s = logistic(z);
                dup.v[i] = da.v[i] * z * s;
                dgate.v[i] = da.v[i] * tr.up.v[i] * (s + z * s * (1.0 - s));
            }
            add_into(&mut gl[3], &t_mul(&tr.o, &dup));
            add_into(&mut gl[4], &t_mul(&tr.o, &dgate));
            let mut d_o = mul_t(&dup, &l.w_up);
            add_into(&mut d_o, &mul_t(&dgate, &l.w_gate));

            let d = tr.q.c;
            let mut dq = Mat::zeros(t, d);
            let mut dk = Mat::zeros(t, tr.k.c);
            let mut dv = Mat::zeros(t, tr.v.c);
            for i in 0..t {
                let mut dp = vec![0.0; i + 1];
                for (c, x) in dp.iter_mut().enumerate() {
                    for y in 0..d {
                        *x += d_o.at(i, y) * tr.v.at(c, y / g);
                        dv.add(c, y / g, tr.p.at(i, c) * d_o.at(i, y));
                    }
                }
                let mut dot = 0.0;
                for (c, &x) in dp.iter().enumerate() {
                    dot += x * tr.p.at(i, c);
                }
                for (c, &x) in dp.iter().enumerate() {
                    let ds = tr.p.at(i, c) * (x - dot);
                    for y in 0..d {
                        dq.add(i, y, ds * tr.k.at(c, y / g));
                        dk.add(c, y / g, ds * tr.q.at(i, y));
                    }
                }
            }
            add_into(&mut gl[0], &t_mul(&tr.h, &dq));
            add_into(&mut gl[1], &t_mul(&tr.h, &dk));
            add_into(&mut gl[2], &t_mul(&tr.h, &dv));
            let mut dh_in = mul_t(&dq, &l.wq);
            add_into(&mut dh_in, &mul_t(&dk, &l.wk));
            add_into(&mut dh_in, &mul_t(&dv, &l.wv));
            dh = dh_in;
        }
        g_inputs.push(dh.into_matrix());
    }

    let mut out = ModelParams::<f64>::zeros(&params.config);
    for (li, gl) in grads.into_iter().enumerate() {
        for (tensor, m) in LayerTensor::ALL.into_iter().zip(gl) {
            *out.tensor_mut(ParamId::Layer { layer: li, tensor }) = m.into_matrix();
        }
    }
    out.lm_head = g_head.into_matrix();
    Ok((
        loss,
        GradStore {
            params: out,
            inputs: g_inputs,
        },
    ))
}

/// A scalar the loss can be differentiated with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coord {
    Param { id: ParamId, row: usize, col: usize },
    Input { seq: usize, row: usize, col: usize },
}

impl Coord {
    pub fn value<T: Element>(&self, params: &ModelParams<T>, inputs: &[Matrix<T>]) -> f64 {
        match *self {
            Coord::Param { id, row, col } => params.tensor(id).get(row, col).as_f64(),
            Coord::Input { seq, row, col } => inputs[seq].get(row, col).as_f64(),
        }
    }

    /// Reads the matching entry of a gradient store.
    pub fn grad<T: Element>(&self, grads: &GradStore<T>) -> f64 {
        match *self {
            Coord::Param { id, row, col } => grads.tensor(id).get(row, col).as_f64(),
            Coord::Input { seq, row, col } => grads.inputs[seq].get(row, col).as_f64(),
        }
    }
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let (fp, fm) = (f(x + h)?, f(x - h)?);
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::Numeric(format!("loss {fp} / {fm} at perturbed point")));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Two central differences at `h` and `h/2` combined to cancel the
/// second-order error term.
pub fn richardson_difference(f: impl Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let coarse = central_difference(&f, x, h)?;
    let fine = central_difference(&f, x, h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Ridders' extrapolation: central differences at steps `h0, h0/2, ...`
/// combined in a Neville tableau. Returns the entry with the smallest
/// estimated error and that estimate. All levels are evaluated: coarse
/// steps that straddle a kink give erratic entries with large error
/// estimates, and the smooth fine-step entries win.
pub fn ridders_difference(f: impl Fn(f64) -> Result<f64>, x: f64, h0: f64) -> Result<(f64, f64)> {
    const LEVELS: usize = 6;
    let mut table = [[0.0f64; LEVELS]; LEVELS];
    let mut h = h0;
    table[0][0] = central_difference(&f, x, h)?;
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..LEVELS {
        h /= 2.0;
        table[0][i] = central_difference(&f, x, h)?;
        let mut fac = 4.0;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= 4.0;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
    }
    Ok((best, err))
}

fn loss_at(params: &ModelParams<f64>, inputs: &[Matrix<f64>], spec: &LossSpec, coord: Coord, x: f64) -> Result<f64> {
    let mut p = params.clone();
    let mut hs = inputs.to_vec();
    match coord {
        Coord::Param { id, row, col } => p.tensor_mut(id).set(row, col, x),
        Coord::Input { seq, row, col } => hs[seq].set(row, col, x),
    }
    reference_forward_loss(&p, &hs, spec)
}

fn to_f64_params<T: Element>(params: &ModelParams<T>) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::zeros(&params.config);
    for id in params.ids() {
        let src = params.tensor(id);
        *p.tensor_mut(id) = Matrix::from_vec(src.rows(), src.cols(), src.to_f64(), Tag::Parameter, None)
            .expect("same shape");
    }
    p
}

fn to_f64_inputs<T: Element>(inputs: &[Matrix<T>]) -> Vec<Matrix<f64>> {
    inputs
        .iter()
        .map(|m| Matrix::from_vec(m.rows(), m.cols(), m.to_f64(), Tag::Input, None).expect("same shape"))
        .collect()
}

/// Central finite difference of the reference loss along one coordinate.
pub fn finite_diff_grad<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    coord: Coord,
    h: f64,
) -> Result<f64> {
    let (p, hs) = (to_f64_params(params), to_f64_inputs(inputs));
    let x = coord.value(&p, &hs);
    central_difference(|v| loss_at(&p, &hs, spec, coord, v), x, h)
}

/// Richardson-extrapolated finite difference along one coordinate.
pub fn finite_diff_grad_richardson<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    coord: Coord,
    h: f64,
) -> Result<f64> {
    let (p, hs) = (to_f64_params(params), to_f64_inputs(inputs));
    let x = coord.value(&p, &hs);
    richardson_difference(|v| loss_at(&p, &hs, spec, coord, v), x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::backward_standard;
    use crate::metering::Meter;
    use crate::model::ModelConfig;
    use crate::objectives::{DpoSpec, SftSpec};
    use crate::tensor::SeededRng;

    fn small(t: usize, seed: u64) -> (ModelParams<f64>, Vec<Matrix<f64>>, LossSpec) {
        let cfg = ModelConfig {
            hidden: 4,
            mlp_hidden: 6,
            vocab: 11,
            layers: 2,
            kv_share: 2,
        };
        let mut rng = SeededRng::new(seed);
        let p = ModelParams::random(&cfg, &mut rng, 0.7).unwrap();
        let h = rng.matrix(t, 4, 1.0, Tag::Input);
        let labels = (0..t - 1).map(|_| rng.below(11)).collect();
        (p, vec![h], LossSpec::Sft(SftSpec { labels, mean: false }))
    }

    #[test]
    fn naive_product_matches_kernel_bitwise() {
        let mut rng = SeededRng::new(1);
        let a = rng.matrix::<f64>(7, 5, 1.0, Tag::Scratch);
        let b = rng.matrix::<f64>(5, 3, 1.0, Tag::Scratch);
        let k = crate::tensor::Ops::unmetered()
            .matmul(&a, &b, false, crate::metering::FlopCategory::Mlp, Tag::Scratch)
            .unwrap();
        assert!(naive_matmul(&a, &b).unwrap().bitwise_eq(&k));
    }

    #[test]
    fn quadratic_probe() {
        let d = central_difference(|w| Ok(w * w), 3.0, 1e-5).unwrap();
        assert!((d - 6.0).abs() < 1e-9);
        assert!(central_difference(|w| Ok(w), 0.0, 0.0).is_err());
        assert!(central_difference(|_| Ok(f64::NAN), 0.0, 1e-3).is_err());
    }

    #[test]
    fn linear_layer_and_cross_entropy_probes() {
        // L(w) = Σ (x w)_j for a row x: gradient is x broadcast.
        let x = [0.3, -1.2, 2.0];
        for (i, &xi) in x.iter().enumerate() {
            let f = |w: f64| Ok(x.iter().enumerate().map(|(j, &v)| if j == i { v * w } else { v * 0.5 }).sum());
            assert!((central_difference(f, 0.5, 1e-4).unwrap() - xi).abs() < 1e-10);
        }
        // Cross-entropy of softmax([z, 0, 0]) for label 0: derivative p₀ − 1.
        let f = |z: f64| Ok(lse(&[z, 0.0, 0.0]) - z);
        let z = 0.4f64;
        let p0 = z.exp() / (z.exp() + 2.0);
        assert!((richardson_difference(f, z, 1e-3).unwrap() - (p0 - 1.0)).abs() < 1e-11);
    }

    #[test]
    fn loss_matches_standard_engine_bitwise() {
        for seed in 0..4 {
            let (p, h, spec) = small(8, seed);
            let r = backward_standard(&p, &h, &spec, &Meter::new()).unwrap();
            let l = reference_forward_loss(&p, &h, &spec).unwrap();
            assert_eq!(l.to_bits(), r.loss.to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let (p, h, spec) = small(8, 9);
        let z = ModelParams::<f64>::zeros(&p.config);
        let l = reference_forward_loss(&z, &h, &spec).unwrap();
        assert!((l - 7.0 * (11.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dpo_identical_policies_give_ln2() {
        let (p, _, _) = small(8, 3);
        let mut rng = SeededRng::new(4);
        let hw = rng.matrix::<f64>(5, 4, 1.0, Tag::Input);
        let hl = rng.matrix::<f64>(5, 4, 1.0, Tag::Input);
        let net = Net::of(&p);
        let (finals, _) = forward_all(&net, &[Mat::of(&hw), Mat::of(&hl)]);
        let spec = LossSpec::Dpo(DpoSpec {
            chosen: vec![1, 2, 3, 4, 5],
            rejected: vec![5, 4, 3, 2, 1],
            ref_chosen_logits: mul(&finals[0], &net.head).v,
            ref_rejected_logits: mul(&finals[1], &net.head).v,
            beta: 0.3,
        });
        let l = reference_forward_loss(&p, &[hw, hl], &spec).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn guard_on_long_sequences() {
        let (p, _, _) = small(8, 1);
        let h = vec![Matrix::<f64>::zeros(65, 4, Tag::Input, None)];
        let spec = LossSpec::Sft(SftSpec { labels: vec![0; 64], mean: false });
        assert!(matches!(reference_forward_loss(&p, &h, &spec), Err(Error::Guard(_))));
    }

    #[test]
    fn reference_gradients_match_finite_differences() {
        let (p, h, spec) = small(8, 5);
        let (_, g) = reference_gradients(&p, &h, &spec).unwrap();
        let mut rng = SeededRng::new(6);
        for id in p.ids() {
            let m = p.tensor(id);
            for _ in 0..4 {
                let coord = Coord::Param { id, row: rng.below(m.rows()), col: rng.below(m.cols()) };
                let fd = finite_diff_grad_richardson(&p, &h, &spec, coord, 1e-3).unwrap();
                let an = coord.grad(&g);
                assert!((fd - an).abs() <= 1e-8 * an.abs().max(1e-2), "{id} {fd} {an}");
            }
        }
        let coord = Coord::Input { seq: 0, row: 3, col: 1 };
        let fd = finite_diff_grad_richardson(&p, &h, &spec, coord, 1e-3).unwrap();
        assert!((fd - coord.grad(&g)).abs() < 1e-9);
    }

    #[test]
    fn step_sweep_is_v_shaped() {
        // Larger weights give the loss enough curvature for truncation
        // error to dominate at the coarse step.
        let (mut p, h, spec) = small(8, 7);
        for id in p.ids() {
            p.tensor_mut(id).scale_inplace(3.0);
        }
        let (_, g) = reference_gradients(&p, &h, &spec).unwrap();
        let coord = Coord::Param {
            id: ParamId::Layer { layer: 0, tensor: LayerTensor::Wq },
            row: 0,
            col: 0,
        };
        let exact = coord.grad(&g);
        let err = |h_: f64| (finite_diff_grad(&p, &h, &spec, coord, h_).unwrap() - exact).abs();
        let (e3, e5, e7) = (err(1e-3), err(1e-5), err(1e-7));
        assert!(e5 < e3 && e5 < e7, "{e3} {e5} {e7}");
    }

    #[test]
    fn ridders_ignores_a_kink_inside_the_first_step() {
        // Kink 1.5e-3 to the right: only the two coarsest steps cross it.
        let f = |x: f64| Ok(x.sin() + 5.0 * (x - 1.0015).max(0.0));
        let (d, err) = ridders_difference(f, 1.0, 2e-3).unwrap();
        assert!((d - 1f64.cos()).abs() < 1e-9, "{d}");
        assert!(err < 1e-8);
        let (d, _) = ridders_difference(|x: f64| Ok(x.exp()), 0.3, 2e-3).unwrap();
        assert!((d - 0.3f64.exp()).abs() < 1e-12);
    }
}
