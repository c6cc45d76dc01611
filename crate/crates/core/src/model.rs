//! A single-head causal transformer without normalization or residuals.
//!
//! Per layer:
//!
//! ```text
//! Q = H Wq,  K = H Wk,  V = H Wv
//! P = softmax(Q Kᵀ, causal),  O = P V
//! H_out = (silu(O W_gate) ∘ O W_up) W_down
//! ```
//!
//! K and V may be narrower than Q by a factor `kv_share`; column `c` of the
//! logical full-width K is column `c / kv_share` of the stored one.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, Meter, Tag};
use crate::plan::ChunkPlan;
use crate::tensor::{
    silu_scalar, softmax_rows_inplace, BoolMask, CausalMask, Element, Matrix, Ops, SeededRng, View,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub kv_share: usize,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.hidden", self.hidden),
            ("model.mlp_hidden", self.mlp_hidden),
            ("model.vocab", self.vocab),
            ("model.layers", self.layers),
            ("model.kv_share", self.kv_share),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.hidden % self.kv_share != 0 {
            return Err(Error::config(
                "model.kv_share",
                format!("must divide hidden width {}", self.hidden),
            ));
        }
        Ok(())
    }

    pub fn kv_width(&self) -> usize {
        self.hidden / self.kv_share
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTensor {
    Wq,
    Wk,
    Wv,
    WUp,
    WGate,
    WDown,
}

impl LayerTensor {
    pub const ALL: [LayerTensor; 6] = [
        LayerTensor::Wq,
        LayerTensor::Wk,
        LayerTensor::Wv,
        LayerTensor::WUp,
        LayerTensor::WGate,
        LayerTensor::WDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerTensor::Wq => "w_q",
            LayerTensor::Wk => "w_k",
            LayerTensor::Wv => "w_v",
            LayerTensor::WUp => "w_up",
            LayerTensor::WGate => "w_gate",
            LayerTensor::WDown => "w_down",
        }
    }
}

/// Identifies one parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Layer { layer: usize, tensor: LayerTensor },
    LmHead,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::Layer { layer, tensor } => write!(f, "layer{layer}.{}", tensor.name()),
            ParamId::LmHead => f.write_str("w_lm_head"),
        }
    }
}

pub struct LayerParams<T: Element> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_gate: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Element> LayerParams<T> {
    pub fn zeros(cfg: &ModelConfig, tag: Tag, meter: Option<&Meter>) -> Self {
        let (d, dkv, du) = (cfg.hidden, cfg.kv_width(), cfg.mlp_hidden);
        LayerParams {
            wq: Matrix::zeros(d, d, tag, meter),
            wk: Matrix::zeros(d, dkv, tag, meter),
            wv: Matrix::zeros(d, dkv, tag, meter),
            w_up: Matrix::zeros(d, du, tag, meter),
            w_gate: Matrix::zeros(d, du, tag, meter),
            w_down: Matrix::zeros(du, d, tag, meter),
        }
    }

    pub fn get(&self, t: LayerTensor) -> &Matrix<T> {
        match t {
            LayerTensor::Wq => &self.wq,
            LayerTensor::Wk => &self.wk,
            LayerTensor::Wv => &self.wv,
            LayerTensor::WUp => &self.w_up,
            LayerTensor::WGate => &self.w_gate,
            LayerTensor::WDown => &self.w_down,
        }
    }

    pub fn get_mut(&mut self, t: LayerTensor) -> &mut Matrix<T> {
        match t {
            LayerTensor::Wq => &mut self.wq,
            LayerTensor::Wk => &mut self.wk,
            LayerTensor::Wv => &mut self.wv,
            LayerTensor::WUp => &mut self.w_up,
            LayerTensor::WGate => &mut self.w_gate,
            LayerTensor::WDown => &mut self.w_down,
        }
    }

    pub fn bytes(&self) -> u64 {
        LayerTensor::ALL.iter().map(|&t| self.get(t).bytes()).sum()
    }

    /// Width divisor of K and V relative to Q.
    pub fn kv_share(&self) -> usize {
        self.wq.cols() / self.wk.cols()
    }

    fn detach(&mut self) {
        for t in LayerTensor::ALL {
            self.get_mut(t).detach();
        }
    }
}

impl<T: Element> Clone for LayerParams<T> {
    fn clone(&self) -> Self {
        LayerParams {
            wq: self.wq.clone(),
            wk: self.wk.clone(),
            wv: self.wv.clone(),
            w_up: self.w_up.clone(),
            w_gate: self.w_gate.clone(),
            w_down: self.w_down.clone(),
        }
    }
}

/// Weights of every layer plus the lm-head. Also used, shape for shape, as
/// the gradient accumulator.
pub struct ModelParams<T: Element> {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams<T>>,
    pub lm_head: Matrix<T>,
}

impl<T: Element> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self::zeros_tagged(config, Tag::Parameter, None)
    }

    pub(crate) fn zeros_tagged(config: &ModelConfig, tag: Tag, meter: Option<&Meter>) -> Self {
        ModelParams {
            config: *config,
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(config, tag, meter))
                .collect(),
            lm_head: Matrix::zeros(config.hidden, config.vocab, tag, meter),
        }
    }

    /// Entries uniform in `[-scale, scale]`, drawn tensor by tensor in
    /// [`ModelParams::ids`] order.
    pub fn random(config: &ModelConfig, rng: &mut SeededRng, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        for id in p.ids() {
            let m = p.tensor_mut(id);
            for v in m.data_mut() {
                *v = T::from_f64(rng.uniform(-scale, scale));
            }
        }
        Ok(p)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.layers.len())
            .flat_map(|layer| {
                LayerTensor::ALL
                    .iter()
                    .map(move |&tensor| ParamId::Layer { layer, tensor })
            })
            .collect();
        ids.push(ParamId::LmHead);
        ids
    }

    pub fn tensor(&self, id: ParamId) -> &Matrix<T> {
        match id {
            ParamId::Layer { layer, tensor } => self.layers[layer].get(tensor),
            ParamId::LmHead => &self.lm_head,
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        match id {
            ParamId::Layer { layer, tensor } => self.layers[layer].get_mut(tensor),
            ParamId::LmHead => &mut self.lm_head,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.layers.iter().map(LayerParams::bytes).sum::<u64>() + self.lm_head.bytes()
    }

    pub(crate) fn detach(&mut self) {
        for l in &mut self.layers {
            l.detach();
        }
        self.lm_head.detach();
    }

    /// Largest absolute entry-wise difference over all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.ids()
            .into_iter()
            .map(|id| self.tensor(id).max_abs_diff(other.tensor(id)))
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.ids()
            .into_iter()
            .all(|id| self.tensor(id).bitwise_eq(other.tensor(id)))
    }
}

impl<T: Element> Clone for ModelParams<T> {
    fn clone(&self) -> Self {
        ModelParams {
            config: self.config,
            layers: self.layers.clone(),
            lm_head: self.lm_head.clone(),
        }
    }
}

/// Full-sequence K and V of one layer.
pub struct KvCache<T: Element> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// Activations of query rows `rows` needed by the backward pass. Scores are
/// normalized in place, so `p` holds P; `p` spans keys `0..rows.end`.
pub struct ChunkActs<T: Element> {
    pub rows: Range<usize>,
    pub q: Matrix<T>,
    pub p: Matrix<T>,
    pub o: Matrix<T>,
    pub h_up: Matrix<T>,
    pub h_gate: Matrix<T>,
}

impl<T: Element> ChunkActs<T> {
    pub fn bytes(&self) -> u64 {
        self.q.bytes() + self.p.bytes() + self.o.bytes() + self.h_up.bytes() + self.h_gate.bytes()
    }
}

/// Everything `layer_forward_full` computes besides the output.
pub struct LayerActivations<T: Element> {
    pub kv: KvCache<T>,
    pub acts: ChunkActs<T>,
}

fn check_layer_input<T: Element>(op: &'static str, h_in: &Matrix<T>, lp: &LayerParams<T>) -> Result<()> {
    if h_in.cols() != lp.wq.rows() {
        return Err(Error::shape(
            op,
            format!("hidden states have width {}, weights expect {}", h_in.cols(), lp.wq.rows()),
        ));
    }
    Ok(())
}

/// K and V for every position. Metered as activations.
pub fn compute_kv<T: Element>(h_in: &Matrix<T>, lp: &LayerParams<T>, ops: Ops<'_>) -> KvCache<T> {
    let t = h_in.rows();
    let mut k = ops.alloc(t, lp.wk.cols(), Tag::Activation);
    ops.mm_acc(k.data_mut(), h_in.view(), lp.wk.view(), FlopCategory::QkvProj);
    let mut v = ops.alloc(t, lp.wv.cols(), Tag::Activation);
    ops.mm_acc(v.data_mut(), h_in.view(), lp.wv.view(), FlopCategory::QkvProj);
    KvCache { k, v }
}

/// Forward of query rows `rows` against cached K/V. Returns the output rows
/// and the activations the backward needs.
pub(crate) fn forward_rows<T: Element>(
    h_in: View<'_, T>,
    rows: Range<usize>,
    kv: &KvCache<T>,
    lp: &LayerParams<T>,
    ops: Ops<'_>,
) -> Result<(Matrix<T>, ChunkActs<T>)> {
    let acts = chunk_activations(h_in, rows, kv, lp, ops)?;
    let h_out = chunk_output(&acts, lp, ops);
    Ok((h_out, acts))
}

/// The activations of rows `rows` that the backward pass consumes. The
/// layer output itself is not needed there and is left out.
pub(crate) fn chunk_activations<T: Element>(
    h_in: View<'_, T>,
    rows: Range<usize>,
    kv: &KvCache<T>,
    lp: &LayerParams<T>,
    ops: Ops<'_>,
) -> Result<ChunkActs<T>> {
    let (s, e) = (rows.start, rows.end);
    let n = e - s;
    let d = lp.wq.cols();
    let du = lp.w_up.cols();
    let group = lp.kv_share();
    let h = h_in.rows_range(s, e);

    let mut q = ops.alloc(n, d, Tag::Activation);
    ops.mm_acc(q.data_mut(), h, lp.wq.view(), FlopCategory::QkvProj);

    let mut p = ops.alloc(n, e, Tag::Activation);
    ops.grouped_nt_acc(p.data_mut(), q.view(), kv.k.rows_view(0, e), group, FlopCategory::AttnScore);
    let unmasked = softmax_rows_inplace(p.data_mut(), n, e, &CausalMask { row_offset: s })?;
    ops.flops(FlopCategory::AttnOut, 3 * unmasked);

    let mut o = ops.alloc(n, d, Tag::Activation);
    ops.grouped_nn_acc(o.data_mut(), p.view(), kv.v.rows_view(0, e), group, FlopCategory::AttnScore);

    let mut h_up = ops.alloc(n, du, Tag::Activation);
    ops.mm_acc(h_up.data_mut(), o.view(), lp.w_up.view(), FlopCategory::Mlp);
    let mut h_gate = ops.alloc(n, du, Tag::Activation);
    ops.mm_acc(h_gate.data_mut(), o.view(), lp.w_gate.view(), FlopCategory::Mlp);

    Ok(ChunkActs {
        rows,
        q,
        p,
        o,
        h_up,
        h_gate,
    })
}

fn chunk_output<T: Element>(acts: &ChunkActs<T>, lp: &LayerParams<T>, ops: Ops<'_>) -> Matrix<T> {
    let gated = gate(&acts.h_up, &acts.h_gate, ops);
    let mut h_out = ops.alloc(acts.rows.len(), lp.w_down.cols(), Tag::Activation);
    ops.mm_acc(h_out.data_mut(), gated.view(), lp.w_down.view(), FlopCategory::Mlp);
    h_out
}

/// `silu(h_gate) ∘ h_up`.
pub(crate) fn gate<T: Element>(h_up: &Matrix<T>, h_gate: &Matrix<T>, ops: Ops<'_>) -> Matrix<T> {
    let mut a = ops.alloc(h_up.rows(), h_up.cols(), Tag::Activation);
    for ((o, &u), &g) in a.data_mut().iter_mut().zip(h_up.data()).zip(h_gate.data()) {
        *o = silu_scalar(g) * u;
    }
    ops.flops(FlopCategory::Mlp, 2 * a.data().len() as u64);
    a
}

/// Full-sequence forward of one layer.
pub fn layer_forward_full<T: Element>(
    h_in: &Matrix<T>,
    lp: &LayerParams<T>,
    ops: Ops<'_>,
) -> Result<(Matrix<T>, LayerActivations<T>)> {
    check_layer_input("layer_forward_full", h_in, lp)?;
    let kv = compute_kv(h_in, lp, ops);
    let (h_out, acts) = forward_rows(h_in.view(), 0..h_in.rows(), &kv, lp, ops)?;
    Ok((h_out, LayerActivations { kv, acts }))
}

/// Forward of chunk `index` of `plan` against precomputed K and V.
pub fn layer_forward_chunk<T: Element>(
    h_in: &Matrix<T>,
    plan: &ChunkPlan,
    index: usize,
    kv: &KvCache<T>,
    lp: &LayerParams<T>,
    ops: Ops<'_>,
) -> Result<(Matrix<T>, ChunkActs<T>)> {
    check_layer_input("layer_forward_chunk", h_in, lp)?;
    if plan.len() != h_in.rows() || kv.k.rows() != h_in.rows() {
        return Err(Error::shape(
            "layer_forward_chunk",
            format!(
                "plan covers {} positions, input has {}, cache has {}",
                plan.len(),
                h_in.rows(),
                kv.k.rows()
            ),
        ));
    }
    let rows = plan.range(index)?;
    forward_rows(h_in.view(), rows, kv, lp, ops)
}

/// Forward of every layer, chunk by chunk, returning only the final hidden
/// states. Chunked and full forwards give identical rows.
pub fn model_forward<T: Element>(
    params: &ModelParams<T>,
    h0: &Matrix<T>,
    plan: &ChunkPlan,
    ops: Ops<'_>,
) -> Result<Matrix<T>> {
    let mut h: Option<Matrix<T>> = None;
    for lp in &params.layers {
        let input = h.as_ref().unwrap_or(h0);
        check_layer_input("model_forward", input, lp)?;
        let out = layer_forward_chunked(input, plan, lp, ops)?;
        h = Some(out);
    }
    Ok(match h {
        Some(h) => h,
        None => h0.copy_as(Tag::Activation, ops.meter()),
    })
}

/// Output of one layer assembled chunk by chunk; only one chunk's
/// activations are alive at a time.
pub(crate) fn layer_forward_chunked<T: Element>(
    h_in: &Matrix<T>,
    plan: &ChunkPlan,
    lp: &LayerParams<T>,
    ops: Ops<'_>,
) -> Result<Matrix<T>> {
    let kv = compute_kv(h_in, lp, ops);
    let mut out = ops.alloc(h_in.rows(), lp.w_down.cols(), Tag::Activation);
    for rows in plan.ranges() {
        let (chunk, acts) = forward_rows(h_in.view(), rows.clone(), &kv, lp, ops)?;
        drop(acts);
        out.rows_mut(rows.start, rows.end).copy_from_slice(chunk.data());
    }
    Ok(out)
}

/// `H W_lm_head`, tagged as logits.
pub fn lm_head_forward<T: Element>(h: &Matrix<T>, w: &Matrix<T>, ops: Ops<'_>) -> Result<Matrix<T>> {
    ops.matmul(h, w, false, FlopCategory::LmHead, Tag::Logits)
}

/// Causal mask over `seq_len` positions, or just rows `chunk` of it.
pub fn build_causal_mask(seq_len: usize, chunk: Option<Range<usize>>) -> BoolMask {
    let rows = chunk.unwrap_or(0..seq_len);
    let cols = seq_len;
    let data = rows
        .clone()
        .flat_map(|t| (0..cols).map(move |c| c <= t))
        .collect();
    BoolMask {
        rows: rows.len(),
        cols,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;

    fn cfg(d: usize, du: usize, g: usize) -> ModelConfig {
        ModelConfig {
            hidden: d,
            mlp_hidden: du,
            vocab: 5,
            layers: 1,
            kv_share: g,
        }
    }

    fn seeded(c: &ModelConfig, t: usize, seed: u64) -> (ModelParams<f64>, Matrix<f64>) {
        let mut rng = SeededRng::new(seed);
        let p = ModelParams::random(c, &mut rng, 0.6).unwrap();
        let h = rng.matrix(t, c.hidden, 1.0, Tag::Input);
        (p, h)
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = cfg(4, 8, 1);
        c.vocab = 0;
        match c.validate().unwrap_err() {
            Error::InvalidConfig { field, .. } => assert_eq!(field, "model.vocab"),
            e => panic!("{e}"),
        }
        assert!(cfg(4, 8, 3).validate().is_err());
        assert!(cfg(4, 8, 2).validate().is_ok());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let c = cfg(4, 6, 1);
        let (p, h) = seeded(&c, 1, 1);
        let lp = &p.layers[0];
        let ops = Ops::unmetered();
        let (out, acts) = layer_forward_full(&h, lp, ops).unwrap();
        assert_eq!(acts.acts.p.data(), &[1.0]);
        // O is exactly the single V row.
        assert_eq!(acts.acts.o.data(), acts.kv.v.data());
        // MLP of that row.
        let o = &acts.acts.o;
        let up = ops.matmul(o, &lp.w_up, false, FlopCategory::Mlp, Tag::Scratch).unwrap();
        let g = ops.matmul(o, &lp.w_gate, false, FlopCategory::Mlp, Tag::Scratch).unwrap();
        let a: Vec<f64> = up
            .data()
            .iter()
            .zip(g.data())
            .map(|(&u, &g)| g * sigmoid_scalar(g) * u)
            .collect();
        let a = Matrix::from_vec(1, 6, a, Tag::Scratch, None).unwrap();
        let want = ops.matmul(&a, &lp.w_down, false, FlopCategory::Mlp, Tag::Scratch).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let c = cfg(4, 6, 2);
        let p = ModelParams::<f64>::zeros(&c);
        let h = SeededRng::new(2).matrix(5, 4, 3.0, Tag::Input);
        let (out, _) = layer_forward_full(&h, &p.layers[0], Ops::unmetered()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn chunks_match_full_forward_bitwise() {
        for g in [1, 2] {
            let c = cfg(8, 12, g);
            let (p, h) = seeded(&c, 13, 3);
            let lp = &p.layers[0];
            let ops = Ops::unmetered();
            let (full, acts) = layer_forward_full(&h, lp, ops).unwrap();
            for d in [1, 2, 3, 5, 13] {
                let plan = ChunkPlan::balanced(13, d).unwrap();
                for i in 0..plan.chunks() {
                    let r = plan.range(i).unwrap();
                    let (out, _) = layer_forward_chunk(&h, &plan, i, &acts.kv, lp, ops).unwrap();
                    assert_eq!(out.data(), full.rows_view(r.start, r.end).data);
                }
            }
            let single = ChunkPlan::single(13);
            let (out, _) = layer_forward_chunk(&h, &single, 0, &acts.kv, lp, ops).unwrap();
            assert!(out.bitwise_eq(&full));
            assert!(matches!(
                layer_forward_chunk(&h, &single, 1, &acts.kv, lp, ops),
                Err(Error::ChunkOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn attention_is_causal() {
        let c = cfg(4, 6, 1);
        let (p, h) = seeded(&c, 9, 4);
        let (_, acts) = layer_forward_full(&h, &p.layers[0], Ops::unmetered()).unwrap();
        let pm = &acts.acts.p;
        for t in 0..9 {
            for u in t + 1..9 {
                assert_eq!(pm.get(t, u), 0.0);
            }
        }
    }

    #[test]
    fn chunk_memory_is_metered_and_released() {
        let c = cfg(8, 16, 1);
        let (p, h) = seeded(&c, 16, 5);
        let meter = Meter::new();
        let ops = Ops::new(&meter);
        let plan = ChunkPlan::balanced(16, 4).unwrap();
        let kv = compute_kv(&h, &p.layers[0], ops);
        let kv_bytes = kv.k.bytes() + kv.v.bytes();
        meter.begin_window();
        let (out, acts) = layer_forward_chunk(&h, &plan, 3, &kv, &p.layers[0], ops).unwrap();
        let peak = meter.end_window();
        // q, o, out: 4x8; p: 4x16; up, gate, gated: 4x16.
        let expect = 8 * (3 * 4 * 8 + 4 * 16 + 3 * 4 * 16) as u64;
        assert_eq!(peak, expect);
        assert_eq!(meter.live_activation_bytes(), kv_bytes + out.bytes() + acts.bytes());
        drop((out, acts, kv));
        assert_eq!(meter.live_activation_bytes(), 0);
    }

    #[test]
    fn lm_head_cases() {
        let ops = Ops::unmetered();
        let h = SeededRng::new(6).matrix::<f64>(3, 4, 1.0, Tag::Input);
        let logits = lm_head_forward(&h, &Matrix::identity(4), ops).unwrap();
        assert_eq!(logits, h);
        assert_eq!(logits.tag(), Tag::Logits);
        let w = SeededRng::new(7).matrix::<f64>(4, 5, 1.0, Tag::Input);
        let row = Matrix::from_vec(1, 4, h.row(0).to_vec(), Tag::Input, None).unwrap();
        let l = lm_head_forward(&row, &w, ops).unwrap();
        for j in 0..5 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += row.get(0, k) * w.get(k, j);
            }
            assert_eq!(l.get(0, j), acc);
        }
        let z = lm_head_forward(&Matrix::zeros(2, 4, Tag::Input, None), &w, ops).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn causal_masks() {
        let m = build_causal_mask(2, None);
        assert_eq!(m.data, vec![true, false, true, true]);
        let full = build_causal_mask(16, None);
        for t in 0..16 {
            assert_eq!(full.row(t).iter().filter(|&&b| b).count(), t + 1);
        }
        let chunk = build_causal_mask(16, Some(4..9));
        for (i, t) in (4..9).enumerate() {
            assert_eq!(chunk.row(i), full.row(t));
        }
    }

    #[test]
    fn chunked_model_forward_equals_full() {
        let c = ModelConfig { layers: 3, ..cfg(8, 12, 2) };
        let (p, h) = seeded(&c, 11, 8);
        let ops = Ops::unmetered();
        let full = model_forward(&p, &h, &ChunkPlan::single(11), ops).unwrap();
        let chunked = model_forward(&p, &h, &ChunkPlan::balanced(11, 4).unwrap(), ops).unwrap();
        assert!(full.bitwise_eq(&chunked));
    }
}
