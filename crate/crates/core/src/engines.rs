//! Standard, checkpointed and streamed backward passes.
//!
//! All three engines share the chunk-level forward and backward routines,
//! differing only in what they keep from the forward pass and how many
//! chunks a layer is split into. With a single chunk the streamed engine
//! performs exactly the checkpointed engine's operations in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, FlopsReport, Meter, MemoryReport, PassReport, Phase, Residency, Tag};
use crate::model::{
    chunk_activations, compute_kv, gate, layer_forward_chunked, layer_forward_full, ChunkActs, KvCache,
    LayerActivations, LayerParams, ModelParams, ParamId,
};
use crate::objectives::{run_head, LossSpec};
use crate::plan::{ChunkPlan, PartitionPlan};
use crate::tensor::{silu_grad_scalar, silu_scalar, softmax_backward_inplace, CausalMask, Element, Matrix, Ops, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Standard,
    Checkpoint,
    Stream,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Standard, EngineKind::Checkpoint, EngineKind::Stream];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Standard => "standard",
            EngineKind::Checkpoint => "checkpoint",
            EngineKind::Stream => "stream",
        }
    }
}

type KeptActs<T> = Vec<Option<ChunkActs<T>>>;

/// Parameter gradients plus the gradient with respect to each input
/// sequence.
pub struct GradStore<T: Element> {
    pub params: ModelParams<T>,
    pub inputs: Vec<Matrix<T>>,
}

impl<T: Element> GradStore<T> {
    pub fn tensor(&self, id: ParamId) -> &Matrix<T> {
        self.params.tensor(id)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let inputs = self
            .inputs
            .iter()
            .zip(&other.inputs)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        self.params.max_abs_diff(&other.params).max(inputs)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.bitwise_eq(&other.params)
            && self.inputs.len() == other.inputs.len()
            && self.inputs.iter().zip(&other.inputs).all(|(a, b)| a.bitwise_eq(b))
    }
}

pub struct BackwardResult<T: Element> {
    pub loss: f64,
    pub grads: GradStore<T>,
    pub memory: MemoryReport,
    pub flops: FlopsReport,
    pub passes: PassReport,
}

pub fn backward_standard<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    meter: &Meter,
) -> Result<BackwardResult<T>> {
    run_engine(EngineKind::Standard, params, inputs, spec, &PartitionPlan::unpartitioned(), meter)
}

pub fn backward_checkpoint<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    meter: &Meter,
) -> Result<BackwardResult<T>> {
    run_engine(EngineKind::Checkpoint, params, inputs, spec, &PartitionPlan::unpartitioned(), meter)
}

pub fn backward_stream<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    plan: &PartitionPlan,
    meter: &Meter,
) -> Result<BackwardResult<T>> {
    run_engine(EngineKind::Stream, params, inputs, spec, plan, meter)
}

/// Dispatch by engine kind. `plan` is ignored by the unpartitioned engines.
pub fn run_engine<T: Element>(
    kind: EngineKind,
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    plan: &PartitionPlan,
    meter: &Meter,
) -> Result<BackwardResult<T>> {
    let seq_len = validate_inputs(params, inputs, spec)?;
    plan.validate()?;
    let base = meter.live_activation_bytes();
    let (loss, mut grads) = {
        let _resident = Residency::new(meter, params.bytes(), Tag::Parameter);
        engine_body(kind, params, inputs, spec, plan, seq_len, meter)?
    };
    let live = meter.live_activation_bytes();
    if live != base {
        return Err(Error::AccountingBug(format!(
            "{} activation bytes still live after the {} engine",
            live - base,
            kind.name()
        )));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    grads.params.detach();
    grads.inputs.iter_mut().for_each(Matrix::detach);
    Ok(BackwardResult {
        loss,
        grads,
        memory: meter.memory_report(),
        flops: meter.flops_report(),
        passes: meter.pass_report(),
    })
}

fn validate_inputs<T: Element>(params: &ModelParams<T>, inputs: &[Matrix<T>], spec: &LossSpec) -> Result<usize> {
    let cfg = &params.config;
    cfg.validate()?;
    if inputs.len() != spec.sequences() {
        return Err(Error::shape(
            "engine",
            format!("objective takes {} sequences, got {}", spec.sequences(), inputs.len()),
        ));
    }
    let seq_len = inputs[0].rows();
    if seq_len == 0 {
        return Err(Error::config("model.seq_len", "must be at least 1"));
    }
    for h in inputs {
        if h.shape() != (seq_len, cfg.hidden) {
            return Err(Error::shape(
                "engine",
                format!("input {}x{}, expected {}x{}", h.rows(), h.cols(), seq_len, cfg.hidden),
            ));
        }
    }
    spec.validate(seq_len, cfg.vocab)?;
    Ok(seq_len)
}

fn engine_body<T: Element>(
    kind: EngineKind,
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    plan: &PartitionPlan,
    seq_len: usize,
    meter: &Meter,
) -> Result<(f64, GradStore<T>)> {
    let ops = Ops::new(meter);
    let cfg = &params.config;
    let head_rows = spec.head_rows(seq_len);
    let (layer_plan, head_plan) = match kind {
        EngineKind::Stream => (plan.layer_plan(seq_len)?, plan.head_plan(head_rows)?),
        _ => (ChunkPlan::single(seq_len), ChunkPlan::single(head_rows)),
    };

    let mut grads = GradStore {
        params: ModelParams::zeros_tagged(cfg, Tag::Gradient, Some(meter)),
        inputs: Vec::new(),
    };

    // Forward. `outputs[l]` holds layer l's output, which is layer l+1's
    // input; only the standard engine also keeps per-layer activations.
    meter.set_phase(Phase::Forward);
    let mut outputs: Vec<Vec<Matrix<T>>> = Vec::with_capacity(cfg.layers);
    let mut stored: Vec<Vec<LayerActivations<T>>> = Vec::new();
    for (l, lp) in params.layers.iter().enumerate() {
        let mut outs = Vec::with_capacity(inputs.len());
        let mut acts_l = Vec::new();
        for (b, input) in inputs.iter().enumerate() {
            let h_in = if l == 0 { input } else { &outputs[l - 1][b] };
            let out = match kind {
                EngineKind::Standard => {
                    let (out, acts) = layer_forward_full(h_in, lp, ops)?;
                    acts_l.push(acts);
                    out
                }
                EngineKind::Checkpoint => layer_forward_full(h_in, lp, ops)?.0,
                EngineKind::Stream => layer_forward_chunked(h_in, &layer_plan, lp, ops)?,
            };
            outs.push(out);
        }
        outputs.push(outs);
        if kind == EngineKind::Standard {
            stored.push(acts_l);
        }
    }

    meter.set_phase(Phase::Head);
    let finals = outputs.pop().expect("at least one layer");
    let mut upstream: Vec<Matrix<T>> = finals
        .iter()
        .map(|h| ops.alloc(h.rows(), h.cols(), Tag::Gradient))
        .collect();
    let refs: Vec<&Matrix<T>> = finals.iter().collect();
    let (loss, _) = run_head(&refs, &params.lm_head, spec, &head_plan, ops, &mut grads.params.lm_head, &mut upstream)?;
    drop(refs);
    drop(finals);

    for l in (0..cfg.layers).rev() {
        let lp = &params.layers[l];
        let h_ins: Vec<&Matrix<T>> = if l == 0 {
            inputs.iter().collect()
        } else {
            outputs[l - 1].iter().collect()
        };
        let source = match kind {
            EngineKind::Standard => ActsSource::Stored(stored.pop().expect("stored layer")),
            _ => ActsSource::Reforward,
        };
        let g_in = layer_backward_batch(lp, l, &h_ins, &upstream, &layer_plan, source, &mut grads.params.layers[l], ops)?;
        drop(h_ins);
        upstream = g_in;
        if l > 0 {
            outputs.pop();
        }
    }
    grads.inputs = upstream;
    Ok((loss, grads))
}

pub(crate) enum ActsSource<T: Element> {
    Reforward,
    Stored(Vec<LayerActivations<T>>),
}

/// Backward of one layer for a batch of sequences, chunk by chunk.
/// Returns the gradient with respect to each sequence's layer input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_backward_batch<T: Element>(
    lp: &LayerParams<T>,
    layer: usize,
    h_ins: &[&Matrix<T>],
    upstreams: &[Matrix<T>],
    plan: &ChunkPlan,
    source: ActsSource<T>,
    g: &mut LayerParams<T>,
    ops: Ops<'_>,
) -> Result<Vec<Matrix<T>>> {
    let set_phase = |p: Phase| {
        if let Some(m) = ops.meter() {
            m.set_phase(p)
        }
    };
    let (kvs, mut kept): (Vec<KvCache<T>>, Option<KeptActs<T>>) = match source {
        ActsSource::Reforward => {
            set_phase(Phase::Reforward);
            (h_ins.iter().map(|h| compute_kv(h, lp, ops)).collect(), None)
        }
        ActsSource::Stored(stored) => {
            if plan.chunks() != 1 {
                return Err(Error::shape("layer backward", "stored activations cover one chunk"));
            }
            let (kvs, acts) = stored.into_iter().map(|a| (a.kv, Some(a.acts))).unzip();
            (kvs, Some(acts))
        }
    };
    set_phase(Phase::Backward);

    let (t, d, dkv) = (h_ins[0].rows(), lp.wq.rows(), lp.wk.cols());
    let mut g_in: Vec<Matrix<T>> = h_ins.iter().map(|_| ops.alloc(t, d, Tag::Gradient)).collect();
    let mut dk: Vec<Matrix<T>> = h_ins.iter().map(|_| ops.alloc(t, dkv, Tag::Gradient)).collect();
    let mut dv: Vec<Matrix<T>> = h_ins.iter().map(|_| ops.alloc(t, dkv, Tag::Gradient)).collect();

    for rows in plan.ranges() {
        if let Some(m) = ops.meter() {
            m.record_weight_load(layer);
        }
        for b in 0..h_ins.len() {
            let acts = match kept.as_mut() {
                Some(kept) => kept[b].take().expect("activations used once"),
                None => {
                    set_phase(Phase::Reforward);
                    let acts = chunk_activations(h_ins[b].view(), rows.clone(), &kvs[b], lp, ops)?;
                    set_phase(Phase::Backward);
                    acts
                }
            };
            chunk_backward(
                lp,
                h_ins[b].view(),
                &kvs[b],
                acts,
                upstreams[b].view(),
                g,
                &mut g_in[b],
                &mut dk[b],
                &mut dv[b],
                ops,
            );
        }
    }
    drop(kvs);

    for b in 0..h_ins.len() {
        let h = h_ins[b].view();
        ops.mm_tn_acc(g.wk.data_mut(), h, dk[b].view(), FlopCategory::QkvProj);
        ops.mm_tn_acc(g.wv.data_mut(), h, dv[b].view(), FlopCategory::QkvProj);
        ops.mm_nt_acc(g_in[b].data_mut(), dk[b].view(), lp.wk.view(), FlopCategory::QkvProj);
        ops.mm_nt_acc(g_in[b].data_mut(), dv[b].view(), lp.wv.view(), FlopCategory::QkvProj);
    }
    Ok(g_in)
}

/// One chunk's contribution to the parameter gradients, to `g_in` through
/// the chunk's queries, and to the full-width K/V gradient accumulators.
#[allow(clippy::too_many_arguments)]
fn chunk_backward<T: Element>(
    lp: &LayerParams<T>,
    h_in: View<'_, T>,
    kv: &KvCache<T>,
    acts: ChunkActs<T>,
    upstream: View<'_, T>,
    g: &mut LayerParams<T>,
    g_in: &mut Matrix<T>,
    dk: &mut Matrix<T>,
    dv: &mut Matrix<T>,
    ops: Ops<'_>,
) {
    let ChunkActs {
        rows,
        q,
        mut p,
        o,
        h_up,
        mut h_gate,
    } = acts;
    let (s, e) = (rows.start, rows.end);
    let n = e - s;
    let d = lp.wq.cols();
    let group = lp.kv_share();
    let g_out = upstream.rows_range(s, e);

    // One n x d_up buffer serves as the recomputed gate product, then as its
    // gradient, then as the up-projection gradient. The gate-projection
    // gradient overwrites `h_gate`.
    let mut buf = gate(&h_up, &h_gate, ops);
    ops.mm_tn_acc(g.w_down.data_mut(), buf.view(), g_out, FlopCategory::Mlp);
    buf.data_mut().fill(T::zero());
    ops.mm_nt_acc(buf.data_mut(), g_out, lp.w_down.view(), FlopCategory::Mlp);
    for ((da, x), &u) in buf.data_mut().iter_mut().zip(h_gate.data_mut()).zip(h_up.data()) {
        let pre = *x;
        *x = *da * u * silu_grad_scalar(pre);
        *da = *da * silu_scalar(pre);
    }
    ops.flops(FlopCategory::Mlp, 4 * buf.data().len() as u64);
    drop(h_up);
    let (d_up, d_gate) = (buf, h_gate);

    ops.mm_tn_acc(g.w_up.data_mut(), o.view(), d_up.view(), FlopCategory::Mlp);
    ops.mm_tn_acc(g.w_gate.data_mut(), o.view(), d_gate.view(), FlopCategory::Mlp);
    drop(o);
    let mut d_o = ops.alloc::<T>(n, d, Tag::Activation);
    ops.mm_nt_acc(d_o.data_mut(), d_up.view(), lp.w_up.view(), FlopCategory::Mlp);
    ops.mm_nt_acc(d_o.data_mut(), d_gate.view(), lp.w_gate.view(), FlopCategory::Mlp);
    drop(d_up);
    drop(d_gate);

    // dV needs P; afterwards each row of P is replaced by the score gradient.
    ops.grouped_tn_acc(dv.rows_mut(0, e), p.view(), d_o.view(), group, FlopCategory::AttnScore);
    let mut row = ops.alloc::<T>(1, e, Tag::Activation);
    let mut unmasked = 0;
    for i in 0..n {
        row.data_mut().fill(T::zero());
        ops.grouped_nt_acc(row.data_mut(), d_o.rows_view(i, i + 1), kv.v.rows_view(0, e), group, FlopCategory::AttnScore);
        unmasked += softmax_backward_inplace(row.data_mut(), p.row(i), 1, e, &CausalMask { row_offset: s + i });
        p.row_mut(i).copy_from_slice(row.data());
    }
    ops.flops(FlopCategory::AttnOut, 3 * unmasked);
    drop(row);
    drop(d_o);
    let d_s = p;

    let mut d_q = ops.alloc::<T>(n, d, Tag::Activation);
    ops.grouped_nn_acc(d_q.data_mut(), d_s.view(), kv.k.rows_view(0, e), group, FlopCategory::AttnScore);
    ops.grouped_tn_acc(dk.rows_mut(0, e), d_s.view(), q.view(), group, FlopCategory::AttnScore);
    drop(d_s);
    drop(q);

    ops.mm_tn_acc(g.wq.data_mut(), h_in.rows_range(s, e), d_q.view(), FlopCategory::QkvProj);
    ops.mm_nt_acc(g_in.rows_mut(s, e), d_q.view(), lp.wq.view(), FlopCategory::QkvProj);
}

/// Streamed backward of a single layer for one sequence. Accumulates the
/// parameter gradients into `grads` and returns `∂L/∂H_in`.
pub fn layer_stream_backward<T: Element>(
    lp: &LayerParams<T>,
    h_in: &Matrix<T>,
    upstream: &Matrix<T>,
    plan: &ChunkPlan,
    grads: &mut LayerParams<T>,
    meter: &Meter,
) -> Result<Matrix<T>> {
    if h_in.cols() != lp.wq.rows() || upstream.shape() != (h_in.rows(), lp.w_down.cols()) {
        return Err(Error::shape(
            "layer_stream_backward",
            format!(
                "input {}x{}, upstream {}x{}",
                h_in.rows(),
                h_in.cols(),
                upstream.rows(),
                upstream.cols()
            ),
        ));
    }
    if plan.len() != h_in.rows() {
        return Err(Error::shape(
            "layer_stream_backward",
            format!("plan covers {} positions, input has {}", plan.len(), h_in.rows()),
        ));
    }
    let ops = Ops::new(meter);
    let upstreams = [upstream.copy_as(Tag::Gradient, None)];
    let mut out = layer_backward_batch(lp, 0, &[h_in], &upstreams, plan, ActsSource::Reforward, grads, ops)?;
    let mut g = out.pop().expect("one sequence");
    g.detach();
    Ok(g)
}
