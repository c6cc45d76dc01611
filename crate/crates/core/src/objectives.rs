//! Loss heads: next-token cross-entropy, the clipped group policy objective
//! and the pairwise preference objective.
//!
//! Every head streams over row chunks of the final hidden states. A chunk's
//! logits are formed, turned into their gradient in place, folded into the
//! `W_lm_head` and hidden-state accumulators, and released before the next
//! chunk starts. Row-level loss arithmetic runs in `f64` whatever the
//! matrix element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, Meter, Tag};
use crate::plan::ChunkPlan;
use crate::tensor::{sigmoid_scalar, Element, Matrix, Ops};

/// Next-token cross-entropy. Row `t` of the logits scores `labels[t]`, the
/// token at position `t + 1`, so a length-`T` sequence has `T − 1` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSpec {
    pub labels: Vec<usize>,
    /// Divide the summed loss by the label count.
    #[serde(default)]
    pub mean: bool,
}

/// Clipped importance-ratio objective over a group of `G` sampled
/// sequences. Row `t` of sequence `j` scores `tokens[j][t]`. Old and
/// reference logits are constants, flattened `T × C` per sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSpec {
    pub tokens: Vec<Vec<usize>>,
    pub old_logits: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub beta: f64,
}

/// Pairwise preference objective over a chosen and a rejected sequence of
/// equal length. Reference logits are flattened `T × C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSpec {
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub ref_chosen_logits: Vec<f64>,
    pub ref_rejected_logits: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    Sft(SftSpec),
    Grpo(GrpoSpec),
    Dpo(DpoSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Sft,
    Grpo,
    Dpo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [ObjectiveKind::Sft, ObjectiveKind::Grpo, ObjectiveKind::Dpo];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Sft => "sft",
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::Dpo => "dpo",
        }
    }
}

impl LossSpec {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            LossSpec::Sft(_) => ObjectiveKind::Sft,
            LossSpec::Grpo(_) => ObjectiveKind::Grpo,
            LossSpec::Dpo(_) => ObjectiveKind::Dpo,
        }
    }

    /// Number of hidden-state sequences the objective consumes.
    pub fn sequences(&self) -> usize {
        match self {
            LossSpec::Sft(_) => 1,
            LossSpec::Grpo(g) => g.tokens.len(),
            LossSpec::Dpo(_) => 2,
        }
    }

    /// Number of logits rows scored per sequence of length `seq_len`.
    pub fn head_rows(&self, seq_len: usize) -> usize {
        match self {
            LossSpec::Sft(_) => seq_len.saturating_sub(1),
            _ => seq_len,
        }
    }

    pub fn validate(&self, seq_len: usize, vocab: usize) -> Result<()> {
        let check_tokens = |field: &str, toks: &[usize], len: usize| -> Result<()> {
            if toks.len() != len {
                return Err(Error::config(field, format!("expected {len} entries, got {}", toks.len())));
            }
            match toks.iter().find(|&&t| t >= vocab) {
                Some(&label) => Err(Error::LabelOutOfRange { label, vocab }),
                None => Ok(()),
            }
        };
        let check_len = |field: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::config(field, format!("expected {want} entries, got {got}")));
            }
            Ok(())
        };
        match self {
            LossSpec::Sft(s) => check_tokens("objective.labels", &s.labels, seq_len.saturating_sub(1)),
            LossSpec::Grpo(g) => {
                if !(g.epsilon > 0.0) {
                    return Err(Error::config("objective.epsilon", "must be positive"));
                }
                if !g.beta.is_finite() {
                    return Err(Error::config("objective.beta", "must be finite"));
                }
                let group = g.tokens.len();
                if group == 0 {
                    return Err(Error::config("objective.group", "must be at least 1"));
                }
                check_len("objective.old_logits", g.old_logits.len(), group)?;
                check_len("objective.ref_logits", g.ref_logits.len(), group)?;
                check_len("objective.advantages", g.advantages.len(), group)?;
                for j in 0..group {
                    check_tokens("objective.tokens", &g.tokens[j], seq_len)?;
                    check_len("objective.old_logits", g.old_logits[j].len(), seq_len * vocab)?;
                    check_len("objective.ref_logits", g.ref_logits[j].len(), seq_len * vocab)?;
                    check_len("objective.advantages", g.advantages[j].len(), seq_len)?;
                }
                Ok(())
            }
            LossSpec::Dpo(p) => {
                if !p.beta.is_finite() {
                    return Err(Error::config("objective.beta", "must be finite"));
                }
                check_tokens("objective.chosen", &p.chosen, seq_len)?;
                check_tokens("objective.rejected", &p.rejected, seq_len)?;
                check_len("objective.ref_chosen_logits", p.ref_chosen_logits.len(), seq_len * vocab)?;
                check_len("objective.ref_rejected_logits", p.ref_rejected_logits.len(), seq_len * vocab)
            }
        }
    }
}

/// Loss plus head gradients.
#[derive(Debug)]
pub struct HeadGradResult<T: Element> {
    pub loss: f64,
    pub g_lm_head: Matrix<T>,
    /// One hidden-state gradient per input sequence.
    pub g_h: Vec<Matrix<T>>,
    /// Accumulated log-ratio margin (preference objective only).
    pub ell: Option<f64>,
}

/// Running margin of the preference objective. Chunks push their share of
/// the margin; the loss and the gradient correction are only defined once
/// every chunk is in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoAccumulator {
    pub beta: f64,
    pub ell: f64,
}

impl DpoAccumulator {
    pub fn new(beta: f64) -> Self {
        DpoAccumulator { beta, ell: 0.0 }
    }

    pub fn push(&mut self, ell: f64) {
        self.ell += ell;
    }

    /// `σ(βℓ) − 1`, the scalar the accumulated `β ∂ℓ` gradient is
    /// multiplied by.
    pub fn factor(&self) -> f64 {
        sigmoid_scalar(self.beta * self.ell) - 1.0
    }

    /// `−log σ(βℓ)`.
    pub fn loss(&self) -> f64 {
        neg_log_sigmoid(self.beta * self.ell)
    }
}

pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `max + ln Σ exp(x − max)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &v in x {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// Per-token policy term and its derivative with respect to `log π_θ`.
/// On a tie between the clipped and unclipped branches the unclipped one
/// supplies the gradient.
pub fn grpo_token(
    logp: f64,
    logp_old: f64,
    logp_ref: f64,
    advantage: f64,
    epsilon: f64,
    beta: f64,
) -> (f64, f64) {
    let r = (logp - logp_old).exp();
    let unclipped = r * advantage;
    let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    let (ratio_term, d_ratio) = if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    };
    let f = ratio_term - beta * (logp - logp_ref);
    (f, d_ratio - beta)
}

const OBJECTIVE_FLOPS_PER_LOGIT: u64 = 4;

/// Accumulates into `g_w` and `g_h` and returns the loss and (preference
/// objective only) the margin. `g_h` and `g_w` are expected to start at zero
/// when the preference correction applies.
pub(crate) fn run_head<T: Element>(
    hs: &[&Matrix<T>],
    w: &Matrix<T>,
    spec: &LossSpec,
    plan: &ChunkPlan,
    ops: Ops<'_>,
    g_w: &mut Matrix<T>,
    g_h: &mut [Matrix<T>],
) -> Result<(f64, Option<f64>)> {
    let vocab = w.cols();
    let mut loss_sum = 0.0;
    let mut dpo = match spec {
        LossSpec::Dpo(p) => Some(DpoAccumulator::new(p.beta)),
        _ => None,
    };
    let group = hs.len();
    let seq_len = hs.first().map_or(0, |h| h.rows());
    let (grad_scale, loss_scale) = match spec {
        LossSpec::Sft(s) if s.mean && !plan.is_empty() => {
            let n = plan.len() as f64;
            (1.0 / n, 1.0 / n)
        }
        LossSpec::Grpo(_) => {
            let n = (group * seq_len) as f64;
            (-1.0 / n, -1.0 / n)
        }
        _ => (1.0, 1.0),
    };
    let mut row = vec![0.0f64; vocab];

    for rows in plan.ranges() {
        for (b, h) in hs.iter().enumerate() {
            let hv = h.rows_view(rows.start, rows.end);
            let mut logits = ops.alloc::<T>(rows.len(), vocab, Tag::Logits);
            ops.mm_acc(logits.data_mut(), hv, w.view(), FlopCategory::LmHead);
            for (i, t) in rows.clone().enumerate() {
                let out = logits.row_mut(i);
                for (r, x) in row.iter_mut().zip(out.iter()) {
                    *r = x.as_f64();
                }
                let lse = log_sum_exp(&row);
                match spec {
                    LossSpec::Sft(s) => {
                        let y = s.labels[t];
                        loss_sum += lse - row[y];
                        for (j, o) in out.iter_mut().enumerate() {
                            let g = (row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
                            *o = T::from_f64(g * grad_scale);
                        }
                    }
                    LossSpec::Grpo(g) => {
                        let a = g.tokens[b][t];
                        let old = &g.old_logits[b][t * vocab..(t + 1) * vocab];
                        let logp_old = old[a] - log_sum_exp(old);
                        let rf = &g.ref_logits[b][t * vocab..(t + 1) * vocab];
                        let logp_ref = rf[a] - log_sum_exp(rf);
                        let (f, df) = grpo_token(
                            row[a] - lse,
                            logp_old,
                            logp_ref,
                            g.advantages[b][t],
                            g.epsilon,
                            g.beta,
                        );
                        loss_sum += f;
                        let coef = grad_scale * df;
                        for (j, o) in out.iter_mut().enumerate() {
                            let onehot = if j == a { 1.0 } else { 0.0 };
                            *o = T::from_f64(coef * (onehot - (row[j] - lse).exp()));
                        }
                    }
                    LossSpec::Dpo(p) => {
                        let (a, rf, sign) = if b == 0 {
                            (p.chosen[t], &p.ref_chosen_logits, 1.0)
                        } else {
                            (p.rejected[t], &p.ref_rejected_logits, -1.0)
                        };
                        let rf = &rf[t * vocab..(t + 1) * vocab];
                        let logp_ref = rf[a] - log_sum_exp(rf);
                        let acc = dpo.as_mut().expect("preference accumulator");
                        acc.push(sign * ((row[a] - lse) - logp_ref));
                        let coef = p.beta * sign;
                        for (j, o) in out.iter_mut().enumerate() {
                            let onehot = if j == a { 1.0 } else { 0.0 };
                            *o = T::from_f64(coef * (onehot - (row[j] - lse).exp()));
                        }
                    }
                }
            }
            ops.flops(FlopCategory::Objective, OBJECTIVE_FLOPS_PER_LOGIT * (rows.len() * vocab) as u64);
            ops.mm_tn_acc(g_w.data_mut(), hv, logits.view(), FlopCategory::LmHead);
            ops.mm_nt_acc(
                g_h[b].rows_mut(rows.start, rows.end),
                logits.view(),
                w.view(),
                FlopCategory::LmHead,
            );
        }
    }

    match dpo {
        Some(acc) => {
            let factor = T::from_f64(acc.factor());
            g_w.scale_inplace(factor);
            let mut n = g_w.data().len();
            for g in g_h.iter_mut() {
                g.scale_inplace(factor);
                n += g.data().len();
            }
            ops.flops(FlopCategory::Objective, n as u64);
            Ok((acc.loss(), Some(acc.ell)))
        }
        None => Ok((loss_sum * loss_scale, None)),
    }
}

fn head_checked<T: Element>(
    hs: &[&Matrix<T>],
    w: &Matrix<T>,
    spec: &LossSpec,
    d_head: usize,
    meter: Option<&Meter>,
) -> Result<HeadGradResult<T>> {
    let seq_len = hs.first().map_or(0, |h| h.rows());
    if hs.len() != spec.sequences() {
        return Err(Error::shape(
            "head",
            format!("objective takes {} sequences, got {}", spec.sequences(), hs.len()),
        ));
    }
    for h in hs {
        if h.shape() != (seq_len, w.rows()) {
            return Err(Error::shape(
                "head",
                format!("hidden states {}x{} with lm-head {}x{}", h.rows(), h.cols(), w.rows(), w.cols()),
            ));
        }
    }
    spec.validate(seq_len, w.cols())?;
    let plan = ChunkPlan::balanced(spec.head_rows(seq_len), d_head)?;
    let ops = match meter {
        Some(m) => Ops::new(m),
        None => Ops::unmetered(),
    };
    let mut g_w = ops.alloc(w.rows(), w.cols(), Tag::Gradient);
    let mut g_h: Vec<Matrix<T>> = hs
        .iter()
        .map(|h| ops.alloc(h.rows(), h.cols(), Tag::Gradient))
        .collect();
    let (loss, ell) = run_head(hs, w, spec, &plan, ops, &mut g_w, &mut g_h)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("head loss is {loss}")));
    }
    g_w.detach();
    g_h.iter_mut().for_each(Matrix::detach);
    Ok(HeadGradResult {
        loss,
        g_lm_head: g_w,
        g_h,
        ell,
    })
}

/// Cross-entropy head over the whole sequence at once.
pub fn sft_head_full<T: Element>(h: &Matrix<T>, w: &Matrix<T>, labels: &[usize]) -> Result<HeadGradResult<T>> {
    let spec = LossSpec::Sft(SftSpec {
        labels: labels.to_vec(),
        mean: false,
    });
    head_checked(&[h], w, &spec, 1, None)
}

pub fn sft_head_stream<T: Element>(
    h: &Matrix<T>,
    w: &Matrix<T>,
    spec: &SftSpec,
    d_head: usize,
    meter: &Meter,
) -> Result<HeadGradResult<T>> {
    head_checked(&[h], w, &LossSpec::Sft(spec.clone()), d_head, Some(meter))
}

pub fn grpo_head_stream<T: Element>(
    hs: &[Matrix<T>],
    w: &Matrix<T>,
    spec: &GrpoSpec,
    d_head: usize,
    meter: &Meter,
) -> Result<HeadGradResult<T>> {
    let refs: Vec<&Matrix<T>> = hs.iter().collect();
    head_checked(&refs, w, &LossSpec::Grpo(spec.clone()), d_head, Some(meter))
}

pub fn dpo_head_stream<T: Element>(
    h_chosen: &Matrix<T>,
    h_rejected: &Matrix<T>,
    w: &Matrix<T>,
    spec: &DpoSpec,
    d_head: usize,
    meter: &Meter,
) -> Result<HeadGradResult<T>> {
    head_checked(&[h_chosen, h_rejected], w, &LossSpec::Dpo(spec.clone()), d_head, Some(meter))
}

/// Any objective, streamed with `d_head` chunks.
pub fn head_stream<T: Element>(
    hs: &[Matrix<T>],
    w: &Matrix<T>,
    spec: &LossSpec,
    d_head: usize,
    meter: &Meter,
) -> Result<HeadGradResult<T>> {
    let refs: Vec<&Matrix<T>> = hs.iter().collect();
    head_checked(&refs, w, spec, d_head, Some(meter))
}
