//! Seeded model, inputs and objective data for tests, benchmarks and the
//! command-line checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, Tag};
use crate::model::{layer_forward_full, model_forward, ModelConfig, ModelParams};
use crate::objectives::{log_sum_exp, DpoSpec, GrpoSpec, LossSpec, ObjectiveKind, SftSpec};
use crate::plan::ChunkPlan;
use crate::tensor::{Element, Matrix, Ops, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Sequences per group for the group policy objective.
    #[serde(default = "default_group")]
    pub group: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Mean instead of sum for cross-entropy.
    #[serde(default)]
    pub mean: bool,
}

fn default_group() -> usize {
    2
}
fn default_beta() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    0.2
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            group: default_group(),
            beta: default_beta(),
            epsilon: default_epsilon(),
            mean: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ObjectiveKind::Grpo {
            if self.group == 0 {
                return Err(Error::config("objective.group", "must be at least 1"));
            }
            if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
                return Err(Error::config("objective.epsilon", "must lie in (0, 1)"));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::config("objective.beta", "must be finite"));
        }
        Ok(())
    }
}

/// Half-width of the uniform noise separating sibling sequences.
pub const SIBLING_NOISE: f64 = 0.1;

pub struct Scenario<T: Element> {
    pub params: ModelParams<T>,
    pub inputs: Vec<Matrix<T>>,
    pub spec: LossSpec,
}

/// Builds a seeded scenario. Each weight matrix is uniform with standard
/// deviation `gain / sqrt(fan_in)`, with `W_q` and `W_k` further scaled by
/// `d^(-1/4)`; inputs are uniform in `±1`. Each
/// layer's `W_down` is then rescaled so that, on the first sequence, the
/// layer output has the same root-mean-square as its input. Further
/// sequences are the first plus uniform noise of half-width `SIBLING_NOISE`. Without this,
/// stacked layers drive activations and gradients to zero or overflow.
///
/// Old-policy logits for the group objective are shifted on the sampled
/// token so that every importance ratio sits at least 0.05 away from the
/// clip boundaries, keeping the loss smooth around the fixture.
pub fn build_scenario<T: Element>(
    model: &ModelConfig,
    seq_len: usize,
    objective: &ObjectiveConfig,
    gain: f64,
    seed: u64,
) -> Result<Scenario<T>> {
    model.validate()?;
    objective.validate()?;
    if seq_len == 0 {
        return Err(Error::config("model.seq_len", "must be at least 1"));
    }
    let root = SeededRng::new(seed);
    let mut wrng = root.split(0);
    let mut drng = root.split(1);
    let mut params = ModelParams::<T>::random(model, &mut wrng, 1.0)?;
    for id in params.ids() {
        let m = params.tensor_mut(id);
        let fan_in = m.rows() as f64;
        m.scale_inplace(T::from_f64(gain * (3.0 / fan_in).sqrt()));
    }
    // Scores carry no temperature, so fold 1/sqrt(d) into Wq and Wk.
    let temper = T::from_f64((model.hidden as f64).powf(-0.25));
    for lp in &mut params.layers {
        lp.wq.scale_inplace(temper);
        lp.wk.scale_inplace(temper);
    }
    let c = model.vocab;
    let sequences = match objective.kind {
        ObjectiveKind::Sft => 1,
        ObjectiveKind::Grpo => objective.group,
        ObjectiveKind::Dpo => 2,
    };
    // Sequences of one group or preference pair answer the same prompt, so
    // they are drawn as small perturbations of a shared base sequence.
    let base: Matrix<T> = drng.matrix(seq_len, model.hidden, 1.0, Tag::Input);
    let inputs: Vec<Matrix<T>> = (0..sequences)
        .map(|b| {
            let mut h = base.clone();
            if b > 0 {
                for x in h.data_mut() {
                    *x = *x + T::from_f64(drng.uniform(-SIBLING_NOISE, SIBLING_NOISE));
                }
            }
            h
        })
        .collect();
    drop(base);
    normalize_layers(&mut params, &inputs[0])?;

    let current_logits = |h: &Matrix<T>| -> Result<Vec<f64>> {
        let ops = Ops::unmetered();
        let last = model_forward(&params, h, &ChunkPlan::single(seq_len), ops)?;
        Ok(ops
            .matmul(&last, &params.lm_head, false, FlopCategory::LmHead, Tag::Scratch)?
            .to_f64())
    };
    let tokens = |rng: &mut SeededRng| -> Vec<usize> { (0..seq_len).map(|_| rng.below(c)).collect() };

    let spec = match objective.kind {
        ObjectiveKind::Sft => LossSpec::Sft(SftSpec {
            labels: (0..seq_len - 1).map(|_| drng.below(c)).collect(),
            mean: objective.mean,
        }),
        ObjectiveKind::Grpo => {
            let eps = objective.epsilon;
            let mut toks = Vec::new();
            let mut old = Vec::new();
            let mut refl = Vec::new();
            let mut adv = Vec::new();
            for h in &inputs {
                let cur = current_logits(h)?;
                let tk = tokens(&mut drng);
                let mut o = cur.clone();
                for (t, &a) in tk.iter().enumerate() {
                    let row = &cur[t * c..(t + 1) * c];
                    let p_a = (row[a] - log_sum_exp(row)).exp();
                    let r = safe_ratio(&mut drng, eps, p_a);
                    o[t * c + a] += shift_for_ratio(p_a, r);
                }
                let rf: Vec<f64> = cur.iter().map(|x| x + drng.uniform(-0.5, 0.5)).collect();
                toks.push(tk);
                old.push(o);
                refl.push(rf);
                adv.push((0..seq_len).map(|_| drng.uniform(-1.0, 1.0)).collect());
            }
            LossSpec::Grpo(GrpoSpec {
                tokens: toks,
                old_logits: old,
                ref_logits: refl,
                advantages: adv,
                epsilon: eps,
                beta: objective.beta,
            })
        }
        ObjectiveKind::Dpo => {
            let mut refs = Vec::new();
            for h in &inputs {
                let cur = current_logits(h)?;
                refs.push(cur.iter().map(|x| x + drng.uniform(-0.5, 0.5)).collect::<Vec<f64>>());
            }
            let chosen = tokens(&mut drng);
            let rejected = tokens(&mut drng);
            let ref_rejected_logits = refs.pop().expect("two sequences");
            let ref_chosen_logits = refs.pop().expect("two sequences");
            LossSpec::Dpo(DpoSpec {
                chosen,
                rejected,
                ref_chosen_logits,
                ref_rejected_logits,
                beta: objective.beta,
            })
        }
    };
    Ok(Scenario { params, inputs, spec })
}

fn normalize_layers<T: Element>(params: &mut ModelParams<T>, h0: &Matrix<T>) -> Result<()> {
    let rms = |m: &Matrix<T>| {
        let v = m.to_f64();
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    };
    let ops = Ops::unmetered();
    let mut h = h0.clone();
    for lp in &mut params.layers {
        let target = rms(&h);
        let (out, _) = layer_forward_full(&h, lp, ops)?;
        let got = rms(&out);
        if got > 0.0 && got.is_finite() {
            lp.w_down.scale_inplace(T::from_f64(target / got));
        }
        h = layer_forward_full(&h, lp, ops)?.0;
    }
    Ok(())
}

/// A ratio at least 0.05 from `1 ± eps` and reachable from probability
/// `p_a` (the old probability `p_a / r` must stay below one).
fn safe_ratio(rng: &mut SeededRng, eps: f64, p_a: f64) -> f64 {
    let lo = 1.0 - eps;
    let hi = 1.0 + eps;
    let bands = [
        (lo - 0.2, lo - 0.05),
        (lo + 0.05, hi - 0.05),
        (hi + 0.05, hi + 0.2),
    ];
    let pick = rng.below(3);
    let (a, b) = bands[pick];
    let r = rng.uniform(a.max(0.05), b);
    if p_a / r < 0.95 {
        r
    } else {
        1.0
    }
}

/// Logit shift on the sampled token that turns probability `p_a` into
/// `p_a / r`.
fn shift_for_ratio(p_a: f64, r: f64) -> f64 {
    let q = p_a / r;
    (q * (1.0 - p_a) / (p_a * (1.0 - q))).ln()
}
