//! Gradient comparison between engines and against finite differences of the
//! reference loss.

use std::collections::BTreeMap;

use crate::engines::GradStore;
use crate::error::Result;
use crate::model::ModelParams;
use crate::objectives::LossSpec;
use crate::oracle::{reference_forward_loss, ridders_difference, Coord};
use crate::tensor::{DType, Element, Matrix, SeededRng};

/// Initial finite-difference step of the adaptive extrapolation.
pub const FD_STEP: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Max absolute gradient difference between an engine and the standard
    /// engine.
    pub abs_vs_standard: f64,
    /// Max over tensors of the relative error against finite differences.
    pub rel_vs_fd: f64,
}

impl Tolerances {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::Real64 => Tolerances {
                abs_vs_standard: 1e-12,
                rel_vs_fd: 1e-5,
            },
            DType::Real32 => Tolerances {
                abs_vs_standard: 1e-4,
                rel_vs_fd: 1e-3,
            },
        }
    }
}

/// `‖g − fd‖₂ / ‖fd‖₂` over one tensor's sampled entries. Zero when both
/// vanish.
pub fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let diff = g.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    if diff == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

/// Which tensor a coordinate belongs to.
fn tensor_key(c: &Coord) -> String {
    match c {
        Coord::Param { id, .. } => id.to_string(),
        Coord::Input { seq, .. } => format!("input[{seq}]"),
    }
}

/// Picks up to `per_tensor` distinct entries of every parameter tensor and of
/// every input sequence.
pub fn sample_coords<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    per_tensor: usize,
    rng: &mut SeededRng,
) -> Vec<Coord> {
    let mut out = Vec::new();
    for id in params.ids() {
        let m = params.tensor(id);
        for flat in pick(m.rows() * m.cols(), per_tensor, rng) {
            out.push(Coord::Param {
                id,
                row: flat / m.cols(),
                col: flat % m.cols(),
            });
        }
    }
    for (seq, h) in inputs.iter().enumerate() {
        for flat in pick(h.rows() * h.cols(), per_tensor, rng) {
            out.push(Coord::Input {
                seq,
                row: flat / h.cols(),
                col: flat % h.cols(),
            });
        }
    }
    out
}

/// `k` distinct indices below `n` in ascending order (partial Fisher-Yates).
fn pick(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Adaptive finite differences of the reference loss at `coords`, evaluated
/// in double precision whatever `T` is.
pub fn fd_gradients<T: Element>(
    params: &ModelParams<T>,
    inputs: &[Matrix<T>],
    spec: &LossSpec,
    coords: &[Coord],
    h: f64,
) -> Result<Vec<f64>> {
    let mut p = widen_params(params);
    let mut hs: Vec<Matrix<f64>> = inputs.iter().map(widen).collect();
    coords
        .iter()
        .map(|&c| {
            let x = c.value(&p, &hs);
            let fd = ridders_difference(
                |v| {
                    let (mut p2, mut h2) = (p.clone(), hs.clone());
                    set(&mut p2, &mut h2, c, v);
                    reference_forward_loss(&p2, &h2, spec)
                },
                x,
                h,
            );
            set(&mut p, &mut hs, c, x);
            fd.map(|(d, _)| d)
        })
        .collect()
}

fn set(p: &mut ModelParams<f64>, hs: &mut [Matrix<f64>], c: Coord, v: f64) {
    match c {
        Coord::Param { id, row, col } => p.tensor_mut(id).set(row, col, v),
        Coord::Input { seq, row, col } => hs[seq].set(row, col, v),
    }
}

fn widen<T: Element>(m: &Matrix<T>) -> Matrix<f64> {
    Matrix::from_vec(m.rows(), m.cols(), m.to_f64(), m.tag(), None).expect("same shape")
}

fn widen_params<T: Element>(params: &ModelParams<T>) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::zeros(&params.config);
    for id in params.ids() {
        *p.tensor_mut(id) = widen(params.tensor(id));
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub max_abs_vs_standard: f64,
    pub max_rel_vs_fd: f64,
    pub bitwise_vs_standard: bool,
}

impl CheckReport {
    pub fn passes(&self, tol: &Tolerances) -> bool {
        self.max_abs_vs_standard <= tol.abs_vs_standard && self.max_rel_vs_fd <= tol.rel_vs_fd
    }
}

/// Compares `grads` with the standard engine's and with precomputed finite
/// differences `fd` at `coords`.
pub fn compare<T: Element>(
    grads: &GradStore<T>,
    standard: &GradStore<T>,
    coords: &[Coord],
    fd: &[f64],
) -> CheckReport {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (c, &f) in coords.iter().zip(fd) {
        let e = groups.entry(tensor_key(c)).or_default();
        e.0.push(c.grad(grads));
        e.1.push(f);
    }
    let max_rel_vs_fd = groups.values().map(|(g, f)| relative_error(g, f)).fold(0.0, f64::max);
    CheckReport {
        max_abs_vs_standard: grads.max_abs_diff(standard),
        max_rel_vs_fd,
        bitwise_vs_standard: grads.bitwise_eq(standard),
    }
}
