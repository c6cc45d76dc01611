//! Dense row-major matrices whose buffers report to a [`Meter`], plus the
//! handful of kernels the model needs.
//!
//! Every kernel accumulates each output element over its reduction index in
//! ascending order, starting from the element's current value. A fresh
//! product is therefore an accumulation into zeros, and repeated runs are
//! bitwise identical.

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, Meter, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Real32,
    Real64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Real32 => "real32",
            DType::Real64 => "real64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Real64 => 8,
        }
    }
}

pub trait Element: Float + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::Real32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Real64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense `rows × cols` matrix. Dropping a metered matrix releases its bytes.
pub struct Matrix<T: Element> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    tag: Tag,
    meter: Option<Meter>,
}

/// Borrowed row-major block: `rows` consecutive full rows of a matrix.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, T: Copy> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view size");
        View { data, rows, cols }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Rows `start..end` of this block.
    pub fn rows_range(&self, start: usize, end: usize) -> View<'a, T> {
        View {
            data: &self.data[start * self.cols..end * self.cols],
            rows: end - start,
            cols: self.cols,
        }
    }
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize, tag: Tag, meter: Option<&Meter>) -> Self {
        Self::from_parts(rows, cols, vec![T::zero(); rows * cols], tag, meter)
    }

    pub fn from_vec(
        rows: usize,
        cols: usize,
        data: Vec<T>,
        tag: Tag,
        meter: Option<&Meter>,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self::from_parts(rows, cols, data, tag, meter))
    }

    /// Unmetered matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data, Tag::Scratch, None)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n, Tag::Scratch, None);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    fn from_parts(rows: usize, cols: usize, data: Vec<T>, tag: Tag, meter: Option<&Meter>) -> Self {
        let m = Matrix {
            rows,
            cols,
            data,
            tag,
            meter: meter.cloned(),
        };
        if let Some(meter) = &m.meter {
            meter.track_alloc(m.bytes(), tag);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<T>()) as u64
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn rows_view(&self, start: usize, end: usize) -> View<'_, T> {
        self.view().rows_range(start, end)
    }

    pub fn rows_mut(&mut self, start: usize, end: usize) -> &mut [T] {
        &mut self.data[start * self.cols..end * self.cols]
    }

    /// Stops reporting to the meter, releasing this matrix's bytes there.
    pub fn detach(&mut self) {
        if let Some(meter) = self.meter.take() {
            if let Err(e) = meter.track_free(self.bytes(), self.tag) {
                panic!("{e}");
            }
        }
    }

    /// A copy under a different tag and meter.
    pub fn copy_as(&self, tag: Tag, meter: Option<&Meter>) -> Self {
        Self::from_parts(self.rows, self.cols, self.data.clone(), tag, meter)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn scale_inplace(&mut self, s: T) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Matrix<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: Element> Clone for Matrix<T> {
    fn clone(&self) -> Self {
        Self::from_parts(
            self.rows,
            self.cols,
            self.data.clone(),
            self.tag,
            self.meter.as_ref(),
        )
    }
}

impl<T: Element> Drop for Matrix<T> {
    fn drop(&mut self) {
        if let Some(meter) = self.meter.take() {
            if let Err(e) = meter.track_free(self.bytes(), self.tag) {
                panic!("{e}");
            }
        }
    }
}

impl<T: Element> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("dtype", &T::DTYPE)
            .field("tag", &self.tag)
            .finish()
    }
}

impl<T: Element> PartialEq for Matrix<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.data == other.data
    }
}

/// A matrix whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum DynMatrix {
    Real32(Matrix<f32>),
    Real64(Matrix<f64>),
}

impl DynMatrix {
    pub fn dtype(&self) -> DType {
        match self {
            DynMatrix::Real32(_) => DType::Real32,
            DynMatrix::Real64(_) => DType::Real64,
        }
    }

    pub fn matmul(&self, rhs: &DynMatrix, transpose_b: bool) -> Result<DynMatrix> {
        let ops = Ops::unmetered();
        match (self, rhs) {
            (DynMatrix::Real32(a), DynMatrix::Real32(b)) => Ok(DynMatrix::Real32(ops.matmul(
                a,
                b,
                transpose_b,
                FlopCategory::Objective,
                Tag::Scratch,
            )?)),
            (DynMatrix::Real64(a), DynMatrix::Real64(b)) => Ok(DynMatrix::Real64(ops.matmul(
                a,
                b,
                transpose_b,
                FlopCategory::Objective,
                Tag::Scratch,
            )?)),
            (a, b) => Err(Error::DType {
                op: "matmul",
                lhs: a.dtype().name(),
                rhs: b.dtype().name(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn_acc<T: Element>(out: &mut [T], a: View<'_, T>, b: View<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k);
    assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = a.row(i);
        for (p, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(p);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc<T: Element>(out: &mut [T], a: View<'_, T>, b: View<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    assert_eq!(b.cols, k);
    assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = out[i * n + j];
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn_acc<T: Element>(out: &mut [T], a: View<'_, T>, b: View<'_, T>) {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k);
    assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &api) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + api * bv;
            }
        }
    }
}

/// `out[m×e] += a[m×w] · expand(keys[e×w/g])ᵀ`, where column `c` of the
/// expanded operand is column `c / g` of `keys`.
pub fn grouped_nt_acc<T: Element>(out: &mut [T], a: View<'_, T>, keys: View<'_, T>, group: usize) {
    if group == 1 {
        return gemm_nt_acc(out, a, keys);
    }
    let (m, w, e) = (a.rows, a.cols, keys.rows);
    assert_eq!(keys.cols * group, w);
    assert_eq!(out.len(), m * e);
    for i in 0..m {
        let a_row = a.row(i);
        for c in 0..e {
            let k_row = keys.row(c);
            let mut acc = out[i * e + c];
            for (p, &x) in a_row.iter().enumerate() {
                acc = acc + x * k_row[p / group];
            }
            out[i * e + c] = acc;
        }
    }
}

/// `out[m×w] += a[m×e] · expand(vals[e×w/g])`.
pub fn grouped_nn_acc<T: Element>(out: &mut [T], a: View<'_, T>, vals: View<'_, T>, group: usize) {
    if group == 1 {
        return gemm_nn_acc(out, a, vals);
    }
    let (m, e) = (a.rows, a.cols);
    let w = vals.cols * group;
    assert_eq!(vals.rows, e);
    assert_eq!(out.len(), m * w);
    for i in 0..m {
        let out_row = &mut out[i * w..(i + 1) * w];
        let a_row = a.row(i);
        for (c, &aic) in a_row.iter().enumerate() {
            let v_row = vals.row(c);
            for (p, o) in out_row.iter_mut().enumerate() {
                *o = *o + aic * v_row[p / group];
            }
        }
    }
}

/// `out[e×w/g] += reduce_g(a[m×e]ᵀ · b[m×w])`: the transpose of
/// [`grouped_nn_acc`] with respect to `vals`.
pub fn grouped_tn_acc<T: Element>(out: &mut [T], a: View<'_, T>, b: View<'_, T>, group: usize) {
    if group == 1 {
        return gemm_tn_acc(out, a, b);
    }
    let (m, e, w) = (a.rows, a.cols, b.cols);
    let narrow = w / group;
    assert_eq!(b.rows, m);
    assert_eq!(narrow * group, w);
    assert_eq!(out.len(), e * narrow);
    for i in 0..m {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (c, &aic) in a_row.iter().enumerate() {
            let out_row = &mut out[c * narrow..(c + 1) * narrow];
            for (p, &bv) in b_row.iter().enumerate() {
                out_row[p / group] = out_row[p / group] + aic * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Masks and softmax
// ---------------------------------------------------------------------------

pub trait Mask {
    fn allows(&self, row: usize, col: usize) -> bool;
}

/// Explicit boolean mask; `true` means the entry takes part in the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        BoolMask {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

impl Mask for BoolMask {
    fn allows(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }
}

/// Causal mask rows `row_offset..row_offset + rows`: global row `t` may see
/// columns `0..=t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub row_offset: usize,
}

impl Mask for CausalMask {
    #[inline]
    fn allows(&self, row: usize, col: usize) -> bool {
        col <= self.row_offset + row
    }
}

/// Row-wise masked softmax in place. Returns the number of unmasked entries.
pub fn softmax_rows_inplace<T: Element>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    mask: &impl Mask,
) -> Result<u64> {
    assert_eq!(data.len(), rows * cols);
    let mut unmasked = 0u64;
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let mut max: Option<T> = None;
        for (j, &x) in row.iter().enumerate() {
            if mask.allows(i, j) {
                max = Some(match max {
                    Some(m) if m >= x => m,
                    _ => x,
                });
            }
        }
        let max = max.ok_or(Error::DegenerateRow { row: i })?;
        let mut sum = T::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if mask.allows(i, j) {
                let e = (*x - max).exp();
                *x = e;
                sum = sum + e;
                unmasked += 1;
            } else {
                *x = T::zero();
            }
        }
        for (j, x) in row.iter_mut().enumerate() {
            if mask.allows(i, j) {
                *x = *x / sum;
            }
        }
    }
    Ok(unmasked)
}

/// `grad ← p ∘ (grad − rowsum(grad ∘ p))` on unmasked entries, zero elsewhere.
/// Returns the number of unmasked entries.
pub fn softmax_backward_inplace<T: Element>(
    grad: &mut [T],
    probs: &[T],
    rows: usize,
    cols: usize,
    mask: &impl Mask,
) -> u64 {
    assert_eq!(grad.len(), rows * cols);
    assert_eq!(probs.len(), rows * cols);
    let mut unmasked = 0u64;
    for i in 0..rows {
        let g = &mut grad[i * cols..(i + 1) * cols];
        let p = &probs[i * cols..(i + 1) * cols];
        let mut dot = T::zero();
        for j in 0..cols {
            if mask.allows(i, j) {
                dot = dot + g[j] * p[j];
            }
        }
        for j in 0..cols {
            if mask.allows(i, j) {
                g[j] = p[j] * (g[j] - dot);
                #[cfg(feature = "fault-softmax-sign")]
                {
                    g[j] = -g[j];
                }
                unmasked += 1;
            } else {
                g[j] = T::zero();
            }
        }
    }
    unmasked
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Element>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// d silu / dx.
#[inline]
pub fn silu_grad_scalar<T: Element>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() + x * (T::one() - s))
}

// ---------------------------------------------------------------------------
// Metered operation front end
// ---------------------------------------------------------------------------

/// Allocation and FLOPs bookkeeping around the raw kernels.
#[derive(Clone, Copy)]
pub struct Ops<'m> {
    meter: Option<&'m Meter>,
}

impl<'m> Ops<'m> {
    pub fn new(meter: &'m Meter) -> Self {
        Ops { meter: Some(meter) }
    }

    pub fn unmetered() -> Self {
        Ops { meter: None }
    }

    pub fn meter(&self) -> Option<&'m Meter> {
        self.meter
    }

    pub fn alloc<T: Element>(&self, rows: usize, cols: usize, tag: Tag) -> Matrix<T> {
        Matrix::zeros(rows, cols, tag, self.meter)
    }

    pub fn flops(&self, category: FlopCategory, count: u64) {
        if let Some(m) = self.meter {
            m.add_flops(category, count);
        }
    }

    /// Dense product with shape checking; reports `2·m·k·n` FLOPs.
    pub fn matmul<T: Element>(
        &self,
        a: &Matrix<T>,
        b: &Matrix<T>,
        transpose_b: bool,
        category: FlopCategory,
        tag: Tag,
    ) -> Result<Matrix<T>> {
        let (m, k) = a.shape();
        let (kb, n) = if transpose_b {
            (b.cols(), b.rows())
        } else {
            (b.rows(), b.cols())
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{m}x{k} times {}x{}{}",
                    b.rows(),
                    b.cols(),
                    if transpose_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = self.alloc(m, n, tag);
        if transpose_b {
            gemm_nt_acc(out.data_mut(), a.view(), b.view());
        } else {
            gemm_nn_acc(out.data_mut(), a.view(), b.view());
        }
        self.flops(category, 2 * (m * k * n) as u64);
        Ok(out)
    }

    pub fn mm_acc<T: Element>(&self, out: &mut [T], a: View<'_, T>, b: View<'_, T>, cat: FlopCategory) {
        gemm_nn_acc(out, a, b);
        self.flops(cat, 2 * (a.rows * a.cols * b.cols) as u64);
    }

    pub fn mm_nt_acc<T: Element>(&self, out: &mut [T], a: View<'_, T>, b: View<'_, T>, cat: FlopCategory) {
        gemm_nt_acc(out, a, b);
        self.flops(cat, 2 * (a.rows * a.cols * b.rows) as u64);
    }

    pub fn mm_tn_acc<T: Element>(&self, out: &mut [T], a: View<'_, T>, b: View<'_, T>, cat: FlopCategory) {
        gemm_tn_acc(out, a, b);
        self.flops(cat, 2 * (a.rows * a.cols * b.cols) as u64);
    }

    pub fn grouped_nt_acc<T: Element>(
        &self,
        out: &mut [T],
        a: View<'_, T>,
        keys: View<'_, T>,
        group: usize,
        cat: FlopCategory,
    ) {
        grouped_nt_acc(out, a, keys, group);
        self.flops(cat, 2 * (a.rows * a.cols * keys.rows) as u64);
    }

    pub fn grouped_nn_acc<T: Element>(
        &self,
        out: &mut [T],
        a: View<'_, T>,
        vals: View<'_, T>,
        group: usize,
        cat: FlopCategory,
    ) {
        grouped_nn_acc(out, a, vals, group);
        self.flops(cat, 2 * (a.rows * a.cols * vals.cols * group) as u64);
    }

    pub fn grouped_tn_acc<T: Element>(
        &self,
        out: &mut [T],
        a: View<'_, T>,
        b: View<'_, T>,
        group: usize,
        cat: FlopCategory,
    ) {
        grouped_tn_acc(out, a, b, group);
        self.flops(cat, 2 * (a.rows * a.cols * b.cols) as u64);
    }
}

/// Row-wise softmax over unmasked entries; masked entries come out as 0.
pub fn stable_softmax_rows<T: Element>(s: &Matrix<T>, mask: &BoolMask) -> Result<Matrix<T>> {
    if (mask.rows, mask.cols) != s.shape() {
        return Err(Error::shape(
            "stable_softmax_rows",
            format!("mask {}x{} for scores {}x{}", mask.rows, mask.cols, s.rows(), s.cols()),
        ));
    }
    let mut out = s.clone();
    let (r, c) = out.shape();
    softmax_rows_inplace(out.data_mut(), r, c, mask)?;
    Ok(out)
}

pub fn sigmoid<T: Element>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    out
}

pub fn silu<T: Element>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = silu_scalar(*v));
    out
}

// ---------------------------------------------------------------------------
// Reproducible randomness
// ---------------------------------------------------------------------------

/// Seeded ChaCha8 stream. Identical on every platform; `split` derives an
/// independent stream from the same seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn matrix<T: Element>(&mut self, rows: usize, cols: usize, scale: f64, tag: Tag) -> Matrix<T> {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(self.uniform(-scale, scale)))
            .collect();
        Matrix::from_parts(rows, cols, data, tag, None)
    }
}
