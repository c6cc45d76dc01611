//! Two chained matmuls, `Y = X W1`, `Z = Y W2`, `L = Σ Z`, differentiated
//! either over all rows at once or row chunk by row chunk.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metering::{FlopCategory, MemoryReport, Meter, Residency, Tag};
use crate::plan::ChunkPlan;
use crate::tensor::{Element, Matrix, Ops, SeededRng};

pub struct LinearResult<T: Element> {
    pub loss: f64,
    pub dw1: Matrix<T>,
    pub dw2: Matrix<T>,
    pub memory: MemoryReport,
    /// Peak bytes of `Y`, `Z` and their gradients.
    pub intermediate_bytes: u64,
    pub flops: u64,
}

/// One CSV row of the chunk-count sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinearDemoRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub peak_bytes: u64,
    pub intermediate_bytes: u64,
    pub flops: u64,
}

pub fn linear_standard_backward<T: Element>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    w2: &Matrix<T>,
    meter: &Meter,
) -> Result<LinearResult<T>> {
    run(x, w1, w2, &ChunkPlan::single(x.rows()), meter)
}

/// Gradients of `L` accumulated over `d` row chunks of `X`.
pub fn linear_stream_backward<T: Element>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    w2: &Matrix<T>,
    d: usize,
    meter: &Meter,
) -> Result<LinearResult<T>> {
    run(x, w1, w2, &ChunkPlan::balanced(x.rows(), d)?, meter)
}

fn run<T: Element>(x: &Matrix<T>, w1: &Matrix<T>, w2: &Matrix<T>, plan: &ChunkPlan, meter: &Meter) -> Result<LinearResult<T>> {
    if x.cols() != w1.rows() || w1.cols() != w2.rows() {
        return Err(Error::shape(
            "linear_stream_backward",
            format!("X {:?}, W1 {:?}, W2 {:?}", x.shape(), w1.shape(), w2.shape()),
        ));
    }
    let ops = Ops::new(meter);
    let (n, k) = (w1.cols(), w2.cols());
    let _inputs = Residency::new(meter, x.bytes(), Tag::Input);
    let _weights = Residency::new(meter, w1.bytes() + w2.bytes(), Tag::Parameter);
    let mut dw1 = ops.alloc::<T>(w1.rows(), n, Tag::Gradient);
    let mut dw2 = ops.alloc::<T>(n, k, Tag::Gradient);
    let mut loss = 0.0;

    for rows in plan.ranges() {
        let r = rows.len();
        let xi = x.rows_view(rows.start, rows.end);
        let mut y = ops.alloc::<T>(r, n, Tag::Activation);
        ops.mm_acc(y.data_mut(), xi, w1.view(), FlopCategory::Mlp);
        let mut z = ops.alloc::<T>(r, k, Tag::Activation);
        ops.mm_acc(z.data_mut(), y.view(), w2.view(), FlopCategory::Mlp);
        for v in z.data() {
            loss += v.as_f64();
        }
        ops.flops(FlopCategory::Objective, z.data().len() as u64);
        drop(z);

        let mut dz = ops.alloc::<T>(r, k, Tag::Activation);
        dz.data_mut().fill(T::one());
        ops.mm_tn_acc(dw2.data_mut(), y.view(), dz.view(), FlopCategory::Mlp);
        let mut dy = ops.alloc::<T>(r, n, Tag::Activation);
        ops.mm_nt_acc(dy.data_mut(), dz.view(), w2.view(), FlopCategory::Mlp);
        drop(dz);
        drop(y);
        ops.mm_tn_acc(dw1.data_mut(), xi, dy.view(), FlopCategory::Mlp);
    }
    dw1.detach();
    dw2.detach();
    let memory = meter.memory_report();
    Ok(LinearResult {
        loss,
        dw1,
        dw2,
        intermediate_bytes: memory.peak_activation_bytes,
        memory,
        flops: meter.flops_report().grand_total(),
    })
}

/// Runs the streamed backward once per chunk count on seeded data.
pub fn linear_demo_sweep(
    rows: usize,
    m: usize,
    n: usize,
    k: usize,
    chunk_counts: &[usize],
    seed: u64,
) -> Result<Vec<LinearDemoRow>> {
    let mut rng = SeededRng::new(seed);
    let x = rng.matrix::<f64>(rows, m, 1.0, Tag::Input);
    let w1 = rng.matrix::<f64>(m, n, 1.0, Tag::Parameter);
    let w2 = rng.matrix::<f64>(n, k, 1.0, Tag::Parameter);
    chunk_counts
        .iter()
        .map(|&d| {
            let meter = Meter::new();
            let r = linear_stream_backward(&x, &w1, &w2, d, &meter)?;
            Ok(LinearDemoRow {
                d,
                peak_bytes: r.memory.peak_total_bytes,
                intermediate_bytes: r.intermediate_bytes,
                flops: r.flops,
            })
        })
        .collect()
}
