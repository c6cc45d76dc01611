use std::time::Instant;

use anyhow::Result;
use rayon::prelude::*;
use streambp::engines::{run_engine, EngineKind};
use streambp::metering::{FlopCategory, Meter};
use streambp::model::ModelConfig;
use streambp::objectives::ObjectiveKind;
use streambp::plan::PartitionPlan;
use streambp::scenario::build_scenario;
use streambp::tensor::{DType, Element};
use streambp::Error;

use crate::config::Config;
use crate::report::{float, Table};

const DEFAULT_MODEL: ModelConfig = ModelConfig {
    hidden: 32,
    mlp_hidden: 64,
    vocab: 64,
    layers: 2,
    kv_share: 1,
};
const DEFAULT_T: [usize; 3] = [128, 256, 512];
const DEFAULT_D: [usize; 4] = [1, 2, 4, 8];

pub fn header() -> Vec<String> {
    let mut h: Vec<String> = ["engine", "objective", "T", "D_layer", "D_head", "peak_activation_bytes", "peak_total_bytes"]
        .map(String::from)
        .to_vec();
    h.extend(FlopCategory::ALL.iter().map(|c| format!("flops_{}", c.name())));
    h.extend(["flops_total", "weight_reloads", "wall_seconds"].map(String::from));
    h
}

struct Point {
    engine: EngineKind,
    kind: ObjectiveKind,
    t: usize,
    d_layer: usize,
    d_head: usize,
}

pub fn run(cfg: &Config, seed: u64, dtype: DType) -> Result<Table> {
    let model = cfg.model_or(DEFAULT_MODEL);
    let engines = cfg.sweep.engines.clone().unwrap_or(EngineKind::ALL.to_vec());
    let objectives = cfg.sweep.objectives.clone().unwrap_or(vec![ObjectiveKind::Sft]);
    let mut points = Vec::new();
    for t in cfg.seq_lens(&DEFAULT_T) {
        guard(&model, t, dtype, cfg.budget.activation_bytes)?;
        for &kind in &objectives {
            for &engine in &engines {
                let parts = match engine {
                    EngineKind::Stream => cfg.partitions(t, &DEFAULT_D),
                    _ => vec![(1, 1)],
                };
                for (d_layer, d_head) in parts {
                    points.push(Point {
                        engine,
                        kind,
                        t,
                        d_layer,
                        d_head,
                    });
                }
            }
        }
    }
    let rows: Vec<Vec<String>> = points
        .par_iter()
        .map(|p| match dtype {
            DType::Real64 => measure::<f64>(cfg, &model, p, seed),
            DType::Real32 => measure::<f32>(cfg, &model, p, seed),
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&header());
    table.extend(rows);
    Ok(table)
}

/// Rejects points whose logits or hidden states alone would exceed the
/// activation budget.
fn guard(model: &ModelConfig, t: usize, dtype: DType, budget: u64) -> Result<(), Error> {
    let elem = dtype.size_bytes() as u64;
    for (what, width) in [("T*C", model.vocab), ("T*d", model.hidden)] {
        let bytes = (t as u64).saturating_mul(width as u64).saturating_mul(elem);
        if bytes > budget {
            return Err(Error::Guard(format!(
                "{what} at T={t} needs {bytes} bytes, over budget.activation_bytes={budget}"
            )));
        }
    }
    Ok(())
}

fn measure<T: Element>(cfg: &Config, model: &ModelConfig, p: &Point, seed: u64) -> Result<Vec<String>> {
    let s = build_scenario::<T>(model, p.t, &cfg.objective_for(p.kind), 1.0, seed)?;
    let plan = PartitionPlan::new(p.d_layer, p.d_head)?;
    let start = Instant::now();
    let r = run_engine(p.engine, &s.params, &s.inputs, &s.spec, &plan, &Meter::new())?;
    let secs = start.elapsed().as_secs_f64();
    let mut row = vec![
        p.engine.name().to_string(),
        p.kind.name().to_string(),
        p.t.to_string(),
        p.d_layer.to_string(),
        p.d_head.to_string(),
        r.memory.peak_activation_bytes.to_string(),
        r.memory.peak_total_bytes.to_string(),
    ];
    row.extend(FlopCategory::ALL.iter().map(|&c| r.flops.total(c).to_string()));
    row.push(r.flops.grand_total().to_string());
    row.push(r.passes.weight_reloads.iter().sum::<u64>().to_string());
    row.push(float(secs));
    Ok(row)
}
