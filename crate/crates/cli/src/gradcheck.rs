use anyhow::Result;
use rayon::prelude::*;
use streambp::engines::{backward_standard, run_engine, EngineKind};
use streambp::gradcheck::{compare, fd_gradients, sample_coords, Tolerances, FD_STEP};
use streambp::metering::Meter;
use streambp::model::ModelConfig;
use streambp::objectives::ObjectiveKind;
use streambp::plan::PartitionPlan;
use streambp::scenario::build_scenario;
use streambp::tensor::{DType, Element, SeededRng};

use crate::config::Config;
use crate::report::{float, Table};
use crate::Verdict;

const DEFAULT_MODEL: ModelConfig = ModelConfig {
    hidden: 8,
    mlp_hidden: 12,
    vocab: 11,
    layers: 2,
    kv_share: 2,
};
const DEFAULT_T: [usize; 3] = [8, 33, 64];
const DEFAULT_D: [usize; 4] = [1, 2, 4, 7];
/// Finite-difference samples per parameter tensor and per input sequence.
const SAMPLES_PER_TENSOR: usize = 24;

pub const HEADER: [&str; 9] = [
    "engine", "objective", "T", "layers", "D_layer", "D_head", "er_abs", "er_rel", "pass",
];

pub fn run(cfg: &Config, seed: u64, dtype: DType) -> Result<(Table, Verdict)> {
    let model = cfg.model_or(DEFAULT_MODEL);
    let objectives = cfg.sweep.objectives.clone().unwrap_or(ObjectiveKind::ALL.to_vec());
    let engines = cfg.sweep.engines.clone().unwrap_or(vec![EngineKind::Stream]);
    let groups: Vec<(ObjectiveKind, usize)> = objectives
        .iter()
        .flat_map(|&k| cfg.seq_lens(&DEFAULT_T).into_iter().map(move |t| (k, t)))
        .collect();
    let tol = Tolerances::for_dtype(dtype);
    let results: Vec<Vec<(Vec<String>, bool)>> = groups
        .par_iter()
        .map(|&(kind, t)| match dtype {
            DType::Real64 => check_group::<f64>(cfg, &model, &engines, kind, t, seed, &tol),
            DType::Real32 => check_group::<f32>(cfg, &model, &engines, kind, t, seed, &tol),
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(&HEADER);
    let mut failures = Vec::new();
    for (row, pass) in results.into_iter().flatten() {
        if !pass {
            failures.push(format!(
                "{} {} T={} D_layer={} D_head={}: er_abs={} er_rel={}",
                row[0], row[1], row[2], row[4], row[5], row[6], row[7]
            ));
        }
        table.push(row);
    }
    let verdict = if failures.is_empty() { Verdict::Pass } else { Verdict::Fail(failures) };
    Ok((table, verdict))
}

/// All rows for one (objective, T): the scenario, its finite differences and
/// the standard gradients are shared across partitions.
fn check_group<T: Element>(
    cfg: &Config,
    model: &ModelConfig,
    engines: &[EngineKind],
    kind: ObjectiveKind,
    t: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<Vec<(Vec<String>, bool)>> {
    let seed = seed ^ (1000 * (kind as u64 + 1) + t as u64);
    let s = build_scenario::<T>(model, t, &cfg.objective_for(kind), 1.0, seed)?;
    let coords = sample_coords(&s.params, &s.inputs, SAMPLES_PER_TENSOR, &mut SeededRng::new(seed ^ 0x5eed));
    let fd = fd_gradients(&s.params, &s.inputs, &s.spec, &coords, FD_STEP)?;
    let standard = backward_standard(&s.params, &s.inputs, &s.spec, &Meter::new())?;
    let mut rows = Vec::new();
    for &engine in engines {
        let partitions = match engine {
            EngineKind::Stream => cfg.partitions(t, &DEFAULT_D),
            _ => vec![(1, 1)],
        };
        for (d_layer, d_head) in partitions {
            let plan = PartitionPlan::new(d_layer, d_head)?;
            let r = run_engine(engine, &s.params, &s.inputs, &s.spec, &plan, &Meter::new())?;
            let c = compare(&r.grads, &standard.grads, &coords, &fd);
            let pass = c.passes(tol);
            rows.push((
                vec![
                    engine.name().to_string(),
                    kind.name().to_string(),
                    t.to_string(),
                    model.layers.to_string(),
                    d_layer.to_string(),
                    d_head.to_string(),
                    float(c.max_abs_vs_standard),
                    float(c.max_rel_vs_fd),
                    pass.to_string(),
                ],
                pass,
            ));
        }
    }
    Ok(rows)
}
