//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::Instant;

use streambp::distsim::{simulate_standard_step, simulate_step, ClusterSpec, Sharding, Strategy};
use streambp::engines::{backward_checkpoint, backward_standard, backward_stream, layer_stream_backward};
use streambp::gradcheck::{compare, fd_gradients, sample_coords, Tolerances, FD_STEP};
use streambp::linear_demo::linear_demo_sweep;
use streambp::metering::{flops_ratio_attention, FlopCategory, Meter, Phase, Tag};
use streambp::model::{compute_kv, layer_forward_chunk, layer_forward_full, model_forward, LayerParams, ModelConfig, ModelParams};
use streambp::objectives::{
    dpo_head_stream, grpo_head_stream, grpo_token, sft_head_full, sft_head_stream, DpoAccumulator, DpoSpec, GrpoSpec,
    ObjectiveKind, SftSpec,
};
use streambp::plan::{ChunkPlan, PartitionPlan};
use streambp::scenario::{build_scenario, ObjectiveConfig};
use streambp::tensor::{DType, Matrix, Ops, SeededRng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_model(layers: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        mlp_hidden: 12,
        vocab: 11,
        layers,
        kv_share: 2,
    }
}

fn seed_for(kind: ObjectiveKind, t: usize, l: usize) -> u64 {
    1000 * (kind as u64 + 1) + 10 * t as u64 + l as u64
}

/// Stream vs standard and stream vs finite differences over the full grid.
fn exactness_grid() -> Outcome {
    let start = Instant::now();
    let tol = Tolerances::for_dtype(DType::Real64);
    let (mut worst_abs, mut worst_rel, mut cases, mut failures) = (0.0f64, 0.0f64, 0, Vec::new());
    for kind in ObjectiveKind::ALL {
        for t in [8, 33, 64] {
            for l in [1, 3] {
                let seed = seed_for(kind, t, l);
                let s = build_scenario::<f64>(&small_model(l), t, &ObjectiveConfig::new(kind), 1.0, seed).unwrap();
                let coords = sample_coords(&s.params, &s.inputs, 64, &mut SeededRng::new(seed ^ 0x5eed));
                let fd = fd_gradients(&s.params, &s.inputs, &s.spec, &coords, FD_STEP).unwrap();
                let standard = backward_standard(&s.params, &s.inputs, &s.spec, &Meter::new()).unwrap();
                for d_layer in [1, 2, 4, 7] {
                    for d_head in [1, 3, 10] {
                        let plan = PartitionPlan::new(d_layer, d_head).unwrap();
                        let r = backward_stream(&s.params, &s.inputs, &s.spec, &plan, &Meter::new()).unwrap();
                        let c = compare(&r.grads, &standard.grads, &coords, &fd);
                        worst_abs = worst_abs.max(c.max_abs_vs_standard);
                        worst_rel = worst_rel.max(c.max_rel_vs_fd);
                        cases += 1;
                        if !c.passes(&tol) {
                            failures.push(format!("{}/T={t}/L={l}/D={d_layer}/Dh={d_head}", kind.name()));
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && cases == 216 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{cases} cases, max|stream-standard|={worst_abs:.3e} (tol {:.0e}), max rel vs FD={worst_rel:.3e} (tol {:.0e}), {secs:.1}s (limit 120s){}",
            tol.abs_vs_standard,
            tol.rel_vs_fd,
            if failures.is_empty() { String::new() } else { format!(", failing: {failures:?}") }
        ),
    )
}

fn degenerate_partition_bitwise() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for kind in ObjectiveKind::ALL {
        for (t, g) in [(8, 1), (33, 2), (20, 1)] {
            let mut cfg = small_model(2);
            cfg.kv_share = g;
            let s = build_scenario::<f64>(&cfg, t, &ObjectiveConfig::new(kind), 1.0, 77 + t as u64).unwrap();
            let plan = PartitionPlan::new(1, 1).unwrap();
            let a = backward_stream(&s.params, &s.inputs, &s.spec, &plan, &Meter::new()).unwrap();
            let b = backward_checkpoint(&s.params, &s.inputs, &s.spec, &Meter::new()).unwrap();
            checked += 1;
            if !(a.grads.bitwise_eq(&b.grads) && a.loss.to_bits() == b.loss.to_bits()) {
                bad.push(format!("{}/T={t}/G={g}", kind.name()));
            }
        }
    }
    outcome(bad.is_empty(), format!("{checked} runs bitwise equal{}", fmt_bad(&bad)))
}

fn fmt_bad(bad: &[String]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!(", mismatches: {bad:?}")
    }
}

fn flops_law() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        hidden: 16,
        mlp_hidden: 32,
        vocab: 11,
        layers: 2,
        kv_share: 1,
    };
    let mut bad = Vec::new();
    let mut checked = 0;
    for kind in ObjectiveKind::ALL {
        for t in [64, 256] {
            let s = build_scenario::<f64>(&cfg, t, &ObjectiveConfig::new(kind), 1.0, 5).unwrap();
            let standard = backward_standard(&s.params, &s.inputs, &s.spec, &Meter::new()).unwrap().flops;
            let ckpt = backward_checkpoint(&s.params, &s.inputs, &s.spec, &Meter::new()).unwrap().flops;
            for d in [1, 2, 4, 8, 16] {
                let plan = PartitionPlan::new(d, d).unwrap();
                let stream = backward_stream(&s.params, &s.inputs, &s.spec, &plan, &Meter::new()).unwrap().flops;
                let ratio = flops_ratio_attention(t, cfg.hidden, d).unwrap();
                let attn = FlopCategory::AttnScore;
                let fb = [Phase::Forward, Phase::Backward];
                let ok_std = ratio.matches(stream.over(&fb, attn), standard.over(&fb, attn));
                let ok_ckpt = ratio.matches(stream.total(attn), ckpt.total(attn));
                let mut others = stream.by_category();
                let mut ck = ckpt.by_category();
                others.remove(&attn);
                ck.remove(&attn);
                checked += 1;
                if !(ok_std && ok_ckpt && others == ck) {
                    bad.push(format!(
                        "{}/T={t}/D={d}: attn {}:{} vs std {}, others equal {}",
                        kind.name(),
                        stream.over(&fb, attn),
                        stream.total(attn),
                        standard.over(&fb, attn),
                        others == ck
                    ));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 30.0,
        format!("{checked} (objective, T, D) points exact, {secs:.1}s (limit 30s){}", fmt_bad(&bad)),
    )
}

fn layer_memory_law() -> Outcome {
    let (t, d, du) = (1024, 64, 256);
    let cfg = ModelConfig {
        hidden: d,
        mlp_hidden: du,
        vocab: 2,
        layers: 1,
        kv_share: 1,
    };
    let mut rng = SeededRng::new(9);
    let params = ModelParams::<f64>::random(&cfg, &mut rng, 0.1).unwrap();
    let lp = &params.layers[0];
    let h_in = rng.matrix::<f64>(t, d, 1.0, Tag::Input);
    let upstream = rng.matrix::<f64>(t, d, 1.0, Tag::Gradient);

    let (_, full) = layer_forward_full(&h_in, lp, Ops::unmetered()).unwrap();
    let kv_bytes = full.kv.k.bytes() + full.kv.v.bytes();
    let chunkable = full.acts.bytes();
    drop(full);

    let mut peaks = Vec::new();
    for chunks in [1, 2, 4, 8, 16] {
        let meter = Meter::new();
        let plan = ChunkPlan::balanced(t, chunks).unwrap();
        let mut grads = LayerParams::<f64>::zeros(&cfg, Tag::Gradient, None);
        meter.begin_window();
        layer_stream_backward(lp, &h_in, &upstream, &plan, &mut grads, &meter).unwrap();
        peaks.push((chunks, meter.end_window()));
    }
    let peak8 = peaks.iter().find(|p| p.0 == 8).unwrap().1;
    let bound = ((kv_bytes + chunkable / 8) as f64 * 1.1) as u64;
    let monotone = peaks.windows(2).all(|w| w[1].1 <= w[0].1);
    outcome(
        peak8 <= bound && monotone,
        format!(
            "peak(D=8)={peak8} <= 1.1*(KV {kv_bytes} + {chunkable}/8) = {bound}; peaks {:?}; monotone {monotone}",
            peaks.iter().map(|p| p.1).collect::<Vec<_>>()
        ),
    )
}

fn head_memory_law() -> Outcome {
    let (t, c, hidden) = (1025, 512, 16);
    let mut rng = SeededRng::new(12);
    let h = rng.matrix::<f64>(t, hidden, 1.0, Tag::Activation);
    let w = rng.matrix::<f64>(hidden, c, 0.3, Tag::Parameter);
    let spec = SftSpec {
        labels: (0..t - 1).map(|_| rng.below(c)).collect(),
        mean: false,
    };
    let stream_meter = Meter::new();
    let s = sft_head_stream(&h, &w, &spec, 10, &stream_meter).unwrap();
    let full_meter = Meter::new();
    let f = sft_head_stream(&h, &w, &spec, 1, &full_meter).unwrap();
    let peak = stream_meter.memory_report().peak_for(Tag::Logits);
    let full_peak = full_meter.memory_report().peak_for(Tag::Logits);
    let bound = 1024u64.div_ceil(10) * 512 * 8 + 512 * 8;
    let same = (s.loss - f.loss).abs() <= 1e-9 * f.loss.abs();
    outcome(
        peak <= bound && full_peak == 1024 * 512 * 8 && same,
        format!("streamed logits peak {peak} <= {bound}; full path {full_peak}; losses agree {same}"),
    )
}

fn linear_demo() -> Outcome {
    let start = Instant::now();
    let ds = [1usize, 20, 50, 100];
    let rows = linear_demo_sweep(4096, 32, 32, 32, &ds, 3).unwrap();
    let base = rows[0].intermediate_bytes as f64;
    let mut ok = rows.windows(2).all(|w| w[1].intermediate_bytes < w[0].intermediate_bytes);
    ok &= rows.iter().all(|r| r.flops == rows[0].flops);
    let ratios: Vec<f64> = rows.iter().map(|r| r.intermediate_bytes as f64 / base).collect();
    for (r, &d) in ratios.iter().zip(&ds) {
        let lo = 1.0 / d as f64;
        ok &= *r >= lo && *r <= 1.15 * lo;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ok && secs < 10.0,
        format!(
            "ratios {:?} within [1/D, 1.15/D], flops {} for all D, {secs:.2}s (limit 10s)",
            ratios.iter().map(|r| format!("{r:.5}")).collect::<Vec<_>>(),
            rows[0].flops
        ),
    )
}

fn distributed_counts() -> Outcome {
    let spec = |sharding, strategy, layers, d| ClusterSpec {
        workers: 8,
        layers,
        chunks: d,
        strategy,
        sharding,
        bytes_per_layer_params: 4096,
        bytes_per_layer_grads: 4096,
        accumulation_steps: 1,
        reduce_at_end: false,
    };
    let naive = simulate_step(&spec(Sharding::ParamSharded, Strategy::Naive, 4, 8));
    let cached = simulate_step(&spec(Sharding::ParamSharded, Strategy::Cached, 4, 8));
    let mut ok = naive.allgather_events == 32 && cached.allgather_events == 4;
    for d in [1, 2, 5, 8, 64] {
        let s = spec(Sharding::Replicated, Strategy::Cached, 3, d);
        ok &= simulate_step(&s).reduce_events == simulate_standard_step(&s).reduce_events;
    }
    outcome(
        ok,
        format!(
            "param-sharded L=4 D=8 allgather naive={} cached={}; replicated cached reduce == standard for D in [1,2,5,8,64]",
            naive.allgather_events, cached.allgather_events
        ),
    )
}

fn objective_identities() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut rng = SeededRng::new(21);

    // Uniform logits: zero head weights.
    let (t, c) = (17, 13);
    let h = rng.matrix::<f64>(t, 6, 1.0, Tag::Activation);
    let w = Matrix::<f64>::zeros(6, c, Tag::Parameter, None);
    let labels: Vec<usize> = (0..t - 1).map(|_| rng.below(c)).collect();
    let sft = sft_head_full(&h, &w, &labels).unwrap();
    let want = (t - 1) as f64 * (c as f64).ln();
    let e = (sft.loss - want).abs();
    ok &= e <= 1e-12;
    notes.push(format!("sft err {e:.1e}"));

    // Preference objective with the reference equal to the policy.
    let w = rng.matrix::<f64>(6, c, 0.5, Tag::Parameter);
    let hc = rng.matrix::<f64>(t, 6, 1.0, Tag::Activation);
    let hr = rng.matrix::<f64>(t, 6, 1.0, Tag::Activation);
    let logits = |h: &Matrix<f64>| {
        Ops::unmetered()
            .matmul(h, &w, false, FlopCategory::LmHead, Tag::Scratch)
            .unwrap()
            .to_f64()
    };
    let beta = 0.7;
    let dpo = DpoSpec {
        chosen: (0..t).map(|_| rng.below(c)).collect(),
        rejected: (0..t).map(|_| rng.below(c)).collect(),
        ref_chosen_logits: logits(&hc),
        ref_rejected_logits: logits(&hr),
        beta,
    };
    let r = dpo_head_stream(&hc, &hr, &w, &dpo, 3, &Meter::new()).unwrap();
    let mut acc = DpoAccumulator::new(beta);
    acc.push(r.ell.unwrap());
    let (el, ef) = ((r.loss - LN_2).abs(), (acc.factor() + 0.5).abs());
    ok &= el <= 1e-12 && ef <= 1e-12;
    notes.push(format!("dpo loss err {el:.1e}, factor err {ef:.1e}"));

    // Group policy objective with identical current, old and reference.
    let group = 3;
    let hs: Vec<Matrix<f64>> = (0..group).map(|_| rng.matrix(t, 6, 1.0, Tag::Activation)).collect();
    let lg: Vec<Vec<f64>> = hs.iter().map(&logits).collect();
    let adv: Vec<Vec<f64>> = (0..group).map(|_| (0..t).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let grpo = GrpoSpec {
        tokens: (0..group).map(|_| (0..t).map(|_| rng.below(c)).collect()).collect(),
        old_logits: lg.clone(),
        ref_logits: lg,
        advantages: adv.clone(),
        epsilon: 0.2,
        beta: 0.1,
    };
    let r = grpo_head_stream(&hs, &w, &grpo, 4, &Meter::new()).unwrap();
    let mean_adv = adv.iter().flatten().sum::<f64>() / (group * t) as f64;
    let eg = (r.loss + mean_adv).abs();
    ok &= eg <= 1e-12;
    // beta = 0 leaves only the ratio term in the derivative.
    let sat = [
        grpo_token(1.5f64.ln(), 0.0, 0.0, 0.8, 0.2, 0.0).1,
        grpo_token(0.5f64.ln(), 0.0, 0.0, -0.8, 0.2, 0.0).1,
    ];
    ok &= sat.iter().all(|g| g.abs() <= 1e-12);
    notes.push(format!("grpo loss err {eg:.1e}, saturated grads {sat:?}"));
    outcome(ok, notes.join("; "))
}

fn causality_trials() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut failures = 0;
    let trials = 200;
    for _ in 0..trials {
        let g = [1, 2, 4][rng.below(3)];
        let cfg = ModelConfig {
            hidden: 4 * (1 + rng.below(3)),
            mlp_hidden: 2 + rng.below(12),
            vocab: 3,
            layers: 1 + rng.below(3),
            kv_share: g,
        };
        let t = 2 + rng.below(40);
        let chunks = 1 + rng.below(t.min(9));
        let params = ModelParams::<f64>::random(&cfg, &mut rng, 0.5).unwrap();
        let plan = ChunkPlan::balanced(t, chunks).unwrap();
        let index = rng.below(plan.chunks());
        let end = plan.range(index).unwrap().end;
        let h = rng.matrix::<f64>(t, cfg.hidden, 1.0, Tag::Input);
        let mut hp = h.clone();
        for r in end..t {
            for c in 0..cfg.hidden {
                hp.set(r, c, rng.uniform(-3.0, 3.0));
            }
        }
        let ops = Ops::unmetered();
        let lp = &params.layers[0];
        let chunk = |x: &Matrix<f64>| {
            let kv = compute_kv(x, lp, ops);
            layer_forward_chunk(x, &plan, index, &kv, lp, ops).unwrap().0
        };
        let same_chunk = chunk(&h).bitwise_eq(&chunk(&hp));
        let a = model_forward(&params, &h, &plan, ops).unwrap();
        let b = model_forward(&params, &hp, &plan, ops).unwrap();
        let same_prefix = (0..end).all(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !(same_chunk && same_prefix) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{trials} trials, {failures} failures"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exactness grid", exactness_grid),
        ("single-chunk bitwise equality", degenerate_partition_bitwise),
        ("attention FLOPs law", flops_law),
        ("layer memory law", layer_memory_law),
        ("head memory law", head_memory_law),
        ("linear demo", linear_demo),
        ("distributed counts", distributed_counts),
        ("objective identities", objective_identities),
        ("causality perturbations", causality_trials),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
