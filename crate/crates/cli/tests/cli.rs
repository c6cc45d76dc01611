use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn streambp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streambp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_gradcheck_grid_passes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("grad.csv");
    let o = streambp(&["gradcheck", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "engine,objective,T,layers,D_layer,D_head,er_abs,er_rel,pass");
    assert_eq!(lines.len(), 37);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
    assert!(!csv.contains('\r'));
}

#[test]
fn zero_vocab_is_a_usage_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", r#"{"model": {"hidden": 8, "mlp_hidden": 4, "vocab": 0, "layers": 1}}"#);
    let o = streambp(&["gradcheck", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.vocab"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    for body in [r#"{"seed": 1, "extra": true}"#, r#"{"sweep": {"seq_lens": [8]}}"#] {
        let cfg = write(&dir, "c.json", body);
        let o = streambp(&["bench", "--config", arg(&cfg)]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
}

#[test]
fn empty_sweep_gives_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", r#"{"sweep": {"seq_len": []}}"#);
    let o = streambp(&["bench", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("engine,objective,T,D_layer,D_head,peak_activation_bytes"));
}

fn bench_rows(cfg: &str, extra: &[&str]) -> Vec<Vec<String>> {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", cfg);
    let mut args = vec!["bench", "--config", arg(&cfg)];
    args.extend(extra);
    let o = streambp(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    stdout(&o)
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

const SMALL_BENCH: &str = r#"{
    "model": {"hidden": 8, "mlp_hidden": 16, "vocab": 16, "layers": 2},
    "sweep": {"seq_len": [32, 64], "d_layer": [1, 2, 4, 8], "engines": ["checkpoint", "stream"]},
    "seed": 4
}"#;

#[test]
fn bench_attention_flops_follow_the_chunk_law() {
    let rows = bench_rows(SMALL_BENCH, &[]);
    let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
    let (engine, t, d, peak, score) = (
        col("engine"),
        col("T"),
        col("D_layer"),
        col("peak_activation_bytes"),
        col("flops_attn_score"),
    );
    for tt in ["32", "64"] {
        let here: Vec<&Vec<String>> = rows[1..].iter().filter(|r| r[t] == tt).collect();
        let ckpt: u64 = here.iter().find(|r| r[engine] == "checkpoint").unwrap()[score].parse().unwrap();
        let stream: Vec<(u64, u64, u64)> = here
            .iter()
            .filter(|r| r[engine] == "stream")
            .map(|r| (r[d].parse().unwrap(), r[score].parse().unwrap(), r[peak].parse().unwrap()))
            .collect();
        assert_eq!(stream.len(), 4);
        for &(dd, s, _) in &stream {
            assert_eq!(s * 2 * dd, ckpt * (1 + dd), "T={tt} D={dd}");
        }
        assert!(stream.windows(2).all(|w| w[1].2 < w[0].2), "peaks must fall with D");
    }
}

#[test]
fn bench_cells_are_reproducible_except_wall_time() {
    let strip = |rows: Vec<Vec<String>>| rows.into_iter().map(|mut r| { r.pop(); r }).collect::<Vec<_>>();
    let a = strip(bench_rows(SMALL_BENCH, &[]));
    let b = strip(bench_rows(SMALL_BENCH, &["--threads", "3"]));
    assert_eq!(a, b);
}

#[test]
fn bench_guard_rejects_oversized_points() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        r#"{"model": {"hidden": 8, "mlp_hidden": 4, "vocab": 4096, "layers": 1},
            "sweep": {"seq_len": [4096]}, "budget": {"activation_bytes": 1048576}}"#,
    );
    let o = streambp(&["bench", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budget"));
}

#[test]
fn lineardemo_intermediate_bytes_do_not_grow() {
    let o = streambp(&["lineardemo", "--chunks", "1,20,50"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "D,peak_bytes,intermediate_bytes,flops");
    assert_eq!(lines.len(), 4);
    let inter: Vec<u64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(inter.windows(2).all(|w| w[1] <= w[0]), "{inter:?}");
}

#[test]
fn distsim_reads_a_spec_file() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        &dir,
        "cluster.json",
        r#"[{"workers": 8, "layers": 4, "D": 8, "strategy": "naive", "sharding": "param_sharded",
             "bytes_per_layer_params": 4096, "bytes_per_layer_grads": 4096},
            {"workers": 8, "layers": 4, "D": 8, "strategy": "cached", "sharding": "param_sharded",
             "bytes_per_layer_params": 4096, "bytes_per_layer_grads": 4096}]"#,
    );
    let o = streambp(&["distsim", "--config", arg(&spec)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let col = lines[0].iter().position(|h| *h == "allgather_events").unwrap();
    assert_eq!(lines[1][col], "32");
    assert_eq!(lines[2][col], "4");
}

#[test]
fn distsim_missing_file_is_a_usage_error() {
    let o = streambp(&["distsim", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = streambp(&["distsim"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(streambp(&["gradcheck", "--dtype", "real16"]).status.code(), Some(2));
    assert_eq!(streambp(&["lineardemo", "--chunks", "0"]).status.code(), Some(2));
    assert_eq!(streambp(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn real32_gradcheck_passes_on_a_small_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", r#"{"sweep": {"seq_len": [12], "d_layer": [3]}}"#);
    let o = streambp(&["gradcheck", "--dtype", "real32", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);
}

/// Builds the binary with the softmax-backward sign flipped and checks that
/// the gradient harness notices.
#[test]
fn injected_softmax_bug_fails_gradcheck() {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fault");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let build = Command::new(cargo)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .args(["build", "--quiet", "--features", "fault-softmax-sign", "--target-dir"])
        .arg(&target)
        .output()
        .expect("cargo runs");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let o = Command::new(target.join("debug").join("streambp"))
        .args(["gradcheck"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outside tolerance"));
}
