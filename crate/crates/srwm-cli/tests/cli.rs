//! End-to-end tests of the `srwm` binary: exit codes, output formats, and
//! cross-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_srwm")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("srwm_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn srwm")
}

const TINY_SYNC: &str = "\
[model]
layer_kind = srwm
d_model = 16
blocks = 1
heads = 2
d_ff = 32

[data]
protocol = synchronous
n_ways = 3
k_shots = 1
num_classes = 8
feature_dim = 6
noise_std = 0.05

[train]
total_steps = 60
learning_rate = 1e-3
batch_size = 4
bptt_span = 4
eval_every = 20
eval_episodes = 40
seed = 7
";

#[test]
fn train_is_byte_deterministic() {
    let dir = tmp("determinism");
    let cfg = write_cfg(&dir, "run.cfg", TINY_SYNC);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let ra = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_a.to_str().unwrap()]);
    assert!(ra.status.success(), "stderr: {}", String::from_utf8_lossy(&ra.stderr));
    let rb = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_b.to_str().unwrap()]);
    assert!(rb.status.success());
    let ma = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let mb = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb, "metrics logs differ between identical runs");
    // The resolved config is written next to the outputs.
    assert!(out_a.join("resolved.cfg").exists());
    assert!(out_a.join("final.ckpt").exists());
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let dir = tmp("missing_key");
    let cfg = write_cfg(&dir, "bad.cfg", "[model]\nlayer_kind = srwm\n[train]\ntotal_steps = 5\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("d_model"), "stderr does not name the key: {stderr}");
}

#[test]
fn unknown_key_exits_2() {
    let dir = tmp("unknown_key");
    let cfg = write_cfg(
        &dir,
        "bad.cfg",
        "[model]\nlayer_kind = srwm\nd_model = 16\nlayerz = 3\n[train]\ntotal_steps = 5\n",
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layerz"));
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["train", "--confg", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_train_finishes_quickly() {
    let dir = tmp("smoke");
    let smoke = TINY_SYNC.replace("total_steps = 60", "total_steps = 200");
    let cfg = write_cfg(&dir, "run.cfg", &smoke);
    let start = std::time::Instant::now();
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.join("out").to_str().unwrap()]);
    assert!(out.status.success());
    assert!(start.elapsed().as_secs() < 60, "smoke run took {:?}", start.elapsed());
}

#[test]
fn eval_emits_instance_table() {
    let dir = tmp("eval");
    let cfg = write_cfg(&dir, "run.cfg", TINY_SYNC);
    let out_dir = dir.join("out");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success());
    let r = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(out_dir.join("eval.txt")).unwrap();
    assert!(table.contains("1      2      3      5     10  Total"), "table:\n{table}");
}

#[test]
fn eval_refuses_mismatched_config() {
    let dir = tmp("eval_mismatch");
    let cfg = write_cfg(&dir, "run.cfg", TINY_SYNC);
    let out_dir = dir.join("out");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success());
    let other = write_cfg(&dir, "other.cfg", &TINY_SYNC.replace("seed = 7", "seed = 8"));
    let r = run(&[
        "eval",
        "--config",
        other.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("hash"));
}

#[test]
fn gen_episodes_sync_has_six_lines_per_episode() {
    let dir = tmp("gen");
    let cfg = write_cfg(
        &dir,
        "run.cfg",
        &TINY_SYNC.replace("n_ways = 3", "n_ways = 5").replace("num_classes = 8", "num_classes = 12"),
    );
    let out_dir = dir.join("out");
    let r = run(&[
        "gen-episodes",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--episodes",
        "4",
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let dump = std::fs::read_to_string(out_dir.join("episodes.txt")).unwrap();
    assert_eq!(dump.lines().count(), 4 * 6);
    // Loss mask set exactly on the final token of each block of six.
    for (i, line) in dump.lines().enumerate() {
        let mask = line.split(',').nth(4).unwrap();
        assert_eq!(mask, if i % 6 == 5 { "1" } else { "0" }, "line {i}");
    }

    // Same seed, identical dump.
    let out2 = dir.join("out2");
    let r = run(&[
        "gen-episodes",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out2.to_str().unwrap(),
        "--episodes",
        "4",
    ]);
    assert!(r.status.success());
    assert_eq!(
        std::fs::read(out_dir.join("episodes.txt")).unwrap(),
        std::fs::read(out2.join("episodes.txt")).unwrap()
    );
}

#[test]
fn flag_overrides_change_sampling() {
    let dir = tmp("overrides");
    let cfg = write_cfg(
        &dir,
        "run.cfg",
        &TINY_SYNC.replace("num_classes = 8", "num_classes = 12"),
    );
    let out_dir = dir.join("out");
    // 3-way delayed with 2 instances per class: 6 lines per episode.
    let r = run(&[
        "gen-episodes",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--episodes",
        "2",
        "--protocol",
        "delayed",
        "--N",
        "3",
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let dump = std::fs::read_to_string(out_dir.join("episodes.txt")).unwrap();
    // TINY_SYNC sets max_instances_per_class via default (15): 3 ways x 15.
    assert_eq!(dump.lines().count(), 2 * 45);
    let first: Vec<&str> = dump.lines().next().unwrap().split(',').collect();
    assert_eq!(first[2], "-1"); // delayed stream starts without a label
    assert_eq!(first[4], "1"); // and every token is scored
}

#[test]
fn multitask_eval_writes_per_position_curve() {
    let dir = tmp("multitask_eval");
    let cfg = write_cfg(
        &dir,
        "run.cfg",
        &TINY_SYNC
            .replace("protocol = synchronous", "protocol = delayed")
            .replace("noise_std = 0.05", "noise_std = 0.05\nmultitask = true\nmax_instances_per_class = 4\ntrim_lo = 1\ntrim_hi = 3")
            .replace("total_steps = 60", "total_steps = 0")
            .replace("bptt_span = 4", "bptt_span = 8"),
    );
    let out_dir = dir.join("out");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let r = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out_dir.join("per_position.csv")).unwrap();
    assert!(csv.starts_with("position,accuracy,count\n"));
    assert!(csv.lines().count() > 10);
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let out = run(&["gradcheck", "--kind", "srwm"]);
    assert_eq!(out.status.code(), Some(0), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
}

#[test]
fn gradcheck_all_kinds_pass() {
    let out = run(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "stdout: {}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn inspect_fresh_model_reports_exactly_half() {
    let dir = tmp("inspect");
    let cfg = write_cfg(&dir, "run.cfg", &TINY_SYNC.replace("total_steps = 60", "total_steps = 0"));
    let out_dir = dir.join("out");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let r = run(&[
        "inspect",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
        "--episodes",
        "5",
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    for line in stdout.lines().filter(|l| l.contains("component")) {
        assert!(
            line.contains("min 0.500000 mean 0.500000 max 0.500000"),
            "fresh sigma(beta) not exactly 0.5: {line}"
        );
    }
}

#[test]
fn inspect_without_self_referential_layers_is_an_error() {
    let dir = tmp("inspect_delta");
    let cfg = write_cfg(&dir, "run.cfg", &TINY_SYNC.replace("layer_kind = srwm", "layer_kind = delta_net"));
    let out_dir = dir.join("out");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(r.status.success());
    let r = run(&[
        "inspect",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no self-referential"));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tmp("diverge");
    let cfg = write_cfg(
        &dir,
        "run.cfg",
        &TINY_SYNC
            .replace("learning_rate = 1e-3", "learning_rate = 1e5\ngrad_clip_norm = inf")
            .replace("total_steps = 60", "total_steps = 400"),
    );
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.join("out").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tmp("resume");
    let cfg_text = TINY_SYNC.replace(
        "total_steps = 60",
        "total_steps = 60\ncheckpoint_every = 30",
    );
    let cfg = write_cfg(&dir, "run.cfg", &cfg_text);

    // Uninterrupted run to 60 steps, leaving a midpoint checkpoint behind.
    let full = dir.join("full");
    let r = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", full.to_str().unwrap()]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));

    // Resume from step 30 in a fresh directory; the final checkpoint must be
    // byte-identical to the uninterrupted one.
    let resumed = dir.join("resumed");
    let r = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        resumed.to_str().unwrap(),
        "--checkpoint",
        full.join("step_30.ckpt").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let a = std::fs::read(full.join("final.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("final.ckpt")).unwrap();
    assert_eq!(a, b, "resumed run diverged from the uninterrupted run");

    // A checkpoint from a different resolved config is refused.
    let other = write_cfg(&dir, "other.cfg", &cfg_text.replace("seed = 7", "seed = 8"));
    let r = run(&[
        "train",
        "--config",
        other.to_str().unwrap(),
        "--out-dir",
        dir.join("refused").to_str().unwrap(),
        "--checkpoint",
        full.join("step_30.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&r.stderr));
}
