use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chainplan_cli::io::{read_csv, CellRow, LossRow, RunRow};

const TINY: &str = r#"
task = "arcs"
seeds = [0, 1]

[train]
hidden = [16, 16]
time_dim = 4
steps = 300
batch = 32
dataset_size = 256
log_every = 1

[sampler]
steps = 20
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chainplan"));
    c.env_remove("CHAINPLAN_OUTPUT_DIR").env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_compose_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("a");
    ok(&run(&cfg, &out, &["train"]));
    assert!(out.join("checkpoint.json").exists());

    let losses: Vec<LossRow> = read_csv(&out.join("loss.csv")).unwrap();
    assert_eq!(losses.len(), 300);
    let head: f64 = losses[..30].iter().map(|r| r.loss).sum();
    let tail: f64 = losses[270..].iter().map(|r| r.loss).sum();
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");

    ok(&run(&cfg, &out, &["compose"]));
    let rows: Vec<RunRow> = read_csv(&out.join("compose_guided.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.nfe_chunk, 40);
        let run_dir = out.join(&r.run_dir);
        for f in ["metrics.csv", "plan.csv", "chunks.csv", "plot.svg"] {
            assert!(run_dir.join(f).exists(), "{} missing {f}", run_dir.display());
        }
        let metrics = read(&run_dir.join("metrics.csv"));
        assert!(metrics.starts_with("step,t,t_prev,sigma,sync_loss,async_loss,start_err"));
        assert_eq!(metrics.lines().count(), 21);
        assert!(read(&run_dir.join("plot.svg")).contains("<polyline"));
    }
    // Seven plan frames for three 3-frame chunks.
    assert_eq!(read(&out.join(&rows[0].run_dir).join("plan.csv")).lines().count(), 8);

    ok(&run(&cfg, &out, &["eval"]));
    assert!(read(&out.join("eval.csv")).lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "2")] {
        ok(&run(&cfg, out, &["train"]));
        ok(&run(&cfg, out, &["--threads", threads, "compose"]));
    }
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));
    assert_eq!(read(&a.join("compose_guided.csv")), read(&b.join("compose_guided.csv")));
}

#[test]
fn seed_flag_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 20");
    let cfg = write_config(dir.path(), "tiny.toml", &text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&cfg, &a, &["--seed", "1", "train"]));
    ok(&run(&cfg, &b, &["--seed", "2", "train"]));
    assert_ne!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[train]", "[train]\ndataset = \"/nonexistent/arcs.csv\"");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let o = run(&cfg, &dir.path().join("o"), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/arcs.csv"));
}

#[test]
fn dataset_file_is_used_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 20");
    let cfg = write_config(dir.path(), "tiny.toml", &text);
    let a = dir.path().join("a");
    ok(&run(&cfg, &a, &["train"]));
    let from_file = text.replace(
        "[train]",
        &format!("[train]\ndataset = \"{}\"", a.join("dataset.csv").display()),
    );
    let cfg = write_config(dir.path(), "file.toml", &from_file);
    let b = dir.path().join("b");
    ok(&run(&cfg, &b, &["train"]));
    assert_eq!(read(&a.join("dataset.csv")), read(&b.join("dataset.csv")));
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
}

#[test]
fn schedule_mismatch_refuses_to_compose() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 5");
    let cfg = write_config(dir.path(), "tiny.toml", &text);
    let out = dir.path().join("o");
    ok(&run(&cfg, &out, &["train"]));
    let other = format!("{text}\n[schedule]\nsteps = 400\nbeta_start = 0.0001\nbeta_end = 0.02\neta_ddim = 1.0\n");
    let cfg = write_config(dir.path(), "other.toml", &other);
    let o = run(&cfg, &out, &["compose"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule"));
}

#[test]
fn compose_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = run(&cfg, &dir.path().join("empty"), &["compose"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "task = \"arcs\"\n\n[sampler]\ng_r = \"lots\"\n");
    let o = run(&cfg, &dir.path().join("o"), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn usage_errors_exit_with_config_status() {
    let o = bin().arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn single_chunk_guided_without_guidance_matches_independent() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}\n[chain]\nfactors = 1\nframes = 3\n", TINY.replace("steps = 20", "steps = 20\ng_r = 0.0"));
    let cfg = write_config(dir.path(), "one.toml", &text);
    let out = dir.path().join("o");
    ok(&run(&cfg, &out, &["train"]));
    ok(&run(&cfg, &out, &["compose"]));
    let indep = write_config(dir.path(), "indep.toml", &text.replace("g_r = 0.0", "g_r = 0.0\nkind = \"independent\""));
    ok(&run(&indep, &out, &["compose"]));
    let guided: Vec<RunRow> = read_csv(&out.join("compose_guided.csv")).unwrap();
    let independent: Vec<RunRow> = read_csv(&out.join("compose_independent.csv")).unwrap();
    for (g, i) in guided.iter().zip(&independent) {
        let plan = |r: &RunRow| read(&out.join(&r.run_dir).join("plan.csv"));
        assert_eq!(plan(g), plan(i));
        assert_eq!((g.nfe_chunk, i.nfe_chunk), (40, 20));
    }
}

#[test]
fn ablate_has_three_by_three_cells() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 20");
    let cfg = write_config(dir.path(), "tiny.toml", &text);
    let out = dir.path().join("o");
    ok(&run(&cfg, &out, &["train"]));
    ok(&run(&cfg, &out, &["ablate"]));
    let cells: Vec<CellRow> = read_csv(&out.join("ablate.csv")).unwrap();
    assert_eq!(cells.len(), 9);
    assert!(cells.iter().all(|c| c.runs == 2));
    let runs: Vec<RunRow> = read_csv(&out.join("ablate_runs.csv")).unwrap();
    assert_eq!(runs.len(), 18);
    assert!(runs.iter().all(|r| r.nfe_chunk == 2 * r.steps));
}

#[test]
fn diffcollage_trains_and_uses_the_boundary_model() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 20") + "kind = \"diffcollage\"\n";
    let cfg = write_config(dir.path(), "dc.toml", &text);
    let out = dir.path().join("o");
    ok(&run(&cfg, &out, &["train"]));
    assert!(out.join("boundary.json").exists());
    ok(&run(&cfg, &out, &["compose"]));
    let rows: Vec<RunRow> = read_csv(&out.join("compose_diffcollage.csv")).unwrap();
    // One batched pass of each model per step.
    assert!(rows.iter().all(|r| r.nfe_chunk == 20 && r.nfe_boundary == 20));
    // A plan sampled jointly has no transition error.
    assert!(rows.iter().all(|r| r.max_transition_err == 0.0));
}

#[test]
fn acceptance_section_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 300", "steps = 20") + "\n[acceptance]\nmax_median_residual = 0.0\n";
    let cfg = write_config(dir.path(), "strict.toml", &text);
    let out = dir.path().join("o");
    ok(&run(&cfg, &out, &["train"]));
    ok(&run(&cfg, &out, &["compose"]));
    assert_eq!(run(&cfg, &out, &["eval"]).status.code(), Some(3));
}

#[test]
fn gap_verify_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin().arg("--out").arg(out).args(["--seed", "5", "gap-verify"]).output().unwrap();
        ok(&o);
    }
    assert_eq!(read(&a.join("gap.csv")), read(&b.join("gap.csv")));
    assert_eq!(read(&a.join("gap.csv")).lines().count(), 1001);

    let c = dir.path().join("c");
    let o = bin()
        .arg("--out")
        .arg(&c)
        .args(["gap-verify", "--strength", "0", "--trials", "200"])
        .output()
        .unwrap();
    ok(&o);
    let out = String::from_utf8_lossy(&o.stdout);
    let delta: f64 = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_abs_delta="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(delta < 1e-14);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = chainplan_cli::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 3);
}
