//! End-to-end tests of the `findna` binary: exit codes, artifact layout,
//! determinism, and the report/manifest schemas.

#[allow(dead_code)]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{motif_dataset, random_windows, write_dataset_csv, write_fasta_file};

fn findna() -> Command {
    Command::new(env!("CARGO_BIN_EXE_findna"))
}

fn run(args: &[&str]) -> Output {
    findna().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    dataset: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus.fa");
    write_fasta_file(&corpus, &random_windows(8, 600, 11));
    let dataset = root.join("data.csv");
    write_dataset_csv(&dataset, &motif_dataset(60, 32, 12));
    Fixture {
        _dir: dir,
        root,
        corpus,
        dataset,
    }
}

fn tiny_pretrain_args<'a>(fx: &'a Fixture, out: &'a Path, seed: &'a str) -> Vec<String> {
    [
        "pretrain",
        "--corpus",
        fx.corpus.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--windows-per-epoch",
        "8",
        "--window",
        "32",
        "--cls-tokens",
        "2",
        "--channels",
        "16",
        "--hidden",
        "32",
        "--layers",
        "1",
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        seed,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn pretrain_checkpoint(fx: &Fixture, out: &Path, seed: &str) -> PathBuf {
    let args = tiny_pretrain_args(fx, out, seed);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = run(&argv);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(stdout(&o).trim())
}

#[test]
fn pretrain_writes_checkpoint_loss_curve_and_manifest() {
    let fx = fixture();
    let out = fx.root.join("runs");
    let ckpt = pretrain_checkpoint(&fx, &out, "1");
    assert!(ckpt.exists());
    let run_dir = ckpt.parent().unwrap();

    let loss = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,lr,lambda,mnm,cl,total"));
    assert_eq!(lines.count(), 2); // 8 windows / batch 4

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["distill"]["alpha"], 0.5);
}

#[test]
fn pretrain_is_deterministic_under_a_fixed_seed() {
    let fx = fixture();
    let a = pretrain_checkpoint(&fx, &fx.root.join("runs_a"), "7");
    let b = pretrain_checkpoint(&fx, &fx.root.join("runs_b"), "7");
    let loss_a = std::fs::read_to_string(a.parent().unwrap().join("loss.csv")).unwrap();
    let loss_b = std::fs::read_to_string(b.parent().unwrap().join("loss.csv")).unwrap();
    assert_eq!(loss_a, loss_b);
    // The checkpoints agree bitwise too.
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn zero_epochs_emits_an_initialization_checkpoint() {
    let fx = fixture();
    let out = fx.root.join("runs");
    let mut args = tiny_pretrain_args(&fx, &out, "3");
    let pos = args.iter().position(|a| a == "--epochs").unwrap();
    args[pos + 1] = "0".into();
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = run(&argv);
    assert!(o.status.success());
    let ckpt = PathBuf::from(stdout(&o).trim());
    assert!(ckpt.exists());
    let loss = std::fs::read_to_string(ckpt.parent().unwrap().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1); // header only
}

#[test]
fn print_config_echoes_published_defaults_without_running() {
    let o = run(&["pretrain", "--print-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for needle in [
        "alpha = 0.5",
        "tau_s = 0.1",
        "tau_t = 0.04",
        "cls_tokens = 10",
        "beta = 0.996",
        "lambda_start = 0.996",
        "lambda_end = 1.0",
        "warmup_fraction = 0.3",
        "num_layers = 4",
        "channels = 308",
        "hidden = 512",
    ] {
        assert!(text.contains(needle), "missing `{needle}` in:\n{text}");
    }
}

#[test]
fn config_file_defaults_with_flag_overrides() {
    let fx = fixture();
    let cfg_path = fx.root.join("run.toml");
    std::fs::write(&cfg_path, "seed = 5\n[distill]\nalpha = 0.25\n").unwrap();
    let o = run(&[
        "pretrain",
        "--config",
        cfg_path.to_str().unwrap(),
        "--epochs",
        "2",
        "--print-config",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("alpha = 0.25")); // from the file
    assert!(text.contains("epochs = 2")); // flag override
    assert!(text.contains("seed = 5"));
}

#[test]
fn probe_and_finetune_write_schema_complete_reports() {
    let fx = fixture();
    let ckpt = pretrain_checkpoint(&fx, &fx.root.join("runs"), "1");
    for (cmd, mode) in [("probe", "linear_probe"), ("finetune", "finetune")] {
        let o = run(&[
            cmd,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            fx.dataset.to_str().unwrap(),
            "--epochs",
            "2",
            "--out-dir",
            fx.root.join("eval_runs").to_str().unwrap(),
            "--seed",
            "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report_path = find_one(&fx.root.join("eval_runs"), cmd, "report.json");
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report["mode"], mode);
        for field in ["top1_accuracy", "mcc", "f1_macro", "majority_baseline"] {
            assert!(report[field].is_number(), "missing {field}");
        }
        let confusion = report["confusion"].as_array().unwrap();
        assert_eq!(confusion.len(), 2);
        let csv = std::fs::read_to_string(report_path.with_extension("csv")).unwrap();
        assert!(csv.starts_with("mode,network,representation,top1_accuracy"));
    }
}

fn find_one(dir: &Path, prefix: &str, file: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(prefix))
        .map(|e| e.path().join(file))
        .filter(|p| p.exists())
        .collect();
    hits.sort();
    hits.pop().unwrap_or_else(|| panic!("no {prefix}/{file} under {}", dir.display()))
}

#[test]
fn student_and_teacher_probes_both_run() {
    let fx = fixture();
    let ckpt = pretrain_checkpoint(&fx, &fx.root.join("runs"), "1");
    let mut reports = Vec::new();
    for network in ["teacher", "student"] {
        let out = fx.root.join(format!("probe_{network}"));
        let o = run(&[
            "probe",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            fx.dataset.to_str().unwrap(),
            "--network",
            network,
            "--epochs",
            "2",
            "--out-dir",
            out.to_str().unwrap(),
            "--seed",
            "2",
        ]);
        assert!(o.status.success());
        let report_path = find_one(&out, "probe", "report.json");
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
        assert_eq!(report["network"], network);
        reports.push(report);
    }
    assert_eq!(reports.len(), 2);
}

#[test]
fn missing_inputs_exit_with_usage_code_2() {
    let fx = fixture();
    let o = run(&[
        "probe",
        "--checkpoint",
        "/nonexistent/checkpoint.fdna",
        "--dataset",
        fx.dataset.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["pretrain", "--corpus", "/nonexistent/corpus.fa"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["pretrain", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    // Invalid config values are usage errors too.
    let o = run(&[
        "pretrain",
        "--corpus",
        fx.corpus.to_str().unwrap(),
        "--cls-tokens",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augstats_emits_the_four_pair_table() {
    let fx = fixture();
    let out = fx.root.join("runs");
    let o = run(&[
        "augstats",
        "--corpus",
        fx.corpus.to_str().unwrap(),
        "--windows",
        "10",
        "--window",
        "120",
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(find_one(&out, "augstats", "kl.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pair,kl_divergence"));
    let pairs: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(pairs, ["M+NoAug", "M+DIT", "MDT+DIT", "MDT+NR"]);

    // An impossible minimum assertion fails with a runtime exit code.
    let o = run(&[
        "augstats",
        "--corpus",
        fx.corpus.to_str().unwrap(),
        "--windows",
        "10",
        "--window",
        "120",
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "4",
        "--assert-min",
        "MDT+NR",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_by_default_and_fails_at_zero_tolerance() {
    let o = run(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("worst:"));
    assert!(text.contains("gradcheck passed"));

    let o = run(&["gradcheck", "--seed", "1", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_reports_both_modes() {
    let fx = fixture();
    let out = fx.root.join("runs");
    let o = run(&[
        "bench",
        "--window",
        "64",
        "--cls-tokens",
        "2",
        "--channels",
        "16",
        "--hidden",
        "32",
        "--layers",
        "1",
        "--batch-size",
        "4",
        "--batches",
        "2",
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(find_one(&out, "bench", "bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "mode,mean_ms_per_batch,peak_rss_kb,forward_matmul_gflops_per_batch"
    );
    assert!(lines[1].starts_with("findna,"));
    assert!(lines[2].starts_with("cm_mnm,"));
    // Peak memory was actually measured.
    for line in &lines[1..] {
        let rss: u64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(rss > 0);
    }
}
