use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kcrec_core::checkpoint::Checkpoint;
use kcrec_core::config::RunConfig;
use kcrec_core::eval::RankingReport;
use kcrec_core::pipeline::{evaluate_model, load_dataset, restore, train_run};

const SMALL: &str = "d0 = 8\nd1 = 8\nd_fused = 8\nhops = 2\nchannels = 2\nprototypes_user = 3\nprototypes_concept = 3\nepochs = 3\nbatch = 64\n";

fn kcrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kcrec")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    std::fs::create_dir_all(&data).unwrap();
    ok(&kcrec(&[
        "synth",
        "--out",
        s(&data),
        "--groups",
        "2",
        "--users-per-group",
        "8",
        "--concepts-per-group",
        "6",
        "--courses",
        "3",
        "--videos",
        "4",
        "--teachers",
        "2",
        "--p-in",
        "0.5",
        "--seed",
        &seed.to_string(),
    ]));
    data
}

/// A trained run directory and the data it was trained on.
struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    let config = dir.path().join("small.conf");
    std::fs::write(&config, SMALL).unwrap();
    let run = dir.path().join("run");
    ok(&kcrec(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]));
    Fixture { dir, data, run }
}

#[test]
fn synth_is_deterministic_with_five_node_types() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), 7);
    let b = synth(&dir.path().join("b"), 7);
    for f in ["schema.txt", "edges.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let schema = std::fs::read_to_string(a.join("schema.txt")).unwrap();
    assert_eq!(schema.lines().filter(|l| l.starts_with("node ")).count(), 5);
    let c = synth(&dir.path().join("c"), 8);
    assert_ne!(std::fs::read(a.join("edges.tsv")).unwrap(), std::fs::read(c.join("edges.tsv")).unwrap());

    let out = kcrec(&["synth", "--out", "/nonexistent/kcrec-dir"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/nonexistent/kcrec-dir"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let out = kcrec(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = kcrec(&["train", "--set", "nope=1", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config key `nope`"), "{}", stderr(&out));

    let out = kcrec(&["train", "--set", "tau=-1", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tau"));

    let out = kcrec(&["train", "--ablate", "w/o-everything", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_flag_shows_in_the_echo() {
    // Fails on the missing dataset after resolving and echoing the config.
    let out = kcrec(&["train", "--ablate", "w/o-cl", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("# effective config"));
    assert!(err.lines().any(|l| l == "beta = 0.0"), "{err}");
}

#[test]
fn config_file_loses_to_set_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    std::fs::write(&conf, "tau = 0.3\nbeta = 0.2\n").unwrap();
    let out = kcrec(&["train", "--config", s(&conf), "--set", "tau=0.6", "--out", "/tmp/x"]);
    let err = stderr(&out);
    assert!(err.lines().any(|l| l == "tau = 0.6"), "{err}");
    assert!(err.lines().any(|l| l == "beta = 0.2"), "{err}");
}

#[test]
fn train_evaluate_and_reload_agree() {
    let f = fixture();
    for file in ["model.ckpt", "loss.tsv", "config.txt"] {
        assert!(f.run.join(file).is_file(), "{file} missing");
    }
    let loss = std::fs::read_to_string(f.run.join("loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let report_path = f.dir.path().join("report.txt");
    let ckpt_path = f.run.join("model.ckpt");
    let summary = ok(&kcrec(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt_path),
        "--data",
        s(&f.data),
        "--out",
        s(&report_path),
    ]));
    assert!(summary.contains("HR@10="), "{summary}");
    let text = std::fs::read_to_string(&report_path).unwrap();
    let report = RankingReport::parse(&text).unwrap();

    // The same run in memory gives the same report bytes.
    let mut cfg = RunConfig::default();
    cfg.apply_text(SMALL).unwrap();
    cfg.data = Some(f.data.clone());
    let (hin, features, _) = load_dataset(&f.data, &cfg).unwrap();
    let trained = train_run(&hin, features, &cfg).unwrap();
    assert_eq!(trained.evaluate().unwrap().to_text(), text);
    assert_eq!(trained.checkpoint(&hin).to_bytes(), std::fs::read(&ckpt_path).unwrap());

    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let prepared = restore(&ckpt, &hin).unwrap();
    assert_eq!(evaluate_model(&ckpt.model, &ckpt.prototypes, &prepared).unwrap(), report);

    // Re-running from the echoed config reproduces the outputs.
    let rerun = f.dir.path().join("rerun");
    ok(&kcrec(&["train", "--config", s(&f.run.join("config.txt")), "--out", s(&rerun)]));
    for file in ["model.ckpt", "loss.tsv", "config.txt"] {
        assert_eq!(std::fs::read(f.run.join(file)).unwrap(), std::fs::read(rerun.join(file)).unwrap());
    }
}

#[test]
fn corrupted_checkpoint_reports_an_offset() {
    let f = fixture();
    let mut bytes = std::fs::read(f.run.join("model.ckpt")).unwrap();
    bytes.truncate(bytes.len() - 13);
    let bad = f.dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    let out = kcrec(&[
        "evaluate",
        "--checkpoint",
        s(&bad),
        "--data",
        s(&f.data),
        "--out",
        s(&f.dir.path().join("r.txt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("format error at offset"), "{}", stderr(&out));
}

#[test]
fn explain_lists_declared_relations() {
    let f = fixture();
    let text = ok(&kcrec(&["explain", "--checkpoint", s(&f.run.join("model.ckpt")), "--top-k", "3"]));
    let schema = std::fs::read_to_string(f.data.join("schema.txt")).unwrap();
    let mut names: Vec<String> = vec!["self".into()];
    for l in schema.lines().filter(|l| l.starts_with("edge ")) {
        let e = l.split_whitespace().nth(1).unwrap();
        names.push(e.to_string());
        names.push(format!("{e}_inv"));
    }
    let rows: Vec<Vec<&str>> = text.lines().filter(|l| !l.starts_with('#')).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2 * 3);
    for channel in rows.chunks(3) {
        let w: Vec<f64> = channel.iter().map(|r| r[2].parse().unwrap()).collect();
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        for r in channel {
            assert_eq!(r.len(), 3 + 2);
            assert!(r[3..].iter().all(|n| names.iter().any(|m| m == n)), "{r:?}");
        }
    }
}

#[test]
fn recommend_and_bench_contracts() {
    let f = fixture();
    let ckpt = f.run.join("model.ckpt");
    let out = ok(&kcrec(&["recommend", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--user", "0", "--top", "4"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("1\t"));

    let out = kcrec(&["recommend", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--user", "999"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ok(&kcrec(&["bench", "--checkpoint", s(&ckpt), "--data", s(&f.data)]));
    assert!(out.lines().any(|l| l == "batches = 20"), "{out}");
    assert!(out.lines().any(|l| l == "batch_size = 64"), "{out}");
    let out = ok(&kcrec(&[
        "bench",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--batches",
        "25",
        "--batch-size",
        "8",
    ]));
    assert!(out.lines().any(|l| l == "batches = 25"));
    assert!(out.lines().any(|l| l.starts_with("mean_ms = ")));
}
