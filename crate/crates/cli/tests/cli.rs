use std::path::Path;
use std::process::{Command, Output};

fn infodcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infodcl")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn ok(args: &[&str]) -> String {
    let o = infodcl(args);
    let (out, err) = text(&o);
    assert!(o.status.success(), "{args:?} failed\nstdout:\n{out}\nstderr:\n{err}");
    out
}

const SMALL: &[&str] = &[
    "--dim", "8", "--svd_rank", "2", "--steps", "20", "--epochs", "2", "--batch_size", "64", "--pretrain_epochs", "2",
    "--cutoffs", "5,10", "--monitor_cutoff", "10",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn usage_errors_exit_with_code_2() {
    for args in [&[][..], &["frobnicate"][..], &["train", "--no-such-flag", "1"][..]] {
        let o = infodcl(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let (_, err) = text(&o);
        assert!(err.to_lowercase().contains("usage"), "{err}");
    }
    assert_eq!(infodcl(&["verify-theory", "--theorem", "c"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_code_1_and_name_the_key() {
    let o = infodcl(&["print-config", "--dim", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("`dim`"), "{}", text(&o).1);

    let o = infodcl(&["print-config", "--variant", "no_such_variant"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("variant"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 3\nbogus = 1\n").unwrap();
    let o = infodcl(&["print-config", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("bogus"), "{}", text(&o).1);
}

#[test]
fn print_config_applies_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 3\n[loss]\ntau = 0.5\n").unwrap();
    let out = ok(&["print-config", "--config", cfg.to_str().unwrap(), "--epochs", "9", "--cutoffs", "5,20"]);
    assert!(out.contains("epochs = 9"));
    assert!(out.contains("tau = 0.5"));
    assert!(out.contains("cutoffs = [5, 20]"));
}

#[test]
fn prepare_reads_a_raw_log() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let mut log = String::from("user,item,rating\n");
    for u in 0..12 {
        for i in 0..6 {
            if (u + i) % 3 != 0 {
                log.push_str(&format!("u{u},i{i},5\n"));
            }
        }
    }
    log.push_str("u0,i1,4\n");
    std::fs::write(&raw, log).unwrap();
    let out = dir.path().join("ds");
    let stdout = ok(&[
        "prepare", "--data", raw.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--delimiter", "comma", "--skip_header", "true",
    ]);
    assert!(stdout.contains("users=12 items=6 interactions=48 duplicates_collapsed=1"), "{stdout}");
    for f in ["train.txt", "valid.txt", "test.txt", "user_ids.txt", "item_ids.txt", "stats.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn full_pipeline_on_a_synthetic_toy() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (ds, run) = (p("ds"), p("run"));
    ok(&["prepare", "--synthetic", "toy", "--out", &ds]);

    ok(&with(&["train", "--dataset", &ds, "--out", &run], SMALL));
    let run_dir = Path::new(&run);
    for f in ["config.toml", "best.ckpt", "metrics.csv", "train.log", "eval_test.txt", "eval_valid.txt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert!(log.contains("epoch 1 total="), "{log}");

    let ckpt = run_dir.join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let first = ok(&["eval", "--checkpoint", ckpt]);
    let second = ok(&["eval", "--checkpoint", ckpt]);
    assert_eq!(first, second);
    assert!(first.contains("recall@10 = "));
    assert_eq!(std::fs::read_to_string(run_dir.join("eval_test.txt")).unwrap(), first);

    let o = infodcl(&["eval", "--checkpoint", ckpt, "--dim", "16"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("dim"));

    ok(&["analyze-snr", "--checkpoint", ckpt, "--snr_samples", "50", "--snr_stride", "5"]);
    let snr = std::fs::read_to_string(run_dir.join("snr.csv")).unwrap();
    assert!(snr.starts_with("t,snr_gaussian,snr_informative\n"));
    assert!(snr.lines().last().unwrap().starts_with("20,"));

    ok(&["spectral-similarity", "--checkpoint", ckpt, "--spectral_batches", "3", "--spectral_batch_size", "16"]);
    let spectral = std::fs::read_to_string(run_dir.join("spectral.csv")).unwrap();
    assert_eq!(spectral.lines().count(), 1 + 3 * 2);

    ok(&["export-embeddings", "--checkpoint", ckpt, "--which", "items"]);
    ok(&["export-embeddings", "--checkpoint", ckpt, "--which", "generated"]);
    let items = std::fs::read_to_string(run_dir.join("items.txt")).unwrap();
    let generated = std::fs::read_to_string(run_dir.join("generated.txt")).unwrap();
    let item_ids = std::fs::read_to_string(Path::new(&ds).join("item_ids.txt")).unwrap();
    assert_eq!(items.lines().count(), item_ids.lines().count());
    assert_eq!(items.lines().next().unwrap().split(' ').count(), 8);
    assert_ne!(items, generated);
    let o = infodcl(&["export-embeddings", "--checkpoint", ckpt, "--which", "everything"]);
    assert_eq!(o.status.code(), Some(1));

    // metadata written by one command feeds another run
    let meta = p("meta");
    ok(&with(&["pretrain-metadata", "--dataset", &ds, "--out", &meta], SMALL));
    let file = Path::new(&meta).join("metadata_ch0.txt");
    let run2 = p("run2");
    ok(&with(&["train", "--dataset", &ds, "--out", &run2, "--metadata_files", file.to_str().unwrap()], SMALL));
}

#[test]
fn verify_theory_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let out = ok(&["verify-theory", "--theorem", "a", "--k", "1,2,4,8", "--out", a.to_str().unwrap()]);
    assert!(out.contains("constant"));
    let csv = std::fs::read_to_string(&a).unwrap();
    assert!(csv.starts_with("predictor,k,kappa,deviation\n"));
    assert_eq!(csv.lines().count(), 9);

    let b = dir.path().join("b.csv");
    let out = ok(&["verify-theory", "--theorem", "b", "--theorem_samples", "500", "--out", b.to_str().unwrap()]);
    assert!(out.contains("bound holds: true"), "{out}");
    let csv = std::fs::read_to_string(&b).unwrap();
    assert!(csv.starts_with("kappa,improvement,bound\n"));
    assert_eq!(csv.lines().count(), 21);

    let o = infodcl(&["verify-theory", "--theorem", "a", "--k", "0,2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_tabulates_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let ds = ds.to_str().unwrap();
    ok(&["prepare", "--synthetic", "toy", "--out", ds]);
    let out = dir.path().join("ablation");
    let stdout = ok(&with(&["ablate", "--dataset", ds, "--out", out.to_str().unwrap(), "--epochs", "1"], &SMALL[..6]));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table, stdout);
    assert_eq!(table.lines().count(), 6);
    for v in ["full", "no_sr", "no_cr", "no_psnet", "no_cbl"] {
        assert!(table.contains(&format!("\n{v},")), "{v}");
        assert!(out.join(v).join("best.ckpt").exists());
    }
}
