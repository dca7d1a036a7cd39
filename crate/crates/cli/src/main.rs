use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use infodcl::analysis::{self, EmbeddingKind, LinearPredictor};
use infodcl::checkpoint;
use infodcl::config::{RunConfig, Variant};
use infodcl::data::{build_normalized_adjacency, load_interactions, split_dataset, synthetic, InteractionDataset};
use infodcl::diffusion::DiffusionSchedule;
use infodcl::linalg::write_matrix_text;
use infodcl::metadata::channel_metadata;
use infodcl::trainer::{run_training, EpochRecord};
use infodcl::{Real, RealCheckpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

fn overrides() -> Vec<Arg> {
    RunConfig::keys()
        .into_iter()
        .map(|k| {
            let dashed = k.replace('_', "-");
            let mut arg = Arg::new(k.clone()).long(k).value_name("VALUE").help_heading("Configuration overrides");
            if dashed != *arg.get_id() {
                arg = arg.alias(dashed);
            }
            arg
        })
        .collect()
}

fn command(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .arg(Arg::new("config").long("config").value_name("FILE").help("TOML run configuration"))
        .args(overrides())
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("PATH").help(help)
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true)
}

fn channel_arg() -> Arg {
    Arg::new("channel").long("channel").value_name("N").default_value("0").value_parser(clap::value_parser!(usize))
}

fn cli() -> Command {
    Command::new("infodcl")
        .about("Train and analyze diffusion contrastive recommenders with informative noise")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            command("prepare", "Ingest a raw interaction log and write a processed dataset directory")
                .arg(Arg::new("data").long("data").value_name("FILE").help("raw user/item log"))
                .arg(
                    Arg::new("synthetic")
                        .long("synthetic")
                        .value_name("KIND")
                        .value_parser(["toy", "ml100k"])
                        .conflicts_with("data")
                        .help("generate a seeded synthetic log instead (seed: split_seed)"),
                )
                .arg(out_arg("output directory [default: dataset]")),
        )
        .subcommand(
            command("pretrain-metadata", "Pretrain base embeddings and write per-channel metadata matrices")
                .arg(out_arg("output directory").default_value("metadata")),
        )
        .subcommand(command("train", "Train a model and keep the best validation checkpoint").arg(out_arg("run directory").default_value("run")))
        .subcommand(
            command("eval", "Evaluate a checkpoint on the validation or test split")
                .arg(checkpoint_arg())
                .arg(Arg::new("split").long("split").value_parser(["valid", "test"]).default_value("test"))
                .arg(out_arg("report file [default: eval_<split>.txt beside the checkpoint]")),
        )
        .subcommand(
            command("analyze-snr", "Latent SNR curves under Gaussian and informative noise")
                .arg(checkpoint_arg())
                .arg(channel_arg())
                .arg(out_arg("CSV file [default: snr.csv beside the checkpoint]")),
        )
        .subcommand(
            command("spectral-similarity", "|cos| between singular vectors of diffusion inputs and outputs")
                .arg(checkpoint_arg())
                .arg(channel_arg())
                .arg(out_arg("CSV file [default: spectral.csv beside the checkpoint]")),
        )
        .subcommand(
            command("verify-theory", "Numerical checks of the informative-noise theorems on toys")
                .arg(Arg::new("theorem").long("theorem").value_parser(["a", "b"]).required(true))
                .arg(Arg::new("k").long("k").value_name("LIST").help("step-down sizes, e.g. 1,2,4,8 (theorem a)"))
                .arg(out_arg("CSV file [default: theorem_<a|b>.csv]")),
        )
        .subcommand(
            command("export-embeddings", "Write an embedding table from a checkpoint")
                .arg(checkpoint_arg())
                .arg(Arg::new("which").long("which").value_name("items|users|generated").required(true))
                .arg(out_arg("matrix file [default: <which>.txt beside the checkpoint]")),
        )
        .subcommand(
            command("ablate", "Train the full model and every ablation variant, then tabulate")
                .arg(out_arg("output directory").default_value("ablation")),
        )
        .subcommand(command("print-config", "Print the effective configuration"))
}

fn load_config(m: &ArgMatches, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (m.get_one::<String>("config"), base) {
        (Some(path), _) => RunConfig::load(Path::new(path))?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    for key in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn beside(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn out_or(m: &ArgMatches, default: PathBuf) -> PathBuf {
    m.get_one::<String>("out").map(PathBuf::from).unwrap_or(default)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<InteractionDataset> {
    let dir = Path::new(&cfg.data.dataset);
    InteractionDataset::load_dir(dir).with_context(|| format!("loading processed dataset from {}", dir.display()))
}

/// Loads a checkpoint and applies command-line overrides on top of the
/// configuration it was trained with.
fn open_checkpoint(m: &ArgMatches) -> Result<(PathBuf, RealCheckpoint)> {
    let path = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let mut ck: RealCheckpoint = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = load_config(m, Some(ck.trainer.config.clone()))?;
    ck.ensure_compatible(&cfg)?;
    ck.trainer.config = cfg;
    Ok((path, ck))
}

fn prepare(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m, None)?;
    let raw = match (m.get_one::<String>("data"), m.get_one::<String>("synthetic").map(String::as_str)) {
        (Some(path), _) => load_interactions(Path::new(path), &cfg.data.format()).with_context(|| format!("reading {path}"))?,
        (None, Some("toy")) => synthetic::generate(&synthetic::SyntheticSpec::toy(50, 60, cfg.data.split_seed)),
        (None, Some(_)) => synthetic::generate(&synthetic::SyntheticSpec::ml100k_sized(cfg.data.split_seed)),
        (None, None) => bail!("prepare needs --data FILE or --synthetic KIND"),
    };
    let stats = raw.stats();
    let ds = split_dataset(&raw, cfg.data.ratios(), cfg.data.split_seed)?;
    let out = out_or(m, PathBuf::from(&cfg.data.dataset));
    ds.save_dir(&out)?;
    let mut report = String::new();
    let _ = writeln!(report, "users = {}", stats.users);
    let _ = writeln!(report, "items = {}", stats.items);
    let _ = writeln!(report, "interactions = {}", stats.interactions);
    let _ = writeln!(report, "duplicates_collapsed = {}", stats.duplicates);
    let _ = writeln!(report, "sparsity = {:.4}", stats.sparsity);
    let _ = writeln!(report, "train = {}", ds.train.len());
    let _ = writeln!(report, "valid = {}", ds.valid.len());
    let _ = writeln!(report, "test = {}", ds.test.len());
    write(&out.join("stats.txt"), &report)?;
    println!("{stats}");
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m, None)?;
    let ds = load_dataset(&cfg)?;
    let adj = build_normalized_adjacency(&ds);
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    fs::create_dir_all(&out)?;
    let meta = channel_metadata::<Real>(&ds, &adj, &cfg)?;
    let mut files = Vec::new();
    for (c, mat) in meta.iter().enumerate() {
        let path = out.join(format!("metadata_ch{c}.txt"));
        write_matrix_text(mat, &path)?;
        files.push(path.display().to_string());
    }
    println!("wrote {}", files.join(", "));
    println!("use with: --metadata_files {}", files.join(","));
    Ok(())
}

struct RunLog(fs::File);

impl RunLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(RunLog(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn line(&mut self, text: &str) {
        eprintln!("{text}");
        let _ = writeln!(self.0, "{text}");
    }
}

struct TrainedRun {
    report_valid: infodcl::evaluation::EvalReport,
    report_test: infodcl::evaluation::EvalReport,
    best_epoch: usize,
}

fn train_into(cfg: &RunConfig, ds: &InteractionDataset, meta: Vec<infodcl::RealMatrix>, out: &Path) -> Result<TrainedRun> {
    fs::create_dir_all(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let adj = build_normalized_adjacency(ds);
    let mut log = RunLog::create(&out.join("train.log"))?;
    log.line(&format!("config_hash = {}", cfg.hash()));
    log.line(&format!("variant = {}", cfg.model.variant.name()));
    let mut metrics = String::from(EpochRecord::CSV_HEADER);
    metrics.push('\n');
    let outcome = run_training(ds, &adj, meta, cfg, |r| {
        log.line(&format!("epoch {} {} valid_recall@{}={:.6}", r.epoch, r.loss, cfg.eval.monitor_cutoff, r.valid_recall));
        metrics.push_str(&r.to_csv());
        metrics.push('\n');
    })?;
    write(&out.join("metrics.csv"), &metrics)?;
    log.line(&format!(
        "best epoch {} valid_recall@{}={:.6}{}",
        outcome.best_epoch,
        cfg.eval.monitor_cutoff,
        outcome.best_recall,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    ));
    checkpoint::save(&outcome.best, &outcome.history, out.join("best.ckpt"))?;
    let report_valid = outcome.best.evaluate(ds, &adj, &ds.valid);
    let report_test = outcome.best.evaluate(ds, &adj, &ds.test);
    write(&out.join("eval_valid.txt"), &report_valid.to_key_values())?;
    write(&out.join("eval_test.txt"), &report_test.to_key_values())?;
    write(&out.join("eval_test.csv"), &report_test.to_csv())?;
    Ok(TrainedRun { report_valid, report_test, best_epoch: outcome.best_epoch })
}

fn train(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m, None)?;
    let ds = load_dataset(&cfg)?;
    let adj = build_normalized_adjacency(&ds);
    let meta = channel_metadata::<Real>(&ds, &adj, &cfg)?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let run = train_into(&cfg, &ds, meta, &out)?;
    print!("{}", run.report_test.to_key_values());
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(m: &ArgMatches) -> Result<()> {
    let (path, ck) = open_checkpoint(m)?;
    let cfg = &ck.trainer.config;
    let ds = load_dataset(cfg)?;
    if ds.num_users != ck.trainer.model.users.shape[0] || ds.num_items != ck.trainer.model.items.shape[0] {
        bail!("dataset {} does not match the checkpoint's user/item counts", cfg.data.dataset);
    }
    let adj = build_normalized_adjacency(&ds);
    let split = m.get_one::<String>("split").expect("default");
    let pairs = if split == "valid" { &ds.valid } else { &ds.test };
    let report = ck.trainer.evaluate(&ds, &adj, pairs);
    let out = out_or(m, beside(&path, &format!("eval_{split}.txt")));
    write(&out, &report.to_key_values())?;
    write(&out.with_extension("csv"), &report.to_csv())?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn analyze_snr(m: &ArgMatches) -> Result<()> {
    let (path, ck) = open_checkpoint(m)?;
    let a = &ck.trainer.config.analysis;
    let channel = *m.get_one::<usize>("channel").expect("default");
    let mut rng = ChaCha8Rng::seed_from_u64(a.analysis_seed);
    let curve = analysis::snr_curve(&ck.trainer.model, channel, a.snr_samples, a.snr_stride, &mut rng)?;
    let out = out_or(m, beside(&path, "snr.csv"));
    write(&out, &curve.to_csv())?;
    let big_t = ck.trainer.model.schedule.steps();
    if let Some((g, i)) = curve.at(big_t) {
        println!("snr at t={big_t}: gaussian={g:.6} informative={i:.6}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn spectral(m: &ArgMatches) -> Result<()> {
    let (path, ck) = open_checkpoint(m)?;
    let cfg = &ck.trainer.config;
    let channel = *m.get_one::<usize>("channel").expect("default");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.analysis.analysis_seed);
    let rank = cfg.model.svd_rank;
    let cos = analysis::spectral_similarity(
        &ck.trainer.model,
        channel,
        cfg.analysis.spectral_batches,
        cfg.analysis.spectral_batch_size,
        rank,
        &mut rng,
    )?;
    let per_batch = cos.len() / cfg.analysis.spectral_batches.max(1);
    let mut csv = String::from("batch,component,abs_cos\n");
    for (n, c) in cos.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{c}", n / per_batch.max(1), n % per_batch.max(1));
    }
    let out = out_or(m, beside(&path, "spectral.csv"));
    write(&out, &csv)?;
    let mut sorted = cos.clone();
    sorted.sort_by(f64::total_cmp);
    if let Some(med) = sorted.get(sorted.len() / 2) {
        println!("median |cos| = {med:.6} over {} pairs", sorted.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_k(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| anyhow!("bad step size `{s}` in --k")))
        .collect()
}

fn verify_theory(m: &ArgMatches) -> Result<()> {
    let cfg = load_config(m, None)?;
    let a = &cfg.analysis;
    let mut rng = ChaCha8Rng::seed_from_u64(a.analysis_seed);
    let theorem = m.get_one::<String>("theorem").expect("required");
    let out = out_or(m, PathBuf::from(format!("theorem_{theorem}.csv")));
    let dim = 16;
    let csv = if theorem == "a" {
        let ks = match m.get_one::<String>("k") {
            Some(list) => parse_k(list)?,
            None => a.theorem_k.clone(),
        };
        let schedule = DiffusionSchedule::new(cfg.model.steps, cfg.model.beta_first, cfg.model.beta_last)?;
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= schedule.steps()) {
            bail!("step size {k} must lie in 1..{}", schedule.steps());
        }
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let cond: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let constant = LinearPredictor::constant(dim, cond.len(), &mut rng);
        let linear = LinearPredictor::random(dim, cond.len(), 0.8, schedule.steps(), &mut rng);
        let mut csv = String::from("predictor,k,kappa,deviation\n");
        for (name, p) in [("constant", &constant), ("linear", &linear)] {
            let rep = analysis::verify_theorem_a(&schedule, p, &v, &cond, &ks, a.omega_l, a.omega_w)?;
            for r in &rep.rows {
                let _ = writeln!(csv, "{name},{},{},{}", r.k, r.kappa, r.deviation);
                println!("{name:>8} k={:<3} kappa={:+.6} deviation={:.3e}", r.k, r.kappa, r.deviation);
            }
        }
        csv
    } else {
        let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<f64> = u.iter().map(|x| x + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let identity = |v: &[f64]| v.to_vec();
        let rep = analysis::verify_theorem_b(&identity, &u, &g, 20, a.theorem_samples, a.theorem_samples, &mut rng)?;
        if !rep.alignment_holds {
            println!("alignment hypothesis violated (delta = {:.6}); bound not applicable", rep.delta);
        } else {
            println!(
                "delta={:.6} gamma={:.6} (min ratio {:.6}) kappa*={:.6} improvement*={:.6} measured kappa={:.6} bound holds: {}",
                rep.delta,
                rep.gamma,
                rep.gamma_min,
                rep.kappa_star,
                rep.delta_star,
                rep.measured_kappa,
                rep.bound_holds(1e-9)
            );
        }
        rep.to_csv()
    };
    write(&out, &csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn export(m: &ArgMatches) -> Result<()> {
    let (path, ck) = open_checkpoint(m)?;
    let which_raw = m.get_one::<String>("which").expect("required");
    let which: EmbeddingKind = which_raw.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ck.trainer.config.analysis.analysis_seed);
    let table = analysis::export_embeddings(&ck.trainer.model, which, &mut rng)?;
    let out = out_or(m, beside(&path, &format!("{which_raw}.txt")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_matrix_text(&table, &out)?;
    println!("wrote {} ({} x {})", out.display(), table.rows(), table.cols());
    Ok(())
}

fn ablate(m: &ArgMatches) -> Result<()> {
    let base = load_config(m, None)?;
    let ds = load_dataset(&base)?;
    let adj = build_normalized_adjacency(&ds);
    let meta = channel_metadata::<Real>(&ds, &adj, &base)?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let cutoffs = &base.eval.cutoffs;
    let mut table = String::from("variant,best_epoch,valid_recall@");
    let _ = write!(table, "{}", base.eval.monitor_cutoff);
    for k in cutoffs {
        let _ = write!(table, ",test_recall@{k},test_ndcg@{k}");
    }
    table.push('\n');
    for v in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        let run = train_into(&cfg, &ds, meta.clone(), &out.join(v.name()))?;
        let valid = run.report_valid.recall_at(base.eval.monitor_cutoff).unwrap_or(f64::NAN);
        let _ = write!(table, "{},{},{valid}", v.name(), run.best_epoch);
        for k in cutoffs {
            let r = &run.report_test;
            let _ = write!(table, ",{},{}", r.recall_at(*k).unwrap_or(f64::NAN), r.ndcg_at(*k).unwrap_or(f64::NAN));
        }
        table.push('\n');
    }
    write(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("prepare", s)) => prepare(s),
        Some(("pretrain-metadata", s)) => pretrain(s),
        Some(("train", s)) => train(s),
        Some(("eval", s)) => eval(s),
        Some(("analyze-snr", s)) => analyze_snr(s),
        Some(("spectral-similarity", s)) => spectral(s),
        Some(("verify-theory", s)) => verify_theory(s),
        Some(("export-embeddings", s)) => export(s),
        Some(("ablate", s)) => ablate(s),
        Some(("print-config", s)) => {
            print!("{}", load_config(s, None)?.to_toml());
            Ok(())
        }
        _ => unreachable!("subcommand is required"),
    }
}

fn main() -> ExitCode {
    let matches = cli().try_get_matches().unwrap_or_else(|e| e.exit());
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
