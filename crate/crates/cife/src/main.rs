//! Command-line front end: reproducible generation, training, prediction,
//! probing, sweeps, and variant comparisons.
//!
//! Every command is a pure function of (config, input files): reruns produce
//! byte-identical outputs, and every output file embeds the config hash and
//! seed that produced it. Exit codes: 0 success, 1 runtime failure, 2
//! usage/config error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cife::config::{ConfigError, ExperimentConfig, GeneratorKind};
use cife::data::{gen_factorized, gen_moons_shift, load_dataset, save_dataset, DomainDataset};
use cife::models::Model;
use cife::probes::{
    a_distance, adaptability, feature_probe, lambda_c_sweep, ProbeReport, SweepRow,
};
use cife::training::{
    build_model, evaluate_accuracy, load_checkpoint, predict_target, run_replicates,
    save_checkpoint, train, Checkpoint, Variant, CHECKPOINT_VERSION, LAMBDA_C_GRID,
};

#[derive(Parser)]
#[command(name = "cife", version, about = "Dual adversarial domain adaptation experiments")]
struct Cli {
    /// Path to a key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.lambda_c=0.1 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file plus a manifest.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Predict target labels from a checkpoint.
    Predict(PredictArgs),
    /// Run a diagnostic probe against a checkpoint.
    Probe(ProbeArgs),
    /// Sweep the category-adversarial weight over a grid.
    Sweep(SweepArgs),
    /// Compare variants with replicated runs on one dataset.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset file to write; a manifest is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint path (default: <output.dir>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics path (default: <output.dir>/metrics.txt).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; falls back to the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Predictions path (default: <output.dir>/predictions.txt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One of: a-distance, adaptability, category, domain.
    #[arg(long)]
    kind: String,
    /// Report path (default: <output.dir>/probe-<kind>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated grid; defaults to the standard 5-point grid.
    #[arg(long)]
    grid: Option<String>,
    /// CSV path (default: <output.dir>/sweep.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated variants (default: source-only,dann,cife-dann).
    #[arg(long)]
    variants: Option<String>,
    /// Table path (default: <output.dir>/compare.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    std::io::Error,
    serde_json::Error,
    cife::autodiff::AutodiffError,
    cife::data::DataError,
    cife::models::ModelError,
    cife::training::TrainError,
    cife::probes::ProbeError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for pair in &cli.sets {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(CliError::Usage(format!(
                "--set expects KEY=VALUE, got {pair:?}"
            )));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Predict(a) => cmd_predict(&cfg, &a),
        Command::Probe(a) => cmd_probe(&cfg, &a),
        Command::Sweep(a) => cmd_sweep(&cfg, &a),
        Command::Compare(a) => cmd_compare(&cfg, &a),
    }
}

fn stamp(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), seed)
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<DomainDataset, CliError> {
    match cfg.generator {
        GeneratorKind::Factorized => Ok(gen_factorized(&cfg.factorized_spec()?)?),
        GeneratorKind::Moons => Ok(gen_moons_shift(&cfg.moons_spec())?),
    }
}

/// Load the dataset named on the command line, else the configured path,
/// else generate it from the config.
fn resolve_dataset(
    cfg: &ExperimentConfig,
    flag: Option<&PathBuf>,
) -> Result<DomainDataset, CliError> {
    if let Some(path) = flag.or(cfg.dataset_path.as_ref()) {
        Ok(load_dataset(path)?)
    } else {
        build_dataset(cfg)
    }
}

fn dataset_checksum(ds: &DomainDataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.num_classes as u64).to_le_bytes());
    h.update((ds.input_dim as u64).to_le_bytes());
    for t in [&ds.source_x, &ds.target_train_x, &ds.target_test_x] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    for y in ds.source_y.iter().chain(&ds.target_test_y) {
        h.update((*y as u64).to_le_bytes());
    }
    h.finalize()
        .iter()
        .fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
}

fn check_dims(model: &Model, ds: &DomainDataset) -> Result<(), CliError> {
    let w = model.widths();
    if w.input_dim != ds.input_dim || w.num_classes != ds.num_classes {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {} inputs / {} classes but dataset has {} / {}",
            w.input_dim, w.num_classes, ds.input_dim, ds.num_classes
        )));
    }
    Ok(())
}

fn cmd_generate(cfg: &ExperimentConfig, args: &GenerateArgs) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&ds, &args.out)?;
    // The manifest is itself a loadable config pointing at the written file,
    // so `--config <manifest> train` reproduces the exact setup.
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.dataset_path = Some(args.out.clone());
    let manifest_path = manifest_path_for(&args.out);
    let body = format!(
        "{}{}",
        stamp(cfg, cfg.dataset_seed),
        manifest_cfg.canonical_text()
    );
    std::fs::write(&manifest_path, body)?;
    println!(
        "wrote {} ({} source / {} target train / {} target test) and {}",
        args.out.display(),
        ds.n_source(),
        ds.n_target_train(),
        ds.target_test_y.len(),
        manifest_path.display()
    );
    Ok(())
}

fn manifest_path_for(dataset: &Path) -> PathBuf {
    let mut os = dataset.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<(), CliError> {
    let ds = resolve_dataset(cfg, None)?;
    let tc = cfg.train_config();
    let widths = cfg.widths(ds.input_dim, ds.num_classes);
    let mut model = build_model(tc.variant, widths, tc.seed);
    let metrics = train(&mut model, &ds, &tc)?;

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("metrics.txt"));
    let mut out = stamp(cfg, tc.seed);
    for m in &metrics {
        let _ = writeln!(
            out,
            "epoch={} l_c={} l_d={} l_dc={} lr={} lambda_d={} source_acc={} target_acc={}",
            m.epoch, m.l_c, m.l_d, m.l_dc, m.lr, m.lambda_d, m.source_acc, m.target_acc
        );
    }
    std::fs::write(&metrics_path, out)?;

    let checkpoint_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
    save_checkpoint(
        &Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            config: tc.clone(),
            model,
        },
        &checkpoint_path,
    )?;

    match metrics.last() {
        Some(m) => println!(
            "final source_acc={} target_acc={} ({} epochs)",
            m.source_acc, m.target_acc, metrics.len()
        ),
        None => println!("no epochs run; checkpoint equals initialization"),
    }
    println!(
        "wrote {} and {}",
        checkpoint_path.display(),
        metrics_path.display()
    );
    Ok(())
}

fn cmd_predict(cfg: &ExperimentConfig, args: &PredictArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = resolve_dataset(cfg, args.dataset.as_ref())?;
    check_dims(&ckpt.model, &ds)?;
    let pred = predict_target(
        &ckpt.model,
        &ds.source_x,
        &ds.target_test_x,
        ckpt.config.k_pred,
        ckpt.config.seed,
    )?;
    let acc = evaluate_accuracy(&pred, &ds.target_test_y)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("predictions.txt"));
    let mut out = stamp(cfg, ckpt.config.seed);
    for p in &pred {
        let _ = writeln!(out, "{p}");
    }
    std::fs::write(&out_path, out)?;
    println!("target_acc={acc}");
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_probe(cfg: &ExperimentConfig, args: &ProbeArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = resolve_dataset(cfg, args.dataset.as_ref())?;
    check_dims(&ckpt.model, &ds)?;
    let model = &ckpt.model;
    let checksum_before = model.param_checksum();
    let mut report = ProbeReport::default();
    match args.kind.as_str() {
        "a-distance" => {
            let fs = model.features_invariant(&ds.source_x)?;
            let ft = model.features_invariant(&ds.target_train_x)?;
            let (eps, d_a) = a_distance(&fs, &ft, cfg.probe_seed)?;
            println!("epsilon={eps} d_A={d_a}");
            report.epsilon = Some(eps);
            report.d_a = Some(d_a);
        }
        "adaptability" => {
            let fs = model.features_concat(&ds.source_x)?;
            let ft = model.features_concat(&ds.target_test_x)?;
            let (err_s, err_t, err_sum) = adaptability(
                &fs,
                &ds.source_y,
                &ft,
                &ds.target_test_y,
                ds.num_classes,
                cfg.probe_seed,
            )?;
            println!("err_s={err_s} err_t={err_t} err_sum={err_sum}");
            report.err_source = Some(err_s);
            report.err_target = Some(err_t);
            report.err_sum = Some(err_sum);
        }
        "category" => {
            let f_d = model.features_specific(&ds.source_x)?.ok_or_else(|| {
                CliError::Runtime(
                    "category probe needs a model with a domain-specific extractor".into(),
                )
            })?;
            let f_s = model.features_invariant(&ds.source_x)?;
            let acc_fd = feature_probe(&f_d, &ds.source_y, cfg.probe_seed)?;
            let acc_fs = feature_probe(&f_s, &ds.source_y, cfg.probe_seed)?;
            println!("category_acc_on_f_d={acc_fd} category_acc_on_f_s={acc_fs}");
            report.category_acc_on_f_d = Some(acc_fd);
            report.category_acc_on_f_s = Some(acc_fs);
        }
        "domain" => {
            let fs = model.features_invariant(&ds.source_x)?;
            let ft = model.features_invariant(&ds.target_train_x)?;
            let mut data = fs.data().to_vec();
            data.extend_from_slice(ft.data());
            let all = cife::autodiff::Tensor::new(
                vec![fs.rows() + ft.rows(), fs.cols()?],
                data,
            )
            .expect("sized");
            let mut labels = vec![0usize; fs.rows()];
            labels.extend(std::iter::repeat_n(1usize, ft.rows()));
            let acc = feature_probe(&all, &labels, cfg.probe_seed)?;
            println!("domain_acc_on_f_s={acc}");
            report.domain_acc_on_f_s = Some(acc);
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown probe kind {other:?} (expected a-distance|adaptability|category|domain)"
            )))
        }
    }
    debug_assert_eq!(model.param_checksum(), checksum_before);
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("probe-{}.json", args.kind)));
    let wrapped = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.probe_seed,
        "report": report,
    });
    std::fs::write(&out_path, serde_json::to_vec_pretty(&wrapped)?)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad grid value {s:?}: {e}")))
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_c,mean_acc,std_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.lambda_c, r.mean_acc, r.std_acc);
    }
    out
}

fn cmd_sweep(cfg: &ExperimentConfig, args: &SweepArgs) -> Result<(), CliError> {
    let ds = resolve_dataset(cfg, None)?;
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => LAMBDA_C_GRID.to_vec(),
    };
    if grid.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let tc = cfg.train_config();
    let widths = cfg.widths(ds.input_dim, ds.num_classes);
    let rows = lambda_c_sweep(&ds, &tc, &widths, &grid, cfg.n_runs)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("sweep.csv"));
    let body = format!("{}{}", stamp(cfg, tc.seed), sweep_csv(&rows));
    std::fs::write(&out_path, body)?;
    for r in &rows {
        println!("lambda_c={} mean_acc={} std_acc={}", r.lambda_c, r.mean_acc, r.std_acc);
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig, args: &CompareArgs) -> Result<(), CliError> {
    let ds = resolve_dataset(cfg, None)?;
    let variants: Vec<Variant> = match &args.variants {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Variant>().map_err(CliError::Usage))
            .collect::<Result<_, _>>()?,
        None => vec![Variant::SourceOnly, Variant::Dann, Variant::CifeDann],
    };
    if variants.is_empty() {
        return Err(CliError::Usage("no variants requested".into()));
    }
    let widths = cfg.widths(ds.input_dim, ds.num_classes);
    let checksum = dataset_checksum(&ds);
    let mut out = stamp(cfg, cfg.train_seed);
    let _ = writeln!(out, "# dataset_checksum={checksum}");
    let _ = writeln!(out, "variant,mean_acc,std_acc,dataset_checksum");
    for v in variants {
        let mut tc = cfg.train_config();
        tc.variant = v;
        let summary = run_replicates(&ds, &tc, &widths, cfg.n_runs)?;
        println!(
            "{v}: mean_acc={} std_acc={} (n={})",
            summary.mean, summary.std, cfg.n_runs
        );
        let _ = writeln!(out, "{v},{},{},{checksum}", summary.mean, summary.std);
    }
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("compare.csv"));
    std::fs::write(&out_path, out)?;
    println!("wrote {}", out_path.display());
    Ok(())
}
