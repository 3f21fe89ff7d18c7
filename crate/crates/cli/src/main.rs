//! `sfda`: generate data, train source models, adapt, evaluate and run the
//! ablation matrix.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for bad
//! data or checkpoint files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sfda_core::adapt::{adapt_target, train_source, AdaptHooks};
use sfda_core::config::{load_config, render};
use sfda_core::data::{load_benchmark, make_split, save_benchmark, Benchmark, Dataset, SplitMode, SplitSizes};
use sfda_core::eval::evaluate;
use sfda_core::experiment::{
    run_matrix, write_attention_report, write_jsonl, write_matrix_outputs, write_summary_csv, Arm, ExperimentConfig,
};
use sfda_core::model::Model;
use sfda_core::pseudo::{write_labels_csv, PseudoLabels};
use sfda_core::{Result, SfdaError};

#[derive(Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target benchmark and write it to a directory.
    GenerateData(GenerateArgs),
    /// Train a source model on labeled source data.
    TrainSource(TrainArgs),
    /// Adapt a source checkpoint to unlabeled target data.
    AdaptTarget(AdaptArgs),
    /// Score a checkpoint on one part of a benchmark.
    Evaluate(EvaluateArgs),
    /// Run every arm of the ablation for several seeds.
    Ablation(MatrixArgs),
    /// Run the matrix and report attention overlap and the focused split.
    AttentionReport(MatrixArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// closed, partial or open
    #[arg(long, default_value = "closed")]
    mode: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training images per domain.
    #[arg(long, default_value_t = 2000)]
    per_domain: usize,
    /// Evaluation images per domain.
    #[arg(long, default_value_t = 500)]
    eval_per_domain: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Domain specs and image side are taken from this config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark directory; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Source checkpoint written by `train-source`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// source_train, source_eval, target_train or target_eval
    #[arg(long, default_value = "target_eval")]
    split: String,
    /// Also append the record to this JSON-lines file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SfdaError) -> u8 {
    match e {
        SfdaError::Config(_) => 1,
        _ => 2,
    }
}

/// `THREADS` caps how many seeds run at once; unset means one.
fn threads() -> Result<usize> {
    match std::env::var("THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(SfdaError::Config(format!(
                "THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn benchmark(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Benchmark> {
    match data {
        Some(dir) => load_benchmark(dir),
        None => cfg.benchmark(cfg.adapt.seed),
    }
}

fn run(command: Command) -> Result<()> {
    threads()?;
    match command {
        Command::GenerateData(a) => generate_data(a),
        Command::TrainSource(a) => train(a),
        Command::AdaptTarget(a) => adapt(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablation(a) => matrix(a, false),
        Command::AttentionReport(a) => matrix(a, true),
    }
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    let mode: SplitMode = a.mode.parse()?;
    let sizes = SplitSizes {
        train: a.per_domain,
        eval: a.eval_per_domain,
    };
    let b = make_split(
        mode,
        a.classes,
        sizes,
        a.seed,
        &cfg.source_domain,
        &cfg.target_domain,
        cfg.image_side,
    )?;
    save_benchmark(&a.out, &b)?;
    println!(
        "wrote {} source and {} target images to {}",
        b.source.train.len() + b.source.eval.len(),
        b.target.train.len() + b.target.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    let bench = benchmark(&cfg, a.data.as_deref())?;
    let model = Model::<f32>::new(cfg.model_config(cfg.method.uses_transformer()), cfg.adapt.seed)?;
    let (model, logs) = train_source(model, &bench.source.train, &cfg.adapt)?;
    std::fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("source.ckpt"))?;
    let source = evaluate(&model, &bench.source.eval)?.record;
    let target = evaluate(&model, &bench.target.eval)?.record;
    let mut log = std::io::BufWriter::new(std::fs::File::create(a.out.join("source_log.jsonl"))?);
    for l in &logs {
        serde_json::to_writer(&mut log, l).map_err(std::io::Error::other)?;
        std::io::Write::write_all(&mut log, b"\n")?;
    }
    std::io::Write::flush(&mut log)?;
    let summary = serde_json::json!({ "source_eval": source, "target_eval": target });
    std::fs::write(a.out.join("source_eval.json"), format!("{summary:#}\n"))?;
    std::fs::write(a.out.join("config.conf"), render(&cfg))?;
    println!(
        "source accuracy {:.4}, target accuracy {:.4}",
        source.accuracy, target.accuracy
    );
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    let acfg = cfg
        .method
        .adapt_config(&cfg.adapt)
        .ok_or_else(|| SfdaError::Config(format!("method `{}` does not adapt; pick another method", cfg.method)))?;
    let bench = benchmark(&cfg, a.data.as_deref())?;
    let expected = cfg.model_config(cfg.method.uses_transformer());
    let source = Model::load(&a.checkpoint, Some(&expected))?;
    let mut last: Option<PseudoLabels> = None;
    let mut keep = |_: usize, l: &PseudoLabels| last = Some(l.clone());
    let hooks = AdaptHooks {
        eval: Some(&bench.target.eval),
        on_labels: Some(&mut keep),
        ..AdaptHooks::default()
    };
    let state = adapt_target(&source, &bench.target.train, &acfg, hooks)?;
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(&a.out.join("metrics.jsonl"), &state.metrics_log)?;
    write_summary_csv(
        &a.out.join("summary.csv"),
        &[(cfg.method, cfg.adapt.seed, state.metrics_log.as_slice())],
    )?;
    state.student.save(&a.out.join("student.ckpt"))?;
    state.teacher.save(&a.out.join("teacher.ckpt"))?;
    if let Some(labels) = &last {
        write_labels_csv(&a.out.join("pseudo_labels.csv"), labels)?;
    }
    std::fs::write(a.out.join("config.conf"), render(&cfg))?;
    let r = state.metrics_log.last().expect("at least one target epoch");
    println!(
        "{}: target accuracy {:.4}, attention overlap {:.4}",
        cfg.method, r.accuracy, r.attention_overlap
    );
    Ok(())
}

fn pick<'a>(b: &'a Benchmark, split: &str) -> Result<&'a Dataset> {
    Ok(match split {
        "source_train" => &b.source.train,
        "source_eval" => &b.source.eval,
        "target_train" => &b.target.train,
        "target_eval" => &b.target.eval,
        other => return Err(SfdaError::Config(format!("unknown split `{other}`"))),
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.checkpoint, None)?;
    let bench = load_benchmark(&a.data)?;
    let record = evaluate(&model, pick(&bench, &a.split)?)?.record;
    let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
    println!("{line}");
    if let Some(path) = &a.out {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn matrix(a: MatrixArgs, report: bool) -> Result<()> {
    let cfg = config(a.config.as_deref())?;
    if a.seeds == 0 {
        return Err(SfdaError::Config("--seeds must be at least 1".into()));
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let seeds: Vec<u64> = (0..a.seeds).map(|s| cfg.adapt.seed + s).collect();
    let outcomes = run_matrix(&cfg, &seeds, &Arm::ALL, threads()?)?;
    write_matrix_outputs(&out, &outcomes, &Arm::ALL)?;
    std::fs::write(out.join("config.conf"), render(&cfg))?;
    if report {
        write_attention_report(&out.join("attention_report.csv"), &outcomes, &Arm::ALL)?;
    }
    println!("wrote results for {} seeds to {}", seeds.len(), out.display());
    Ok(())
}
