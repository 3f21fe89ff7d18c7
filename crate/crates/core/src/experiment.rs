//! Ablation matrix: source models, the four adaptation arms, and the reports
//! built from them.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_target, train_source, AdaptConfig, AdaptHooks};
use crate::data::{make_split, Benchmark, DomainSpec, SplitMode, SplitSizes};
use crate::error::{Result, SfdaError};
use crate::eval::{evaluate, focus_split, FocusSplit, MetricsRecord};
use crate::model::{BackboneConfig, HeadConfig, Model, ModelConfig, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    SourceOnly,
    Baseline,
    Transformer,
    TransformerEma,
    TransformerKd,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::SourceOnly,
        Arm::Baseline,
        Arm::Transformer,
        Arm::TransformerEma,
        Arm::TransformerKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SourceOnly => "source_only",
            Arm::Baseline => "baseline",
            Arm::Transformer => "transformer",
            Arm::TransformerEma => "transformer_ema",
            Arm::TransformerKd => "transformer_kd",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Arm::SourceOnly => "Source Only",
            Arm::Baseline => "Baseline",
            Arm::Transformer => "+ Transformer",
            Arm::TransformerEma => "+ Transformer + EMA",
            Arm::TransformerKd => "+ Transformer + KD",
        }
    }

    pub fn uses_transformer(self) -> bool {
        matches!(self, Arm::Transformer | Arm::TransformerEma | Arm::TransformerKd)
    }

    /// Adaptation settings for this arm, or `None` when it does not adapt.
    ///
    /// Without EMA the teacher tracks the student exactly (momentum 0); the
    /// distillation term is active only in the KD arm.
    pub fn adapt_config(self, base: &AdaptConfig) -> Option<AdaptConfig> {
        let mut c = base.clone();
        match self {
            Arm::SourceOnly => return None,
            Arm::Baseline | Arm::Transformer => {
                c.ema_momentum = 0.0;
                c.loss.beta_kd = 0.0;
            }
            Arm::TransformerEma => c.loss.beta_kd = 0.0,
            Arm::TransformerKd => {}
        }
        Some(c)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = SfdaError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SfdaError::Config(format!("unknown method `{}`", s)))
    }
}

/// Architecture knobs shared by every arm; the transformer settings apply
/// only to transformer arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub conv_channels: Vec<usize>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub positional_embedding: bool,
    pub bottleneck_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let t = TransformerConfig::default();
        ModelDims {
            conv_channels: b.conv_channels,
            num_layers: t.num_layers,
            num_heads: t.num_heads,
            embed_dim: t.embed_dim,
            mlp_hidden: t.mlp_hidden,
            positional_embedding: t.positional_embedding,
            bottleneck_dim: HeadConfig::new(2).bottleneck_dim,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, transformer: bool, num_classes: usize, image_side: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                conv_channels: self.conv_channels.clone(),
                image_side,
            },
            transformer: transformer.then(|| TransformerConfig {
                num_layers: self.num_layers,
                num_heads: self.num_heads,
                embed_dim: self.embed_dim,
                mlp_hidden: self.mlp_hidden,
                positional_embedding: self.positional_embedding,
            }),
            head: HeadConfig {
                bottleneck_dim: self.bottleneck_dim,
                num_classes,
            },
        }
    }
}

/// Everything one run of the matrix needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub split_mode: SplitMode,
    pub classes: usize,
    pub train_per_domain: usize,
    pub eval_per_domain: usize,
    pub image_side: usize,
    pub source_domain: DomainSpec,
    pub target_domain: DomainSpec,
    pub method: Arm,
    pub model: ModelDims,
    pub adapt: AdaptConfig,
    /// Directory of a generated benchmark; generated in memory when absent.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            split_mode: SplitMode::Closed,
            classes: 4,
            train_per_domain: 2000,
            eval_per_domain: 500,
            image_side: 32,
            source_domain: DomainSpec::default_source(),
            target_domain: DomainSpec::default_target(),
            method: Arm::TransformerKd,
            model: ModelDims::default(),
            adapt: AdaptConfig::default(),
            dataset: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.model_config(true).validate()?;
        for path in self.dataset.iter().chain([&self.output_dir]) {
            let p = path.to_string_lossy();
            if p.contains(['#', '\n', '\r']) || p.trim() != p {
                return Err(SfdaError::Config(format!(
                    "path {p:?} cannot be written to a config file"
                )));
            }
        }
        if self.train_per_domain < self.adapt.batch_size || self.eval_per_domain == 0 {
            return Err(SfdaError::Config(format!(
                "need at least one batch of training data and one eval sample per domain (got {} / {})",
                self.train_per_domain, self.eval_per_domain
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, transformer: bool) -> ModelConfig {
        self.model.model_config(transformer, self.classes, self.image_side)
    }

    /// The benchmark for `seed`: loaded from `dataset` if set, else generated.
    pub fn benchmark(&self, seed: u64) -> Result<Benchmark> {
        match &self.dataset {
            Some(dir) => crate::data::load_benchmark(dir),
            None => make_split(
                self.split_mode,
                self.classes,
                SplitSizes {
                    train: self.train_per_domain,
                    eval: self.eval_per_domain,
                },
                seed,
                &self.source_domain,
                &self.target_domain,
                self.image_side,
            ),
        }
    }
}

/// Result of one arm on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub seed: u64,
    /// One record per adaptation epoch (a single record for Source Only).
    pub log: Vec<MetricsRecord>,
    /// Focused vs non-focused accuracy of the final model on target eval data.
    pub focus: FocusSplit,
    pub seconds: f64,
}

impl ArmOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.log.last().expect("every arm logs at least one record")
    }
}

/// Everything produced for one seed of the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// CNN source model on source eval data.
    pub source_accuracy: f64,
    /// CNN source model on target eval data.
    pub source_only_target_accuracy: f64,
    pub transformer_source_accuracy: f64,
    pub transformer_source_target_accuracy: f64,
    /// Focused vs non-focused accuracy of the source-only transformer on target eval data.
    pub transformer_focus: Option<FocusSplit>,
    pub arms: Vec<ArmOutcome>,
}

impl SeedOutcome {
    pub fn arm(&self, arm: Arm) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

fn seeded(cfg: &AdaptConfig, seed: u64) -> AdaptConfig {
    AdaptConfig { seed, ..cfg.clone() }
}

/// Trains both source models for `seed` and runs every requested arm.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, arms: &[Arm]) -> Result<SeedOutcome> {
    cfg.validate()?;
    let bench = cfg.benchmark(seed)?;
    let adapt = seeded(&cfg.adapt, seed);
    let needs_transformer = arms.iter().any(|a| a.uses_transformer()) || arms.is_empty();

    let t0 = Instant::now();
    let cnn = Model::<f32>::new(cfg.model_config(false), seed)?;
    let (cnn, _) = train_source(cnn, &bench.source.train, &adapt)?;
    let source_eval = evaluate(&cnn, &bench.source.eval)?;
    let cnn_target = evaluate(&cnn, &bench.target.eval)?;
    let cnn_seconds = t0.elapsed().as_secs_f64();
    log::info!(
        "seed {seed}: CNN source accuracy {:.4}, target {:.4} ({:.0}s)",
        source_eval.record.accuracy,
        cnn_target.record.accuracy,
        cnn_seconds
    );

    let (tsrc, t_source_acc, t_target) = if needs_transformer {
        let t = Model::<f32>::new(cfg.model_config(true), seed)?;
        let (t, _) = train_source(t, &bench.source.train, &adapt)?;
        let s = evaluate(&t, &bench.source.eval)?.record.accuracy;
        let tt = evaluate(&t, &bench.target.eval)?;
        log::info!(
            "seed {seed}: transformer source accuracy {:.4}, target {:.4}",
            s,
            tt.record.accuracy
        );
        (Some(t), s, Some(tt))
    } else {
        (None, f64::NAN, None)
    };

    let mut outcomes = Vec::new();
    for &arm in arms {
        let t = Instant::now();
        let (log, focus) = match arm.adapt_config(&adapt) {
            None => (vec![cnn_target.record.clone()], focus_split(&cnn_target.samples)?),
            Some(acfg) => {
                let source = if arm.uses_transformer() {
                    tsrc.as_ref().expect("transformer source trained")
                } else {
                    &cnn
                };
                let hooks = AdaptHooks {
                    eval: Some(&bench.target.eval),
                    ..AdaptHooks::default()
                };
                let state = adapt_target(source, &bench.target.train, &acfg, hooks)?;
                let last = evaluate(&state.student, &bench.target.eval)?;
                (state.metrics_log, focus_split(&last.samples)?)
            }
        };
        let outcome = ArmOutcome {
            arm,
            seed,
            log,
            focus,
            seconds: t.elapsed().as_secs_f64(),
        };
        log::info!(
            "seed {seed}: {} accuracy {:.4}, overlap {:.4} ({:.0}s)",
            arm.name(),
            outcome.final_record().accuracy,
            outcome.final_record().attention_overlap,
            outcome.seconds
        );
        outcomes.push(outcome);
    }

    let focus = t_target.as_ref().map(|e| focus_split(&e.samples)).transpose()?;
    Ok(SeedOutcome {
        seed,
        source_accuracy: source_eval.record.accuracy,
        source_only_target_accuracy: cnn_target.record.accuracy,
        transformer_source_accuracy: t_source_acc,
        transformer_source_target_accuracy: t_target.map_or(f64::NAN, |e| e.record.accuracy),
        transformer_focus: focus,
        arms: outcomes,
    })
}

/// Runs every seed of the matrix, up to `threads` seeds at a time. Seeds are
/// independent, so the outcomes do not depend on `threads`.
pub fn run_matrix(cfg: &ExperimentConfig, seeds: &[u64], arms: &[Arm], threads: usize) -> Result<Vec<SeedOutcome>> {
    let threads = threads.clamp(1, seeds.len().max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| run_seed(cfg, s, arms)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SeedOutcome>>> = (0..seeds.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(cfg, seeds[i], arms);
                done.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Final-epoch values of `f` for `arm` across seeds.
pub fn arm_values(outcomes: &[SeedOutcome], arm: Arm, f: impl Fn(&MetricsRecord) -> f64) -> Vec<f64> {
    outcomes
        .iter()
        .filter_map(|o| o.arm(arm))
        .map(|a| f(a.final_record()))
        .collect()
}

/// Epoch-mean of a run's log, the values `summary.csv` reports.
pub fn summarize(log: &[MetricsRecord]) -> (f64, f64, Option<f64>) {
    let n = log.len() as f64;
    let acc = log.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let ovl = log.iter().map(|r| r.attention_overlap).sum::<f64>() / n;
    let pseudo: Option<Vec<f64>> = log.iter().map(|r| r.pseudo_label_accuracy).collect();
    (acc, ovl, pseudo.map(|p| p.iter().sum::<f64>() / n))
}

pub fn write_jsonl(path: &Path, log: &[MetricsRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SfdaError::Format {
                offset: i,
                detail: format!("metrics line {}: {}", i + 1, e),
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// `method,seed,accuracy,attention_overlap,pseudo_label_accuracy`, one row
/// per run, each value the mean over that run's epoch records.
pub fn write_summary_csv(path: &Path, runs: &[(Arm, u64, &[MetricsRecord])]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,seed,accuracy,attention_overlap,pseudo_label_accuracy")?;
    for (arm, seed, log) in runs {
        let (acc, ovl, pseudo) = summarize(log);
        writeln!(w, "{},{},{},{},{}", arm.name(), seed, acc, ovl, fmt_opt(pseudo))?;
    }
    w.flush()?;
    Ok(())
}

/// Ablation table: one row per arm with final-epoch mean ± std across seeds.
pub fn write_ablation_csv(path: &Path, outcomes: &[SeedOutcome], arms: &[Arm]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "method,label,seeds,accuracy_mean,accuracy_std,attention_overlap_mean,attention_overlap_std"
    )?;
    for &arm in arms {
        let acc = arm_values(outcomes, arm, |r| r.accuracy);
        let ovl = arm_values(outcomes, arm, |r| r.attention_overlap);
        let (am, asd) = mean_std(&acc);
        let (om, osd) = mean_std(&ovl);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            arm.name(),
            arm.label(),
            acc.len(),
            am,
            asd,
            om,
            osd
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Writes per-run JSON lines, `summary.csv` and `ablation.csv` under `dir`.
pub fn write_matrix_outputs(dir: &Path, outcomes: &[SeedOutcome], arms: &[Arm]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut runs = Vec::new();
    for o in outcomes {
        for a in &o.arms {
            write_jsonl(&dir.join(format!("{}_seed{}.jsonl", a.arm.name(), o.seed)), &a.log)?;
            runs.push((a.arm, o.seed, a.log.as_slice()));
        }
    }
    write_summary_csv(&dir.join("summary.csv"), &runs)?;
    write_ablation_csv(&dir.join("ablation.csv"), outcomes, arms)
}

/// Per-arm localization report: overlap, accuracy and the focused /
/// non-focused split per run, their means across seeds, and the split of the
/// source-only transformer.
pub fn write_attention_report(path: &Path, outcomes: &[SeedOutcome], arms: &[Arm]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "# saliency: transformer arms use attention received per token (column mean over layers, heads and queries); \
CNN arms use the L2 norm of the final feature map per cell; both upsampled to the mask by nearest neighbour and normalized to sum 1; \
focused = overlap above the run's median"
    )?;
    writeln!(
        w,
        "section,method,seed,accuracy,attention_overlap,median_overlap,focused_accuracy,non_focused_accuracy"
    )?;
    for &arm in arms {
        let runs: Vec<&ArmOutcome> = outcomes.iter().filter_map(|o| o.arm(arm)).collect();
        for a in &runs {
            let (r, f) = (a.final_record(), &a.focus);
            writeln!(
                w,
                "run,{},{},{},{},{},{},{}",
                arm.name(),
                a.seed,
                r.accuracy,
                r.attention_overlap,
                f.median_overlap,
                f.focused_accuracy,
                f.non_focused_accuracy
            )?;
        }
        if !runs.is_empty() {
            let mean = |f: &dyn Fn(&ArmOutcome) -> f64| runs.iter().map(|a| f(a)).sum::<f64>() / runs.len() as f64;
            writeln!(
                w,
                "mean,{},,{},{},{},{},{}",
                arm.name(),
                mean(&|a| a.final_record().accuracy),
                mean(&|a| a.final_record().attention_overlap),
                mean(&|a| a.focus.median_overlap),
                mean(&|a| a.focus.focused_accuracy),
                mean(&|a| a.focus.non_focused_accuracy)
            )?;
        }
    }
    for o in outcomes {
        let Some(f) = &o.transformer_focus else { continue };
        writeln!(
            w,
            "source_model,transformer_source_only,{},{},,{},{},{}",
            o.seed, o.transformer_source_target_accuracy, f.median_overlap, f.focused_accuracy, f.non_focused_accuracy
        )?;
    }
    w.flush()?;
    Ok(())
}
