//! `tam`: data generation, training, evaluation, ablations, gradient checks
//! and cost reports for the temporal attention module.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tam_core::cost::{compare_architectures, network_cost};
use tam_core::gradcheck::{self, GradCheckReport};
use tam_core::harness::{
    self, ablate, evaluate, evaluate_oracle, load_checkpoint, save_checkpoint, train_with, AblationAxis, Dataset,
    DatasetSpec, ExperimentConfig, Split,
};
use tam_core::synth::QualityTier;
use tam_core::unet::{list_configurations, ConfigId};

use output::Writer;

#[derive(Parser)]
#[command(name = "tam", version, about = "Temporal attention for motion-enhanced segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset split.
    Eval(EvalArgs),
    /// Train and test one configuration per axis value.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Report FLOPs and parameter counts.
    Cost(CostArgs),
    /// List the named configurations C1..C11.
    Configs,
}

/// Dataset shape and quality. Unset flags keep the base configuration's values
/// (defaults: 64 px, rank 2, T=2, good tier, contraction 0.35, 16/4/8 cases).
#[derive(Args, Default)]
struct DataArgs {
    /// Extent of every spatial axis.
    #[arg(long)]
    size: Option<usize>,
    /// 2 for images, 3 for volumes.
    #[arg(long)]
    rank: Option<usize>,
    /// Frames per sequence.
    #[arg(long = "t")]
    frames: Option<usize>,
    /// good, medium or poor.
    #[arg(long)]
    tier: Option<QualityTier>,
    /// Fractional cavity area loss over the sequence.
    #[arg(long)]
    contraction: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Frames receiving dropout patches (default: the unannotated ones).
    #[arg(long, value_delimiter = ',')]
    dropout_frames: Option<Vec<usize>>,
}

impl DataArgs {
    fn apply(&self, d: &mut DatasetSpec) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = &self.$f { d.$g = v.clone(); })*};
        }
        set!(size => size, rank => spatial_rank, frames => frames, tier => tier, contraction => contraction,
             train => train, val => val, test => test);
        if let Some(f) = &self.dropout_frames {
            d.dropout_frames = Some(f.clone());
        }
    }
}

/// Model and optimizer. Unset flags keep the base configuration's values
/// (defaults: C1, 8 heads, channels 16,32,64,128,256, 50 epochs, batch 4, lr 1e-3).
#[derive(Args, Default)]
struct ModelArgs {
    /// Named configuration, C1..C11.
    #[arg(long)]
    config: Option<ConfigId>,
    #[arg(long)]
    heads: Option<usize>,
    /// Attention width per slot (default: the slot's channel count).
    #[arg(long)]
    d_embed: Option<usize>,
    /// Channels per level; the count sets the depth.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(v) = self.config {
            c.config = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.d_embed {
            c.d_embed = Some(v);
        }
        if let Some(v) = &self.channels {
            c.channels = v.clone();
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON dataset spec used as the base before flags apply.
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON experiment configuration used as the base before flags apply.
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the ground-truth masks as predictions.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct AblateArgs {
    /// config, heads, frames or tier.
    #[arg(long)]
    axis: AblationAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Seeds shared by every cell; each drives both data and initialization.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Concurrent runs; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scope {
    Ops,
    Tam,
    End2end,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    scope: Scope,
    /// Random draws per op or model.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Elements sampled per parameter tensor in the end-to-end check (all when unset).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Also cost C1 and C2 against this TAM configuration.
    #[arg(long)]
    compare: Option<ConfigId>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised for bad flags or inputs; maps to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn base_config(file: Option<&Path>) -> Result<ExperimentConfig> {
    match file {
        Some(p) => Ok(harness::read_json(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn checked(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec = match &a.spec_file {
        Some(p) => harness::read_json(p)?,
        None => DatasetSpec::default(),
    };
    spec.seed = a.seed;
    a.data.apply(&mut spec);
    let data = Dataset::generate(&spec)?;
    let manifest = data.save(&a.out)?;
    Writer::new(&a.out, "gen", &spec).resolved_config()?;
    let annotated = manifest.cases.first().map(|c| c.annotated.len()).unwrap_or(0);
    println!(
        "wrote {} cases ({} frames, {} annotated) to {}",
        manifest.cases.len(),
        spec.frames,
        annotated,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    initial_loss: f64,
    final_loss: f64,
    steps: usize,
    step_losses: &'a [f64],
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut cfg = base_config(a.config_file.as_deref())?;
    a.model.apply(&mut cfg);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.data = data.spec.clone();
    cfg.output = Some(a.out.display().to_string());
    let cfg = checked(cfg)?;
    let total = cfg.epochs;
    let quiet = a.quiet;
    let outcome = train_with(&cfg, &data, |e| {
        if !quiet {
            let val = match (e.val_loss, e.val_dsc) {
                (Some(l), Some(d)) => format!("  val_loss {l:.4}  val_dsc {d:.4}"),
                _ => String::new(),
            };
            eprintln!("epoch {:>3}/{total}  loss {:.4}{val}", e.epoch, e.train_loss);
        }
    })?;
    let w = Writer::new(&a.out, "train", &cfg);
    w.resolved_config()?;
    save_checkpoint(&a.out.join("checkpoint.tnsb"), &cfg, &outcome.params, outcome.best_epoch)?;
    w.csv("loss_curve.csv", &outcome.log)?;
    w.json(
        "train.json",
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            initial_loss: outcome.initial_loss(),
            final_loss: outcome.final_loss(),
            steps: outcome.step_losses.len(),
            step_losses: &outcome.step_losses,
        },
    )?;
    println!(
        "loss {:.4} -> {:.4}; best epoch {}; checkpoint {}",
        outcome.initial_loss(),
        outcome.final_loss(),
        outcome.best_epoch,
        a.out.join("checkpoint.tnsb").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    checkpoint: Option<String>,
    oracle: bool,
    split: Split,
    model: Option<&'a ExperimentConfig>,
    data: &'a DatasetSpec,
}

#[derive(Serialize)]
struct EcdfRow<'a> {
    metric: &'a str,
    value: f64,
    fraction: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (model, report) = match &a.checkpoint {
        Some(path) => {
            let (header, params) = load_checkpoint(path)?;
            let cfg = header.config;
            let report = evaluate(&cfg.backbone(), &params, &data, a.split)?;
            (Some(cfg), report)
        }
        None => (None, evaluate_oracle(&data, a.split)?),
    };
    let config = EvalConfig {
        checkpoint: a.checkpoint.as_ref().map(|p| p.display().to_string()),
        oracle: a.oracle,
        split: a.split,
        model: model.as_ref(),
        data: &data.spec,
    };
    let w = Writer::new(&a.out, "eval", &config);
    w.resolved_config()?;
    w.csv("metrics.csv", &report.rows)?;
    w.csv("summary.csv", &report.classes)?;
    w.csv(
        "ecdf.csv",
        report
            .ecdf
            .iter()
            .flat_map(|(m, pts)| pts.iter().map(move |&(value, fraction)| EcdfRow { metric: m, value, fraction })),
    )?;
    w.json("metrics.json", &report)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("class      DSC    HD mm  MASD mm  undefined");
    for c in &report.classes {
        println!("{:>5} {:>8.4} {:>8} {:>8} {:>10}", c.class, c.dsc, fmt(c.hd_mm), fmt(c.masd_mm), c.undefined);
    }
    println!("  all {:>8.4} {:>8} {:>8}", report.dsc, fmt(report.hd_mm), fmt(report.masd_mm));
    Ok(())
}

#[derive(Serialize)]
struct AblateConfig<'a> {
    axis: AblationAxis,
    values: &'a [String],
    seeds: &'a [u64],
    base: &'a ExperimentConfig,
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    if a.threads == 0 {
        bail!(Usage("--threads must be at least 1".into()));
    }
    let mut base = base_config(a.config_file.as_deref())?;
    a.model.apply(&mut base);
    a.data.apply(&mut base.data);
    base.output = Some(a.out.display().to_string());
    let start = Instant::now();
    let result = ablate(a.axis, &a.values, &base, &a.seeds, a.threads)?;
    let config = AblateConfig {
        axis: a.axis,
        values: &a.values,
        seeds: &a.seeds,
        base: &base,
    };
    let w = Writer::new(&a.out, "ablate", &config);
    w.resolved_config()?;
    w.csv("ablation.csv", &result.rows)?;
    w.csv("ablation_runs.csv", &result.runs)?;
    w.json("ablation.json", &result)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("{:<8} {:>8} {:>8} {:>8} {:>14} {:>10}", a.axis.to_string(), "DSC", "HD mm", "MASD mm", "FLOPs", "params");
    for r in &result.rows {
        println!(
            "{:<8} {:>8.4} {:>8} {:>8} {:>14} {:>10}",
            r.cell,
            r.dsc,
            fmt(r.hd_mm),
            fmt(r.masd_mm),
            r.flops,
            r.params
        );
    }
    eprintln!("{} runs in {:.1}s", result.runs.len(), start.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckConfig {
    scope: Scope,
    seeds: u64,
    limit: Option<usize>,
    step: f64,
    tolerance: f64,
}

#[derive(Serialize)]
struct GradcheckRow<'a> {
    name: &'a str,
    criterion: gradcheck::Criterion,
    worst_elementwise: f64,
    normwise: f64,
    checked: usize,
    straddled: usize,
    passed: bool,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    if a.seeds == 0 {
        bail!(Usage("--seeds must be at least 1".into()));
    }
    let reports: Vec<GradCheckReport> = match a.scope {
        Scope::Ops => gradcheck::op_suite(a.seeds)?,
        Scope::Tam => gradcheck::tam_suite(a.seeds)?,
        Scope::End2end => gradcheck::end_to_end_suite(a.seeds, a.limit)?,
    };
    println!(
        "{:<24} {:>11} {:>12} {:>12} {:>8} {:>9}  result",
        "check", "criterion", "worst elem", "normwise", "probes", "straddled"
    );
    for r in &reports {
        println!(
            "{:<24} {:>11} {:>12.3e} {:>12.3e} {:>8} {:>9}  {}",
            r.name,
            format!("{:?}", r.criterion).to_lowercase(),
            r.worst_elementwise,
            r.normwise,
            r.checked,
            r.straddled,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        let config = GradcheckConfig {
            scope: a.scope,
            seeds: a.seeds,
            limit: a.limit,
            step: gradcheck::STEP,
            tolerance: gradcheck::TOLERANCE,
        };
        let w = Writer::new(out, "gradcheck", &config);
        w.resolved_config()?;
        w.csv(
            "gradcheck.csv",
            reports.iter().map(|r| GradcheckRow {
                name: &r.name,
                criterion: r.criterion,
                worst_elementwise: r.worst_elementwise,
                normwise: r.normwise,
                checked: r.checked,
                straddled: r.straddled,
                passed: r.passed,
            }),
        )?;
        w.json("gradcheck.json", &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let mut cfg = base_config(a.config_file.as_deref())?;
    a.model.apply(&mut cfg);
    a.data.apply(&mut cfg.data);
    let cfg = checked(cfg)?;
    let spatial = vec![cfg.data.size; cfg.data.spatial_rank];
    let report = network_cost(&cfg.backbone(), &spatial, cfg.data.frames)?;
    print!("{}", report.to_table());
    let comparison = match a.compare {
        Some(id) => {
            let base = ExperimentConfig {
                config: ConfigId::C1,
                ..cfg.clone()
            };
            let c = compare_architectures(&base.backbone(), id, &spatial, cfg.data.frames)?;
            println!();
            println!("C1 {:>16} FLOPs", c.baseline.total_flops);
            println!("{id} {:>16} FLOPs", c.tam.total_flops);
            println!("C2 {:>16} FLOPs", c.temporal_conv.total_flops);
            println!(
                "T^2 = {} {} L*k^2*(k-1) = {}; TAM cheaper than time-as-axis: {}",
                c.condition.t_squared,
                if c.condition.holds { "<" } else { ">=" },
                c.condition.levels_k2_km1,
                c.tam_cheaper_than_temporal
            );
            Some(c)
        }
        None => None,
    };
    if let Some(out) = &a.out {
        let w = Writer::new(out, "cost", &cfg);
        w.resolved_config()?;
        w.csv("cost.csv", &report.rows)?;
        w.json("cost.json", &report)?;
        if let Some(c) = &comparison {
            w.json("comparison.json", c)?;
        }
    }
    Ok(())
}

fn cmd_configs() {
    for e in list_configurations() {
        println!("{:<4} {}", e.id.to_string(), e.description);
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Cost(a) => cmd_cost(a).map(|_| true),
        Command::Configs => {
            cmd_configs();
            Ok(true)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 1;
    }
    match err.downcast_ref::<tam_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
