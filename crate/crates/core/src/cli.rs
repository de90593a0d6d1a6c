//! The `rpcate` command line: `generate`, `train`, `evaluate`, `gridsearch`
//! and `export-attention`, all driven by a [`RunConfig`] document.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, Splits};
use crate::data;
use crate::metrics::{self, AttentionMap, MetricsReport};
use crate::model::{Ablation, ResidualMode};
use crate::train::{self, Grid, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "rpcate", version, about = "Train and evaluate RP-CATE bias-correction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset as CSV.
    Generate(RunArgs),
    /// Train one model; writes checkpoint, loss history and metrics.
    Train(RunArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(ModelArgs),
    /// Train every grid cell and rank them by validation MIR.
    Gridsearch(RunArgs),
    /// Write attention maps of a checkpoint on a dataset.
    ExportAttention(ModelArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_parser = clap::value_parser!(Ablation))]
    pub ablation: Option<Ablation>,
    #[arg(long, value_parser = clap::value_parser!(ResidualMode))]
    pub residual: Option<ResidualMode>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl clap::builder::ValueParserFactory for Ablation {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Ablation>())
    }
}

impl clap::builder::ValueParserFactory for ResidualMode {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<ResidualMode>())
    }
}

/// Failure classes, mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Anything failing after the inputs were accepted: exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&load_config(&a)?),
        Command::Train(a) => cmd_train(&load_config(&a)?),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Gridsearch(a) => cmd_gridsearch(&load_config(&a)?, a.jobs),
        Command::ExportAttention(a) => cmd_export_attention(&a),
    }
}

/// Load the config named by `args` and apply the flag overrides.
pub fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(ab) = args.ablation {
        cfg.train.hp.ablation = ab;
    }
    if let Some(res) = args.residual {
        cfg.train.hp.residual = res;
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be >= 1"));
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    cfg.splits().map_err(usage)
}

/// Both splits are scored as whole batches, so each needs at least `w` rows.
fn check_rows(s: &Splits, w: usize) -> Result<(), CliError> {
    let parts = [("training", Some(&s.train)), ("evaluation", s.eval.as_ref())];
    for (name, d) in parts {
        if let Some(d) = d {
            if d.m() < w {
                return Err(usage(format!("{name} split has {} rows, fewer than the window size {w}", d.m())));
            }
        }
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    let gen = cfg
        .gen_config()
        .ok_or_else(|| usage("`generate` needs a [generator] block in the config"))?;
    let d = crate::synth::generate(&gen).map_err(usage)?;
    create_out(&cfg.out)?;
    let path = cfg.out.join("dataset.csv");
    d.write_csv(&path).map_err(runtime)?;
    println!("wrote {} ({} rows)", path.display(), d.m());
    Ok(())
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,train_loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{l:?}", i + 1).unwrap();
    }
    s
}

fn print_reports(title: &str, reports: &[MetricsReport]) {
    println!("{title}");
    println!(
        "  {:<12} {:>10} {:>10} {:>9} {:>8} {:>8} {:>8}",
        "model", "MAE", "RMSE", "ARE%", "#<1%", "#>5%", "MIR%"
    );
    for r in reports {
        let are = r.are_percent.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
        println!(
            "  {:<12} {:>10.6} {:>10.6} {:>9} {:>8} {:>8} {:>8.2}",
            r.variant, r.mae, r.rmse, are, r.err_lt_1pct, r.err_gt_5pct, r.mir_percent
        );
    }
}

fn evaluate_to(model: &crate::model::Model, d: &data::Dataset, path: &Path, title: &str) -> Result<(), CliError> {
    let e = train::evaluate(model, d).map_err(runtime)?;
    let reports = [e.mechanistic, e.hybrid];
    metrics::write_reports(path, &reports).map_err(|err| runtime(format!("{}: {err}", path.display())))?;
    print_reports(title, &reports);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let tc = cfg.train_config();
    check_rows(&s, tc.hp.w)?;
    log::info!("training {} on {} rows", tc.hp.ablation, s.train.m());
    let outcome = train::train(&s.train, &TrainConfig::new(tc.hp)).map_err(runtime)?;
    create_out(&cfg.out)?;
    checkpoint::save(&outcome.model, &cfg.out.join("checkpoint.json")).map_err(runtime)?;
    write(&cfg.out.join("loss_history.csv"), &loss_csv(&outcome.history))?;
    write(&cfg.out.join("config.toml"), &cfg.to_toml())?;
    evaluate_to(&outcome.model, &s.train, &cfg.out.join("metrics_train.json"), "train split")?;
    if let Some(eval) = &s.eval {
        evaluate_to(&outcome.model, eval, &cfg.out.join("metrics_eval.json"), "eval split")?;
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn load_model_and_data(a: &ModelArgs) -> Result<(crate::model::Model, data::Dataset), CliError> {
    if !a.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    if !a.dataset.is_file() {
        return Err(usage(format!("dataset {} does not exist", a.dataset.display())));
    }
    let model = checkpoint::load(&a.checkpoint).map_err(runtime)?;
    let d = data::load_csv(&a.dataset).map_err(runtime)?;
    if d.n() == model.n_features() && d.feature_names() != model.feature_names.as_slice() {
        log::warn!(
            "dataset features {:?} differ by name from checkpoint features {:?}",
            d.feature_names(),
            model.feature_names
        );
    }
    Ok((model, d))
}

pub fn cmd_evaluate(a: &ModelArgs) -> Result<(), CliError> {
    let (model, d) = load_model_and_data(a)?;
    let e = train::evaluate(&model, &d).map_err(runtime)?;
    let reports = [e.mechanistic, e.hybrid];
    if let Some(out) = &a.out {
        create_out(out)?;
        let path = out.join("metrics.json");
        metrics::write_reports(&path, &reports).map_err(|err| runtime(format!("{}: {err}", path.display())))?;
    }
    print_reports(&a.dataset.display().to_string(), &reports);
    Ok(())
}

pub fn cmd_gridsearch(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let eval = s
        .eval
        .as_ref()
        .ok_or_else(|| usage("grid search needs a validation split (eval_dataset or train_rows < rows)"))?;
    let mut tc = cfg.train_config();
    let grid = tc.grid.get_or_insert_with(Grid::default).clone();
    if let Some(&w) = grid.w.iter().max() {
        check_rows(&s, w)?;
    }
    let result = train::grid_search(&s.train, eval, &tc, jobs).map_err(runtime)?;
    create_out(&cfg.out)?;
    write(&cfg.out.join("grid.csv"), &result.to_csv())?;

    let best = result.best_hp().clone();
    write(
        &cfg.out.join("best_hyperparams.toml"),
        &toml::to_string(&best).map_err(runtime)?,
    )?;
    // paths in the emitted config are read relative to the output directory
    let mut best_cfg = cfg.clone();
    if let (Some(g), Some(gen)) = (best_cfg.generator.as_mut(), cfg.gen_config()) {
        g.seed = Some(gen.seed);
    }
    for p in [&mut best_cfg.dataset, &mut best_cfg.eval_dataset].into_iter().flatten() {
        *p = std::path::absolute(&*p).map_err(runtime)?;
    }
    best_cfg.seed = None;
    best_cfg.train = TrainConfig::new(best.clone());
    best_cfg.out = PathBuf::from("best");
    write(&cfg.out.join("best_config.toml"), &best_cfg.to_toml())?;

    for row in &result.rows {
        match &row.result {
            Ok(r) => println!(
                "w={:<3} N={} lr={:<6} MAE={:.6} MIR={:.2}",
                row.hp.w, row.hp.repetitions, row.hp.lr, r.mae, r.mir_percent
            ),
            Err(e) => println!("w={:<3} N={} lr={:<6} failed: {e}", row.hp.w, row.hp.repetitions, row.hp.lr),
        }
    }
    println!("best: w={} N={} lr={}", best.w, best.repetitions, best.lr);
    println!("wrote {}", cfg.out.display());
    Ok(())
}

pub fn cmd_export_attention(a: &ModelArgs) -> Result<(), CliError> {
    let (model, d) = load_model_and_data(a)?;
    let prediction = model.predict(d.features()).map_err(runtime)?;
    let map = AttentionMap {
        maps: prediction.attentions,
        feature_names: model.feature_names.clone(),
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("attention"));
    let written = metrics::export_attention(&map, &out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    for r in 0..map.maps.len() {
        let avg = map.averages(r);
        let parts: Vec<String> = map
            .feature_names
            .iter()
            .zip(&avg)
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        println!("N:{} average attention {}", r + 1, parts.join(" "));
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_bad_flag_exits_two() {
        assert_eq!(main_with(["rpcate", "--help"]), 0);
        assert_eq!(main_with(["rpcate", "train", "--bogus"]), 2);
        assert_eq!(main_with(["rpcate", "train", "--config", "x.toml", "--ablation", "none"]), 2);
    }

    #[test]
    fn missing_config_is_usage_error() {
        assert_eq!(main_with(["rpcate", "train", "--config", "/nonexistent/run.toml"]), 2);
    }

    #[test]
    fn loss_csv_layout() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "epoch,train_loss\n1,0.5\n2,0.25\n");
    }
}
