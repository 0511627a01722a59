//! Command-line pipeline: synth, prototypes, score, finetune, eval.
//!
//! Exit codes: 0 on success, 2 for validation failures, 3 for I/O failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::embedstore::Dataset;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, EvalReport, ScoreName};
use crate::protobank::{build_from_dataset, finetune_from_dataset, FinetuneConfig, FinetuneTrace, PrototypeBank};
use crate::scorers::{read_predictions, score_batch, write_predictions, ScoringConfig};
use crate::synthbench::{generate_synthetic, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "protoverify", version, about = "Prototype-verified misclassification detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build per-class prototypes from the training split.
    Prototypes(PrototypesArgs),
    /// Score every test sample and write the predictions table.
    Score(ScoreArgs),
    /// Compute AURC / AUROC / FPR95 / ACC for a predictions table.
    Eval(EvalArgs),
    /// Fine-tune prototypes on their own shot samples.
    Finetune(FinetuneArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrototypesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output TVEM path; metadata goes next to it with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    /// Weight of the image-to-image similarity in the combined score.
    #[arg(long, default_value_t = 1.0)]
    pub weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub energy_temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mcm_temperature: f64,
}

impl ScoringArgs {
    fn config(&self) -> ScoringConfig {
        ScoringConfig {
            tau: self.tau,
            i2i_weight: self.weight,
            energy_temperature: self.energy_temperature,
            mcm_temperature: self.mcm_temperature,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prototype bank; may come from a different dataset with the same encoder.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Only compute the zero-shot baselines (no prototypes needed).
    #[arg(long)]
    pub baseline_only: bool,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Comma-separated score names.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub scores: Vec<String>,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Trace CSV path; defaults to the output bank path with a .trace.csv extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    #[arg(long, default_value_t = 40)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.9)]
    pub vlm_spread: f64,
    #[arg(long, default_value_t = 0.45)]
    pub aux_spread: f64,
    #[arg(long, default_value_t = 0.35)]
    pub text_noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            dims: self.dims,
            samples_per_class: self.samples_per_class,
            vlm_image_spread: self.vlm_spread,
            aux_image_spread: self.aux_spread,
            text_noise: self.text_noise,
            gap_magnitude: self.gap,
            seed: self.seed,
        }
    }
}

pub fn cmd_prototypes(args: &PrototypesArgs) -> Result<PrototypeBank> {
    if args.shots == 0 {
        return Err(Error::Config("--shots must be at least 1".into()));
    }
    let dataset = Dataset::load(&args.manifest)?;
    let (bank, shortfalls) = build_from_dataset(&dataset, args.shots, args.seed)?;
    for s in &shortfalls {
        eprintln!(
            "warning: class {} ({}) has {} training samples, fewer than {} shots; using all of them",
            s.class, dataset.manifest.class_names[s.class], s.available, s.requested
        );
    }
    for (class, ids) in bank.provenance().iter().enumerate() {
        println!("{}\t{}", dataset.manifest.class_names[class], ids.len());
    }
    bank.save(&args.out)?;
    Ok(bank)
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let config = args.scoring.config();
    config.validate()?;
    let dataset = Dataset::load(&args.manifest)?;
    let bank = match (&args.bank, args.baseline_only) {
        (_, true) => None,
        (Some(path), false) => Some(PrototypeBank::load(path)?),
        (None, false) => {
            return Err(Error::Config(
                "verified scores need a prototype bank: pass --bank or --baseline-only".into(),
            ))
        }
    };
    let predictions = score_batch(&dataset, bank.as_ref(), &config)?;

    let mut meta = vec![("dataset_id", dataset.manifest.dataset_id.clone())];
    if let Some(bank) = &bank {
        meta.push((
            "prototype_dataset_id",
            bank.dataset_id().unwrap_or("unknown").to_owned(),
        ));
        meta.push(("prototype_encoder", bank.encoder_id().to_owned()));
        meta.push(("prototype_shots", bank.shots().to_string()));
        meta.push(("prototype_finetuned", bank.finetuned().to_string()));
    }
    meta.push(("tau", config.tau.to_string()));
    meta.push(("weight", config.i2i_weight.to_string()));
    meta.push(("energy_temperature", config.energy_temperature.to_string()));
    meta.push(("mcm_temperature", config.mcm_temperature.to_string()));
    write_predictions(&args.out, &predictions, &meta)?;
    println!("scored {} test samples", predictions.len());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let names = args
        .scores
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<ScoreName>())
        .collect::<Result<Vec<_>>>()?;
    let (predictions, meta) = read_predictions(&args.predictions)?;

    let mut config = BTreeMap::new();
    config.insert("predictions".to_owned(), args.predictions.display().to_string());
    config.insert(
        "scores".to_owned(),
        names.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(","),
    );
    for (k, v) in meta {
        config.insert(format!("predictions.{k}"), v);
    }
    let report = evaluate(&predictions, &names, config)?;

    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    report.write(
        args.out_dir.join("report.json"),
        args.out_dir.join("report.csv"),
    )?;
    print!("{}", report.to_table());
    Ok(report)
}

pub fn trace_csv(trace: &FinetuneTrace) -> String {
    let c = &trace.config;
    let mut out = format!(
        "# epochs={} learning_rate={} temperature={}\nepoch,loss,accuracy\n",
        c.epochs, c.learning_rate, c.temperature
    );
    for (epoch, (loss, acc)) in trace.loss.iter().zip(&trace.accuracy).enumerate() {
        writeln!(out, "{},{},{}", epoch + 1, loss, acc).expect("write to string");
    }
    out
}

fn default_trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<(PrototypeBank, FinetuneTrace)> {
    let config = FinetuneConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        temperature: args.tau,
    };
    config.validate()?;
    let dataset = Dataset::load(&args.manifest)?;
    let bank = PrototypeBank::load(&args.bank)?;
    let (tuned, trace) = finetune_from_dataset(&bank, &dataset, &config)?;
    tuned.save(&args.out)?;
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| default_trace_path(&args.out));
    fs::write(&trace_path, trace_csv(&trace)).map_err(|e| Error::io(&trace_path, e))?;
    if let (Some(first), Some(last)) = (trace.loss.first(), trace.loss.last()) {
        println!("loss {first} -> {last} over {} epochs", trace.loss.len());
    }
    Ok((tuned, trace))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut dataset = generate_synthetic(&args.config())?;
    let path = dataset.save(&args.out)?;
    println!(
        "wrote {} samples over {} classes to {}",
        dataset.manifest.samples.len(),
        dataset.class_count(),
        path.display()
    );
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prototypes(a) => cmd_prototypes(a).map(drop),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Finetune(a) => cmd_finetune(a).map(drop),
        Command::Synth(a) => cmd_synth(a).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn score_list_parses_commas() {
        let cli = Cli::try_parse_from([
            "protoverify",
            "eval",
            "--predictions",
            "p.csv",
            "--scores",
            "msp,kappa",
            "--out-dir",
            "o",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.scores, vec!["msp", "kappa"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finetune_defaults() {
        let cli = Cli::try_parse_from([
            "protoverify",
            "finetune",
            "--manifest",
            "m.json",
            "--bank",
            "b.tvem",
            "--out",
            "f.tvem",
        ])
        .unwrap();
        match cli.command {
            Command::Finetune(a) => {
                assert_eq!((a.epochs, a.lr, a.tau), (10, 0.001, 0.01));
                assert_eq!(default_trace_path(&a.out), PathBuf::from("f.trace.csv"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trace_header_echoes_config() {
        let trace = FinetuneTrace {
            config: FinetuneConfig::default(),
            loss: vec![0.5, 0.4],
            accuracy: vec![0.75, 1.0],
        };
        let csv = trace_csv(&trace);
        assert!(csv.starts_with("# epochs=10 learning_rate=0.001 temperature=0.01\n"));
        assert!(csv.ends_with("1,0.5,0.75\n2,0.4,1\n"));
    }
}
