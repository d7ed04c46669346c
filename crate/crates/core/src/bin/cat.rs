//! Experiment driver: dataset previews, base pretraining, fine-tuning,
//! evaluation, α sweeps and multi-concept runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cat_core::harness::report::write_sample_grid;
use cat_core::harness::{
    evaluate_batch, finetune_batch, gen_dataset_with, open_experiment, pretrain_to_dir, run_multiconcept, sweep_alpha,
    ExperimentConfig,
};
use cat_core::training::Mode;
use cat_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cat", version, about = "Contrastive adapter training testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write per-class preview grids.
    GenData(Common),
    /// Pretrain the base denoiser and the feature encoder.
    Pretrain(Common),
    /// Fine-tune adapters for every configured (mode, seed).
    Finetune(Common),
    /// Score fine-tuned adapters and write metrics.csv.
    Evaluate(Common),
    /// Cat runs over the configured α list with per-α medians.
    Sweep(Common),
    /// One adapter over several identity concepts, cat against lora.
    Multiconcept(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive weight for cat runs; for `sweep`, compared against α = 0.
    #[arg(long)]
    alpha: Option<f64>,
    /// Run only this mode.
    #[arg(long)]
    mode: Option<Mode>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::shapes16(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.experiment.seeds = vec![seed];
        }
        if let Some(alpha) = self.alpha {
            cfg.train.alpha = alpha;
            cfg.experiment.alphas = if alpha == 0.0 { vec![0.0] } else { vec![0.0, alpha] };
        }
        if let Some(mode) = self.mode {
            cfg.experiment.modes = vec![mode];
            cfg.train.mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report_failures(failures: &[(String, Error)]) -> Result<()> {
    for (id, e) in failures {
        eprintln!("run {id} failed: {e}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} run(s) failed; see failures.csv", failures.len())))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let data = gen_dataset_with(cfg.dataset.kind, cfg.dataset.seed, &cfg.dataset.spec());
            let dir = &cfg.output_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (k, name) in data.class_names.iter().enumerate() {
                let preview: Vec<Vec<f64>> = data.class_samples(k).take(16).cloned().collect();
                write_sample_grid(&dir.join(format!("data_{name}.pgm")), &preview)?;
            }
            for concept in &data.identities {
                write_sample_grid(&dir.join(format!("data_{}.pgm", concept.name)), &concept.subset)?;
            }
            println!(
                "{}: {} samples over {} classes, {} identity concepts, written to {}",
                data.kind,
                data.samples.len(),
                data.n_classes(),
                data.identities.len(),
                dir.display()
            );
        }
        Command::Pretrain(c) => {
            let exp = pretrain_to_dir(c.load()?)?;
            println!(
                "base and encoder written to {} (encoder holdout accuracy {:.4})",
                exp.config.output_dir.display(),
                exp.encoder.holdout_accuracy()
            );
        }
        Command::Finetune(c) => {
            let exp = open_experiment(c.load()?)?;
            let runs = exp.default_runs();
            let failures = finetune_batch(&exp, &runs)?;
            println!("{} adapter(s) trained", runs.len() - failures.len());
            report_failures(&failures)?;
        }
        Command::Evaluate(c) => {
            let exp = open_experiment(c.load()?)?;
            let outcome = evaluate_batch(&exp, &exp.default_runs())?;
            print_reports(&outcome.reports());
            report_failures(&outcome.failures)?;
        }
        Command::Sweep(c) => {
            let exp = open_experiment(c.load()?)?;
            let (outcome, rows) = sweep_alpha(&exp)?;
            println!("alpha  prompt    identity  kps");
            for r in &rows {
                println!("{:<6} {:.6}  {:.6}  {:.6}", r.alpha, r.prompt_score, r.identity_score, r.kps);
            }
            report_failures(&outcome.failures)?;
        }
        Command::Multiconcept(c) => {
            let exp = open_experiment(c.load()?)?;
            let (results, failures) = run_multiconcept(&exp)?;
            for r in &results {
                for s in &r.concepts {
                    println!(
                        "{} {}: own {:.4} margin {:+.4} kps {:.4}",
                        r.run_id,
                        s.concept,
                        s.own_identity,
                        s.margin(),
                        r.kps
                    );
                }
            }
            report_failures(&failures)?;
        }
    }
    Ok(())
}

fn print_reports(reports: &[&cat_core::metrics::MetricReport]) {
    for r in reports {
        println!("{}: prompt {:.4} identity {:.4} kps {:.4}", r.run_id, r.prompt_score(), r.identity_score(), r.kps());
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
