use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cvrcf_core::inference::write_iteration_log;
use cvrcf_core::{
    evaluate_stream, export_factors, generate, load_checkpoint, load_config, load_split, run_gradcheck_suite,
    save_checkpoint, train_model, write_ratings, AuditLog, EpochRow, RunConfig,
};

/// Synthetic streams start at 2001-09-09.
const SYNTH_START: i64 = 1_000_000_000;

#[derive(Parser)]
#[command(
    name = "cvrcf",
    version,
    about = "Streaming collaborative filtering with variational recurrent factors"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train on the training segment and write a checkpoint.
    Train(Common),
    /// Stream a checkpoint through validation and score it on the test segment.
    EvalStream(Common),
    /// Write averaged location and uncertainty factors per committed step.
    ExportFactors(Common),
    /// Check analytic gradients of every network against finite differences.
    Gradcheck(Common),
    /// Draw a synthetic rating stream and its ground truth.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint_or_default(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn required_checkpoint(&self) -> Result<&Path> {
        match &self.checkpoint {
            Some(p) => Ok(p),
            None => bail!("--checkpoint is required"),
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let split = load_split(&cfg)?;
    let trained = train_model(&cfg, &split)?;
    // outputs are written only once everything succeeded
    create_out(&c.out)?;
    let ckpt = c.checkpoint_or_default();
    save_checkpoint(&trained.model, &ckpt)?;
    let epochs = c.out.join("epochs.csv");
    fs::write(&epochs, EpochRow::to_csv(&trained.epochs))?;
    let iterations = c.out.join("iterations.tsv");
    let mut buf = Vec::new();
    write_iteration_log(&mut buf, &trained.report.records)?;
    fs::write(&iterations, buf)?;
    println!("checkpoint={}", ckpt.display());
    println!("epochs_csv={}", epochs.display());
    println!("iteration_log={}", iterations.display());
    if let Some(v) = trained.epochs.last().and_then(|e| e.validation_rmse) {
        println!("validation_rmse={v:.6}");
    }
    Ok(())
}

fn cmd_eval_stream(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let mut model = load_checkpoint(c.required_checkpoint()?)?;
    let split = load_split(&cfg)?;
    let report = evaluate_stream(&cfg, &mut model, &split, &mut AuditLog::default())?;
    create_out(&c.out)?;
    let csv = c.out.join("eval_steps.csv");
    report.write_csv(&csv)?;
    // the model after test-time updates, for exporting the whole timeline
    let streamed = c.out.join("streamed.ckpt");
    save_checkpoint(&model, &streamed)?;
    print!("{}", report.to_csv());
    println!("streamed_checkpoint={}", streamed.display());
    println!("n_predicted={}", report.n_predicted);
    println!("n_cold_skipped={}", report.n_cold_skipped);
    match report.overall_rmse {
        Some(v) => println!("overall_rmse={v:.6}"),
        None => println!("overall_rmse=absent"),
    }
    Ok(())
}

fn cmd_export_factors(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let model = load_checkpoint(c.required_checkpoint()?)?;
    let export = export_factors(&model, &cfg.export_users, &cfg.export_items)?;
    create_out(&c.out)?;
    for p in export.write(&c.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gradcheck(c: &Common) -> Result<bool> {
    let cfg = c.run_config()?;
    let report = run_gradcheck_suite(cfg.seed)?;
    print!("{report}");
    println!("max_rel_error={:.3e} tol={:.0e}", report.max_rel_error(), report.tol);
    if let Some((section, param, err)) = report.worst().filter(|_| !report.passed()) {
        eprintln!("gradcheck failed: worst {param} in {section} with relative error {err:.3e}");
    }
    Ok(report.passed())
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let data = generate(
        &cfg.synth,
        cfg.granularity_seconds(),
        SYNTH_START,
        cfg.rating_scale,
        cfg.seed,
    )?;
    create_out(&c.out)?;
    let ratings = c.out.join("synth.tsv");
    write_ratings(&ratings, &data.events, cfg.dataset_format)?;
    let truth = c.out.join("synth_truth.json");
    data.truth.write_json(&truth)?;
    println!("ratings={}", ratings.display());
    println!("ground_truth={}", truth.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.verb {
        Verb::Train(c) => cmd_train(c).map(|_| true),
        Verb::EvalStream(c) => cmd_eval_stream(c).map(|_| true),
        Verb::ExportFactors(c) => cmd_export_factors(c).map(|_| true),
        Verb::Gradcheck(c) => cmd_gradcheck(c),
        Verb::Synth(c) => cmd_synth(c).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
