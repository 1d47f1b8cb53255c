//! End-to-end workflows shared by the command line and the acceptance suite.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{chrono_split, parse_ratings, RatingEvent, Split};
use crate::error::{Error, Result};
use crate::inference::{train_offline, AuditLog, TrainOptions, TrainReport};
use crate::model::Model;
use crate::streaming::{prequential_eval, EvalReport};

/// Reads the configured dataset and splits it along the timeline.
pub fn load_split(cfg: &RunConfig) -> Result<Split> {
    if cfg.dataset_path.is_empty() {
        return Err(Error::Config("`dataset_path` is not set".into()));
    }
    let parsed = parse_ratings(Path::new(&cfg.dataset_path), cfg.dataset_format, cfg.rating_scale)?;
    log::info!(
        "{}: {} events ({} malformed lines skipped)",
        cfg.dataset_path,
        parsed.events.len(),
        parsed.malformed
    );
    chrono_split(&parsed.events, cfg.split_ratios, cfg.split_mode)
}

pub fn mean_rating(events: &[RatingEvent]) -> Option<f64> {
    if events.is_empty() {
        return None;
    }
    Some(events.iter().map(|e| e.rating).sum::<f64>() / events.len() as f64)
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        granularity: cfg.granularity_seconds(),
        truncation: cfg.truncation_steps(),
        epochs: cfg.epochs,
        iterations: cfg.train_iterations,
        seed: cfg.seed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub elbo: f64,
    pub validation_rmse: Option<f64>,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,elbo,validation_rmse";

    pub fn to_csv(rows: &[EpochRow]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            let v = r.validation_rmse.map(|x| format!("{x:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{v}\n", r.epoch, r.elbo));
        }
        s
    }
}

pub struct Trained {
    pub model: Model,
    pub report: TrainReport,
    pub epochs: Vec<EpochRow>,
}

/// Fits a fresh model to the training segment. After each epoch a copy of
/// the model streams through the validation segment to score it.
pub fn train_model(cfg: &RunConfig, split: &Split) -> Result<Trained> {
    cfg.validate()?;
    let b0 = mean_rating(&split.train).ok_or_else(|| Error::InvalidArgument("training segment is empty".into()))?;
    let mut model = Model::new(cfg.model_config(), b0)?;
    let opts = train_options(cfg);
    let mut epochs = Vec::new();
    let report = train_offline(&mut model, &split.train, &opts, |m, s| {
        let validation_rmse = if split.validation.is_empty() {
            None
        } else {
            let mut probe = m.clone();
            let r = prequential_eval(
                &mut probe,
                &split.validation,
                cfg.update_interval_seconds(),
                cfg.test_iterations,
                cfg.seed,
                &mut AuditLog::default(),
            )?;
            r.overall_rmse
        };
        log::info!(
            "epoch {}: elbo {:.3}, validation rmse {}",
            s.epoch,
            s.elbo,
            validation_rmse.map_or("-".into(), |v| format!("{v:.4}"))
        );
        epochs.push(EpochRow {
            epoch: s.epoch,
            elbo: s.elbo,
            validation_rmse,
        });
        Ok(())
    })?;
    Ok(Trained { model, report, epochs })
}

/// Streams a trained model through the validation segment (assimilation
/// only) and then scores it prequentially on the test segment.
pub fn evaluate_stream(cfg: &RunConfig, model: &mut Model, split: &Split, audit: &mut AuditLog) -> Result<EvalReport> {
    let g = cfg.update_interval_seconds();
    if !split.validation.is_empty() {
        prequential_eval(model, &split.validation, g, cfg.test_iterations, cfg.seed, audit)?;
    }
    prequential_eval(model, &split.test, g, cfg.test_iterations, cfg.seed, audit)
}

/// RMSE of predicting `mean` for every event.
pub fn constant_rmse(events: &[RatingEvent], mean: f64) -> Option<f64> {
    let sq: Vec<f64> = events.iter().map(|e| (e.rating - mean).powi(2)).collect();
    crate::streaming::rmse(&sq)
}
