//! Streaming collaborative filtering with coupled variational recurrent
//! chains over users and items.
//!
//! Each entity carries a stationary factor and a dynamic factor with a
//! Markov drift prior. Ratings arrive in fixed-width time steps; every step
//! is first predicted, then assimilated by a few rounds of reparameterized
//! gradient ascent on the step's variational lower bound.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod export;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod seeds;
pub mod streaming;
pub mod suite;
pub mod synth;

pub use config::{load_config, OptimizerChoice, RunConfig};
pub use data::{
    chrono_split, format_ratings, parse_ratings, parse_ratings_str, write_ratings, ParsedRatings, RatingEvent,
    RatingFormat, RatingScale, Split, SplitMode,
};
pub use distributions::{kl_divergence, mc_kl_oracle, DiagGaussian};
pub use error::{Error, Result};
pub use export::{export_factors, FactorExport, FactorTable};
pub use inference::{
    step_elbo, train_offline, update_step, AuditLog, IterationRecord, StepContext, TrainOptions, TrainReport,
};
pub use model::{
    compose_factor, decay_hidden, load_checkpoint, save_checkpoint, EntityKind, EntityState, Model, ModelConfig,
};
pub use pipeline::{evaluate_stream, load_split, train_model, EpochRow, Trained};
pub use streaming::{
    bucketize, predict, predict_batch, prequential_eval, EntityClock, EvalReport, Prediction, StepBatch,
};
pub use suite::{run_gradcheck_suite, SuiteReport};
pub use synth::{generate, GroundTruth, SynthConfig, SynthData};
