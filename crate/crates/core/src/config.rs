//! Run configuration in a flat `key = value` text format.
//!
//! ```text
//! # comment
//! dataset_path = data/ml-100k/u.data
//! granularity_weeks = 2
//! split_ratios = 4:1:5
//! ```
//!
//! Unknown keys are rejected. Missing keys keep their defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{RatingFormat, RatingScale, SplitMode};
use crate::error::{Error, Result};
use crate::model::{DecaySign, ModelConfig};
use crate::numeric::OptimizerKind;
use crate::synth::SynthConfig;

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_WEEK: f64 = 7.0 * SECONDS_PER_DAY;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_path: String,
    pub dataset_format: RatingFormat,
    pub rating_scale: RatingScale,
    pub granularity_weeks: f64,
    /// Width of one update interval while streaming the test period.
    pub update_interval_weeks: f64,
    pub split_ratios: [f64; 3],
    pub split_mode: SplitMode,
    pub d_s: usize,
    pub d_h: usize,
    pub d_emb: usize,
    pub hidden_width: usize,
    pub lambda_u_weeks: f64,
    pub lambda_v_weeks: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerChoice,
    pub epochs: usize,
    pub truncation_weeks: f64,
    pub train_iterations: usize,
    pub test_iterations: usize,
    pub seed: u64,
    pub decay_sign: DecaySign,
    pub initial_prior_var: f64,
    pub stop_prior_grad: bool,
    pub dynamics_off: bool,
    pub record_factors: bool,
    pub export_users: Vec<String>,
    pub export_items: Vec<String>,
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Descent,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Descent => OptimizerKind::Descent,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: String::new(),
            dataset_format: RatingFormat::Tsv,
            rating_scale: RatingScale::default(),
            granularity_weeks: 2.0,
            update_interval_weeks: 2.0,
            split_ratios: [4.0, 1.0, 5.0],
            split_mode: SplitMode::Count,
            d_s: 20,
            d_h: 20,
            d_emb: 32,
            hidden_width: 64,
            lambda_u_weeks: 1.0,
            lambda_v_weeks: 4.0,
            sigma_u: 1.0,
            sigma_v: 1.0,
            learning_rate: 1e-2,
            optimizer: OptimizerChoice::Adam,
            epochs: 5,
            truncation_weeks: 20.0,
            train_iterations: 10,
            test_iterations: 5,
            seed: 42,
            decay_sign: DecaySign::Negative,
            initial_prior_var: 0.01,
            stop_prior_grad: false,
            dynamics_off: false,
            record_factors: false,
            export_users: Vec::new(),
            export_items: Vec::new(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    pub fn from_str_checked(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut interval_set = false;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = k.trim();
            interval_set |= key == "update_interval_weeks";
            cfg.set(key, v.trim())?;
        }
        if !interval_set {
            cfg.update_interval_weeks = cfg.granularity_weeks;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override (the `--set` flag).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = k.trim();
        let follow = key == "granularity_weeks" && self.update_interval_weeks == self.granularity_weeks;
        self.set(key, v.trim())?;
        if follow {
            self.update_interval_weeks = self.granularity_weeks;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset_path" => self.dataset_path = v.to_string(),
            "dataset_format" => self.dataset_format = v.parse()?,
            "rating_min" => self.rating_scale.min = parse_num(key, v)?,
            "rating_max" => self.rating_scale.max = parse_num(key, v)?,
            "granularity_weeks" => self.granularity_weeks = parse_num(key, v)?,
            "update_interval_weeks" => self.update_interval_weeks = parse_num(key, v)?,
            "split_ratios" => {
                let parts: Vec<&str> = v.split(':').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("`split_ratios`: expected a:b:c, got `{v}`")));
                }
                for (slot, p) in self.split_ratios.iter_mut().zip(parts) {
                    *slot = parse_num(key, p.trim())?;
                }
            }
            "split_mode" => self.split_mode = v.parse()?,
            "d_s" => self.d_s = parse_num(key, v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "d_emb" => self.d_emb = parse_num(key, v)?,
            "hidden_width" => self.hidden_width = parse_num(key, v)?,
            "lambda_u_weeks" => self.lambda_u_weeks = parse_num(key, v)?,
            "lambda_v_weeks" => self.lambda_v_weeks = parse_num(key, v)?,
            "sigma_u" => self.sigma_u = parse_num(key, v)?,
            "sigma_v" => self.sigma_v = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerChoice::Adam,
                    "descent" => OptimizerChoice::Descent,
                    _ => return Err(Error::Config(format!("`optimizer`: unknown `{v}`"))),
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "truncation_weeks" => self.truncation_weeks = parse_num(key, v)?,
            "train_iterations" => self.train_iterations = parse_num(key, v)?,
            "test_iterations" => self.test_iterations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "decay_sign" => {
                self.decay_sign = match v {
                    "negative" => DecaySign::Negative,
                    "positive" => DecaySign::Positive,
                    _ => return Err(Error::Config(format!("`decay_sign`: unknown `{v}`"))),
                }
            }
            "initial_prior_var" => self.initial_prior_var = parse_num(key, v)?,
            "stop_prior_grad" => self.stop_prior_grad = parse_bool(key, v)?,
            "dynamics_off" => self.dynamics_off = parse_bool(key, v)?,
            "record_factors" => self.record_factors = parse_bool(key, v)?,
            "export_users" => self.export_users = parse_list(v),
            "export_items" => self.export_items = parse_list(v),
            "synth_users" => self.synth.users = parse_num(key, v)?,
            "synth_items" => self.synth.items = parse_num(key, v)?,
            "synth_steps" => self.synth.steps = parse_num(key, v)?,
            "synth_ratings_per_step" => self.synth.ratings_per_step = parse_num(key, v)?,
            "synth_latent_dim" => self.synth.latent_dim = parse_num(key, v)?,
            "synth_sigma" => self.synth.sigma_stationary = parse_num(key, v)?,
            "synth_drift_scale" => self.synth.drift_scale = parse_num(key, v)?,
            "synth_drift_decay" => self.synth.drift_decay = parse_num(key, v)?,
            "synth_noise_var" => self.synth.noise_var = parse_num(key, v)?,
            "synth_base_rating" => self.synth.base_rating = parse_num(key, v)?,
            "synth_zero_variance" => self.synth.zero_variance = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("granularity_weeks", self.granularity_weeks),
            ("update_interval_weeks", self.update_interval_weeks),
            ("lambda_u_weeks", self.lambda_u_weeks),
            ("lambda_v_weeks", self.lambda_v_weeks),
            ("sigma_u", self.sigma_u),
            ("sigma_v", self.sigma_v),
            ("initial_prior_var", self.initial_prior_var),
            ("learning_rate", self.learning_rate),
            ("truncation_weeks", self.truncation_weeks),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        let widths = [
            ("d_s", self.d_s),
            ("d_h", self.d_h),
            ("d_emb", self.d_emb),
            ("hidden_width", self.hidden_width),
        ];
        for (k, v) in widths {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.split_ratios.iter().any(|r| *r < 0.0) || self.split_ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {:?}", self.split_ratios)));
        }
        if self.rating_scale.min > self.rating_scale.max {
            return Err(Error::Config("rating_min exceeds rating_max".into()));
        }
        self.synth.validate()
    }

    pub fn granularity_seconds(&self) -> i64 {
        (self.granularity_weeks * SECONDS_PER_WEEK).round() as i64
    }

    pub fn update_interval_seconds(&self) -> i64 {
        (self.update_interval_weeks * SECONDS_PER_WEEK).round() as i64
    }

    /// Training segment length in granularity steps (at least one).
    pub fn truncation_steps(&self) -> usize {
        ((self.truncation_weeks / self.granularity_weeks).round() as usize).max(1)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_s: self.d_s,
            d_h: self.d_h,
            d_emb: self.d_emb,
            hidden_width: self.hidden_width,
            sigma_u: self.sigma_u,
            sigma_v: self.sigma_v,
            lambda_u: self.lambda_u_weeks * SECONDS_PER_WEEK,
            lambda_v: self.lambda_v_weeks * SECONDS_PER_WEEK,
            dtau_unit: SECONDS_PER_DAY,
            decay_sign: self.decay_sign,
            initial_prior_var: self.initial_prior_var,
            stop_prior_grad: self.stop_prior_grad,
            dynamics_off: self.dynamics_off,
            record_factors: self.record_factors,
            optimizer: self.optimizer.kind(),
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }

    /// Serializes every key; `from_str_checked` of the result is `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let _ = writeln!(s, "dataset_path = {}", self.dataset_path);
        let _ = writeln!(s, "dataset_format = {}", self.dataset_format);
        let _ = writeln!(s, "rating_min = {:?}", self.rating_scale.min);
        let _ = writeln!(s, "rating_max = {:?}", self.rating_scale.max);
        let _ = writeln!(s, "granularity_weeks = {:?}", self.granularity_weeks);
        let _ = writeln!(s, "update_interval_weeks = {:?}", self.update_interval_weeks);
        let r = self.split_ratios;
        let _ = writeln!(s, "split_ratios = {:?}:{:?}:{:?}", r[0], r[1], r[2]);
        let _ = writeln!(s, "split_mode = {}", self.split_mode);
        let _ = writeln!(s, "d_s = {}", self.d_s);
        let _ = writeln!(s, "d_h = {}", self.d_h);
        let _ = writeln!(s, "d_emb = {}", self.d_emb);
        let _ = writeln!(s, "hidden_width = {}", self.hidden_width);
        let _ = writeln!(s, "lambda_u_weeks = {:?}", self.lambda_u_weeks);
        let _ = writeln!(s, "lambda_v_weeks = {:?}", self.lambda_v_weeks);
        let _ = writeln!(s, "sigma_u = {:?}", self.sigma_u);
        let _ = writeln!(s, "sigma_v = {:?}", self.sigma_v);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let opt = match self.optimizer {
            OptimizerChoice::Adam => "adam",
            OptimizerChoice::Descent => "descent",
        };
        let _ = writeln!(s, "optimizer = {opt}");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "truncation_weeks = {:?}", self.truncation_weeks);
        let _ = writeln!(s, "train_iterations = {}", self.train_iterations);
        let _ = writeln!(s, "test_iterations = {}", self.test_iterations);
        let _ = writeln!(s, "seed = {}", self.seed);
        let sign = match self.decay_sign {
            DecaySign::Negative => "negative",
            DecaySign::Positive => "positive",
        };
        let _ = writeln!(s, "decay_sign = {sign}");
        let _ = writeln!(s, "initial_prior_var = {:?}", self.initial_prior_var);
        let _ = writeln!(s, "stop_prior_grad = {}", b(self.stop_prior_grad));
        let _ = writeln!(s, "dynamics_off = {}", b(self.dynamics_off));
        let _ = writeln!(s, "record_factors = {}", b(self.record_factors));
        let _ = writeln!(s, "export_users = {}", self.export_users.join(","));
        let _ = writeln!(s, "export_items = {}", self.export_items.join(","));
        let sy = &self.synth;
        let _ = writeln!(s, "synth_users = {}", sy.users);
        let _ = writeln!(s, "synth_items = {}", sy.items);
        let _ = writeln!(s, "synth_steps = {}", sy.steps);
        let _ = writeln!(s, "synth_ratings_per_step = {}", sy.ratings_per_step);
        let _ = writeln!(s, "synth_latent_dim = {}", sy.latent_dim);
        let _ = writeln!(s, "synth_sigma = {:?}", sy.sigma_stationary);
        let _ = writeln!(s, "synth_drift_scale = {:?}", sy.drift_scale);
        let _ = writeln!(s, "synth_drift_decay = {:?}", sy.drift_decay);
        let _ = writeln!(s, "synth_noise_var = {:?}", sy.noise_var);
        let _ = writeln!(s, "synth_base_rating = {:?}", sy.base_rating);
        let _ = writeln!(s, "synth_zero_variance = {}", b(sy.zero_variance));
        s
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_str_checked(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_str_checked("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.d_s, 20);
        assert_eq!(c.lambda_u_weeks, 1.0);
        assert_eq!(c.lambda_v_weeks, 4.0);
        assert_eq!(c.model_config().lambda_u, 604_800.0);
    }

    #[test]
    fn granularity_key() {
        let c = RunConfig::from_str_checked("granularity_weeks = 2\n").unwrap();
        assert_eq!(c.granularity_seconds(), 2 * 604_800);
        assert_eq!(c.update_interval_seconds(), 2 * 604_800);
        let c = RunConfig::from_str_checked("granularity_weeks = 4").unwrap();
        assert_eq!(c.update_interval_weeks, 4.0);
        assert_eq!(c.truncation_steps(), 5);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_str_checked("granularity_weeks = -1").is_err());
        assert!(RunConfig::from_str_checked("granularty_weeks = 2").is_err());
        assert!(RunConfig::from_str_checked("d_s = abc").is_err());
        assert!(RunConfig::from_str_checked("just a line").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.apply_override("granularity_weeks=4").unwrap();
        c.apply_override("split_ratios=3:1:1").unwrap();
        c.apply_override("export_users=1,2").unwrap();
        c.apply_override("learning_rate=0.0003").unwrap();
        c.apply_override("dynamics_off=true").unwrap();
        let back = RunConfig::from_str_checked(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        assert!(c.apply_override("nonsense").is_err());
    }
}
