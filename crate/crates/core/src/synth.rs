//! Synthetic rating streams drawn from a known instance of the generative
//! model: stationary factors, Markov-drifting dynamic factors and Gaussian
//! ratings around `base + ⟨u, v⟩`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{sort_events, RatingEvent, RatingScale};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub steps: usize,
    pub ratings_per_step: usize,
    pub latent_dim: usize,
    /// Standard deviation of stationary factor entries.
    pub sigma_stationary: f64,
    /// Standard deviation of the per-step drift innovation.
    pub drift_scale: f64,
    /// Autoregressive coefficient of the drift.
    pub drift_decay: f64,
    /// Rating noise variance (the known `f2`).
    pub noise_var: f64,
    pub base_rating: f64,
    /// Floors every variance at `1e-8`, making ratings deterministic.
    pub zero_variance: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 100,
            steps: 5,
            ratings_per_step: 2000,
            latent_dim: 4,
            sigma_stationary: 0.8,
            drift_scale: 0.3,
            drift_decay: 0.8,
            noise_var: 0.1,
            base_rating: 5.0,
            zero_variance: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.steps == 0 || self.latent_dim == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.ratings_per_step < self.users.max(self.items) {
            return Err(Error::Config(format!(
                "synth_ratings_per_step must cover every entity in the first step (>= {})",
                self.users.max(self.items)
            )));
        }
        for (k, v) in [
            ("synth_sigma", self.sigma_stationary),
            ("synth_drift_scale", self.drift_scale),
            ("synth_noise_var", self.noise_var),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be non-negative")));
            }
        }
        if !(self.drift_decay.abs() < 1.0) {
            return Err(Error::Config(
                "`synth_drift_decay` must lie strictly inside (-1, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn rating_var(&self) -> f64 {
        if self.zero_variance {
            1e-8
        } else {
            self.noise_var.max(1e-8)
        }
    }
}

/// Factors of every entity at every step; `factors[t][i]` is `u^s + Δu_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub granularity: i64,
    pub start_time: i64,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub user_stationary: Vec<Vec<f64>>,
    pub item_stationary: Vec<Vec<f64>>,
    pub user_factors: Vec<Vec<Vec<f64>>>,
    pub item_factors: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    /// Known interaction mean `f1` at step `t` (0-based).
    pub fn mean(&self, t: usize, user: usize, item: usize) -> f64 {
        let u = &self.user_factors[t][user];
        let v = &self.item_factors[t][item];
        self.config.base_rating + u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub events: Vec<RatingEvent>,
    pub truth: GroundTruth,
}

fn draw_factors<R: Rng>(rng: &mut R, n: usize, k: usize, sd: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

fn evolve<R: Rng>(rng: &mut R, stationary: &[Vec<f64>], cfg: &SynthConfig) -> Vec<Vec<Vec<f64>>> {
    let k = cfg.latent_dim;
    // start at the drift's stationary law so its marginal spread is the
    // same at every step
    let spread = cfg.drift_scale / (1.0 - cfg.drift_decay * cfg.drift_decay).sqrt();
    let mut dynamic = draw_factors(rng, stationary.len(), k, spread);
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut step = Vec::with_capacity(stationary.len());
        for (s, d) in stationary.iter().zip(dynamic.iter_mut()) {
            for x in d.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *x = cfg.drift_decay * *x + cfg.drift_scale * e;
            }
            step.push(s.iter().zip(d.iter()).map(|(a, b)| a + b).collect());
        }
        out.push(step);
    }
    out
}

/// Draws a stream whose step `t` occupies `(start + (t−1)g, start + tg]`.
/// Every user and item appears in the first step and no entity arrives later.
/// Ratings are clamped into `scale`.
pub fn generate(
    cfg: &SynthConfig,
    granularity: i64,
    start_time: i64,
    scale: RatingScale,
    seed: u64,
) -> Result<SynthData> {
    cfg.validate()?;
    if granularity <= 0 {
        return Err(Error::Config("granularity must be positive".into()));
    }
    let mut rng = seeds::rng(&[seed, 0x73796e74]);
    let sd = if cfg.zero_variance { 0.0 } else { 1.0 };
    let k = cfg.latent_dim;
    let user_stationary = draw_factors(&mut rng, cfg.users, k, cfg.sigma_stationary);
    let item_stationary = draw_factors(&mut rng, cfg.items, k, cfg.sigma_stationary);
    let user_factors = evolve(&mut rng, &user_stationary, cfg);
    let item_factors = evolve(&mut rng, &item_stationary, cfg);
    let truth = GroundTruth {
        config: cfg.clone(),
        granularity,
        start_time,
        user_ids: (0..cfg.users).map(|i| format!("u{i}")).collect(),
        item_ids: (0..cfg.items).map(|j| format!("i{j}")).collect(),
        user_stationary,
        item_stationary,
        user_factors,
        item_factors,
    };
    let noise = Normal::new(0.0, cfg.rating_var().sqrt() * sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut events = Vec::with_capacity(cfg.steps * cfg.ratings_per_step);
    for t in 0..cfg.steps {
        let lo = start_time + t as i64 * granularity;
        let cover = if t == 0 { cfg.users.max(cfg.items) } else { 0 };
        for n in 0..cfg.ratings_per_step {
            let (i, j) = if n < cover {
                (n % cfg.users, n % cfg.items)
            } else {
                (rng.random_range(0..cfg.users), rng.random_range(0..cfg.items))
            };
            let ts = lo + rng.random_range(1..=granularity);
            let r = (truth.mean(t, i, j) + noise.sample(&mut rng)).clamp(scale.min, scale.max);
            events.push(RatingEvent::new(
                truth.user_ids[i].clone(),
                truth.item_ids[j].clone(),
                r,
                ts,
            ));
        }
    }
    sort_events(&mut events);
    Ok(SynthData { events, truth })
}
