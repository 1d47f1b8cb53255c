//! Diagonal Gaussians: densities, closed-form KL, reparameterized draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId};

/// Smallest variance a [`DiagGaussian`] will hold.
pub const VAR_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    /// Variances below [`VAR_FLOOR`] are raised to it.
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape(
                "DiagGaussian",
                format!("mean has {} entries, var {}", mean.len(), var.len()),
            ));
        }
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DiagGaussian parameters".into()));
        }
        let var = var.into_iter().map(|v| v.max(VAR_FLOOR)).collect();
        Ok(DiagGaussian { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.dim() {
            return Err(Error::shape(what, format!("length {n} vs dimension {}", self.dim())));
        }
        Ok(())
    }

    /// `Σ_d −½ log(2π var_d) − (x_d − mean_d)² / (2 var_d)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x.len(), "log_density")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), x)| -0.5 * (LN_2PI + v.ln()) - (x - m) * (x - m) / (2.0 * v))
            .sum())
    }

    /// `mean + √var ⊙ noise`.
    pub fn sample_reparam(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_len(noise.len(), "sample_reparam")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(noise)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect())
    }
}

/// Closed-form `KL(q ‖ p)`:
/// `Σ_d ½ [var_q/var_p + (μ_p − μ_q)²/var_p − 1 + ln(var_p/var_q)]`.
pub fn kl_divergence(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape(
            "kl_divergence",
            format!("dimensions {} and {}", q.dim(), p.dim()),
        ));
    }
    let mut total = 0.0;
    for d in 0..q.dim() {
        let (mq, vq, mp, vp) = (q.mean[d], q.var[d], p.mean[d], p.var[d]);
        total += 0.5 * (vq / vp + (mp - mq) * (mp - mq) / vp - 1.0 + (vp / vq).ln());
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of the mean: sample standard deviation over `√n`.
    pub std_error: f64,
}

/// Monte-Carlo estimate of `KL(q ‖ p)` from `n` reparameterized draws of `q`.
/// Independent of [`kl_divergence`]; exists to check it.
pub fn mc_kl_estimate(q: &DiagGaussian, p: &DiagGaussian, n: usize, seed: u64) -> Result<McEstimate> {
    if q.dim() != p.dim() {
        return Err(Error::shape(
            "mc_kl_oracle",
            format!("dimensions {} and {}", q.dim(), p.dim()),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mc_kl_oracle needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = vec![0.0; q.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        for e in noise.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        let s = q.sample_reparam(&noise)?;
        let term = q.log_density(&s)? - p.log_density(&s)?;
        sum += term;
        sum_sq += term * term;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / nf).sqrt(),
    })
}

pub fn mc_kl_oracle(q: &DiagGaussian, p: &DiagGaussian, n: usize, seed: u64) -> Result<f64> {
    mc_kl_estimate(q, p, n, seed).map(|e| e.mean)
}

/// Tape versions operating on `rows × dim` blocks (one Gaussian per row).
pub mod tape {
    use super::*;

    /// Per-row summed KL, returned as the total `1 × 1` node.
    pub fn kl_sum(g: &mut Graph, mq: NodeId, vq: NodeId, mp: NodeId, vp: NodeId) -> Result<NodeId> {
        let ratio = g.div(vq, vp)?;
        let diff = g.sub(mp, mq)?;
        let diff2 = g.square(diff);
        let maha = g.div(diff2, vp)?;
        let a = g.add(ratio, maha)?;
        let ln_vp = g.ln(vp);
        let ln_vq = g.ln(vq);
        let lr = g.sub(ln_vp, ln_vq)?;
        let b = g.add(a, lr)?;
        let b = g.offset(b, -1.0);
        let s = g.sum(b);
        Ok(g.scale(s, 0.5))
    }

    /// Per-row Gaussian log density as an `n × c` node (entrywise terms).
    pub fn log_density_terms(g: &mut Graph, x: NodeId, mean: NodeId, var: NodeId) -> Result<NodeId> {
        let diff = g.sub(x, mean)?;
        let diff2 = g.square(diff);
        let quad = g.div(diff2, var)?;
        let ln_v = g.ln(var);
        let t = g.add(quad, ln_v)?;
        let t = g.offset(t, LN_2PI);
        Ok(g.scale(t, -0.5))
    }

    /// `mean + √var ⊙ noise` with `noise` a constant node.
    pub fn sample(g: &mut Graph, mean: NodeId, var: NodeId, noise: NodeId) -> Result<NodeId> {
        let sd = g.sqrt(var);
        let scaled = g.mul(sd, noise)?;
        g.add(mean, scaled)
    }
}
