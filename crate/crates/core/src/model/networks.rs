use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DecaySign, EntityKind, ModelConfig};
use crate::distributions::VAR_FLOOR;
use crate::error::{Error, Result};
use crate::numeric::{Activation, Graph, GruCell, LayerSpec, Mlp, NodeId, ParamId, ParamStore, Tensor};

/// Floor added to the environmental noise variance.
pub const NOISE_FLOOR: f64 = 1e-4;

/// Per-chain parameters: the recurrent cell, the drift-prior heads, the
/// posterior heads and the two lookup tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainNets {
    pub kind: EntityKind,
    pub gru: GruCell,
    /// f4
    pub prior_mean: Mlp,
    /// f3
    pub prior_var: Mlp,
    /// f5, mean head
    pub post_mean: Mlp,
    /// f5, variance head
    pub post_var: Mlp,
    /// Stationary factors, one row per entity of this chain.
    pub stationary: ParamId,
    /// Input embedding, one row per entity of the *other* chain.
    pub embedding: ParamId,
    pub lambda: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub user: ChainNets,
    pub item: ChainNets,
    /// Residual of the interaction mean.
    pub f1: Mlp,
    /// Pre-softplus interaction variance.
    pub f2: Mlp,
    pub noise: Mlp,
    pub b0: ParamId,
    pub d_s: usize,
    pub d_h: usize,
    pub d_emb: usize,
    pub dtau_unit: f64,
    pub decay_sign: DecaySign,
}

fn pair_net<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(
        store,
        name,
        vec![
            LayerSpec::Concat { width: d },
            LayerSpec::Affine {
                input: 3 * d,
                output: hidden,
            },
            LayerSpec::Activation {
                kind: Activation::Tanh,
                width: hidden,
            },
            LayerSpec::Affine {
                input: hidden,
                output: 1,
            },
        ],
        rng,
    )
}

fn output_layer(mlp: &Mlp) -> (ParamId, ParamId) {
    let ids = mlp.param_ids();
    (ids[ids.len() - 2], ids[ids.len() - 1])
}

fn start_output_at(store: &mut ParamStore, mlp: &Mlp, weight: f64, bias: f64) {
    let (w, _) = output_layer(mlp);
    store.value_mut(w).data_mut().fill(weight);
    start_output_bias(store, mlp, bias);
}

fn start_output_bias(store: &mut ParamStore, mlp: &Mlp, bias: f64) {
    let (_, b) = output_layer(mlp);
    store.value_mut(b).data_mut().fill(bias);
}

/// `x` with `softplus(x) = y`, for `y > 0`.
fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl ChainNets {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: EntityKind, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let p = kind.as_str();
        let (d, dh, de, w) = (cfg.d_s, cfg.d_h, cfg.d_emb, cfg.hidden_width);
        let y = de + 2;
        let (lambda, sigma) = match kind {
            EntityKind::User => (cfg.lambda_u, cfg.sigma_u),
            EntityKind::Item => (cfg.lambda_v, cfg.sigma_v),
        };
        Ok(ChainNets {
            kind,
            gru: GruCell::new(store, &format!("{p}.gru"), dh, y, rng),
            prior_mean: Mlp::one_hidden(store, &format!("{p}.f4"), dh + 1, w, d, rng)?,
            prior_var: Mlp::one_hidden(store, &format!("{p}.f3"), dh + 1, w, d, rng)?,
            post_mean: Mlp::one_hidden(store, &format!("{p}.f5_mean"), dh + y, w, d, rng)?,
            post_var: Mlp::one_hidden(store, &format!("{p}.f5_var"), dh + y, w, d, rng)?,
            stationary: store.add_table(format!("{p}.stationary"), Tensor::zeros(0, d)),
            embedding: store.add_table(format!("{p}.embedding"), Tensor::zeros(0, de)),
            lambda,
            sigma,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.gru.param_ids().to_vec();
        for net in [&self.prior_mean, &self.prior_var, &self.post_mean, &self.post_var] {
            ids.extend(net.param_ids());
        }
        ids.push(self.stationary);
        ids.push(self.embedding);
        ids
    }

    /// Drift prior from hidden rows `h` and a `n × 1` column of transformed
    /// intervals. Returns `(mean, var)` nodes of width `d_s`.
    pub fn drift_prior(&self, g: &mut Graph, h: NodeId, dtau_feature: NodeId) -> Result<(NodeId, NodeId)> {
        let x = g.concat(&[h, dtau_feature])?;
        let mean = self.prior_mean.forward(g, x)?;
        let pre = self.prior_var.forward(g, x)?;
        let sp = g.softplus(pre);
        Ok((mean, g.clamp_min(sp, VAR_FLOOR)))
    }

    /// Variational posterior from hidden rows and constructed inputs `y`.
    pub fn posterior(&self, g: &mut Graph, h: NodeId, y: NodeId) -> Result<(NodeId, NodeId)> {
        let x = g.concat(&[h, y])?;
        let mean = self.post_mean.forward(g, x)?;
        let pre = self.post_var.forward(g, x)?;
        let sp = g.softplus(pre);
        Ok((mean, g.clamp_min(sp, VAR_FLOOR)))
    }

    /// `y = [Σ r · embedding[j]; log1p(Δτ/unit); is_new]` for every row.
    ///
    /// `entries` holds `(row, counterpart index, rating)`.
    pub fn build_input(
        &self,
        g: &mut Graph,
        n: usize,
        entries: Vec<(usize, usize, f64)>,
        dtau_feature: NodeId,
        is_new: &[bool],
    ) -> Result<NodeId> {
        if is_new.len() != n {
            return Err(Error::shape(
                "build_input",
                format!("{} flags for {n} rows", is_new.len()),
            ));
        }
        let emb = g.sparse_rows(self.embedding, n, entries)?;
        let flags = g.constant(Tensor::column(
            is_new.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ));
        g.concat(&[emb, dtau_feature, flags])
    }
}

impl Networks {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, b0: f64, rng: &mut R) -> Result<Self> {
        for (k, v) in [
            ("d_s", cfg.d_s),
            ("d_h", cfg.d_h),
            ("d_emb", cfg.d_emb),
            ("hidden_width", cfg.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(cfg.lambda_u > 0.0 && cfg.lambda_v > 0.0) {
            return Err(Error::Config("decay constants must be positive".into()));
        }
        let d = cfg.d_s;
        let user = ChainNets::new(store, EntityKind::User, cfg, rng)?;
        let item = ChainNets::new(store, EntityKind::Item, cfg, rng)?;
        let f1 = pair_net(store, "f1", d, cfg.hidden_width, rng)?;
        let f2 = pair_net(store, "f2", d, cfg.hidden_width, rng)?;
        let noise = Mlp::one_hidden(store, "noise", 2 * cfg.d_h, cfg.hidden_width, 1, rng)?;
        let b0 = store.add("b0", Tensor::scalar(b0));
        // Start as plain matrix factorization: no residual, no drift, and
        // dynamic variances at the first-event prior.
        start_output_at(store, &f1, 0.0, 0.0);
        let var_bias = softplus_inverse(cfg.initial_prior_var);
        for c in [&user, &item] {
            start_output_at(store, &c.prior_mean, 0.0, 0.0);
            start_output_at(store, &c.post_mean, 0.0, 0.0);
            start_output_bias(store, &c.prior_var, var_bias);
            start_output_bias(store, &c.post_var, var_bias);
        }
        Ok(Networks {
            user,
            item,
            f1,
            f2,
            noise,
            b0,
            d_s: d,
            d_h: cfg.d_h,
            d_emb: cfg.d_emb,
            dtau_unit: cfg.dtau_unit,
            decay_sign: cfg.decay_sign,
        })
    }

    pub fn chain(&self, kind: EntityKind) -> &ChainNets {
        match kind {
            EntityKind::User => &self.user,
            EntityKind::Item => &self.item,
        }
    }

    /// Every parameter, grouped by network name.
    pub fn groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut out = Vec::new();
        for c in [&self.user, &self.item] {
            let p = c.kind.as_str();
            out.push((format!("{p}.gru"), c.gru.param_ids().to_vec()));
            out.push((format!("{p}.f4"), c.prior_mean.param_ids()));
            out.push((format!("{p}.f3"), c.prior_var.param_ids()));
            out.push((
                format!("{p}.f5"),
                [c.post_mean.param_ids(), c.post_var.param_ids()].concat(),
            ));
            out.push((format!("{p}.stationary"), vec![c.stationary]));
            out.push((format!("{p}.embedding"), vec![c.embedding]));
        }
        out.push(("f1".into(), [self.f1.param_ids(), vec![self.b0]].concat()));
        out.push(("f2".into(), self.f2.param_ids()));
        out.push(("noise".into(), self.noise.param_ids()));
        out
    }

    pub fn dtau_feature(&self, dtau_seconds: f64) -> f64 {
        (dtau_seconds / self.dtau_unit).ln_1p()
    }

    pub fn decay_factor(&self, dtau_seconds: f64, lambda: f64) -> f64 {
        match self.decay_sign {
            DecaySign::Negative => (-dtau_seconds / lambda).exp(),
            DecaySign::Positive => (dtau_seconds / lambda).exp(),
        }
    }

    /// `⟨u, v⟩ + b₀ + MLP₁([u; v; u ⊙ v])` as an `n × 1` node.
    pub fn interaction_mean(&self, g: &mut Graph, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_pair(g, u, v, "interaction_mean")?;
        let uv = g.mul(u, v)?;
        let dot = g.row_sum(uv);
        let b0 = g.param(self.b0);
        let base = g.add_scalar_node(dot, b0)?;
        let x = g.concat(&[u, v])?;
        let resid = self.f1.forward(g, x)?;
        g.add(base, resid)
    }

    /// `softplus(MLP₂([u; v; u ⊙ v])) + σ²_env` as an `n × 1` node.
    pub fn interaction_var(&self, g: &mut Graph, u: NodeId, v: NodeId, sigma2_env: NodeId) -> Result<NodeId> {
        self.check_pair(g, u, v, "interaction_var")?;
        let x = g.concat(&[u, v])?;
        let pre = self.f2.forward(g, x)?;
        let sp = g.softplus(pre);
        g.add(sp, sigma2_env)
    }

    /// `softplus(MLP([h_u; h_v])) + 1e-4` as an `n × 1` node.
    pub fn env_noise(&self, g: &mut Graph, h_u: NodeId, h_v: NodeId) -> Result<NodeId> {
        let x = g.concat(&[h_u, h_v])?;
        let pre = self.noise.forward(g, x)?;
        let sp = g.softplus(pre);
        Ok(g.offset(sp, NOISE_FLOOR))
    }

    fn check_pair(&self, g: &Graph, u: NodeId, v: NodeId, what: &str) -> Result<()> {
        let (uv, vv) = (g.value(u), g.value(v));
        if uv.cols() != self.d_s || vv.cols() != self.d_s || uv.rows() != vv.rows() {
            return Err(Error::shape(
                what,
                format!(
                    "factors {}x{} and {}x{}, expected width {}",
                    uv.rows(),
                    uv.cols(),
                    vv.rows(),
                    vv.cols(),
                    self.d_s
                ),
            ));
        }
        Ok(())
    }
}
