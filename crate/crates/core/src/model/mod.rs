//! Networks, parameters and per-entity streaming state.

mod checkpoint;
mod networks;

use std::collections::HashMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use networks::{ChainNets, Networks, NOISE_FLOOR};

use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::numeric::{Graph, OptimizerKind, OptimizerState, ParamStore, Tensor};
use crate::seeds;

/// Standard deviation of freshly registered stationary rows and embeddings.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }

    pub fn other(self) -> Self {
        match self {
            EntityKind::User => EntityKind::Item,
            EntityKind::Item => EntityKind::User,
        }
    }

    fn tag(self) -> u64 {
        match self {
            EntityKind::User => 1,
            EntityKind::Item => 2,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sign of the exponent in the hidden-state decay `h · exp(±Δτ/λ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecaySign {
    Negative,
    Positive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_s: usize,
    pub d_h: usize,
    pub d_emb: usize,
    pub hidden_width: usize,
    pub sigma_u: f64,
    pub sigma_v: f64,
    /// Decay constants in seconds.
    pub lambda_u: f64,
    pub lambda_v: f64,
    /// Seconds per unit of Δτ fed to the networks.
    pub dtau_unit: f64,
    pub decay_sign: DecaySign,
    /// Per-dimension variance of the prior on an entity's first dynamic factor.
    pub initial_prior_var: f64,
    pub stop_prior_grad: bool,
    pub dynamics_off: bool,
    pub record_factors: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        crate::config::RunConfig::default().model_config()
    }
}

/// Mutable dynamic state of one entity. The stationary factor lives in the
/// parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicState {
    pub hidden: Vec<f64>,
    pub prior: DiagGaussian,
    pub last_event_time: Option<i64>,
    pub is_new: bool,
}

impl DynamicState {
    fn fresh(d_h: usize, d: usize, var: f64) -> Self {
        DynamicState {
            hidden: vec![0.0; d_h],
            prior: DiagGaussian::new(vec![0.0; d], vec![var; d]).expect("validated variance"),
            last_event_time: None,
            is_new: true,
        }
    }
}

/// Full view of one entity's state.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityState {
    pub stationary: Vec<f64>,
    pub prior: DiagGaussian,
    pub hidden: Vec<f64>,
    pub last_event_time: Option<i64>,
    pub is_new: bool,
}

/// Dense indices for opaque ids, assigned in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    ids: Vec<String>,
    states: Vec<DynamicState>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn state(&self, index: usize) -> &DynamicState {
        &self.states[index]
    }

    pub(crate) fn state_mut(&mut self, index: usize) -> &mut DynamicState {
        &mut self.states[index]
    }

    fn push(&mut self, id: &str, state: DynamicState) -> usize {
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.states.push(state);
        self.index.insert(id.to_string(), i);
        i
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, id) in self.ids.iter().enumerate() {
            if self.index.insert(id.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate id {id} in registry")));
            }
        }
        if self.states.len() != self.ids.len() {
            return Err(Error::Checkpoint("registry ids and states differ in length".into()));
        }
        Ok(())
    }
}

/// Location and uncertainty factors of the entities committed in one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub step: u64,
    pub interval_end: i64,
    /// `(entity index, u^s + prior mean, √prior var)` under the prior the step
    /// was scored with
    pub users: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub items: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) nets: Networks,
    pub(crate) users: Registry,
    pub(crate) items: Registry,
    pub(crate) optimizer: OptimizerState,
    /// Time of the latest assimilated event; later batches must start after it.
    pub(crate) horizon: Option<i64>,
    /// Steps committed so far, across epochs; part of every noise seed path.
    pub(crate) steps_committed: u64,
    pub(crate) epoch: u64,
    pub(crate) snapshots: Vec<StepSnapshot>,
}

impl Model {
    /// A model with no registered entities; `b0` is the global rating bias.
    pub fn new(config: ModelConfig, b0: f64) -> Result<Self> {
        if !(config.sigma_u > 0.0 && config.sigma_v > 0.0 && config.initial_prior_var > 0.0) {
            return Err(Error::Config(
                "sigma_u, sigma_v and initial_prior_var must be positive".into(),
            ));
        }
        if !(config.learning_rate > 0.0) || !b0.is_finite() {
            return Err(Error::Config("learning rate must be positive and b0 finite".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(&[config.seed, 0x6e657473]);
        let nets = Networks::new(&mut store, &config, b0, &mut rng)?;
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate);
        Ok(Model {
            config,
            store,
            nets,
            users: Registry::default(),
            items: Registry::default(),
            optimizer,
            horizon: None,
            steps_committed: 0,
            epoch: 0,
            snapshots: Vec::new(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Direct parameter access, for fixtures and ablations.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn registry(&self, kind: EntityKind) -> &Registry {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub(crate) fn registry_mut(&mut self, kind: EntityKind) -> &mut Registry {
        match kind {
            EntityKind::User => &mut self.users,
            EntityKind::Item => &mut self.items,
        }
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn horizon(&self) -> Option<i64> {
        self.horizon
    }

    pub fn steps_committed(&self) -> u64 {
        self.steps_committed
    }

    pub fn snapshots(&self) -> &[StepSnapshot] {
        &self.snapshots
    }

    pub fn b0(&self) -> f64 {
        self.store.value(self.nets.b0).item()
    }

    /// Registers a new entity: stationary row and embedding row drawn from
    /// `N(0, 0.01²)`, zero hidden state, zero-mean prior of variance `initial_prior_var`, never
    /// seen.
    pub fn register_entity(&mut self, kind: EntityKind, id: &str) -> Result<usize> {
        if self.registry(kind).index_of(id).is_some() {
            return Err(Error::DuplicateEntity {
                kind: kind.as_str(),
                id: id.to_string(),
            });
        }
        let index = self.registry(kind).len() as u64;
        let normal = Normal::new(0.0, INIT_SCALE).expect("positive scale");
        let mut rng = seeds::rng(&[self.config.seed, 0x72656769, kind.tag(), index]);
        let d = self.nets.d_s;
        let de = self.nets.d_emb;
        let stationary: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let embedding: Vec<f64> = (0..de).map(|_| normal.sample(&mut rng)).collect();
        let own = self.nets.chain(kind).stationary;
        // rows of the other chain's embedding are indexed by this entity
        let emb = self.nets.chain(kind.other()).embedding;
        self.store.append_row(own, &stationary)?;
        self.store.append_row(emb, &embedding)?;
        let state = DynamicState::fresh(self.nets.d_h, d, self.config.initial_prior_var);
        Ok(self.registry_mut(kind).push(id, state))
    }

    /// Registers `id` unless it is already known; returns its index.
    pub fn ensure_entity(&mut self, kind: EntityKind, id: &str) -> Result<usize> {
        match self.registry(kind).index_of(id) {
            Some(i) => Ok(i),
            None => self.register_entity(kind, id),
        }
    }

    pub fn entity_state(&self, kind: EntityKind, id: &str) -> Result<EntityState> {
        let reg = self.registry(kind);
        let i = reg.index_of(id).ok_or_else(|| Error::UnknownEntity {
            kind: kind.as_str(),
            id: id.to_string(),
        })?;
        let s = reg.state(i);
        Ok(EntityState {
            stationary: self.stationary_row(kind, i).to_vec(),
            prior: s.prior.clone(),
            hidden: s.hidden.clone(),
            last_event_time: s.last_event_time,
            is_new: s.is_new,
        })
    }

    pub fn stationary_row(&self, kind: EntityKind, index: usize) -> &[f64] {
        self.store.value(self.nets.chain(kind).stationary).row_slice(index)
    }

    /// Clears every entity's dynamic state and the causality horizon, keeping
    /// parameters and registrations. Called at the start of each epoch.
    pub fn reset_dynamics(&mut self) {
        let (dh, d, var) = (self.nets.d_h, self.nets.d_s, self.config.initial_prior_var);
        for reg in [&mut self.users, &mut self.items] {
            for s in reg.states.iter_mut() {
                *s = DynamicState::fresh(dh, d, var);
            }
        }
        self.horizon = None;
        self.snapshots.clear();
    }

    pub(crate) fn rebuild_indices(&mut self) -> Result<()> {
        self.users.rebuild_index()?;
        self.items.rebuild_index()
    }

    /// Drift prior of one entity as seen at wall-clock time `at`.
    pub fn current_prior(&self, kind: EntityKind, index: usize, at: i64) -> Result<DiagGaussian> {
        let s = self.registry(kind).state(index);
        let Some(last) = s.last_event_time else {
            return Ok(s.prior.clone());
        };
        let dtau = entity_dtau_raw(last, at, kind, self.registry(kind).id(index))?;
        let h = self.decay_hidden(&s.hidden, dtau as f64, self.nets.chain(kind).lambda)?;
        self.drift_prior(kind, &h, dtau as f64)
    }
}

pub(crate) fn entity_dtau_raw(last: i64, now: i64, kind: EntityKind, id: &str) -> Result<i64> {
    if now < last {
        return Err(Error::TimeRegression {
            entity: format!("{kind} {id}"),
            last,
            now,
        });
    }
    Ok(now - last)
}

fn row(values: &[f64]) -> Tensor {
    Tensor::row(values.to_vec())
}

/// Single-vector forms of the network operations. Each builds a throwaway
/// tape, so results are bit-identical to the batched training path.
impl Model {
    pub fn interaction_mean(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let (un, vn) = (g.constant(row(u)), g.constant(row(v)));
        let m = self.nets.interaction_mean(&mut g, un, vn)?;
        Ok(g.value(m).item())
    }

    pub fn interaction_var(&self, u: &[f64], v: &[f64], sigma2_env: f64) -> Result<f64> {
        if !(sigma2_env > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma2_env must be positive, got {sigma2_env}"
            )));
        }
        let mut g = Graph::new(&self.store);
        let (un, vn) = (g.constant(row(u)), g.constant(row(v)));
        let s = g.constant(Tensor::scalar(sigma2_env));
        let m = self.nets.interaction_var(&mut g, un, vn, s)?;
        Ok(g.value(m).item())
    }

    pub fn env_noise(&self, h_u: &[f64], h_v: &[f64]) -> Result<f64> {
        if h_u.len() != self.nets.d_h || h_v.len() != self.nets.d_h {
            return Err(Error::shape(
                "env_noise",
                format!("hidden widths {} and {}", h_u.len(), h_v.len()),
            ));
        }
        let mut g = Graph::new(&self.store);
        let (a, b) = (g.constant(row(h_u)), g.constant(row(h_v)));
        let n = self.nets.env_noise(&mut g, a, b)?;
        Ok(g.value(n).item())
    }

    pub fn drift_prior(&self, kind: EntityKind, h_prev: &[f64], dtau: f64) -> Result<DiagGaussian> {
        if !(dtau >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative interval {dtau}")));
        }
        let mut g = Graph::new(&self.store);
        let h = g.constant(row(h_prev));
        let f = g.constant(Tensor::scalar(self.nets.dtau_feature(dtau)));
        let (m, v) = self.nets.chain(kind).drift_prior(&mut g, h, f)?;
        DiagGaussian::new(g.value(m).data().to_vec(), g.value(v).data().to_vec())
    }

    pub fn posterior(&self, kind: EntityKind, h_prev: &[f64], y: &[f64]) -> Result<DiagGaussian> {
        let mut g = Graph::new(&self.store);
        let (h, yn) = (g.constant(row(h_prev)), g.constant(row(y)));
        let (m, v) = self.nets.chain(kind).posterior(&mut g, h, yn)?;
        DiagGaussian::new(g.value(m).data().to_vec(), g.value(v).data().to_vec())
    }

    /// `y` for one entity from its `(counterpart id, rating)` events.
    pub fn build_input(&self, kind: EntityKind, events: &[(&str, f64)], dtau: f64, is_new: bool) -> Result<Vec<f64>> {
        if !(dtau >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative interval {dtau}")));
        }
        let other = self.registry(kind.other());
        let mut entries = Vec::with_capacity(events.len());
        for &(id, r) in events {
            let j = other.index_of(id).ok_or_else(|| Error::UnknownEntity {
                kind: kind.other().as_str(),
                id: id.to_string(),
            })?;
            entries.push((0, j, r));
        }
        let mut g = Graph::new(&self.store);
        let f = g.constant(Tensor::scalar(self.nets.dtau_feature(dtau)));
        let y = self.nets.chain(kind).build_input(&mut g, 1, entries, f, &[is_new])?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn decay_hidden(&self, h: &[f64], dtau: f64, lambda: f64) -> Result<Vec<f64>> {
        decay_hidden(h, dtau, lambda, self.nets.decay_sign)
    }

    /// One recurrent step from an already decayed hidden state.
    pub fn gru_step(&self, kind: EntityKind, h: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let (hn, yn) = (g.constant(row(h)), g.constant(row(y)));
        let out = self.nets.chain(kind).gru.step(&mut g, hn, yn)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// `h · exp(−Δτ/λ)` (or the positive exponent under [`DecaySign::Positive`]).
pub fn decay_hidden(h: &[f64], dtau: f64, lambda: f64, sign: DecaySign) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("decay constant must be positive, got {lambda}")));
    }
    if !(dtau >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative interval {dtau}")));
    }
    let k = match sign {
        DecaySign::Negative => (-dtau / lambda).exp(),
        DecaySign::Positive => (dtau / lambda).exp(),
    };
    Ok(h.iter().map(|x| x * k).collect())
}

/// `u^s + Δu`.
pub fn compose_factor(stationary: &[f64], dynamic: &[f64]) -> Result<Vec<f64>> {
    if stationary.len() != dynamic.len() {
        return Err(Error::shape(
            "compose_factor",
            format!("{} vs {}", stationary.len(), dynamic.len()),
        ));
    }
    Ok(stationary.iter().zip(dynamic).map(|(a, b)| a + b).collect())
}
