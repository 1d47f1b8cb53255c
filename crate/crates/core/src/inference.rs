//! The step-wise variational objective and the streaming update.
//!
//! A *segment* is a run of consecutive steps evaluated on one tape. Hidden
//! states entering the segment are constants; inside it the recurrent
//! chains are unrolled, so gradients reach the GRU cells through later
//! steps. [`update_step`] is the one-step segment.
//!
//! The likelihood of each step is differentiated on separate, chunked tapes
//! whose inputs are the composed factors and decayed hidden states; their
//! adjoints are fed back into the chain tape as linear terms. This keeps
//! memory proportional to one chunk of events instead of the whole segment.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use crate::data::{check_sorted, RatingEvent};
use crate::distributions::{kl_divergence, tape, DiagGaussian};
use crate::error::{Error, Result};
use crate::model::{EntityKind, Model, Networks, StepSnapshot};
use crate::numeric::{Grads, Graph, NodeId, ParamStore, Tensor};
use crate::seeds;
use crate::streaming::{bucketize, StepBatch};

/// Events per likelihood tape.
const LIKELIHOOD_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTerms {
    pub loglik: f64,
    pub kl_u: f64,
    pub kl_v: f64,
    pub l2_u: f64,
    pub l2_v: f64,
}

impl StepTerms {
    pub fn elbo(&self) -> f64 {
        self.loglik - self.kl_u - self.kl_v - self.l2_u - self.l2_v
    }
}

/// One line of the per-iteration training log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: u64,
    pub step: u64,
    pub iteration: usize,
    pub elbo: f64,
    pub kl_u: f64,
    pub kl_v: f64,
    pub loglik: f64,
}

impl IterationRecord {
    pub const TSV_HEADER: &'static str = "epoch\tstep\titeration\telbo\tkl_u\tkl_v\tloglik";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.step, self.iteration, self.elbo, self.kl_u, self.kl_v, self.loglik
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditPhase {
    Train,
    Predict,
    Update,
}

/// What data one phase of one step touched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRecord {
    pub phase: AuditPhase,
    pub epoch: u64,
    pub step: u64,
    pub start: i64,
    pub end: i64,
    pub n_events: usize,
    pub first_time: Option<i64>,
    pub last_time: Option<i64>,
    pub digest: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn events_digest(events: &[RatingEvent]) -> u64 {
    let parts: Vec<u64> = events
        .iter()
        .flat_map(|e| [fnv(&e.user), fnv(&e.item), e.rating.to_bits(), e.timestamp as u64])
        .collect();
    seeds::mix(&parts)
}

impl AuditLog {
    pub fn record(&mut self, phase: AuditPhase, model: &Model, batch: &StepBatch) {
        self.records.push(AuditRecord {
            phase,
            epoch: model.epoch,
            step: batch.index,
            start: batch.start,
            end: batch.end,
            n_events: batch.events.len(),
            first_time: batch.events.first().map(|e| e.timestamp),
            last_time: batch.events.last().map(|e| e.timestamp),
            digest: events_digest(&batch.events),
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HiddenSource {
    State,
    Earlier { step: usize, row: usize },
}

#[derive(Clone, Debug)]
struct Active {
    index: usize,
    dtau: f64,
    last_time: i64,
    /// No previous event: the stored prior is used instead of the drift net.
    seen_before: bool,
    is_new: bool,
    source: HiddenSource,
    /// `(counterpart index, rating)`
    ratings: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
struct StepPlan {
    serial: u64,
    end: i64,
    users: Vec<Active>,
    items: Vec<Active>,
    /// `(user row, item row, rating)` in local rows of this step.
    events: Vec<(usize, usize, f64)>,
    /// Whether a later step of the segment reads this step's new hidden states.
    feeds_later: [bool; 2],
}

impl StepPlan {
    fn chain(&self, kind: EntityKind) -> &[Active] {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }
}

fn kind_slot(kind: EntityKind) -> usize {
    match kind {
        EntityKind::User => 0,
        EntityKind::Item => 1,
    }
}

/// Resolves every entity of the segment against the model and simulates the
/// entity clocks across its steps.
fn plan_segment(model: &Model, batches: &[StepBatch]) -> Result<Vec<StepPlan>> {
    let mut plans: Vec<StepPlan> = Vec::with_capacity(batches.len());
    // entity -> (last time, step, row) within the segment
    let mut within: [HashMap<usize, (i64, usize, usize)>; 2] = [HashMap::new(), HashMap::new()];
    let mut horizon = model.horizon;
    for (s, batch) in batches.iter().enumerate() {
        if let (Some(h), Some(first)) = (horizon, batch.events.first()) {
            if first.timestamp <= h {
                return Err(Error::Causality(format!(
                    "step {} has an event at {} but events up to {h} are already assimilated",
                    batch.index, first.timestamp
                )));
            }
        }
        let mut plan = StepPlan {
            serial: model.steps_committed + s as u64 + 1,
            end: batch.end,
            users: Vec::new(),
            items: Vec::new(),
            events: Vec::with_capacity(batch.events.len()),
            feeds_later: [false, false],
        };
        let mut local: [HashMap<usize, usize>; 2] = [HashMap::new(), HashMap::new()];
        for kind in [EntityKind::User, EntityKind::Item] {
            let groups = match kind {
                EntityKind::User => &batch.by_user,
                EntityKind::Item => &batch.by_item,
            };
            let reg = model.registry(kind);
            let other = model.registry(kind.other());
            let k = kind_slot(kind);
            let mut list = Vec::with_capacity(groups.len());
            for (id, positions) in groups {
                let index = reg.index_of(id).ok_or_else(|| Error::UnknownEntity {
                    kind: kind.as_str(),
                    id: id.clone(),
                })?;
                let mut ratings = Vec::with_capacity(positions.len());
                let mut last_time = i64::MIN;
                for &p in positions {
                    let e = &batch.events[p];
                    let cid = match kind {
                        EntityKind::User => &e.item,
                        EntityKind::Item => &e.user,
                    };
                    let j = other.index_of(cid).ok_or_else(|| Error::UnknownEntity {
                        kind: kind.other().as_str(),
                        id: cid.clone(),
                    })?;
                    ratings.push((j, e.rating));
                    last_time = last_time.max(e.timestamp);
                }
                let (prev, source) = match within[k].get(&index) {
                    Some(&(t, step, row)) => (Some(t), HiddenSource::Earlier { step, row }),
                    None => (reg.state(index).last_event_time, HiddenSource::State),
                };
                if let HiddenSource::Earlier { step, .. } = source {
                    plans[step].feeds_later[k] = true;
                }
                let dtau = match prev {
                    Some(t) if last_time < t => {
                        return Err(Error::TimeRegression {
                            entity: format!("{kind} {id}"),
                            last: t,
                            now: last_time,
                        })
                    }
                    Some(t) => (last_time - t) as f64,
                    None => 0.0,
                };
                local[k].insert(index, list.len());
                list.push(Active {
                    index,
                    dtau,
                    last_time,
                    seen_before: prev.is_some(),
                    is_new: prev.is_none(),
                    source,
                    ratings,
                });
            }
            for (row, a) in list.iter().enumerate() {
                within[k].insert(a.index, (a.last_time, s, row));
            }
            match kind {
                EntityKind::User => plan.users = list,
                EntityKind::Item => plan.items = list,
            }
        }
        for e in &batch.events {
            let u = model
                .registry(EntityKind::User)
                .index_of(&e.user)
                .expect("resolved above");
            let i = model
                .registry(EntityKind::Item)
                .index_of(&e.item)
                .expect("resolved above");
            plan.events.push((local[0][&u], local[1][&i], e.rating));
        }
        if let Some(last) = batch.events.last() {
            horizon = Some(last.timestamp);
        }
        plans.push(plan);
    }
    Ok(plans)
}

/// How dynamic factors are drawn while building the chain tape.
#[derive(Clone, Copy, Debug)]
enum Draw {
    /// Reparameterized sample with noise addressed by `(seed, epoch, iteration)`.
    Sample { seed: u64, epoch: u64, iteration: u64 },
    /// Posterior mean; used to commit state.
    Mean,
}

#[derive(Clone, Debug)]
struct ChainNodes {
    /// Decayed hidden rows entering the step.
    hidden: NodeId,
    y: NodeId,
    factor: NodeId,
    kl: Option<NodeId>,
    l2: NodeId,
    next_hidden: Option<NodeId>,
    prior: Option<(NodeId, NodeId)>,
    posterior: Option<(NodeId, NodeId)>,
    noise: Vec<Vec<f64>>,
}

struct SegmentTape<'p> {
    g: Graph<'p>,
    steps: Vec<[Option<ChainNodes>; 2]>,
}

struct Env<'a> {
    store: &'a ParamStore,
    nets: &'a Networks,
    model: &'a Model,
}

fn build_chain(
    env: &Env<'_>,
    g: &mut Graph<'_>,
    kind: EntityKind,
    plan: &StepPlan,
    earlier: &[[Option<ChainNodes>; 2]],
    draw: Draw,
    need_next: bool,
) -> Result<Option<ChainNodes>> {
    let active = plan.chain(kind);
    if active.is_empty() {
        return Ok(None);
    }
    let nets = env.nets;
    let chain = nets.chain(kind);
    let reg = env.model.registry(kind);
    let (n, d, dh) = (active.len(), nets.d_s, nets.d_h);
    let k = kind_slot(kind);
    let dynamics = !env.model.config.dynamics_off;

    let rows: Vec<usize> = active.iter().map(|a| a.index).collect();
    let stationary = g.param_rows(chain.stationary, &rows)?;
    let sq = g.square(stationary);
    let sq = g.sum(sq);
    let l2 = g.scale(sq, 1.0 / (2.0 * chain.sigma * chain.sigma));

    if !dynamics {
        let hidden = g.constant(Tensor::zeros(n, dh));
        return Ok(Some(ChainNodes {
            hidden,
            y: hidden,
            factor: stationary,
            kl: None,
            l2,
            next_hidden: None,
            prior: None,
            posterior: None,
            noise: Vec::new(),
        }));
    }

    // hidden rows entering the step, from committed state or an earlier step
    let mut state_rows = Vec::new();
    for a in active {
        if a.source == HiddenSource::State {
            state_rows.extend_from_slice(&reg.state(a.index).hidden);
        }
    }
    let state_node = if state_rows.is_empty() {
        None
    } else {
        Some(g.constant(Tensor::matrix(state_rows.len() / dh, dh, state_rows)?))
    };
    let mut sources = Vec::with_capacity(n);
    let mut next_state_row = 0;
    for a in active {
        sources.push(match a.source {
            HiddenSource::State => {
                next_state_row += 1;
                (state_node.expect("state rows collected"), next_state_row - 1)
            }
            HiddenSource::Earlier { step, row } => {
                let src = earlier[step][k]
                    .as_ref()
                    .and_then(|c| c.next_hidden)
                    .ok_or_else(|| Error::InvalidArgument("segment plan references a missing hidden state".into()))?;
                (src, row)
            }
        });
    }
    let h_prev = g.gather(sources)?;
    let factors: Vec<f64> = active.iter().map(|a| nets.decay_factor(a.dtau, chain.lambda)).collect();
    let hidden = g.row_scale(h_prev, factors)?;
    let feature = g.constant(Tensor::column(
        active.iter().map(|a| nets.dtau_feature(a.dtau)).collect(),
    ));

    let entries: Vec<(usize, usize, f64)> = active
        .iter()
        .enumerate()
        .flat_map(|(r, a)| a.ratings.iter().map(move |&(j, x)| (r, j, x)))
        .collect();
    let flags: Vec<bool> = active.iter().map(|a| a.is_new).collect();
    let y = chain.build_input(g, n, entries, feature, &flags)?;

    // prior: drift network for entities seen before, stored prior otherwise
    let warm: Vec<f64> = active.iter().map(|a| if a.seen_before { 1.0 } else { 0.0 }).collect();
    let (pm, pv) = if warm.iter().all(|&w| w == 0.0) {
        let (mut m, mut v) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for a in active {
            let p = &reg.state(a.index).prior;
            m.extend_from_slice(p.mean());
            v.extend_from_slice(p.var());
        }
        (
            g.constant(Tensor::matrix(n, d, m)?),
            g.constant(Tensor::matrix(n, d, v)?),
        )
    } else {
        let (mut m, mut v) = chain.drift_prior(g, hidden, feature)?;
        if env.model.config.stop_prior_grad {
            m = g.detach(m);
            v = g.detach(v);
        }
        if warm.iter().all(|&w| w == 1.0) {
            (m, v)
        } else {
            let (mut cm, mut cv) = (vec![0.0; n * d], vec![0.0; n * d]);
            for (r, a) in active.iter().enumerate() {
                if !a.seen_before {
                    let p = &reg.state(a.index).prior;
                    cm[r * d..(r + 1) * d].copy_from_slice(p.mean());
                    cv[r * d..(r + 1) * d].copy_from_slice(p.var());
                }
            }
            let m = g.row_scale(m, warm.clone())?;
            let v = g.row_scale(v, warm)?;
            let cm = g.constant(Tensor::matrix(n, d, cm)?);
            let cv = g.constant(Tensor::matrix(n, d, cv)?);
            (g.add(m, cm)?, g.add(v, cv)?)
        }
    };

    let (qm, qv) = chain.posterior(g, hidden, y)?;
    let kl = tape::kl_sum(g, qm, qv, pm, pv)?;
    let (delta, noise) = match draw {
        Draw::Sample { seed, epoch, iteration } => {
            let noise: Vec<Vec<f64>> = active
                .iter()
                .map(|a| {
                    seeds::standard_normals(&[seed, epoch, plan.serial, iteration, k as u64 + 1, a.index as u64], d)
                })
                .collect();
            let eps = g.constant(Tensor::matrix(n, d, noise.concat())?);
            (tape::sample(g, qm, qv, eps)?, noise)
        }
        Draw::Mean => (qm, Vec::new()),
    };
    let factor = g.add(stationary, delta)?;
    let next_hidden = if need_next {
        Some(chain.gru.step(g, hidden, y)?)
    } else {
        None
    };
    Ok(Some(ChainNodes {
        hidden,
        y,
        factor,
        kl: Some(kl),
        l2,
        next_hidden,
        prior: Some((pm, pv)),
        posterior: Some((qm, qv)),
        noise,
    }))
}

fn build_segment<'p>(env: &Env<'p>, plans: &[StepPlan], draw: Draw, commit: bool) -> Result<SegmentTape<'p>> {
    let mut g = Graph::new(env.store);
    let mut steps: Vec<[Option<ChainNodes>; 2]> = Vec::with_capacity(plans.len());
    for plan in plans {
        let mut pair: [Option<ChainNodes>; 2] = [None, None];
        for kind in [EntityKind::User, EntityKind::Item] {
            let k = kind_slot(kind);
            let need = commit || plan.feeds_later[k];
            pair[k] = build_chain(env, &mut g, kind, plan, &steps, draw, need)?;
        }
        steps.push(pair);
    }
    Ok(SegmentTape { g, steps })
}

struct Likelihood {
    loglik: f64,
    grads: Grads,
    adjoints: [Tensor; 4],
}

/// Log-likelihood of a step's events and its gradients with respect to the
/// parameters and to the four input blocks `[U, V, H_u, H_v]`.
fn step_likelihood(env: &Env<'_>, inputs: [&Tensor; 4], events: &[(usize, usize, f64)]) -> Result<Likelihood> {
    let mut grads = Grads::zeros_like(env.store);
    let mut adjoints = inputs.map(|t| Tensor::zeros(t.rows(), t.cols()));
    let mut loglik = 0.0;
    for chunk in events.chunks(LIKELIHOOD_CHUNK) {
        let mut g = Graph::new(env.store);
        let leaves = inputs.map(|t| g.input(t.clone()));
        let urows: Vec<usize> = chunk.iter().map(|e| e.0).collect();
        let irows: Vec<usize> = chunk.iter().map(|e| e.1).collect();
        let u = g.select_rows(leaves[0], &urows)?;
        let v = g.select_rows(leaves[1], &irows)?;
        let hu = g.select_rows(leaves[2], &urows)?;
        let hv = g.select_rows(leaves[3], &irows)?;
        let (mean, var) = crate::streaming::predictive(&mut g, env.nets, u, v, hu, hv)?;
        let x = g.constant(Tensor::column(chunk.iter().map(|e| e.2).collect()));
        let terms = tape::log_density_terms(&mut g, x, mean, var)?;
        let ll = g.sum(terms);
        let value = g.value(ll).item();
        if !value.is_finite() {
            let bad = g.value(terms).data().iter().position(|t| !t.is_finite()).unwrap_or(0);
            let (ur, ir, r) = chunk[bad];
            return Err(Error::NonFinite(format!(
                "log-likelihood of event (user row {ur}, item row {ir}, rating {r})"
            )));
        }
        loglik += value;
        let loss = g.scale(ll, -1.0);
        let back = g.backward(loss)?;
        grads.accumulate(&back.params);
        for (acc, leaf) in adjoints.iter_mut().zip(leaves) {
            if let Some(a) = back.wrt(leaf) {
                acc.add_assign(a);
            }
        }
    }
    Ok(Likelihood {
        loglik,
        grads,
        adjoints,
    })
}

/// Value of the loss (negative summed objective) and its gradient for a
/// planned segment.
fn segment_loss(env: &Env<'_>, plans: &[StepPlan], draw: Draw) -> Result<(Vec<StepTerms>, Grads)> {
    let SegmentTape { mut g, steps } = build_segment(env, plans, draw, false)?;
    let mut terms = Vec::with_capacity(plans.len());
    let mut grads = Grads::zeros_like(env.store);
    let mut loss_parts: Vec<NodeId> = Vec::new();
    let dynamics = !env.model.config.dynamics_off;
    for (plan, pair) in plans.iter().zip(&steps) {
        let mut t = StepTerms::default();
        let (Some(u), Some(v)) = (&pair[0], &pair[1]) else {
            terms.push(t);
            continue;
        };
        t.kl_u = u.kl.map_or(0.0, |n| g.value(n).item());
        t.kl_v = v.kl.map_or(0.0, |n| g.value(n).item());
        t.l2_u = g.value(u.l2).item();
        t.l2_v = g.value(v.l2).item();
        let inputs = [
            g.value(u.factor).clone(),
            g.value(v.factor).clone(),
            g.value(u.hidden).clone(),
            g.value(v.hidden).clone(),
        ];
        let lik = step_likelihood(env, [&inputs[0], &inputs[1], &inputs[2], &inputs[3]], &plan.events)?;
        t.loglik = lik.loglik;
        grads.accumulate(&lik.grads);
        let targets = [u.factor, v.factor, u.hidden, v.hidden];
        let n_links = if dynamics { 4 } else { 2 };
        for (node, adj) in targets.iter().zip(lik.adjoints).take(n_links) {
            let c = g.constant(adj);
            let prod = g.mul(*node, c)?;
            loss_parts.push(g.sum(prod));
        }
        loss_parts.extend([u.l2, v.l2]);
        loss_parts.extend(u.kl);
        loss_parts.extend(v.kl);
        if !t.elbo().is_finite() {
            return Err(Error::NonFinite(format!("objective of step {}", plan.serial)));
        }
        terms.push(t);
    }
    if let Some((&first, rest)) = loss_parts.split_first() {
        let mut total = first;
        for &p in rest {
            total = g.add(total, p)?;
        }
        let back = g.backward(total)?;
        grads.accumulate(&back.params);
    }
    Ok((terms, grads))
}

/// Writes committed hidden states, priors, clocks and flags back to the model.
fn commit_segment(model: &mut Model, plans: &[StepPlan]) -> Result<()> {
    let dynamics = !model.config.dynamics_off;
    let dh = model.nets.d_h;
    // (kind, index, hidden, stored prior, prior the step was scored under,
    // last_time) per step, computed read-only
    type Update = (
        EntityKind,
        usize,
        Vec<f64>,
        Option<DiagGaussian>,
        Option<DiagGaussian>,
        i64,
    );
    let mut updates: Vec<Vec<Update>> = Vec::new();
    {
        let env = Env {
            store: &model.store,
            nets: &model.nets,
            model: &*model,
        };
        let tape = if dynamics {
            Some(build_segment(&env, plans, Draw::Mean, true)?)
        } else {
            None
        };
        for (s, plan) in plans.iter().enumerate() {
            let mut step = Vec::new();
            for kind in [EntityKind::User, EntityKind::Item] {
                let active = plan.chain(kind);
                if active.is_empty() {
                    continue;
                }
                let chain = model.nets.chain(kind);
                match &tape {
                    Some(t) => {
                        let nodes = t.steps[s][kind_slot(kind)].as_ref().expect("active chain");
                        let h = t.g.value(nodes.next_hidden.expect("commit tape")).clone();
                        // stored prior: drift prior of the new state at zero elapsed time
                        let mut g = Graph::new(&model.store);
                        let hn = g.constant(h.clone());
                        let f = g.constant(Tensor::zeros(active.len(), 1));
                        let (pm, pv) = chain.drift_prior(&mut g, hn, f)?;
                        let (sm, sv) = nodes.prior.expect("dynamic chain");
                        for (r, a) in active.iter().enumerate() {
                            let row = |g: &Graph, m: NodeId, v: NodeId| {
                                DiagGaussian::new(g.value(m).row_slice(r).to_vec(), g.value(v).row_slice(r).to_vec())
                            };
                            let stored = row(&g, pm, pv)?;
                            let scored = row(&t.g, sm, sv)?;
                            step.push((
                                kind,
                                a.index,
                                h.row_slice(r).to_vec(),
                                Some(stored),
                                Some(scored),
                                a.last_time,
                            ));
                        }
                    }
                    None => {
                        for a in active {
                            step.push((kind, a.index, vec![0.0; dh], None, None, a.last_time));
                        }
                    }
                }
            }
            updates.push(step);
        }
    }
    for (plan, step) in plans.iter().zip(updates) {
        let mut snap = StepSnapshot {
            step: plan.serial,
            interval_end: plan.end,
            users: Vec::new(),
            items: Vec::new(),
        };
        for (kind, index, hidden, prior, scored, last) in step {
            if !hidden.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("hidden state of {kind} {index}")));
            }
            if model.config.record_factors {
                let us = model.stationary_row(kind, index).to_vec();
                // the drift prior this step was scored under: its spread is the
                // entity's uncertainty at the step
                let p = scored.unwrap_or_else(|| model.registry(kind).state(index).prior.clone());
                let loc: Vec<f64> = if dynamics {
                    us.iter().zip(p.mean()).map(|(a, b)| a + b).collect()
                } else {
                    us
                };
                let unc: Vec<f64> = p.var().iter().map(|v| v.sqrt()).collect();
                match kind {
                    EntityKind::User => snap.users.push((index, loc, unc)),
                    EntityKind::Item => snap.items.push((index, loc, unc)),
                }
            }
            let state = model.registry_mut(kind).state_mut(index);
            state.hidden = hidden;
            if let Some(p) = prior {
                state.prior = p;
            }
            state.last_event_time = Some(last);
            state.is_new = false;
        }
        if model.config.record_factors && !(snap.users.is_empty() && snap.items.is_empty()) {
            model.snapshots.push(snap);
        }
    }
    if let Some(last) = plans.iter().flat_map(|p| p.users.iter().map(|a| a.last_time)).max() {
        model.horizon = Some(model.horizon.map_or(last, |h| h.max(last)));
    }
    model.steps_committed += plans.len() as u64;
    Ok(())
}

fn registered(model: &mut Model, batches: &[StepBatch]) -> Result<()> {
    for b in batches {
        for e in &b.events {
            model.ensure_entity(EntityKind::User, &e.user)?;
            model.ensure_entity(EntityKind::Item, &e.item)?;
        }
    }
    Ok(())
}

/// Runs `iterations` rounds of objective + optimizer step over a segment of
/// consecutive batches, then commits the entity states. Entities must be
/// registered. Returns one record per step and iteration.
pub fn update_segment(
    model: &mut Model,
    batches: &[StepBatch],
    iterations: usize,
    seed: u64,
) -> Result<Vec<IterationRecord>> {
    let plans = plan_segment(model, batches)?;
    let any_active = plans.iter().any(|p| !p.events.is_empty());
    let mut records = Vec::new();
    if any_active {
        for it in 0..iterations {
            let (terms, grads) = {
                let env = Env {
                    store: &model.store,
                    nets: &model.nets,
                    model: &*model,
                };
                let draw = Draw::Sample {
                    seed,
                    epoch: model.epoch,
                    iteration: it as u64,
                };
                segment_loss(&env, &plans, draw)?
            };
            model.optimizer.step(&mut model.store, &grads);
            for (plan, t) in plans.iter().zip(&terms) {
                records.push(IterationRecord {
                    epoch: model.epoch,
                    step: plan.serial,
                    iteration: it,
                    elbo: t.elbo(),
                    kl_u: t.kl_u,
                    kl_v: t.kl_v,
                    loglik: t.loglik,
                });
            }
        }
    }
    commit_segment(model, &plans)?;
    Ok(records)
}

/// One streaming update on a single batch: registers unseen entities, then
/// runs `iterations` optimizer rounds and commits.
pub fn update_step(
    model: &mut Model,
    batch: &StepBatch,
    iterations: usize,
    seed: u64,
    audit: &mut AuditLog,
) -> Result<Vec<IterationRecord>> {
    let batches = std::slice::from_ref(batch);
    registered(model, batches)?;
    audit.record(AuditPhase::Update, model, batch);
    update_segment(model, batches, iterations, seed)
}

/// Per-entity terms of one evaluated step.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTerm {
    pub kind: EntityKind,
    pub index: usize,
    pub y: Vec<f64>,
    pub dtau: f64,
    pub prior: DiagGaussian,
    pub posterior: DiagGaussian,
    pub sample: Vec<f64>,
    pub noise: Vec<f64>,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub step: u64,
    pub seed: u64,
    pub terms: StepTerms,
    pub users: Vec<EntityTerm>,
    pub items: Vec<EntityTerm>,
    /// `(user index, item index, rating)`
    pub events: Vec<(usize, usize, f64)>,
}

/// Evaluates the objective of one batch with noise from `seed` (iteration 0)
/// without touching the model. Returns the objective, the gradient of its
/// negation (the loss) and the per-entity context.
pub fn step_elbo(model: &Model, batch: &StepBatch, seed: u64) -> Result<(f64, Grads, StepContext)> {
    step_elbo_with(model, &model.store, batch, seed)
}

/// [`step_elbo`] evaluated with an alternative parameter store of the same
/// layout (finite differences perturb a copy).
pub fn step_elbo_with(
    model: &Model,
    store: &ParamStore,
    batch: &StepBatch,
    seed: u64,
) -> Result<(f64, Grads, StepContext)> {
    let plans = plan_segment(model, std::slice::from_ref(batch))?;
    let env = Env {
        store,
        nets: &model.nets,
        model,
    };
    let draw = Draw::Sample {
        seed,
        epoch: model.epoch,
        iteration: 0,
    };
    let (terms, grads) = segment_loss(&env, &plans, draw)?;
    let t = terms[0];
    let plan = &plans[0];
    let mut ctx = StepContext {
        step: plan.serial,
        seed,
        terms: t,
        users: Vec::new(),
        items: Vec::new(),
        events: Vec::new(),
    };
    for &(ur, ir, r) in &plan.events {
        ctx.events.push((plan.users[ur].index, plan.items[ir].index, r));
    }
    if !model.config.dynamics_off && !plan.events.is_empty() {
        let tape = build_segment(&env, &plans, draw, false)?;
        for kind in [EntityKind::User, EntityKind::Item] {
            let nodes = tape.steps[0][kind_slot(kind)].as_ref().expect("active chain");
            let (pm, pv) = nodes.prior.expect("dynamic chain");
            let (qm, qv) = nodes.posterior.expect("dynamic chain");
            let g = &tape.g;
            let mut out = Vec::new();
            for (r, a) in plan.chain(kind).iter().enumerate() {
                let prior = DiagGaussian::new(g.value(pm).row_slice(r).to_vec(), g.value(pv).row_slice(r).to_vec())?;
                let posterior =
                    DiagGaussian::new(g.value(qm).row_slice(r).to_vec(), g.value(qv).row_slice(r).to_vec())?;
                let noise = nodes.noise[r].clone();
                let sample = posterior.sample_reparam(&noise)?;
                let kl = kl_divergence(&posterior, &prior)?;
                out.push(EntityTerm {
                    kind,
                    index: a.index,
                    y: g.value(nodes.y).row_slice(r).to_vec(),
                    dtau: a.dtau,
                    prior,
                    posterior,
                    sample,
                    noise,
                    kl,
                });
            }
            match kind {
                EntityKind::User => ctx.users = out,
                EntityKind::Item => ctx.items = out,
            }
        }
    }
    Ok((t.elbo(), grads, ctx))
}

/// Loss (negative objective) over consecutive batches for an alternative
/// store; the function the gradient checker differentiates.
pub fn segment_loss_with(model: &Model, store: &ParamStore, batches: &[StepBatch], seed: u64) -> Result<(f64, Grads)> {
    let plans = plan_segment(model, batches)?;
    let env = Env {
        store,
        nets: &model.nets,
        model,
    };
    let draw = Draw::Sample {
        seed,
        epoch: model.epoch,
        iteration: 0,
    };
    let (terms, grads) = segment_loss(&env, &plans, draw)?;
    Ok((-terms.iter().map(StepTerms::elbo).sum::<f64>(), grads))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub granularity: i64,
    /// Steps per segment.
    pub truncation: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    /// Objective summed over steps at the final iteration of each segment.
    pub elbo: f64,
    pub n_steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub records: Vec<IterationRecord>,
    pub audit: AuditLog,
}

/// Sorted training events into steps starting just before the first event.
pub fn training_batches(events: &[RatingEvent], granularity: i64) -> Result<Vec<StepBatch>> {
    check_sorted(events)?;
    match events.first() {
        Some(first) => bucketize(events, first.timestamp - 1, granularity),
        None => Ok(Vec::new()),
    }
}

/// One pass over the training timeline. Dynamic state is reset first;
/// parameters carry over.
pub fn train_epoch(
    model: &mut Model,
    batches: &[StepBatch],
    opts: &TrainOptions,
    report: &mut TrainReport,
) -> Result<EpochSummary> {
    if opts.truncation == 0 {
        return Err(Error::Config("truncation must be at least one step".into()));
    }
    model.reset_dynamics();
    let mut elbo = 0.0;
    for segment in batches.chunks(opts.truncation) {
        registered(model, segment)?;
        for b in segment {
            report.audit.record(AuditPhase::Train, model, b);
        }
        let records = update_segment(model, segment, opts.iterations, opts.seed)?;
        if let Some(last) = records.last().map(|r| r.iteration) {
            elbo += records
                .iter()
                .filter(|r| r.iteration == last)
                .map(|r| r.elbo)
                .sum::<f64>();
        }
        report.records.extend(records);
    }
    let summary = EpochSummary {
        epoch: model.epoch,
        elbo,
        n_steps: batches.len(),
    };
    report.epochs.push(summary.clone());
    model.epoch += 1;
    Ok(summary)
}

/// Trains over the whole training period for `opts.epochs` epochs. `on_epoch`
/// runs after each epoch (validation hooks).
pub fn train_offline(
    model: &mut Model,
    events: &[RatingEvent],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&Model, &EpochSummary) -> Result<()>,
) -> Result<TrainReport> {
    let batches = training_batches(events, opts.granularity)?;
    let mut report = TrainReport::default();
    for _ in 0..opts.epochs {
        let s = train_epoch(model, &batches, opts, &mut report)?;
        on_epoch(model, &s)?;
    }
    Ok(report)
}

pub fn write_iteration_log(out: &mut impl Write, records: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", IterationRecord::TSV_HEADER)?;
    for r in records {
        writeln!(out, "{}", r.to_tsv())?;
    }
    Ok(())
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}
