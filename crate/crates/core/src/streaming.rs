//! Time buckets, entity clocks, read-only prediction and the
//! predict-then-update evaluation loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::DateTime;

use crate::data::{check_sorted, RatingEvent};
use crate::error::{Error, Result};
use crate::inference::{update_step, AuditLog, AuditPhase, IterationRecord};
use crate::model::{EntityKind, Model};
use crate::numeric::{Graph, NodeId, Tensor};

/// Events with timestamps in `(start, end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    /// 1-based step number within its bucketization.
    pub index: u64,
    pub start: i64,
    pub end: i64,
    pub events: Vec<RatingEvent>,
    /// Event positions per user, users in order of first appearance.
    pub by_user: Vec<(String, Vec<usize>)>,
    pub by_item: Vec<(String, Vec<usize>)>,
}

fn group(events: &[RatingEvent], key: impl Fn(&RatingEvent) -> &str) -> Vec<(String, Vec<usize>)> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let k = key(e);
        match pos.get(k) {
            Some(&p) => out[p].1.push(i),
            None => {
                pos.insert(k, out.len());
                out.push((k.to_string(), vec![i]));
            }
        }
    }
    out
}

impl StepBatch {
    pub fn new(index: u64, start: i64, end: i64, events: Vec<RatingEvent>) -> Result<Self> {
        if end <= start {
            return Err(Error::InvalidArgument(format!("empty interval ({start}, {end}]")));
        }
        check_sorted(&events)?;
        if let Some(e) = events.iter().find(|e| e.timestamp <= start || e.timestamp > end) {
            return Err(Error::InvalidArgument(format!(
                "event at {} outside ({start}, {end}]",
                e.timestamp
            )));
        }
        let by_user = group(&events, |e| &e.user);
        let by_item = group(&events, |e| &e.item);
        Ok(StepBatch {
            index,
            start,
            end,
            events,
            by_user,
            by_item,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Splits sorted events into consecutive steps `(start + (T−1)g, start + Tg]`.
/// Empty steps are kept.
pub fn bucketize(events: &[RatingEvent], start: i64, granularity: i64) -> Result<Vec<StepBatch>> {
    if granularity <= 0 {
        return Err(Error::InvalidArgument(format!(
            "granularity must be positive, got {granularity}"
        )));
    }
    check_sorted(events)?;
    if let Some(first) = events.first() {
        if first.timestamp <= start {
            return Err(Error::InvalidArgument(format!(
                "event at {} is not after the start time {start}",
                first.timestamp
            )));
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    let mut t = 1u64;
    while i < events.len() {
        let lo = start + (t as i64 - 1) * granularity;
        let hi = lo + granularity;
        let j = i + events[i..].partition_point(|e| e.timestamp <= hi);
        out.push(StepBatch::new(t, lo, hi, events[i..j].to_vec())?);
        i = j;
        t += 1;
    }
    Ok(out)
}

/// Last event time per entity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityClock {
    times: HashMap<String, i64>,
}

impl EntityClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last(&self, entity: &str) -> Option<i64> {
        self.times.get(entity).copied()
    }

    /// Elapsed seconds since `entity`'s last event; zero for a first event.
    pub fn entity_dtau(&self, entity: &str, event_time: i64) -> Result<i64> {
        match self.last(entity) {
            None => Ok(0),
            Some(last) if event_time < last => Err(Error::TimeRegression {
                entity: entity.to_string(),
                last,
                now: event_time,
            }),
            Some(last) => Ok(event_time - last),
        }
    }

    pub fn record(&mut self, entity: &str, event_time: i64) -> Result<()> {
        self.entity_dtau(entity, event_time)?;
        self.times.insert(entity.to_string(), event_time);
        Ok(())
    }
}

pub fn entity_dtau(clock: &EntityClock, entity: &str, event_time: i64) -> Result<i64> {
    clock.entity_dtau(entity, event_time)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
}

fn cold(kind: EntityKind, id: &str) -> Error {
    Error::ColdEntity {
        kind: kind.as_str(),
        id: id.to_string(),
    }
}

/// Expected factors and decayed hidden states of entities at time `at`.
fn entity_rows(model: &Model, kind: EntityKind, idx: &[usize], at: &[i64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let nets = model.networks();
    let (d, dh) = (nets.d_s, nets.d_h);
    let mut factors = Vec::with_capacity(idx.len() * d);
    let mut hidden = Vec::with_capacity(idx.len() * dh);
    let lambda = nets.chain(kind).lambda;
    // warm entities need a drift-prior forward pass, batched below
    let mut warm = Vec::new();
    let mut warm_h = Vec::new();
    let mut warm_f = Vec::new();
    for (r, (&i, &t)) in idx.iter().zip(at).enumerate() {
        let s = model.registry(kind).state(i);
        factors.extend_from_slice(model.stationary_row(kind, i));
        match (s.last_event_time, model.config.dynamics_off) {
            (_, true) => hidden.extend(std::iter::repeat_n(0.0, dh)),
            (None, false) => {
                hidden.extend_from_slice(&s.hidden);
                for (f, m) in factors[r * d..].iter_mut().zip(s.prior.mean()) {
                    *f += m;
                }
            }
            (Some(last), false) => {
                let dtau = crate::model::entity_dtau_raw(last, t, kind, model.registry(kind).id(i))? as f64;
                let h = model.decay_hidden(&s.hidden, dtau, lambda)?;
                hidden.extend_from_slice(&h);
                warm.push(r);
                warm_h.extend_from_slice(&h);
                warm_f.push(nets.dtau_feature(dtau));
            }
        }
    }
    if !warm.is_empty() {
        let mut g = Graph::new(model.store());
        let h = g.constant(Tensor::matrix(warm.len(), dh, warm_h)?);
        let f = g.constant(Tensor::column(warm_f));
        let (mean, _) = nets.chain(kind).drift_prior(&mut g, h, f)?;
        let mv = g.value(mean);
        for (k, &r) in warm.iter().enumerate() {
            for (x, m) in factors[r * d..(r + 1) * d].iter_mut().zip(mv.row_slice(k)) {
                *x += m;
            }
        }
    }
    Ok((factors, hidden))
}

/// Predictive mean and variance for each `(user, item, time)` query, each
/// `Err(ColdEntity)` when either side is unregistered. Read-only.
pub fn predict_batch(model: &Model, queries: &[(&str, &str, i64)]) -> Result<Vec<Result<Prediction>>> {
    let mut out: Vec<Result<Prediction>> = Vec::with_capacity(queries.len());
    let (mut ui, mut ii, mut at, mut slots) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (q, &(u, i, t)) in queries.iter().enumerate() {
        let uidx = model.registry(EntityKind::User).index_of(u);
        let iidx = model.registry(EntityKind::Item).index_of(i);
        match (uidx, iidx) {
            (Some(a), Some(b)) => {
                ui.push(a);
                ii.push(b);
                at.push(t);
                slots.push(q);
                out.push(Ok(Prediction { mean: 0.0, var: 0.0 }));
            }
            (None, _) => out.push(Err(cold(EntityKind::User, u))),
            (_, None) => out.push(Err(cold(EntityKind::Item, i))),
        }
    }
    if slots.is_empty() {
        return Ok(out);
    }
    let nets = model.networks();
    let n = slots.len();
    let (uf, uh) = entity_rows(model, EntityKind::User, &ui, &at)?;
    let (vf, vh) = entity_rows(model, EntityKind::Item, &ii, &at)?;
    let mut g = Graph::new(model.store());
    let u = g.constant(Tensor::matrix(n, nets.d_s, uf)?);
    let v = g.constant(Tensor::matrix(n, nets.d_s, vf)?);
    let hu = g.constant(Tensor::matrix(n, nets.d_h, uh)?);
    let hv = g.constant(Tensor::matrix(n, nets.d_h, vh)?);
    let (mean, var) = predictive(&mut g, nets, u, v, hu, hv)?;
    for (k, &q) in slots.iter().enumerate() {
        let p = Prediction {
            mean: g.value(mean).data()[k],
            var: g.value(var).data()[k],
        };
        if !(p.mean.is_finite() && p.var.is_finite()) {
            return Err(Error::NonFinite(format!("prediction for query {q}")));
        }
        out[q] = Ok(p);
    }
    Ok(out)
}

pub(crate) fn predictive(
    g: &mut Graph,
    nets: &crate::model::Networks,
    u: NodeId,
    v: NodeId,
    hu: NodeId,
    hv: NodeId,
) -> Result<(NodeId, NodeId)> {
    let mean = nets.interaction_mean(g, u, v)?;
    let s2 = nets.env_noise(g, hu, hv)?;
    let var = nets.interaction_var(g, u, v, s2)?;
    Ok((mean, var))
}

/// Prediction for one pair at time `at` (defaults to the model horizon).
pub fn predict(model: &Model, user: &str, item: &str, at: Option<i64>) -> Result<Prediction> {
    let t = at.or(model.horizon()).unwrap_or(0);
    predict_batch(model, &[(user, item, t)])?.remove(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRmse {
    pub step: u64,
    pub interval_start: i64,
    pub n_predicted: usize,
    pub n_cold_skipped: usize,
    pub rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub steps: Vec<StepRmse>,
    pub overall_rmse: Option<f64>,
    pub n_predicted: usize,
    pub n_cold_skipped: usize,
    pub records: Vec<IterationRecord>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step_index,interval_start_iso8601,n_predicted,n_cold_skipped,rmse\n");
        for r in &self.steps {
            let iso = DateTime::from_timestamp(r.interval_start, 0)
                .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
                .unwrap_or_default();
            let rmse = r.rmse.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{iso},{},{},{rmse}", r.step, r.n_predicted, r.n_cold_skipped);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn rmse(squared_errors: &[f64]) -> Option<f64> {
    if squared_errors.is_empty() {
        return None;
    }
    Some((squared_errors.iter().sum::<f64>() / squared_errors.len() as f64).sqrt())
}

/// Predict-then-update over a test stream that starts after everything the
/// model has seen.
pub fn prequential_eval(
    model: &mut Model,
    test: &[RatingEvent],
    granularity: i64,
    iterations: usize,
    seed: u64,
    audit: &mut AuditLog,
) -> Result<EvalReport> {
    let start = match (model.horizon(), test.first()) {
        (Some(h), Some(first)) if first.timestamp <= h => {
            return Err(Error::Causality(format!(
                "test stream starts at {} but the model has assimilated events up to {h}",
                first.timestamp
            )))
        }
        (Some(h), _) => h,
        (None, Some(first)) => first.timestamp - 1,
        (None, None) => 0,
    };
    let batches = bucketize(test, start, granularity)?;
    let mut steps = Vec::with_capacity(batches.len());
    let mut all_sq = Vec::new();
    let mut records = Vec::new();
    let mut cold_total = 0;
    for batch in &batches {
        let queries: Vec<_> = batch
            .events
            .iter()
            .map(|e| (e.user.as_str(), e.item.as_str(), e.timestamp))
            .collect();
        let preds = predict_batch(model, &queries)?;
        audit.record(AuditPhase::Predict, model, batch);
        let mut sq = Vec::new();
        let mut n_cold = 0;
        for (e, p) in batch.events.iter().zip(preds) {
            match p {
                Ok(p) => sq.push((p.mean - e.rating).powi(2)),
                Err(Error::ColdEntity { .. }) => n_cold += 1,
                Err(other) => return Err(other),
            }
        }
        for e in &batch.events {
            model.ensure_entity(EntityKind::User, &e.user)?;
            model.ensure_entity(EntityKind::Item, &e.item)?;
        }
        let trace = update_step(model, batch, iterations, seed, audit)?;
        records.extend(trace);
        steps.push(StepRmse {
            step: batch.index,
            interval_start: batch.start,
            n_predicted: sq.len(),
            n_cold_skipped: n_cold,
            rmse: rmse(&sq),
        });
        cold_total += n_cold;
        all_sq.extend(sq);
    }
    Ok(EvalReport {
        steps,
        overall_rmse: rmse(&all_sq),
        n_predicted: all_sq.len(),
        n_cold_skipped: cold_total,
        records,
    })
}
