//! Gradient verification across every network of a small seeded model.

use std::fmt;

use rand_distr::{Distribution, Normal};

use crate::data::RatingEvent;
use crate::error::Result;
use crate::inference::{segment_loss_with, step_elbo_with, update_step, AuditLog};
use crate::model::{EntityKind, Model, ModelConfig};
use crate::numeric::{grad_check, GradCheckOptions, GradCheckReport, ParamId, ParamStore};
use crate::seeds;
use crate::streaming::{bucketize, StepBatch};

#[derive(Clone, Debug)]
pub struct SuiteSection {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub sections: Vec<SuiteSection>,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(|s| s.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.sections
            .iter()
            .map(|s| s.report.max_rel_error())
            .fold(0.0, f64::max)
    }

    /// `(section, parameter, relative error)` of the worst coordinate.
    pub fn worst(&self) -> Option<(String, String, f64)> {
        self.sections
            .iter()
            .filter_map(|s| {
                s.report
                    .worst()
                    .map(|p| (s.name.clone(), p.name.clone(), p.max_rel_error))
            })
            .max_by(|a, b| a.2.total_cmp(&b.2))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>8} {:>14}  worst parameter",
            "network", "coords", "max_rel_err"
        )?;
        for s in &self.sections {
            let coords: usize = s.report.params.iter().map(|p| p.coords).sum();
            let worst = s.report.worst().map_or("-", |p| p.name.as_str());
            let mark = if s.report.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<22} {:>8} {:>14.3e}  {worst} [{mark}]",
                s.name,
                coords,
                s.report.max_rel_error()
            )?;
        }
        Ok(())
    }
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_s: 3,
        d_h: 3,
        d_emb: 4,
        hidden_width: 6,
        sigma_u: 0.7,
        sigma_v: 0.9,
        seed,
        ..ModelConfig::default()
    }
}

const DAY: i64 = 86_400;

fn toy_events(seed: u64, steps: usize) -> Vec<RatingEvent> {
    let mut rng = seeds::rng(&[seed, 0x746f79]);
    let mut out = Vec::new();
    for s in 0..steps {
        for n in 0..7 {
            let u = (n + s) % 4;
            let i = (2 * n + s) % 5;
            let r = 1.0 + (rand::Rng::random_range(&mut rng, 0..9) as f64) * 0.5;
            out.push(RatingEvent::new(
                format!("u{u}"),
                format!("i{i}"),
                r,
                (s as i64 * 14 + n as i64 + 1) * DAY,
            ));
        }
    }
    out
}

fn randomize(model: &mut Model, seed: u64) {
    let normal = Normal::new(0.0, 0.5).expect("positive scale");
    let mut rng = seeds::rng(&[seed, 0x72616e64]);
    let ids: Vec<ParamId> = model.store().ids().collect();
    for id in ids {
        if model.store().name(id) == "b0" {
            continue;
        }
        for x in model.store_mut().value_mut(id).data_mut() {
            *x = normal.sample(&mut rng);
        }
    }
}

/// A seeded model with one committed step plus the two batches that follow:
/// first-event and returning entities, so stored and drift priors both occur.
pub fn toy_instance(seed: u64) -> Result<(Model, Vec<StepBatch>)> {
    let events = toy_events(seed, 3);
    let mut model = Model::new(small_config(seed), 3.0)?;
    let batches = bucketize(&events, 0, 14 * DAY)?;
    for e in &events {
        model.ensure_entity(EntityKind::User, &e.user)?;
        model.ensure_entity(EntityKind::Item, &e.item)?;
    }
    // one entity of each kind appears only later
    model.ensure_entity(EntityKind::User, "late")?;
    randomize(&mut model, seed);
    update_step(&mut model, &batches[0], 0, seed, &mut AuditLog::default())?;
    let mut rest: Vec<StepBatch> = batches[1..].to_vec();
    let mut extra = rest[0].events.clone();
    extra.push(RatingEvent::new("late", "i0", 4.0, rest[0].end));
    rest[0] = StepBatch::new(rest[0].index, rest[0].start, rest[0].end, extra)?;
    Ok((model, rest))
}

/// Checks every network group on a two-step segment (the recurrent cells
/// only receive gradient across steps) and the full one-step objective.
pub fn run_gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let opts = GradCheckOptions::default();
    let (model, batches) = toy_instance(seed)?;
    let mut sections = Vec::new();
    let seg = |store: &ParamStore| segment_loss_with(&model, store, &batches, seed ^ 0x5eed);
    for (name, ids) in model.networks().groups() {
        let report = grad_check(model.store(), &ids, seg, opts)?;
        sections.push(SuiteSection { name, report });
    }
    let all: Vec<ParamId> = model.store().ids().collect();
    let step = |store: &ParamStore| {
        let (elbo, grads, _) = step_elbo_with(&model, store, &batches[0], seed ^ 0x5eed)?;
        Ok((-elbo, grads))
    };
    let report = grad_check(model.store(), &all, step, opts)?;
    sections.push(SuiteSection {
        name: "step_elbo".into(),
        report,
    });
    Ok(SuiteReport {
        sections,
        tol: opts.tol,
    })
}
