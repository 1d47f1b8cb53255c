//! Per-step location and uncertainty factors averaged over chosen entities.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{EntityKind, Model};

/// Rows are committed steps, columns are factor dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    pub steps: Vec<u64>,
    pub interval_ends: Vec<i64>,
    pub rows: Vec<Vec<f64>>,
}

impl FactorTable {
    pub fn to_csv(&self) -> String {
        let width = self.rows.first().map_or(0, Vec::len);
        let mut s = String::from("step,interval_end");
        for d in 0..width {
            let _ = write!(s, ",f{d}");
        }
        s.push('\n');
        for ((step, end), row) in self.steps.iter().zip(&self.interval_ends).zip(&self.rows) {
            let _ = write!(s, "{step},{end}");
            for x in row {
                let _ = write!(s, ",{x:.9}");
            }
            s.push('\n');
        }
        s
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self) {
        let Some(width) = self.rows.first().map(Vec::len) else {
            return;
        };
        let n = self.rows.len() as f64;
        for d in 0..width {
            let mean = self.rows.iter().map(|r| r[d]).sum::<f64>() / n;
            self.rows.iter_mut().for_each(|r| r[d] -= mean);
        }
    }

    /// Divides each column by its largest magnitude; all-zero columns stay.
    pub fn normalize_columns_linf(&mut self) {
        let Some(width) = self.rows.first().map(Vec::len) else {
            return;
        };
        for d in 0..width {
            let m = self.rows.iter().map(|r| r[d].abs()).fold(0.0, f64::max);
            if m > 0.0 {
                self.rows.iter_mut().for_each(|r| r[d] /= m);
            }
        }
    }

    /// Mean over columns of each row.
    pub fn row_means(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorExport {
    pub user_location: FactorTable,
    pub user_uncertainty: FactorTable,
    pub item_location: FactorTable,
    pub item_uncertainty: FactorTable,
}

fn resolve(model: &Model, kind: EntityKind, ids: &[String]) -> Result<Vec<usize>> {
    let reg = model.registry(kind);
    if ids.is_empty() {
        return Ok((0..reg.len()).collect());
    }
    ids.iter()
        .map(|id| {
            reg.index_of(id).ok_or_else(|| Error::UnknownEntity {
                kind: kind.as_str(),
                id: id.clone(),
            })
        })
        .collect()
}

fn tables(model: &Model, kind: EntityKind, chosen: &[usize]) -> (FactorTable, FactorTable) {
    let wanted: HashMap<usize, ()> = chosen.iter().map(|&i| (i, ())).collect();
    // latest (location, uncertainty) of each chosen entity: factors stay put
    // between an entity's interactions
    let mut current: HashMap<usize, (Vec<f64>, Vec<f64>)> = HashMap::new();
    let empty = || FactorTable {
        steps: Vec::new(),
        interval_ends: Vec::new(),
        rows: Vec::new(),
    };
    let (mut loc, mut unc) = (empty(), empty());
    for snap in model.snapshots() {
        let entries = match kind {
            EntityKind::User => &snap.users,
            EntityKind::Item => &snap.items,
        };
        for (i, l, u) in entries {
            if wanted.contains_key(i) {
                current.insert(*i, (l.clone(), u.clone()));
            }
        }
        if current.is_empty() {
            continue;
        }
        let d = current.values().next().map_or(0, |v| v.0.len());
        let (mut lr, mut ur) = (vec![0.0; d], vec![0.0; d]);
        // fixed order keeps the floating-point sums reproducible
        let mut keys: Vec<_> = current.keys().copied().collect();
        keys.sort_unstable();
        for k in &keys {
            let (l, u) = &current[k];
            lr.iter_mut().zip(l).for_each(|(a, b)| *a += b);
            ur.iter_mut().zip(u).for_each(|(a, b)| *a += b);
        }
        let n = keys.len() as f64;
        lr.iter_mut().for_each(|x| *x /= n);
        ur.iter_mut().for_each(|x| *x /= n);
        for t in [&mut loc, &mut unc] {
            t.steps.push(snap.step);
            t.interval_ends.push(snap.interval_end);
        }
        loc.rows.push(lr);
        unc.rows.push(ur);
    }
    (loc, unc)
}

/// Averages recorded snapshots over the chosen entities (all when a list is
/// empty), centers location columns and L∞-normalizes uncertainty columns.
pub fn export_factors(model: &Model, users: &[String], items: &[String]) -> Result<FactorExport> {
    if !model.config.record_factors {
        return Err(Error::InvalidArgument(
            "checkpoint has no factor snapshots; train with record_factors = true".into(),
        ));
    }
    let (mut ul, mut uu) = tables(model, EntityKind::User, &resolve(model, EntityKind::User, users)?);
    let (mut il, mut iu) = tables(model, EntityKind::Item, &resolve(model, EntityKind::Item, items)?);
    ul.center_columns();
    il.center_columns();
    uu.normalize_columns_linf();
    iu.normalize_columns_linf();
    Ok(FactorExport {
        user_location: ul,
        user_uncertainty: uu,
        item_location: il,
        item_uncertainty: iu,
    })
}

impl FactorExport {
    /// Writes the four tables into `dir`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, t) in [
            ("user_location.csv", &self.user_location),
            ("user_uncertainty.csv", &self.user_uncertainty),
            ("item_location.csv", &self.item_location),
            ("item_uncertainty.csv", &self.item_uncertainty),
        ] {
            let p = dir.join(name);
            fs::write(&p, t.to_csv()).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}
