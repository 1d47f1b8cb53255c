use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Descent,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Minimizer state. Moment buffers mirror the parameter shapes; tables that
/// grew since the last step are padded with zero moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub skipped_nonfinite: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            skipped_nonfinite: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn sync_shapes(&mut self, store: &ParamStore) {
        self.first.resize(store.len(), Vec::new());
        self.second.resize(store.len(), Vec::new());
        for (i, p) in store.iter().enumerate() {
            self.first[i].resize(p.value.len(), 0.0);
            self.second[i].resize(p.value.len(), 0.0);
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first.get(index).map(Vec::as_slice)
    }

    /// One descent step on `store` along `-grads`.
    ///
    /// Returns `false` (and counts a warning) when any gradient entry is
    /// non-finite; the parameters are then left untouched. Rows of
    /// row-sparse tables that received no gradient are not moved.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> bool {
        self.step += 1;
        if !grads.all_finite() {
            self.skipped_nonfinite += 1;
            log::warn!("skipping update with non-finite gradient (step {})", self.step);
            return false;
        }
        self.sync_shapes(store);
        let t = self.step as i32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let touched = grads.touched_rows(id).map(<[bool]>::to_vec);
            let value = store.value_mut(id);
            let cols = value.cols().max(1);
            let i = id.index();
            for (k, (p, gk)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                if let Some(rows) = &touched {
                    if !rows[k / cols] {
                        continue;
                    }
                }
                match self.kind {
                    OptimizerKind::Descent => *p -= self.lr * gk,
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let m = &mut self.first[i][k];
                        let v = &mut self.second[i][k];
                        *m = beta1 * *m + (1.0 - beta1) * gk;
                        *v = beta2 * *v + (1.0 - beta2) * gk * gk;
                        let m_hat = *m / (1.0 - beta1.powi(t));
                        let v_hat = *v / (1.0 - beta2.powi(t));
                        *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Graph, ParamId, Tensor};

    fn grads_for(store: &ParamStore, id: ParamId, coef: f64) -> Grads {
        // d/dp of coef * sum(p)
        let mut g = Graph::new(store);
        let p = g.param(id);
        let s = g.sum(p);
        let s = g.scale(s, coef);
        g.backward(s).unwrap().params
    }

    #[test]
    fn descent_step() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(OptimizerKind::Descent, 0.1);
        let g = grads_for(&store, id, 2.0);
        assert!(opt.step(&mut store, &g));
        assert!((store.value(id).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row(vec![1.0, -2.0]));
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01);
        let g = grads_for(&store, id, 0.0);
        opt.step(&mut store, &g);
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row(vec![1.0, 5.0]));
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01);
        let g = grads_for(&store, id, 3.0);
        opt.step(&mut store, &g);
        for (after, before) in store.value(id).data().iter().zip([1.0, 5.0]) {
            assert!((after - before + 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(OptimizerKind::Descent, 0.1);
        let mut g = grads_for(&store, id, 1.0);
        g.set_entry(id, 0, f64::NAN).unwrap();
        assert!(!opt.step(&mut store, &g));
        assert_eq!(store.value(id).item(), 1.0);
        assert_eq!(opt.skipped_nonfinite, 1);
    }

    #[test]
    fn untouched_table_rows_stay_put_under_momentum() {
        let mut store = ParamStore::new();
        let id = store.add_table("t", Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1);
        let both = {
            let mut g = Graph::new(&store);
            let r = g.param_rows(id, &[0, 1]).unwrap();
            let s = g.sum(r);
            g.backward(s).unwrap().params
        };
        opt.step(&mut store, &both);
        let row1 = store.value(id).data()[1];
        let only0 = {
            let mut g = Graph::new(&store);
            let r = g.param_rows(id, &[0]).unwrap();
            let s = g.sum(r);
            g.backward(s).unwrap().params
        };
        opt.step(&mut store, &only0);
        assert_eq!(store.value(id).data()[1], row1);
    }
}
