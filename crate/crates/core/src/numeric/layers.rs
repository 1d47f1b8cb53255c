use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
}

/// One stage of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Affine {
        input: usize,
        output: usize,
    },
    Activation {
        kind: Activation,
        width: usize,
    },
    /// Splits `[a; b]` (width `2w`) and emits `[a; b; a ⊙ b]` (width `3w`).
    Concat {
        width: usize,
    },
    /// Splits `[a; b]` (width `2w`) and emits `a ⊙ b` (width `w`).
    ElementwiseProduct {
        width: usize,
    },
    /// Consumes `[h; x]` and emits the next hidden state.
    GruCell {
        hidden: usize,
        input: usize,
    },
}

impl LayerSpec {
    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Affine { input, .. } => input,
            LayerSpec::Activation { width, .. } => width,
            LayerSpec::Concat { width } | LayerSpec::ElementwiseProduct { width } => 2 * width,
            LayerSpec::GruCell { hidden, input } => hidden + input,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Affine { output, .. } => output,
            LayerSpec::Activation { width, .. } => width,
            LayerSpec::Concat { width } => 3 * width,
            LayerSpec::ElementwiseProduct { width } => width,
            LayerSpec::GruCell { hidden, .. } => hidden,
        }
    }
}

/// Uniform initialization in `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("sized by construction")
}

/// Parameters of a gated recurrent unit.
///
/// `z = σ(W_z[h, x] + b_z)`, `r = σ(W_r[h, x] + b_r)`,
/// `h̃ = tanh(W_h[r ⊙ h, x] + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub hidden: usize,
    pub input: usize,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, input: usize, rng: &mut R) -> Self {
        let fan_in = hidden + input;
        let mut gate = |g: &str| {
            let w = store.add(format!("{name}.w_{g}"), glorot_uniform(rng, hidden, fan_in));
            let b = store.add(format!("{name}.b_{g}"), Tensor::zeros(1, hidden));
            (w, b)
        };
        let (w_z, b_z) = gate("z");
        let (w_r, b_r) = gate("r");
        let (w_h, b_h) = gate("h");
        GruCell {
            hidden,
            input,
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h]
    }

    /// One batched step: `h_prev: n × hidden`, `x: n × input`.
    pub fn step(&self, g: &mut Graph, h_prev: NodeId, x: NodeId) -> Result<NodeId> {
        let (hv, xv) = (g.value(h_prev), g.value(x));
        if hv.cols() != self.hidden || xv.cols() != self.input || hv.rows() != xv.rows() {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "expected h: n x {}, x: n x {}, got {}x{} and {}x{}",
                    self.hidden,
                    self.input,
                    hv.rows(),
                    hv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            ));
        }
        let hx = g.concat(&[h_prev, x])?;
        let (wz, bz) = (g.param(self.w_z), g.param(self.b_z));
        let z_pre = g.affine(hx, wz, bz)?;
        let z = g.sigmoid(z_pre);
        let (wr, br) = (g.param(self.w_r), g.param(self.b_r));
        let r_pre = g.affine(hx, wr, br)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h_prev)?;
        let rhx = g.concat(&[rh, x])?;
        let (wh, bh) = (g.param(self.w_h), g.param(self.b_h));
        let cand_pre = g.affine(rhx, wh, bh)?;
        let cand = g.tanh(cand_pre);
        let delta = g.sub(cand, h_prev)?;
        let gated = g.mul(z, delta)?;
        g.add(h_prev, gated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum LayerParams {
    None,
    Affine { w: ParamId, b: ParamId },
    Gru(GruCell),
}

/// A sequential network described by a list of [`LayerSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    name: String,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(format!("network {name} has no layers")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::Config(format!(
                    "network {name}: layer {} emits width {} but layer {} expects {}",
                    i,
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        let mut params = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            params.push(match *spec {
                LayerSpec::Affine { input, output } => {
                    if input == 0 || output == 0 {
                        return Err(Error::Config(format!("network {name}: layer {i} has zero width")));
                    }
                    let w = store.add(format!("{name}.{i}.w"), glorot_uniform(rng, output, input));
                    let b = store.add(format!("{name}.{i}.b"), Tensor::zeros(1, output));
                    LayerParams::Affine { w, b }
                }
                LayerSpec::GruCell { hidden, input } => {
                    LayerParams::Gru(GruCell::new(store, &format!("{name}.{i}"), hidden, input, rng))
                }
                _ => LayerParams::None,
            });
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
            params,
        })
    }

    /// `input → hidden (tanh) → output` with a linear head.
    pub fn one_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            store,
            name,
            vec![
                LayerSpec::Affine { input, output: hidden },
                LayerSpec::Activation {
                    kind: Activation::Tanh,
                    width: hidden,
                },
                LayerSpec::Affine { input: hidden, output },
            ],
            rng,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .flat_map(|p| match p {
                LayerParams::None => vec![],
                LayerParams::Affine { w, b } => vec![*w, *b],
                LayerParams::Gru(cell) => cell.param_ids().to_vec(),
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for (i, (spec, params)) in self.layers.iter().zip(&self.params).enumerate() {
            let width = g.value(cur).cols();
            if width != spec.input_width() {
                return Err(Error::shape(
                    format!("{} layer {i} ({spec:?})", self.name),
                    format!("input width {width}, expected {}", spec.input_width()),
                ));
            }
            let wrap = |e: Error| match e {
                Error::Shape { detail, .. } => Error::shape(format!("{} layer {i}", self.name), detail),
                other => other,
            };
            cur = match (spec, params) {
                (LayerSpec::Affine { .. }, LayerParams::Affine { w, b }) => {
                    let (wn, bn) = (g.param(*w), g.param(*b));
                    g.affine(cur, wn, bn).map_err(wrap)?
                }
                (LayerSpec::Activation { kind, .. }, _) => match kind {
                    Activation::Tanh => g.tanh(cur),
                    Activation::Sigmoid => g.sigmoid(cur),
                    Activation::Softplus => g.softplus(cur),
                },
                (LayerSpec::Concat { width }, _) => {
                    let a = g.slice_cols(cur, 0, *width)?;
                    let b = g.slice_cols(cur, *width, *width)?;
                    let ab = g.mul(a, b)?;
                    g.concat(&[a, b, ab])?
                }
                (LayerSpec::ElementwiseProduct { width }, _) => {
                    let a = g.slice_cols(cur, 0, *width)?;
                    let b = g.slice_cols(cur, *width, *width)?;
                    g.mul(a, b)?
                }
                (LayerSpec::GruCell { hidden, input }, LayerParams::Gru(cell)) => {
                    let h = g.slice_cols(cur, 0, *hidden)?;
                    let xin = g.slice_cols(cur, *hidden, *input)?;
                    cell.step(g, h, xin).map_err(wrap)?
                }
                _ => unreachable!("parameters built from the same spec"),
            };
        }
        Ok(cur)
    }
}

/// Runs a network on a constant input and returns the output with its tape.
/// The input is recorded as a differentiable leaf (node 0).
pub fn mlp_apply<'p>(mlp: &Mlp, store: &'p ParamStore, input: &Tensor) -> Result<(Tensor, Graph<'p>, NodeId)> {
    let mut g = Graph::new(store);
    let x = g.input(input.clone());
    let y = mlp.forward(&mut g, x)?;
    Ok((g.value(y).clone(), g, y))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_affine_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "a",
            vec![LayerSpec::Affine { input: 3, output: 4 }],
            &mut rng,
        )
        .unwrap();
        zero_all(&mut store);
        let (out, _, _) = mlp_apply(&mlp, &store, &Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spec = vec![LayerSpec::Activation {
            kind: Activation::Tanh,
            width: 2,
        }];
        let mlp = Mlp::new(&mut store, "t", spec, &mut rng).unwrap();
        let (out, _, _) = mlp_apply(&mlp, &store, &Tensor::row(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn width_mismatch_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bad = vec![
            LayerSpec::Affine { input: 2, output: 3 },
            LayerSpec::Affine { input: 4, output: 1 },
        ];
        let err = Mlp::new(&mut store, "net", bad, &mut rng).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");

        let mlp = Mlp::one_hidden(&mut store, "f", 2, 3, 1, &mut rng).unwrap();
        let Err(err) = mlp_apply(&mlp, &store, &Tensor::row(vec![1.0; 5])) else {
            panic!("mismatched input accepted");
        };
        assert!(err.to_string().contains("f layer 0"), "{err}");
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = glorot_uniform(&mut rng, 10, 14);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(t.shape(), &[10, 14]);
    }

    #[test]
    fn gru_with_zero_params_halves_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 2, &mut rng);
        zero_all(&mut store);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::row(vec![1.0, -2.0, 4.0]));
        let x = g.constant(Tensor::row(vec![0.7, 0.1]));
        let out = cell.step(&mut g, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 2.0]);

        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::zeros(1, 3));
        let x = g.constant(Tensor::zeros(1, 2));
        let out = cell.step(&mut g, h, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 3]);
    }

    #[test]
    fn gru_closed_update_gate_keeps_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 4, 3, &mut rng);
        store.value_mut(cell.b_z).data_mut().iter_mut().for_each(|v| *v = -40.0);
        let mut g = Graph::new(&store);
        let prev = vec![0.3, -0.8, 0.1, 0.9];
        let h = g.constant(Tensor::row(prev.clone()));
        let x = g.constant(Tensor::row(vec![1.0, -1.0, 0.5]));
        let out = cell.step(&mut g, h, x).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&prev) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pair_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = Mlp::new(&mut store, "c", vec![LayerSpec::Concat { width: 2 }], &mut rng).unwrap();
        let (out, _, _) = mlp_apply(&c, &store, &Tensor::row(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 8.0]);
        let p = Mlp::new(
            &mut store,
            "p",
            vec![LayerSpec::ElementwiseProduct { width: 2 }],
            &mut rng,
        )
        .unwrap();
        let (out, _, _) = mlp_apply(&p, &store, &Tensor::row(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 8.0]);
    }
}
