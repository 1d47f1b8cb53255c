use cvrcf_core::numeric::{
    grad_check, mlp_apply, Activation, GradCheckOptions, Graph, GruCell, LayerSpec, Mlp, ParamId, ParamStore, Tensor,
};
use cvrcf_core::seeds;
use rand::Rng;

fn tanh_net(store: &mut ParamStore, seed: u64, din: usize, dh: usize, dout: usize) -> Mlp {
    let mut rng = seeds::rng(&[seed, 1]);
    let net = Mlp::one_hidden(store, "net", din, dh, dout, &mut rng).unwrap();
    // nonzero biases so the oracle sees them
    for id in net.param_ids() {
        for x in store.value_mut(id).data_mut() {
            if *x == 0.0 {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
    net
}

fn random_input(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = seeds::rng(&[seed, 2]);
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

// y = x wᵀ + b, element by element
#[allow(clippy::needless_range_loop)]
fn affine_loop(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (dout, din) = (w.rows(), w.cols());
    let mut out = vec![0.0; dout];
    for o in 0..dout {
        let mut acc = b.get(0, o);
        for i in 0..din {
            acc += w.get(o, i) * x[i];
        }
        out[o] = acc;
    }
    out
}

#[test]
fn two_layer_net_matches_scalar_loops() {
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let net = tanh_net(&mut store, seed, 5, 7, 3);
        let x = random_input(seed, 4, 5);
        let (y, _, _) = mlp_apply(&net, &store, &x).unwrap();
        let ids = net.param_ids();
        let (w1, b1, w2, b2) = (
            store.value(ids[0]),
            store.value(ids[1]),
            store.value(ids[2]),
            store.value(ids[3]),
        );
        for r in 0..x.rows() {
            let hidden: Vec<f64> = affine_loop(x.row_slice(r), w1, b1).iter().map(|v| v.tanh()).collect();
            let expect = affine_loop(&hidden, w2, b2);
            for (a, b) in y.row_slice(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn apply_is_deterministic() {
    let mut store = ParamStore::new();
    let net = tanh_net(&mut store, 3, 4, 6, 2);
    let x = random_input(3, 3, 4);
    let a = mlp_apply(&net, &store, &x).unwrap().0;
    let b = mlp_apply(&net, &store, &x).unwrap().0;
    assert_eq!(a, b);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// independent single-row GRU: z, r gates over [h; x], candidate over [r⊙h; x]
fn gru_loop(store: &ParamStore, cell: &GruCell, h: &[f64], x: &[f64]) -> Vec<f64> {
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let z: Vec<f64> = affine_loop(&hx, store.value(cell.w_z), store.value(cell.b_z))
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = affine_loop(&hx, store.value(cell.w_r), store.value(cell.b_r))
        .into_iter()
        .map(sigmoid)
        .collect();
    let rhx: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a * b).chain(x.iter().copied()).collect();
    let cand = affine_loop(&rhx, store.value(cell.w_h), store.value(cell.b_h));
    (0..h.len())
        .map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k].tanh())
        .collect()
}

fn random_cell(store: &mut ParamStore, seed: u64, hidden: usize, input: usize) -> GruCell {
    let mut rng = seeds::rng(&[seed, 3]);
    let cell = GruCell::new(store, "gru", hidden, input, &mut rng);
    for id in cell.param_ids() {
        for x in store.value_mut(id).data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    cell
}

#[test]
fn gru_step_matches_scalar_loops() {
    let mut store = ParamStore::new();
    let cell = random_cell(&mut store, 11, 4, 3);
    let h = random_input(5, 2, 4);
    let x = random_input(6, 2, 3);
    let mut g = Graph::new(&store);
    let (hn, xn) = (g.constant(h.clone()), g.constant(x.clone()));
    let out = cell.step(&mut g, hn, xn).unwrap();
    for r in 0..2 {
        let expect = gru_loop(&store, &cell, h.row_slice(r), x.row_slice(r));
        for (a, b) in g.value(out).row_slice(r).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn unrolled_sum(store: &ParamStore, cell: &GruCell, h0: &Tensor, xs: &[Tensor]) -> (f64, cvrcf_core::numeric::Grads) {
    let mut g = Graph::new(store);
    let mut h = g.constant(h0.clone());
    for x in xs {
        let xn = g.constant(x.clone());
        h = cell.step(&mut g, h, xn).unwrap();
    }
    let s = g.sum(h);
    let back = g.backward(s).unwrap();
    (g.value(s).item(), back.params)
}

#[test]
fn three_chained_gru_steps_match_finite_differences() {
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let cell = random_cell(&mut store, seed, 4, 3);
        let h0 = random_input(seed + 100, 2, 4);
        let xs: Vec<Tensor> = (0..3).map(|t| random_input(seed * 10 + t, 2, 3)).collect();
        let ids: Vec<ParamId> = cell.param_ids().to_vec();
        let report = grad_check(
            &store,
            &ids,
            |s| Ok(unrolled_sum(s, &cell, &h0, &xs)),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
    }
}

#[test]
fn gru_with_saturated_closed_gate_carries_hidden_through() {
    let mut store = ParamStore::new();
    let cell = random_cell(&mut store, 2, 3, 2);
    for x in store.value_mut(cell.w_z).data_mut() {
        *x = 0.0;
    }
    for x in store.value_mut(cell.b_z).data_mut() {
        *x = -60.0;
    }
    let h0 = random_input(1, 1, 3);
    let xs: Vec<Tensor> = (0..3).map(|t| random_input(t, 1, 2)).collect();
    let mut g = Graph::new(&store);
    let mut h = g.constant(h0.clone());
    for x in &xs {
        let xn = g.constant(x.clone());
        h = cell.step(&mut g, h, xn).unwrap();
    }
    for (a, b) in g.value(h).data().iter().zip(h0.data()) {
        assert!((a - b).abs() < 1e-20);
    }
}

fn squared_error(store: &ParamStore, net: &Mlp, x: &Tensor, target: &Tensor) -> (f64, cvrcf_core::numeric::Grads) {
    let mut g = Graph::new(store);
    let xn = g.constant(x.clone());
    let y = net.forward(&mut g, xn).unwrap();
    let t = g.constant(target.clone());
    let d = g.sub(y, t).unwrap();
    let sq = g.square(d);
    let loss = g.sum(sq);
    let back = g.backward(loss).unwrap();
    (g.value(loss).item(), back.params)
}

#[test]
fn affine_tanh_layers_pass_the_checker_across_seeds() {
    for seed in 0..100 {
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(&[seed, 4]);
        let net = Mlp::new(
            &mut store,
            "layer",
            vec![
                LayerSpec::Affine { input: 3, output: 4 },
                LayerSpec::Activation {
                    kind: Activation::Tanh,
                    width: 4,
                },
            ],
            &mut rng,
        )
        .unwrap();
        let x = random_input(seed + 7, 5, 3);
        let target = random_input(seed + 8, 5, 4);
        let report = grad_check(
            &store,
            &net.param_ids(),
            |s| Ok(squared_error(s, &net, &x, &target)),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
    }
}

#[test]
fn pair_layers_and_softplus_heads_pass_the_checker() {
    for seed in 0..30 {
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(&[seed, 5]);
        let net = Mlp::new(
            &mut store,
            "pair",
            vec![
                LayerSpec::Concat { width: 3 },
                LayerSpec::Affine { input: 9, output: 5 },
                LayerSpec::Activation {
                    kind: Activation::Sigmoid,
                    width: 5,
                },
                LayerSpec::Affine { input: 5, output: 2 },
                LayerSpec::Activation {
                    kind: Activation::Softplus,
                    width: 2,
                },
            ],
            &mut rng,
        )
        .unwrap();
        let x = random_input(seed + 9, 4, 6);
        let target = random_input(seed + 10, 4, 2);
        let report = grad_check(
            &store,
            &net.param_ids(),
            |s| Ok(squared_error(s, &net, &x, &target)),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}\n{report}");
    }
}
