//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} f(x) dx`, found by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `log E[f(a, b)]` for independent `a ~ N(ma, va)`, `b ~ N(mb, vb)`, where
/// `log_f` returns `ln f`. Log-sum-exp over a tensor grid.
pub fn log_expectation_2d(
    order: usize,
    (ma, va): (f64, f64),
    (mb, vb): (f64, f64),
    log_f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let (x, w) = gauss_hermite(order);
    let mut terms = Vec::with_capacity(order * order);
    for (xi, wi) in x.iter().zip(&w) {
        let a = ma + (2.0 * va).sqrt() * xi;
        for (xj, wj) in x.iter().zip(&w) {
            let b = mb + (2.0 * vb).sqrt() * xj;
            terms.push((wi * wj / PI).ln() + log_f(a, b));
        }
    }
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// Sample mean and standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}
