//! Numerical gradient verification.

use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

/// Uniform entries in `[-1, 1)`.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is near zero are judged against round-off (about `1e-11` at step `1e-5`)
/// rather than against their own magnitude.
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// Largest relative error between the reverse-mode gradient of `f` and
/// central finite differences with step `1e-5`, over every input entry.
///
/// `f` must build a scalar from the given input variables.
pub fn max_gradient_error(inputs: &[Matrix], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars);
    let back = g.backward(out).expect("scalar output");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, m) in inputs.iter().enumerate() {
        let analytic = back.wrt(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for e in 0..m.len() {
            let eval = |delta: f64| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == k {
                            x.data_mut()[e] += delta;
                        }
                        g.input(x)
                    })
                    .collect();
                let o = f(&mut g, &vars);
                g.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[e];
            let err = (fd - an).abs() / (fd.abs() + an.abs()).max(GRADIENT_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
