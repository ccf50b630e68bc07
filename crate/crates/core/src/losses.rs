//! Training objectives for the tokenizer and both language-model modes.
//!
//! Every loss is built on [`Graph`] so that gradients come from the same
//! reverse pass used in training.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

/// How per-element terms are combined into a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over positions and features.
    Sum,
    /// Sum over features, mean over positions.
    #[default]
    SequenceMean,
    /// Mean over every element.
    ElementMean,
}

impl Reduction {
    fn divisor(self, rows: usize, cols: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::SequenceMean => rows.max(1) as f64,
            Reduction::ElementMean => (rows * cols).max(1) as f64,
        }
    }
}

/// Which power of σ enters the first KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlForm {
    /// `σ²`, the Gaussian closed form.
    #[default]
    Variance,
    /// `σ`, as literally printed.
    Sigma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub lambda_kl: f64,
    /// Weight of the commitment term in the tokenizer objective.
    pub lambda_rvq: f64,
    pub warmup_epochs: usize,
    pub reduction: Reduction,
    pub kl_form: KlForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            lambda_kl: 1.0,
            lambda_rvq: 0.02,
            warmup_epochs: 2,
            reduction: Reduction::SequenceMean,
            kl_form: KlForm::Variance,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_kl", self.lambda_kl),
            ("lambda_rvq", self.lambda_rvq),
        ] {
            if !v.is_finite() || v < 0.0 {
                bail!(Config, "{} must be finite and non-negative, got {}", name, v);
            }
        }
        Ok(())
    }
}

/// Mean and log-variance of the predicted latent at each position.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPrediction {
    pub mu: Matrix,
    pub log_var: Matrix,
}

impl LatentPrediction {
    pub fn new(mu: Matrix, log_var: Matrix) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            bail!(Shape, "mean {:?} and log-variance {:?} differ", mu.shape(), log_var.shape());
        }
        if !mu.is_finite() || !log_var.is_finite() {
            bail!(Argument, "latent prediction has non-finite entries");
        }
        Ok(Self { mu, log_var })
    }

    pub fn sigma(&self) -> Matrix {
        self.log_var.map(|v| libm::exp(0.5 * v))
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        bail!(Shape, "{}: {:?} vs {:?}", what, g.shape(a), g.shape(b));
    }
    Ok(())
}

/// Mean next-unit cross-entropy over the `T'` units and the end symbol.
///
/// `logits` has `T' + 1` rows over `U + 1` classes; the last class is the
/// end symbol and is the target of the final row.
pub fn reconstruction_ce(g: &mut Graph, logits: Var, units: &[usize]) -> Result<Var> {
    let (rows, classes) = g.shape(logits);
    if rows != units.len() + 1 {
        bail!(Shape, "{} logit rows for {} units", rows, units.len());
    }
    if classes < 2 {
        bail!(Shape, "need at least one unit class plus the end symbol");
    }
    let eos = classes - 1;
    if let Some(&u) = units.iter().find(|&&u| u >= eos) {
        bail!(Argument, "unit {} outside vocabulary of {}", u, eos);
    }
    let targets: Vec<Option<usize>> = units.iter().copied().chain([eos]).map(Some).collect();
    g.cross_entropy(logits, targets, rows as f64)
}

/// `Σ_r mean_i ‖z^(r)_i − ẑ^(r)_i‖₂`; the quantized side is detached.
pub fn rvq_commitment(g: &mut Graph, residuals: &[Var], quantized: &[Var]) -> Result<Var> {
    if residuals.len() != quantized.len() || residuals.is_empty() {
        bail!(
            Argument,
            "{} residual layers but {} quantized layers",
            residuals.len(),
            quantized.len()
        );
    }
    let mut total: Option<Var> = None;
    for (&r, &q) in residuals.iter().zip(quantized) {
        same_shape(g, r, q, "commitment layer")?;
        let q = g.detach(q);
        let d = g.sub(r, q)?;
        let n = g.row_norm(d);
        let m = g.mean(n);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `L_ce + L_rvq`.
pub fn taste_loss(g: &mut Graph, ce: Var, rvq: Var) -> Result<Var> {
    g.add(ce, rvq)
}

/// Multi-head next-token objective: `(1/N) Σ_i [CE_text + Σ_r CE_code^(r)]`.
///
/// Code targets of `None` (such as the end-of-text row) contribute nothing
/// but still count towards `N`.
pub fn token_lm_loss(
    g: &mut Graph,
    text_logits: Var,
    code_logits: &[Var],
    text_targets: &[usize],
    code_targets: &[Vec<Option<usize>>],
) -> Result<TokenLoss> {
    if code_logits.len() != code_targets.len() {
        bail!(
            Config,
            "{} code heads for {} code layers",
            code_logits.len(),
            code_targets.len()
        );
    }
    let n = text_targets.len();
    let text = g.cross_entropy(text_logits, text_targets.iter().copied().map(Some).collect(), n.max(1) as f64)?;
    let mut total = text;
    let mut codes = Vec::with_capacity(code_logits.len());
    for (&l, t) in code_logits.iter().zip(code_targets) {
        let c = g.cross_entropy(l, t.clone(), n.max(1) as f64)?;
        codes.push(c);
        total = g.add(total, c)?;
    }
    Ok(TokenLoss { total, text, codes })
}

/// Components of [`token_lm_loss`].
pub struct TokenLoss {
    pub total: Var,
    pub text: Var,
    pub codes: Vec<Var>,
}

/// `‖e − ẑ‖²` under `reduction`.
pub fn reg_loss(g: &mut Graph, e: Var, target: Var, reduction: Reduction) -> Result<Var> {
    same_shape(g, e, target, "regularization")?;
    let (r, c) = g.shape(e);
    let d = g.sub(e, target)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / reduction.divisor(r, c)))
}

/// KL divergence from `N(μ, σ²)` to `N(ẑ, I)`:
/// `½ ΣΣ (σ² + (μ − ẑ)² − 1 − log σ²)` under `reduction`.
pub fn kl_loss(
    g: &mut Graph,
    mu: Var,
    log_var: Var,
    target: Var,
    reduction: Reduction,
    form: KlForm,
) -> Result<Var> {
    same_shape(g, mu, log_var, "kl mean/log-variance")?;
    same_shape(g, mu, target, "kl mean/target")?;
    if !g.value(log_var).is_finite() {
        bail!(Argument, "log-variance has non-finite entries");
    }
    let (r, c) = g.shape(mu);
    let spread = match form {
        KlForm::Variance => g.exp(log_var),
        KlForm::Sigma => {
            let h = g.scale(log_var, 0.5);
            g.exp(h)
        }
    };
    let d = g.sub(mu, target)?;
    let sq = g.mul(d, d)?;
    let a = g.add(spread, sq)?;
    let a = g.sub(a, log_var)?;
    let s = g.sum(a);
    let ones = (r * c) as f64;
    let shift = g.constant(Matrix::scalar(-ones));
    let s = g.add(s, shift)?;
    Ok(g.scale(s, 0.5 / reduction.divisor(r, c)))
}

/// Reparameterized sample `μ + exp(½ log σ²) ⊙ ε`.
pub fn sample_latent(g: &mut Graph, mu: Var, log_var: Var, noise: &Matrix) -> Result<Var> {
    same_shape(g, mu, log_var, "sample mean/log-variance")?;
    if g.shape(mu) != noise.shape() {
        bail!(Shape, "noise {:?} for latent {:?}", noise.shape(), g.shape(mu));
    }
    let h = g.scale(log_var, 0.5);
    let sigma = g.exp(h);
    let eps = g.constant(noise.clone());
    let spread = g.mul(sigma, eps)?;
    g.add(mu, spread)
}

/// Components of [`emb_lm_loss`].
pub struct EmbLoss {
    pub total: Var,
    pub text: Var,
    pub reg: Var,
    pub kl: Var,
}

/// `λ_reg·L_reg + λ_KL·L_KL + (1/N) Σ CE_text`.
#[allow(clippy::too_many_arguments)]
pub fn emb_lm_loss(
    g: &mut Graph,
    text_logits: Var,
    text_targets: &[usize],
    e: Var,
    mu: Var,
    log_var: Var,
    target: Var,
    cfg: &TrainConfig,
) -> Result<EmbLoss> {
    cfg.validate()?;
    let n = text_targets.len();
    let text = g.cross_entropy(text_logits, text_targets.iter().copied().map(Some).collect(), n.max(1) as f64)?;
    let reg = reg_loss(g, e, target, cfg.reduction)?;
    let kl = kl_loss(g, mu, log_var, target, cfg.reduction, cfg.kl_form)?;
    let a = g.scale(reg, cfg.lambda_reg);
    let b = g.scale(kl, cfg.lambda_kl);
    let total = g.add(a, b)?;
    let total = g.add(total, text)?;
    Ok(EmbLoss { total, text, reg, kl })
}

/// Gaussian log-density of `x` under `N(μ, σ²)`, summed over all entries.
pub fn gaussian_log_density(x: &Matrix, pred: &LatentPrediction) -> Result<f64> {
    if x.shape() != pred.mu.shape() {
        bail!(Shape, "observation {:?} for prediction {:?}", x.shape(), pred.mu.shape());
    }
    let ln_2pi = libm::log(2.0 * core::f64::consts::PI);
    let mut total = 0.0;
    for ((&xv, &m), &lv) in x.data().iter().zip(pred.mu.data()).zip(pred.log_var.data()) {
        let d = xv - m;
        total += -0.5 * (ln_2pi + lv + d * d * libm::exp(-lv));
    }
    Ok(total)
}

/// Gradient-free KL evaluation used by tests and logging.
pub fn kl_value(pred: &LatentPrediction, target: &Matrix, reduction: Reduction, form: KlForm) -> Result<f64> {
    let mut g = Graph::new();
    let mu = g.constant(pred.mu.clone());
    let lv = g.constant(pred.log_var.clone());
    let t = g.constant(target.clone());
    let k = kl_loss(&mut g, mu, lv, t, reduction, form)?;
    Ok(g.value(k).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::check::{max_gradient_error, random_matrix};
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn reconstruction_examples() {
        let uniform = value(|g| {
            let l = g.input(Matrix::zeros(4, 9));
            reconstruction_ce(g, l, &[1, 2, 3]).unwrap()
        });
        assert!((uniform - libm::log(9.0)).abs() < 1e-12);
        let units = [4usize, 0, 7];
        let mut m = Matrix::zeros(4, 9);
        for (i, t) in units.iter().copied().chain([8]).enumerate() {
            m.set(i, t, 30.0);
        }
        let sat = value(|g| {
            let l = g.input(m.clone());
            reconstruction_ce(g, l, &units).unwrap()
        });
        assert!(sat < 1e-9);
        let mut g = Graph::new();
        let l = g.input(Matrix::zeros(4, 9));
        assert!(matches!(reconstruction_ce(&mut g, l, &[1, 9, 2]), Err(Error::Argument(_))));
    }

    #[test]
    fn commitment_examples() {
        let v = value(|g| {
            let r = g.input(Matrix::from_rows(&[[3.0, 4.0]]).unwrap());
            let q = g.input(Matrix::zeros(1, 2));
            rvq_commitment(g, &[r], &[q]).unwrap()
        });
        assert_eq!(v, 5.0);
        let mut g = Graph::new();
        let r = g.input(Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.5]]).unwrap());
        let q = g.input(Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.0]]).unwrap());
        let l = rvq_commitment(&mut g, &[r], &[q]).unwrap();
        let back = g.backward(l).unwrap();
        assert!(back.wrt(q).is_none());
        assert!(back.wrt(r).is_some());
        let zero = value(|g| {
            let r = g.input(Matrix::filled(2, 3, 0.4));
            let q = g.input(Matrix::filled(2, 3, 0.4));
            rvq_commitment(g, &[r], &[q]).unwrap()
        });
        assert_eq!(zero, 0.0);
        let mut g = Graph::new();
        let r = g.input(Matrix::zeros(1, 2));
        assert!(matches!(rvq_commitment(&mut g, &[r, r], &[r]), Err(Error::Argument(_))));
    }

    #[test]
    fn taste_loss_adds() {
        let v = value(|g| {
            let a = g.input(Matrix::scalar(2.0));
            let b = g.input(Matrix::scalar(0.5));
            taste_loss(g, a, b).unwrap()
        });
        assert_eq!(v, 2.5);
    }

    #[test]
    fn token_loss_examples() {
        let v = value(|g| {
            let t = g.input(Matrix::zeros(3, 8));
            let c1 = g.input(Matrix::zeros(3, 4));
            let c2 = g.input(Matrix::zeros(3, 4));
            let codes = vec![vec![Some(0), Some(1), Some(2)], vec![Some(3), Some(3), Some(0)]];
            token_lm_loss(g, t, &[c1, c2], &[1, 2, 3], &codes).unwrap().total
        });
        let expected = libm::log(8.0) + 2.0 * libm::log(4.0);
        assert!((v - expected).abs() < 1e-12);
        assert!((expected - 4.8520).abs() < 1e-4);
        let mut g = Graph::new();
        let t = g.input(Matrix::zeros(1, 8));
        let c = g.input(Matrix::zeros(1, 4));
        let r = token_lm_loss(&mut g, t, &[c], &[0], &[vec![Some(0)], vec![Some(0)]]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn reg_and_kl_examples() {
        let v = value(|g| {
            let e = g.input(Matrix::filled(1, 3, 2.0));
            let t = g.input(Matrix::zeros(1, 3));
            reg_loss(g, e, t, Reduction::SequenceMean).unwrap()
        });
        assert_eq!(v, 12.0);
        let mut g = Graph::new();
        let e = g.input(Matrix::from_rows(&[[1.0, -1.0], [0.25, 3.0]]).unwrap());
        let t = g.constant(Matrix::from_rows(&[[0.0, 2.0], [1.0, 1.0]]).unwrap());
        let l = reg_loss(&mut g, e, t, Reduction::Sum).unwrap();
        let back = g.backward(l).unwrap();
        let want = Matrix::from_rows(&[[2.0, -6.0], [-1.5, 4.0]]).unwrap();
        assert_eq!(back.wrt(e).unwrap(), &want);

        let zero = LatentPrediction::new(Matrix::filled(2, 2, 0.3), Matrix::zeros(2, 2)).unwrap();
        assert_eq!(kl_value(&zero, &Matrix::filled(2, 2, 0.3), Reduction::Sum, KlForm::Variance).unwrap(), 0.0);
        let one = LatentPrediction::new(Matrix::filled(1, 2, 1.0), Matrix::zeros(1, 2)).unwrap();
        assert_eq!(kl_value(&one, &Matrix::zeros(1, 2), Reduction::SequenceMean, KlForm::Variance).unwrap(), 1.0);
        let nan = LatentPrediction {
            mu: Matrix::zeros(1, 1),
            log_var: Matrix::scalar(f64::NAN),
        };
        assert!(matches!(
            kl_value(&nan, &Matrix::zeros(1, 1), Reduction::Sum, KlForm::Variance),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn kl_gradient_vanishes_at_match() {
        let mut g = Graph::new();
        let target = Matrix::from_rows(&[[0.2, -1.0, 3.0]]).unwrap();
        let mu = g.input(target.clone());
        let lv = g.input(Matrix::zeros(1, 3));
        let t = g.constant(target);
        let k = kl_loss(&mut g, mu, lv, t, Reduction::Sum, KlForm::Variance).unwrap();
        let back = g.backward(k).unwrap();
        assert!(back.wrt(mu).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(back.wrt(lv).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sample_latent_examples() {
        let mut g = Graph::new();
        let mu = g.input(Matrix::from_rows(&[[0.5, -0.5]]).unwrap());
        let lv = g.input(Matrix::zeros(1, 2));
        let e0 = sample_latent(&mut g, mu, lv, &Matrix::zeros(1, 2)).unwrap();
        let e1 = sample_latent(&mut g, mu, lv, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert_eq!(g.value(e0), g.value(mu));
        assert_eq!(g.value(e1).data(), &[1.5, 0.5]);
    }

    #[test]
    fn emb_loss_reduces_to_text_with_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_matrix(&mut rng, 3, 5);
        let cfg = TrainConfig {
            lambda_reg: 0.0,
            lambda_kl: 0.0,
            ..TrainConfig::default()
        };
        let mut g = Graph::new();
        let l = g.input(logits.clone());
        let mu = g.input(random_matrix(&mut rng, 3, 2));
        let lv = g.input(random_matrix(&mut rng, 3, 2));
        let t = g.input(random_matrix(&mut rng, 3, 2));
        let e = sample_latent(&mut g, mu, lv, &random_matrix(&mut rng, 3, 2)).unwrap();
        let parts = emb_lm_loss(&mut g, l, &[0, 4, 2], e, mu, lv, t, &cfg).unwrap();
        assert_eq!(g.value(parts.total), g.value(parts.text));
        let bad = TrainConfig {
            lambda_kl: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            emb_lm_loss(&mut g, l, &[0, 4, 2], e, mu, lv, t, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let logits = random_matrix(&mut rng, 3, 5);
            let err = max_gradient_error(&[logits], |g, v| reconstruction_ce(g, v[0], &[1, 3]).unwrap());
            assert!(err < 1e-6, "ce {err}");
            let (mu, lv, t) = (
                random_matrix(&mut rng, 2, 3),
                random_matrix(&mut rng, 2, 3),
                random_matrix(&mut rng, 2, 3),
            );
            for form in [KlForm::Variance, KlForm::Sigma] {
                let err = max_gradient_error(&[mu.clone(), lv.clone(), t.clone()], |g, v| {
                    kl_loss(g, v[0], v[1], v[2], Reduction::SequenceMean, form).unwrap()
                });
                assert!(err < 1e-6, "kl {err}");
            }
            let eps = random_matrix(&mut rng, 2, 3);
            let err = max_gradient_error(&[mu.clone(), lv.clone()], |g, v| {
                let e = sample_latent(g, v[0], v[1], &eps).unwrap();
                let e2 = g.mul(e, e).unwrap();
                g.sum(e2)
            });
            assert!(err < 1e-6, "sample {err}");
        }
    }
}
