//! Negative-ELBO estimators with reparameterization gradients.
//!
//! The network and residual graph is recorded once per batch; each estimate
//! re-evaluates it at fresh weight draws. KL terms and the chain rule through
//! `w = mu + sigma * eps` are applied analytically outside the tape.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::posterior::{kl_gradient, kl_mean_field};
use super::{MeanFieldPosterior, MlpSpec, PriorSpec, Result, ViError};
use crate::autodiff::{AutodiffError, Matrix, Tape};
use crate::problems::{feasibility, record_feasibility, Problem};
use crate::rng::seeded;

/// Fixed likelihood variance of the feasibility stage.
pub const SIGMA_U2: f64 = 1e-10;

/// Standard-normal noise for one reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub weights: Vec<f64>,
    pub noise: f64,
}

impl Draw {
    pub fn sample(n: usize, rng: &mut impl Rng) -> Self {
        let weights = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            weights,
            noise: rng.sample(StandardNormal),
        }
    }

    /// `mc_samples` draws from one seeded stream.
    pub fn batch(n: usize, mc_samples: usize, seed: u64) -> Vec<Self> {
        let mut rng = seeded(seed);
        (0..mc_samples).map(|_| Self::sample(n, &mut rng)).collect()
    }
}

/// Loss `kl + nll` and its gradient in the flat posterior layout.
#[derive(Clone, Debug)]
pub struct ElboEstimate {
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
    pub grad: Vec<f64>,
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ViError::NonFinite {
            term: term.to_string(),
        })
    }
}

fn finish(
    q: &MeanFieldPosterior,
    prior: &PriorSpec,
    nll: f64,
    mut grad: Vec<f64>,
    trainable: Option<&[bool]>,
) -> Result<ElboEstimate> {
    let kl = kl_mean_field(q, prior)?;
    check_finite("kl", kl)?;
    check_finite("likelihood", nll)?;
    for (g, k) in grad.iter_mut().zip(kl_gradient(q, prior)) {
        *g += k;
    }
    if let Some(mask) = trainable {
        for (g, &t) in grad.iter_mut().zip(mask) {
            if !t {
                *g = 0.0;
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ViError::NonFinite {
            term: "gradient".into(),
        });
    }
    Ok(ElboEstimate {
        loss: kl + nll,
        kl,
        nll,
        grad,
    })
}

fn check_draws(q: &MeanFieldPosterior, draws: &[Draw]) -> Result<()> {
    if draws.is_empty() {
        return Err(ViError::InvalidConfig("at least one Monte-Carlo draw".into()));
    }
    for d in draws {
        if d.weights.len() != q.len() {
            return Err(ViError::Dimension {
                what: "draw",
                expected: q.len(),
                got: d.weights.len(),
            });
        }
    }
    Ok(())
}

/// Gaussian likelihood `y ~ N(f_w(x), sigma_s^2)` on a labeled batch, with
/// `log sigma_s^2` a variational latent.
pub struct SupervisedObjective {
    spec: MlpSpec,
    tape: Tape,
    count: f64,
}

impl SupervisedObjective {
    pub fn new(spec: &MlpSpec, xs: &Matrix, ys: &Matrix) -> Result<Self> {
        if xs.rows() == 0 {
            return Err(ViError::EmptyBatch);
        }
        if xs.cols() != spec.input_dim() || ys.shape() != (xs.rows(), spec.output_dim()) {
            return Err(ViError::Dimension {
                what: "labeled batch",
                expected: spec.output_dim(),
                got: ys.cols(),
            });
        }
        let mut tape = Tape::new();
        let y = spec.record(&mut tape, xs);
        let target = tape.constant(ys.clone());
        let r = tape.sub(y, target);
        let r2 = tape.square(r);
        let sse = tape.sum(r2);
        tape.mark_output(sse);
        Ok(Self {
            spec: spec.clone(),
            tape,
            count: ys.len() as f64,
        })
    }

    /// Sum of squared errors at weights `w` and its gradient.
    fn sse(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.tape.forward(&self.spec.leaf_values(w))?;
        let sse = self.tape.output_value(&trace, 0)?.get(0, 0);
        let grad = self.tape.backward(&trace, 0)?.flatten();
        Ok((sse, grad))
    }

    /// Estimate at fixed noise draws.
    pub fn evaluate(
        &self,
        q: &MeanFieldPosterior,
        prior: &PriorSpec,
        draws: &[Draw],
    ) -> Result<ElboEstimate> {
        check_draws(q, draws)?;
        let n = q.len();
        let sigma = q.sigma();
        let scale = 1.0 / draws.len() as f64;
        let mut nll = 0.0;
        let mut grad = vec![0.0; 2 * n + 2];
        for d in draws {
            let w = q.reparameterize(&d.weights);
            let (sse, gw) = self.sse(&w)?;
            let s_sigma = q.noise.sigma();
            let s = q.noise.mu + s_sigma * d.noise;
            let prec = (-s).exp();
            nll += scale
                * (0.5 * self.count * (2.0 * PI).ln() + 0.5 * self.count * s + 0.5 * sse * prec);
            for k in 0..n {
                let g = scale * 0.5 * prec * gw[k];
                grad[k] += g;
                grad[n + k] += g * sigma[k] * d.weights[k];
            }
            let gs = scale * (0.5 * self.count - 0.5 * sse * prec);
            grad[2 * n] += gs;
            grad[2 * n + 1] += gs * s_sigma * d.noise;
        }
        finish(q, prior, nll, grad, None)
    }

    pub fn estimate(
        &self,
        q: &MeanFieldPosterior,
        prior: &PriorSpec,
        mc_samples: usize,
        seed: u64,
    ) -> Result<ElboEstimate> {
        self.evaluate(q, prior, &Draw::batch(q.len(), mc_samples, seed))
    }
}

/// Feasibility likelihood `0 ~ N(F(f_w(x), x), sigma_u^2)` on unlabeled inputs.
/// Only weight coordinates are trainable: bias and noise gradients are zero.
pub struct UnsupervisedObjective<'a> {
    spec: MlpSpec,
    problem: &'a dyn Problem,
    xs: Matrix,
    tape: Tape,
    lambda_e: f64,
    lambda_i: f64,
    sigma_u2: f64,
    trainable: Vec<bool>,
}

impl<'a> UnsupervisedObjective<'a> {
    pub fn new(
        spec: &MlpSpec,
        problem: &'a dyn Problem,
        xs: &Matrix,
        lambda_e: f64,
        lambda_i: f64,
        sigma_u2: f64,
    ) -> Result<Self> {
        if xs.rows() == 0 {
            return Err(ViError::EmptyBatch);
        }
        if xs.cols() != spec.input_dim() || problem.output_dim() != spec.output_dim() {
            return Err(ViError::Dimension {
                what: "unlabeled batch",
                expected: spec.input_dim(),
                got: xs.cols(),
            });
        }
        if !(sigma_u2 > 0.0) {
            return Err(ViError::InvalidConfig(format!("sigma_u2 = {sigma_u2} must be positive")));
        }
        if !(lambda_e >= 0.0 && lambda_i >= 0.0) {
            return Err(ViError::InvalidConfig("feasibility weights must be non-negative".into()));
        }
        let mut tape = Tape::new();
        let y = spec.record(&mut tape, xs);
        let res = problem.record_residuals(&mut tape, xs, y);
        let f = record_feasibility(&mut tape, res, lambda_e, lambda_i);
        let f2 = tape.square(f);
        let total = tape.sum(f2);
        tape.mark_output(total);
        Ok(Self {
            spec: spec.clone(),
            problem,
            xs: xs.clone(),
            tape,
            lambda_e,
            lambda_i,
            sigma_u2,
            trainable: unsupervised_trainable(spec),
        })
    }

    /// Finds the first sample whose feasibility is not finite, to turn a
    /// graph-level failure into an error naming the input.
    fn locate(&self, w: &[f64], err: AutodiffError) -> ViError {
        let ys = self.spec.predict(w, &self.xs);
        for j in 0..self.xs.rows() {
            let f = feasibility(
                self.problem,
                self.xs.row_slice(j),
                ys.row_slice(j),
                self.lambda_e,
                self.lambda_i,
            );
            if !matches!(f, Ok(v) if v.is_finite()) {
                return ViError::NonFiniteSample { sample: j };
            }
        }
        err.into()
    }

    fn sum_f2(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let run = || -> std::result::Result<(f64, Vec<f64>), AutodiffError> {
            let trace = self.tape.forward(&self.spec.leaf_values(w))?;
            let v = self.tape.output_value(&trace, 0)?.get(0, 0);
            Ok((v, self.tape.backward(&trace, 0)?.flatten()))
        };
        run().map_err(|e| self.locate(w, e))
    }

    pub fn evaluate(
        &self,
        q: &MeanFieldPosterior,
        prior: &PriorSpec,
        draws: &[Draw],
    ) -> Result<ElboEstimate> {
        check_draws(q, draws)?;
        let n = q.len();
        let sigma = q.sigma();
        let scale = 1.0 / draws.len() as f64;
        let batch = self.xs.rows() as f64;
        let mut nll = 0.0;
        let mut grad = vec![0.0; 2 * n + 2];
        for d in draws {
            let w = q.reparameterize(&d.weights);
            let (f2, gw) = self.sum_f2(&w)?;
            nll += scale
                * (batch * 0.5 * (2.0 * PI * self.sigma_u2).ln() + f2 / (2.0 * self.sigma_u2));
            for k in 0..n {
                let g = scale * gw[k] / (2.0 * self.sigma_u2);
                grad[k] += g;
                grad[n + k] += g * sigma[k] * d.weights[k];
            }
        }
        finish(q, prior, nll, grad, Some(&self.trainable))
    }

    pub fn estimate(
        &self,
        q: &MeanFieldPosterior,
        prior: &PriorSpec,
        mc_samples: usize,
        seed: u64,
    ) -> Result<ElboEstimate> {
        self.evaluate(q, prior, &Draw::batch(q.len(), mc_samples, seed))
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }
}

/// Trainable mask over the flat posterior for the feasibility stage: weight
/// means and scales only.
pub fn unsupervised_trainable(spec: &MlpSpec) -> Vec<bool> {
    let bias = spec.bias_mask();
    let mut mask: Vec<bool> = bias.iter().map(|b| !b).collect();
    mask.extend(bias.iter().map(|b| !b));
    mask.extend([false, false]);
    mask
}
