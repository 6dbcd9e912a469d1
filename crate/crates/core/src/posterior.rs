//! Posterior prediction matrices and selection via posterior.
//!
//! A PPM holds, for one input, the network output under `H` posterior weight
//! draws: rows are output variables, columns are draws. Column `j` uses the
//! draw seeded by `derive_seed(seed, j)`, so any column can be replayed alone
//! and the same weights are shared by every input built with that seed.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::problems::{Problem, ProblemError};
use crate::rng::derive_seed;
use crate::sandwich::Model;
use crate::vi::{sample_weights, MeanFieldPosterior, MlpSpec};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("need at least {needed} posterior samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("PPM shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PosteriorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ppm {
    /// `O x H`.
    pub values: Matrix,
    pub seeds: Vec<u64>,
}

pub fn column_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, j as u64)
}

/// Weights of column `j`.
pub fn column_weights(q: &MeanFieldPosterior, seed: u64, j: usize) -> Vec<f64> {
    sample_weights(q, column_seed(seed, j), 1).remove(0)
}

impl Ppm {
    pub fn outputs(&self) -> usize {
        self.values.rows()
    }

    pub fn samples(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column_vec(j)
    }

    /// The first `h` columns. Column seeds depend only on the column index,
    /// so this is the PPM that `h` samples would have produced.
    pub fn prefix(&self, h: usize) -> Ppm {
        let h = h.min(self.samples());
        let mut values = Matrix::zeros(self.outputs(), h);
        for i in 0..self.outputs() {
            for j in 0..h {
                values.set(i, j, self.values.get(i, j));
            }
        }
        Ppm {
            values,
            seeds: self.seeds.iter().take(h).copied().collect(),
        }
    }

    /// Rows are variables, columns are samples.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["variable_id".to_string()];
        header.extend((0..self.samples()).map(|j| format!("w{j}")));
        out.write_record(&header)?;
        for i in 0..self.outputs() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.values.row_slice(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// PPMs for every input in `xs`, sharing the `h` weight draws.
pub fn build_ppms(
    q: &MeanFieldPosterior,
    spec: &MlpSpec,
    xs: &[Vec<f64>],
    h: usize,
    seed: u64,
) -> Result<Vec<Ppm>> {
    if h == 0 {
        return Err(PosteriorError::TooFewSamples { needed: 1, got: 0 });
    }
    let xm = Matrix::from_rows(xs, spec.input_dim());
    // Each column predicts the whole batch; collected in column order.
    let columns: Vec<Matrix> = (0..h)
        .into_par_iter()
        .map(|j| spec.predict(&column_weights(q, seed, j), &xm))
        .collect();
    let o = spec.output_dim();
    let seeds: Vec<u64> = (0..h).map(|j| column_seed(seed, j)).collect();
    Ok((0..xs.len())
        .map(|k| {
            let mut values = Matrix::zeros(o, h);
            for (j, col) in columns.iter().enumerate() {
                for i in 0..o {
                    values.set(i, j, col.get(k, i));
                }
            }
            Ppm {
                values,
                seeds: seeds.clone(),
            }
        })
        .collect())
}

pub fn build_ppm(
    q: &MeanFieldPosterior,
    spec: &MlpSpec,
    x: &[f64],
    h: usize,
    seed: u64,
) -> Result<Ppm> {
    Ok(build_ppms(q, spec, &[x.to_vec()], h, seed)?.remove(0))
}

/// PPMs for any model; a deterministic model yields single-column PPMs.
pub fn model_ppms(model: &Model, xs: &[Vec<f64>], h: usize, seed: u64) -> Result<Vec<Ppm>> {
    match model {
        Model::Bayesian { spec, posterior } => build_ppms(posterior, spec, xs, h, seed),
        Model::Deterministic { spec, params } => {
            let pred = spec.predict(params, &Matrix::from_rows(xs, spec.input_dim()));
            Ok((0..xs.len())
                .map(|k| Ppm {
                    values: Matrix::column(pred.row_slice(k)),
                    seeds: vec![],
                })
                .collect())
        }
    }
}

pub fn ppm_mean(ppm: &Ppm) -> Vec<f64> {
    let h = ppm.samples() as f64;
    (0..ppm.outputs())
        .map(|i| ppm.values.row_slice(i).iter().sum::<f64>() / h)
        .collect()
}

/// Row-wise unbiased sample variance.
pub fn ppm_variance(ppm: &Ppm) -> Result<Vec<f64>> {
    let h = ppm.samples();
    if h < 2 {
        return Err(PosteriorError::TooFewSamples { needed: 2, got: h });
    }
    Ok(ppm_mean(ppm)
        .iter()
        .enumerate()
        .map(|(i, m)| {
            ppm.values
                .row_slice(i)
                .iter()
                .map(|v| (v - m).powi(2))
                .sum::<f64>()
                / (h - 1) as f64
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SvpCriterion {
    /// Largest absolute equality residual.
    #[default]
    Equality,
    /// Largest absolute equality residual plus `lambda_i` times the largest
    /// inequality violation.
    Combined { lambda_i: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvpChoice {
    pub index: usize,
    pub y: Vec<f64>,
    pub score: f64,
    /// Score of every column.
    pub scores: Vec<f64>,
}

fn column_score(problem: &dyn Problem, x: &[f64], y: &[f64], criterion: SvpCriterion) -> Result<f64> {
    let eq = problem
        .eq_residuals(x, y)?
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(match criterion {
        SvpCriterion::Equality => eq,
        SvpCriterion::Combined { lambda_i } => {
            let ineq = problem
                .ineq_residuals(x, y)?
                .iter()
                .fold(0.0_f64, |m, v| m.max(*v));
            eq + lambda_i * ineq
        }
    })
}

/// Column minimizing the criterion; ties go to the lowest index. Scores are
/// computed in parallel and reduced in column order.
pub fn svp_select(
    ppm: &Ppm,
    problem: &dyn Problem,
    x: &[f64],
    criterion: SvpCriterion,
) -> Result<SvpChoice> {
    if ppm.samples() == 0 {
        return Err(PosteriorError::TooFewSamples { needed: 1, got: 0 });
    }
    let scores: Vec<f64> = (0..ppm.samples())
        .into_par_iter()
        .map(|j| column_score(problem, x, &ppm.column(j), criterion))
        .collect::<Result<_>>()?;
    // NaN scores never win.
    let index = (1..scores.len()).fold(0, |best, j| {
        if scores[j] < scores[best] || scores[best].is_nan() && !scores[j].is_nan() {
            j
        } else {
            best
        }
    });
    Ok(SvpChoice {
        index,
        y: ppm.column(index),
        score: scores[index],
        scores,
    })
}
