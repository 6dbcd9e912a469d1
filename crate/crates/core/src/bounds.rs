//! Feasibility and optimality metrics, concentration bounds on the expected
//! absolute prediction error, and the mean-predictive-variance study.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::posterior::{ppm_mean, ppm_variance, PosteriorError, Ppm};
use crate::problems::{Bound, Problem, ProblemError};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("{0}")]
    Domain(String),
    #[error("optimality gap undefined at instance {instance}: optimal cost is 0")]
    UndefinedGap { instance: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Per-instance statistics averaged over instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub gap_percent: f64,
    pub max_eq: f64,
    pub mean_eq: f64,
    pub max_ineq: f64,
    pub mean_ineq: f64,
}

impl MetricsTable {
    pub const COLUMNS: [&'static str; 5] = ["gap_percent", "max_eq", "mean_eq", "max_ineq", "mean_ineq"];

    pub fn values(&self) -> [f64; 5] {
        [self.gap_percent, self.max_eq, self.mean_eq, self.max_ineq, self.mean_ineq]
    }
}

fn max_mean(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut max, mut sum, mut n) = (0.0_f64, 0.0, 0usize);
    for x in v {
        max = max.max(x);
        sum += x;
        n += 1;
    }
    (max, if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Statistics of one prediction `y_hat` against the optimum `y_star`.
pub fn instance_metrics(
    problem: &dyn Problem,
    x: &[f64],
    y_hat: &[f64],
    y_star: &[f64],
) -> Result<Option<MetricsTable>> {
    let c_star = problem.cost(x, y_star)?;
    if c_star == 0.0 {
        return Ok(None);
    }
    let c_hat = problem.cost(x, y_hat)?;
    let (max_eq, mean_eq) = max_mean(problem.eq_residuals(x, y_hat)?.into_iter().map(f64::abs));
    let (max_ineq, mean_ineq) =
        max_mean(problem.ineq_residuals(x, y_hat)?.into_iter().map(|h| h.max(0.0)));
    Ok(Some(MetricsTable {
        gap_percent: (c_hat - c_star).abs() / c_star.abs() * 100.0,
        max_eq,
        mean_eq,
        max_ineq,
        mean_ineq,
    }))
}

/// Instance statistics averaged over the test set (max within an instance,
/// mean across instances).
pub fn metrics(
    problem: &dyn Problem,
    xs: &[Vec<f64>],
    labels: &[Vec<f64>],
    predictions: &[Vec<f64>],
) -> Result<MetricsTable> {
    if xs.len() != labels.len() || xs.len() != predictions.len() || xs.is_empty() {
        return Err(BoundsError::Shape(format!(
            "{} inputs, {} labels, {} predictions",
            xs.len(),
            labels.len(),
            predictions.len()
        )));
    }
    let per: Vec<MetricsTable> = (0..xs.len())
        .into_par_iter()
        .map(|k| {
            instance_metrics(problem, &xs[k], &predictions[k], &labels[k])?
                .ok_or(BoundsError::UndefinedGap { instance: k })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut out = MetricsTable::default();
    for m in &per {
        out.gap_percent += m.gap_percent / n;
        out.max_eq += m.max_eq / n;
        out.mean_eq += m.mean_eq / n;
        out.max_ineq += m.max_ineq / n;
        out.mean_ineq += m.mean_ineq / n;
    }
    Ok(out)
}

fn check_domain(r: f64, m: usize, delta: f64) -> Result<()> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(BoundsError::Domain(format!("R = {r} must be finite and non-negative")));
    }
    if m == 0 {
        return Err(BoundsError::Domain("M must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BoundsError::Domain(format!("delta = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

fn check_variance(what: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(BoundsError::Domain(format!("{what} = {v} must be finite and non-negative")))
    }
}

/// `R sqrt(ln(2 / delta) / (2 M))`.
pub fn hoeffding_eps(r: f64, m: usize, delta: f64) -> Result<f64> {
    check_domain(r, m, delta)?;
    Ok(r * ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt())
}

/// Coefficient of the range term in the empirical Bernstein bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeCoefficient {
    /// `3 R ln(3 / delta) / M`.
    #[default]
    ThreeR,
    /// `2 R ln(3 / delta) / M`.
    TwoR,
}

impl RangeCoefficient {
    fn value(self) -> f64 {
        match self {
            RangeCoefficient::ThreeR => 3.0,
            RangeCoefficient::TwoR => 2.0,
        }
    }
}

/// `sqrt(2 v ln(3 / delta) / M) + 3 R ln(3 / delta) / M`.
pub fn empirical_bernstein_eps(v_hat: f64, r: f64, m: usize, delta: f64) -> Result<f64> {
    empirical_bernstein_eps_with(v_hat, r, m, delta, RangeCoefficient::ThreeR)
}

pub fn empirical_bernstein_eps_with(
    v_hat: f64,
    r: f64,
    m: usize,
    delta: f64,
    coefficient: RangeCoefficient,
) -> Result<f64> {
    check_domain(r, m, delta)?;
    check_variance("v_hat", v_hat)?;
    let l = (3.0 / delta).ln();
    let m = m as f64;
    Ok((2.0 * v_hat * l / m).sqrt() + coefficient.value() * r * l / m)
}

/// Bernstein bound with variance `alpha * mpv`:
/// `sqrt(2 alpha mpv ln(1 / delta) / M) + 2 R ln(1 / delta) / (3 M)`.
pub fn bernstein_eps_mpv(mpv: f64, r: f64, m: usize, delta: f64, alpha: f64) -> Result<f64> {
    check_domain(r, m, delta)?;
    check_variance("mpv", mpv)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(BoundsError::Domain(format!("alpha = {alpha} must be positive")));
    }
    let l = (1.0 / delta).ln();
    let m = m as f64;
    Ok((2.0 * alpha * mpv * l / m).sqrt() + 2.0 * r * l / (3.0 * m))
}

fn check_ppms(ppms: &[Ppm]) -> Result<(usize, usize)> {
    let first = ppms
        .first()
        .ok_or_else(|| BoundsError::Shape("no PPMs".into()))?;
    let shape = first.values.shape();
    if let Some(p) = ppms.iter().find(|p| p.values.shape() != shape) {
        return Err(PosteriorError::Shape(shape, p.values.shape()).into());
    }
    Ok(shape)
}

/// Per variable, the mean over inputs of the unbiased sample variance across
/// posterior samples.
pub fn mpv(ppms: &[Ppm]) -> Result<Vec<f64>> {
    let (o, _) = check_ppms(ppms)?;
    let mut out = vec![0.0; o];
    let m = ppms.len() as f64;
    for p in ppms {
        for (acc, v) in out.iter_mut().zip(ppm_variance(p)?) {
            *acc += v / m;
        }
    }
    Ok(out)
}

/// Law of total variance over an `M x H` error matrix (rows are inputs,
/// columns are posterior samples), all with population divisors:
/// `total = within + between` with `within = E_M[V_W[e]]` and
/// `between = V_M[E_W[e]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub total: f64,
    pub within: f64,
    pub between: f64,
    /// `within` rescaled to the unbiased per-row divisor; equals [`mpv`] on
    /// the same draws.
    pub mpv: f64,
}

pub fn variance_decomposition(errors: &Matrix) -> Result<VarianceDecomposition> {
    let (m, h) = errors.shape();
    if m < 2 || h < 2 {
        return Err(BoundsError::Shape(format!("need at least 2 x 2 errors, got {m} x {h}")));
    }
    let n = (m * h) as f64;
    let grand = errors.as_slice().iter().sum::<f64>() / n;
    let total = errors.as_slice().iter().map(|e| (e - grand).powi(2)).sum::<f64>() / n;
    let mut within = 0.0;
    let mut between = 0.0;
    for k in 0..m {
        let row = errors.row_slice(k);
        let mean = row.iter().sum::<f64>() / h as f64;
        within += row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / h as f64;
        between += (mean - grand).powi(2);
    }
    within /= m as f64;
    between /= m as f64;
    Ok(VarianceDecomposition {
        total,
        within,
        between,
        mpv: within * h as f64 / (h - 1) as f64,
    })
}

/// Errors `y*_i - Y_ij` of variable `i` for every input (row) and sample
/// (column).
pub fn error_matrix(ppms: &[Ppm], labels: &[Vec<f64>], variable: usize) -> Result<Matrix> {
    let (_, h) = check_ppms(ppms)?;
    if labels.len() != ppms.len() {
        return Err(BoundsError::Shape(format!(
            "{} labels for {} PPMs",
            labels.len(),
            ppms.len()
        )));
    }
    let mut e = Matrix::zeros(ppms.len(), h);
    for (k, (p, y)) in ppms.iter().zip(labels).enumerate() {
        for j in 0..h {
            e.set(k, j, y[variable] - p.values.get(variable, j));
        }
    }
    Ok(e)
}

/// Per-variable error cap: the width of finite output bounds, else `cap`.
pub fn r_policy(bounds: &[Bound], cap: f64) -> Vec<f64> {
    bounds
        .iter()
        .map(|b| if b.is_finite() { b.width() } else { cap })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcbRow {
    pub variable_id: usize,
    pub mean_abs_err: f64,
    pub eps_hoeffding: f64,
    pub eps_emp_bernstein: f64,
    pub eps_bernstein_mpv: f64,
    pub mpv: f64,
    pub var_emp: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcbReport {
    pub confidence: f64,
    pub delta: f64,
    pub m: usize,
    pub h: usize,
    pub alpha: f64,
    pub coefficient: RangeCoefficient,
    pub rows: Vec<PcbRow>,
}

impl PcbReport {
    pub const COLUMNS: [&'static str; 10] = [
        "variable_id",
        "mean_abs_err",
        "eps_hoeffding",
        "eps_emp_bernstein",
        "eps_bernstein_mpv",
        "mpv",
        "var_emp",
        "R",
        "M",
        "delta",
    ];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Bounds on the expected absolute error of the posterior-mean prediction,
/// per output variable. `labels` supply the empirical terms; the MPV term
/// uses the PPMs alone. `var_emp` is the unbiased sample variance of the
/// signed error, which dominates that of its absolute value.
pub fn pcb_report(
    ppms: &[Ppm],
    labels: &[Vec<f64>],
    r: &[f64],
    confidence: f64,
    alpha: f64,
    coefficient: RangeCoefficient,
) -> Result<PcbReport> {
    let (o, h) = check_ppms(ppms)?;
    let m = ppms.len();
    if labels.len() != m || labels.iter().any(|y| y.len() != o) || r.len() != o {
        return Err(BoundsError::Shape("labels or R do not match the PPMs".into()));
    }
    let delta = 1.0 - confidence;
    let mpv = mpv(ppms)?;
    let means: Vec<Vec<f64>> = ppms.iter().map(ppm_mean).collect();
    let rows = (0..o)
        .map(|i| {
            let e: Vec<f64> = (0..m).map(|k| labels[k][i] - means[k][i]).collect();
            let mean_abs_err = e.iter().map(|v| v.abs()).sum::<f64>() / m as f64;
            let mean_e = e.iter().sum::<f64>() / m as f64;
            let var_emp = if m > 1 {
                e.iter().map(|v| (v - mean_e).powi(2)).sum::<f64>() / (m - 1) as f64
            } else {
                0.0
            };
            Ok(PcbRow {
                variable_id: i,
                mean_abs_err,
                eps_hoeffding: hoeffding_eps(r[i], m, delta)?,
                eps_emp_bernstein: empirical_bernstein_eps_with(var_emp, r[i], m, delta, coefficient)?,
                eps_bernstein_mpv: bernstein_eps_mpv(mpv[i], r[i], m, delta, alpha)?,
                mpv: mpv[i],
                var_emp,
                r: r[i],
                m,
                delta,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PcbReport {
        confidence,
        delta,
        m,
        h,
        alpha,
        coefficient,
        rows,
    })
}

pub const ALPHAS: [f64; 3] = [1.0, 1.5, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub run: String,
    pub variable_id: usize,
    pub v_e: f64,
    pub mpv: f64,
    pub holds_alpha_1: bool,
    pub holds_alpha_1_5: bool,
    pub holds_alpha_2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisStudy {
    pub rows: Vec<HypothesisRow>,
    /// `(alpha, fraction of rows with alpha * mpv >= v_e)`.
    pub fractions: Vec<(f64, f64)>,
}

impl HypothesisStudy {
    pub fn fraction(&self, alpha: f64) -> Option<f64> {
        self.fractions.iter().find(|(a, _)| *a == alpha).map(|(_, f)| *f)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Rows of one trained model: total error variance `v_e` over all inputs
/// and samples against `alpha * mpv`, per variable.
pub fn hypothesis_rows(run: &str, ppms: &[Ppm], labels: &[Vec<f64>]) -> Result<Vec<HypothesisRow>> {
    let (o, _) = check_ppms(ppms)?;
    let mpv = mpv(ppms)?;
    (0..o)
        .map(|i| {
            let d = variance_decomposition(&error_matrix(ppms, labels, i)?)?;
            let holds = |alpha: f64| alpha * mpv[i] >= d.total;
            Ok(HypothesisRow {
                run: run.to_string(),
                variable_id: i,
                v_e: d.total,
                mpv: mpv[i],
                holds_alpha_1: holds(1.0),
                holds_alpha_1_5: holds(1.5),
                holds_alpha_2: holds(2.0),
            })
        })
        .collect()
}

/// Pools rows over trained models.
pub fn hypothesis_study(runs: &[(String, Vec<Ppm>, Vec<Vec<f64>>)]) -> Result<HypothesisStudy> {
    if runs.is_empty() {
        return Err(BoundsError::Shape("the study needs at least one trained model".into()));
    }
    let mut rows = Vec::new();
    for (name, ppms, labels) in runs {
        rows.extend(hypothesis_rows(name, ppms, labels)?);
    }
    let n = rows.len() as f64;
    let count = |f: fn(&HypothesisRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    let fractions = vec![
        (1.0, count(|r| r.holds_alpha_1)),
        (1.5, count(|r| r.holds_alpha_1_5)),
        (2.0, count(|r| r.holds_alpha_2)),
    ];
    Ok(HypothesisStudy { rows, fractions })
}
