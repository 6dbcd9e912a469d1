//! Equality-constrained convex QP family with an exact KKT oracle:
//!
//! ```text
//! min 1/2 y'Qy - x'y   s.t.  A y = B x,   -10 <= y <= 10
//! ```
//!
//! `x` is drawn uniformly from `[-1, 1]^n`. Instances are rejected and redrawn
//! until `A` has full row rank and the box is inactive at every optimum over
//! the input hyper-rectangle, so the box never changes the oracle solution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_len, Bound, OutputGroup, Problem, ProblemError, Result, TapeResiduals};
use crate::autodiff::{Matrix, NodeId, Tape};
use crate::rng::{derive_seed, seeded};

pub const BOX_LIMIT: f64 = 10.0;
const MAX_DRAWS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    /// `n x n`, symmetric positive definite.
    pub q: Matrix,
    /// `m x n`, full row rank.
    pub a: Matrix,
    /// `m x n`; right-hand side is `B x`.
    pub b: Matrix,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub input_low: f64,
    pub input_high: f64,
    pub seed: Option<u64>,
}

impl QpProblem {
    /// Draws a random instance with `n` outputs and `m` equality rows.
    pub fn generate(n: usize, m: usize, seed: u64) -> Result<Self> {
        if m < 1 || m >= n {
            return Err(ProblemError::InvalidParameters(format!(
                "need 1 <= m < n, got n = {n}, m = {m}"
            )));
        }
        for draw in 0..MAX_DRAWS {
            let mut rng = seeded(derive_seed(seed, draw));
            let mut normal = |rows: usize, cols: usize, scale: f64| {
                let data = (0..rows * cols)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            };
            let l = normal(n, n, 1.0);
            let a = normal(m, n, 1.0);
            let b = normal(m, n, 0.5);
            // Q = I + L'L / n
            let mut q = l.transpose().matmul(&l);
            for v in q.as_mut_slice() {
                *v /= n as f64;
            }
            for i in 0..n {
                q.set(i, i, q.get(i, i) + 1.0);
            }
            let candidate = Self::from_matrices(q, a, b)?;
            if candidate.accept().is_none() {
                continue;
            }
            return Ok(Self {
                seed: Some(seed),
                ..candidate
            });
        }
        Err(ProblemError::InvalidParameters(format!(
            "no acceptable QP instance in {MAX_DRAWS} draws"
        )))
    }

    /// Builds an instance from explicit matrices with the default box and
    /// input range. Shapes are validated; rank is not.
    pub fn from_matrices(q: Matrix, a: Matrix, b: Matrix) -> Result<Self> {
        let n = q.rows();
        if q.cols() != n || a.cols() != n || b.rows() != a.rows() {
            return Err(ProblemError::InvalidParameters(format!(
                "inconsistent shapes Q {:?}, A {:?}, B {:?}",
                q.shape(),
                a.shape(),
                b.shape()
            )));
        }
        if b.cols() != n {
            return Err(ProblemError::InvalidParameters(
                "B must have one column per output".into(),
            ));
        }
        Ok(Self {
            q,
            a,
            b,
            lower: vec![-BOX_LIMIT; n],
            upper: vec![BOX_LIMIT; n],
            input_low: -1.0,
            input_high: 1.0,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    fn kkt(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut k = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = self.q.get(i, j);
            }
        }
        for r in 0..m {
            for j in 0..n {
                k[(n + r, j)] = self.a.get(r, j);
                k[(j, n + r)] = self.a.get(r, j);
            }
        }
        k
    }

    /// Accepts when `A` has full row rank and the box is inactive over the
    /// whole input range. Returns `None` to request a redraw.
    fn accept(&self) -> Option<()> {
        let (n, m) = (self.n(), self.m());
        let a = DMatrix::from_row_slice(m, n, self.a.as_slice());
        if a.rank(1e-8) < m {
            return None;
        }
        // y*(x) is linear in x: y* = K x. Column j of K is the solution for e_j.
        let lu = self.kkt().lu();
        let mut row_abs_sum = vec![0.0; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let rhs = self.kkt_rhs(&e);
            let sol = lu.solve(&rhs)?;
            for i in 0..n {
                row_abs_sum[i] += sol[i].abs();
            }
        }
        let span = self.input_high.abs().max(self.input_low.abs());
        let worst = row_abs_sum.iter().fold(0.0_f64, |a, &b| a.max(b)) * span;
        (worst < 0.5 * BOX_LIMIT).then_some(())
    }

    fn kkt_rhs(&self, x: &[f64]) -> DVector<f64> {
        let (n, m) = (self.n(), self.m());
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            rhs[i] = x[i];
        }
        for r in 0..m {
            rhs[n + r] = (0..n).map(|j| self.b.get(r, j) * x[j]).sum();
        }
        rhs
    }

    /// Exact optimum from the KKT system `[Q A'; A 0] [y; nu] = [x; Bx]`.
    pub fn solve_oracle(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("x", self.n(), x.len())?;
        let sol = self
            .kkt()
            .lu()
            .solve(&self.kkt_rhs(x))
            .ok_or(ProblemError::SingularKkt)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::SingularKkt);
        }
        Ok(sol.iter().take(self.n()).copied().collect())
    }

    /// Solves many inputs with one factorization.
    pub fn solve_oracle_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let lu = self.kkt().lu();
        xs.iter()
            .map(|x| {
                check_len("x", self.n(), x.len())?;
                let sol = lu
                    .solve(&self.kkt_rhs(x))
                    .ok_or(ProblemError::SingularKkt)?;
                Ok(sol.iter().take(self.n()).copied().collect())
            })
            .collect()
    }

    /// Orthonormal basis of the null space of `A`, used for optimality checks.
    pub fn null_space(&self) -> Vec<Vec<f64>> {
        let (n, m) = (self.n(), self.m());
        let a = DMatrix::from_row_slice(m, n, self.a.as_slice());
        let aat = &a * a.transpose();
        let Some(inv) = aat.try_inverse() else {
            return Vec::new();
        };
        // Projector onto null(A); its unit singular directions span the space.
        let proj = DMatrix::identity(n, n) - a.transpose() * inv * &a;
        let svd = proj.svd(true, false);
        let u = svd.u.expect("requested U");
        svd.singular_values
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.5)
            .map(|(j, _)| u.column(j).iter().copied().collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("QP serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| ProblemError::Record(e.to_string()))?;
        let n = p.n();
        if p.q.cols() != n || p.a.cols() != n || p.b.shape() != (p.m(), n) {
            return Err(ProblemError::InvalidParameters("inconsistent QP shapes".into()));
        }
        check_len("lower", n, p.lower.len())?;
        check_len("upper", n, p.upper.len())?;
        Ok(p)
    }
}

impl Problem for QpProblem {
    fn name(&self) -> &str {
        "qp"
    }

    fn input_dim(&self) -> usize {
        self.n()
    }

    fn output_dim(&self) -> usize {
        self.n()
    }

    fn eq_count(&self) -> usize {
        self.m()
    }

    fn ineq_count(&self) -> usize {
        2 * self.n()
    }

    fn cost(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let n = self.n();
        check_len("x", n, x.len())?;
        check_len("y", n, y.len())?;
        let mut quad = 0.0;
        for i in 0..n {
            let qy: f64 = (0..n).map(|j| self.q.get(i, j) * y[j]).sum();
            quad += y[i] * qy;
        }
        let lin: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad - lin)
    }

    fn eq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        check_len("x", n, x.len())?;
        check_len("y", n, y.len())?;
        Ok((0..self.m())
            .map(|r| {
                (0..n)
                    .map(|j| self.a.get(r, j) * y[j] - self.b.get(r, j) * x[j])
                    .sum()
            })
            .collect())
    }

    fn ineq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_len("x", self.n(), x.len())?;
        check_len("y", self.n(), y.len())?;
        let mut out: Vec<f64> = self.lower.iter().zip(y).map(|(l, v)| l - v).collect();
        out.extend(y.iter().zip(&self.upper).map(|(v, u)| v - u));
        Ok(out)
    }

    fn output_bounds(&self) -> Vec<Bound> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| Bound::new(l, u))
            .collect()
    }

    fn output_groups(&self) -> Vec<OutputGroup> {
        vec![OutputGroup {
            label: "y".into(),
            len: self.n(),
        }]
    }

    fn sample_inputs(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        let (lo, hi) = (self.input_low, self.input_high);
        (0..n)
            .map(|_| (0..self.n()).map(|_| rng.random_range(lo..=hi)).collect())
            .collect()
    }

    fn record_residuals(&self, tape: &mut Tape, x: &Matrix, y: NodeId) -> TapeResiduals {
        let rhs = tape.constant(x.matmul(&self.b.transpose()));
        let at = tape.constant(self.a.transpose());
        let ay = tape.matmul(y, at);
        let eq = tape.sub(ay, rhs);

        let lower = tape.constant(Matrix::row(&self.lower));
        let upper = tape.constant(Matrix::row(&self.upper));
        let below = tape.sub(lower, y);
        let above = tape.sub(y, upper);
        let ineq = tape.concat_cols(vec![below, above]);
        TapeResiduals { eq, ineq }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{feasibility, record_feasibility};
    use approx::assert_abs_diff_eq;

    fn toy() -> QpProblem {
        QpProblem::from_matrices(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            Matrix::from_vec(1, 2, vec![1.0, 1.0]),
            Matrix::zeros(1, 2),
        )
        .unwrap()
    }

    #[test]
    fn hand_kkt_example() {
        let y = toy().solve_oracle(&[1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_solution() {
        let y = toy().solve_oracle(&[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(QpProblem::generate(3, 0, 1).is_err());
        assert!(QpProblem::generate(3, 3, 1).is_err());
        assert!(QpProblem::generate(2, 1, 1).is_ok());
    }

    #[test]
    fn generated_oracle_is_feasible() {
        let p = QpProblem::generate(8, 2, 42).unwrap();
        for x in p.sample_inputs(100, 9) {
            let y = p.solve_oracle(&x).unwrap();
            let g = p.eq_residuals(&x, &y).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
            let h = p.ineq_residuals(&x, &y).unwrap();
            assert!(h.iter().all(|&v| v < 0.0));
        }
    }

    #[test]
    fn oracle_is_optimal_along_null_space() {
        use rand::Rng;
        let p = QpProblem::generate(6, 2, 5).unwrap();
        let basis = p.null_space();
        assert_eq!(basis.len(), 4);
        for v in &basis {
            let av = p.eq_residuals(&[0.0; 6], v).unwrap();
            assert!(av.iter().all(|r| r.abs() < 1e-10));
        }
        let mut rng = seeded(3);
        let x = p.sample_inputs(1, 17).remove(0);
        let y = p.solve_oracle(&x).unwrap();
        let c0 = p.cost(&x, &y).unwrap();
        for _ in 0..100 {
            let mut z = y.clone();
            for v in &basis {
                let t: f64 = rng.random_range(-1.0..1.0);
                for (zi, vi) in z.iter_mut().zip(v) {
                    *zi += t * vi;
                }
            }
            assert!(p.eq_residuals(&x, &z).unwrap().iter().all(|r| r.abs() < 1e-9));
            assert!(p.cost(&x, &z).unwrap() >= c0 - 1e-10);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_fills_the_box() {
        let p = QpProblem::generate(3, 1, 0).unwrap();
        assert_eq!(p.sample_inputs(5, 1), p.sample_inputs(5, 1));
        let xs = p.sample_inputs(10_000, 2);
        for j in 0..3 {
            let (mn, mx) = xs
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x[j]), b.max(x[j])));
            assert!((-1.0..=-0.99).contains(&mn), "{mn}");
            assert!((0.99..=1.0).contains(&mx), "{mx}");
        }
    }

    #[test]
    fn json_round_trip() {
        let p = QpProblem::generate(4, 1, 8).unwrap();
        let back = QpProblem::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn tape_residuals_match_direct_evaluation() {
        let p = QpProblem::generate(5, 2, 13).unwrap();
        let xs = p.sample_inputs(4, 1);
        let ys: Vec<Vec<f64>> = p.sample_inputs(4, 2).iter().map(|v| v.iter().map(|a| 12.0 * a).collect()).collect();
        let xm = Matrix::from_rows(&xs, 5);
        let mut t = Tape::new();
        let y = t.leaf(4, 5);
        let r = p.record_residuals(&mut t, &xm, y);
        let f = record_feasibility(&mut t, r, 1.0, 0.5);
        t.mark_output(r.eq);
        t.mark_output(r.ineq);
        t.mark_output(f);
        let flat: Vec<f64> = ys.iter().flatten().copied().collect();
        let out = t.evaluate(&[flat]).unwrap();
        for k in 0..4 {
            let g = p.eq_residuals(&xs[k], &ys[k]).unwrap();
            let h = p.ineq_residuals(&xs[k], &ys[k]).unwrap();
            for (i, v) in g.iter().enumerate() {
                assert_abs_diff_eq!(out[0].get(k, i), v, epsilon = 1e-12);
            }
            for (i, v) in h.iter().enumerate() {
                assert_abs_diff_eq!(out[1].get(k, i), v, epsilon = 1e-12);
            }
            let fk = feasibility(&p, &xs[k], &ys[k], 1.0, 0.5).unwrap();
            assert_abs_diff_eq!(out[2].get(k, 0), fk, epsilon = 1e-9 * (1.0 + fk));
        }
    }

    #[test]
    fn feasibility_vanishes_at_feasible_points() {
        let p = QpProblem::generate(4, 2, 21).unwrap();
        for x in p.sample_inputs(20, 4) {
            let y = p.solve_oracle(&x).unwrap();
            assert!(feasibility(&p, &x, &y, 3.0, 7.0).unwrap() <= 1e-14);
        }
    }
}
