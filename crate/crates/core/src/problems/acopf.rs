//! AC optimal power flow in polar voltage coordinates.
//!
//! Decisions are `y = [pg; qg; vm; va]` (generator dispatch, bus voltage
//! magnitude and angle, per unit and radians). Inputs are the real and
//! reactive demands of every load with nonzero nominal demand, ordered by
//! load index: `x = [pd; qd]`.
//!
//! Branches use the pi model with a complex transformer ratio `T` on the
//! from side:
//!
//! ```text
//! S_ij = conj(Y + Yc_ij) |V_i|^2 / |T|^2 - conj(Y) V_i conj(V_j) / T
//! S_ji = conj(Y + Yc_ji) |V_j|^2        - conj(Y) V_j conj(V_i) / conj(T)
//! ```
//!
//! The direct evaluator uses complex arithmetic; the tape recording expands
//! the same flows into `sin`/`cos` terms.

use std::collections::HashMap;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_len, Bound, OutputGroup, Problem, ProblemError, Result, Sample, TapeResiduals,
};
use crate::autodiff::{Matrix, NodeId, Tape};
use crate::rng::seeded;

fn default_base_mva() -> f64 {
    100.0
}

fn unit_tap() -> Complex64 {
    Complex64::new(1.0, 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: i64,
    pub v_l: f64,
    pub v_u: f64,
    #[serde(default)]
    pub reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub bus: i64,
    /// Lower complex power bound `[p, q]`.
    pub s_l: Complex64,
    pub s_u: Complex64,
    /// `[c2, c1, c0]` applied to real power in per unit.
    pub cost: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub bus: i64,
    /// Nominal complex demand `[pd, qd]`.
    pub s_d: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shunt {
    pub bus: i64,
    /// Admittance `[g, b]`.
    pub y_s: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: i64,
    pub to: i64,
    /// Series admittance `[g, b]`.
    pub y: Complex64,
    /// Charging admittance at the from end.
    #[serde(default)]
    pub y_c_fr: Complex64,
    /// Charging admittance at the to end.
    #[serde(default)]
    pub y_c_to: Complex64,
    /// Complex transformer ratio `[tm cos(shift), tm sin(shift)]`.
    #[serde(default = "unit_tap")]
    pub t: Complex64,
    /// Apparent power limit; absent means unconstrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_u: Option<f64>,
    /// Current limit; absent disables the constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_u: Option<f64>,
}

/// Network data in per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcopfCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub loads: Vec<Load>,
    #[serde(default)]
    pub shunts: Vec<Shunt>,
    #[serde(default)]
    pub branches: Vec<Branch>,
}

fn case_error(path: impl Into<String>, message: impl Into<String>) -> ProblemError {
    ProblemError::Case {
        path: path.into(),
        message: message.into(),
    }
}

impl AcopfCase {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let case: Self =
            serde_json::from_str(s).map_err(|e| case_error("$", format!("schema: {e}")))?;
        case.validate()?;
        Ok(case)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&text).map_err(|e| match e {
            ProblemError::Case { path: field, message } => case_error(
                field,
                format!("{} ({})", message, path.as_ref().display()),
            ),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    /// Checks index consistency and bound ordering.
    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(case_error("buses", "at least one bus is required"));
        }
        let mut ids = HashMap::new();
        for (k, b) in self.buses.iter().enumerate() {
            if ids.insert(b.id, k).is_some() {
                return Err(case_error(format!("buses[{k}].id"), format!("duplicate bus id {}", b.id)));
            }
            if !(b.v_l.is_finite() && b.v_u.is_finite()) || b.v_l > b.v_u {
                return Err(case_error(
                    format!("buses[{k}]"),
                    format!("bus {}: v_l = {} exceeds v_u = {}", b.id, b.v_l, b.v_u),
                ));
            }
        }
        if !self.buses.iter().any(|b| b.reference) {
            return Err(case_error("buses", "no reference bus"));
        }
        let check_bus = |path: String, id: i64| -> Result<()> {
            if ids.contains_key(&id) {
                Ok(())
            } else {
                Err(case_error(path, format!("unknown bus id {id}")))
            }
        };
        for (k, g) in self.generators.iter().enumerate() {
            check_bus(format!("generators[{k}].bus"), g.bus)?;
            if g.s_l.re > g.s_u.re || g.s_l.im > g.s_u.im {
                return Err(case_error(
                    format!("generators[{k}]"),
                    "lower power bound exceeds upper bound",
                ));
            }
        }
        for (k, l) in self.loads.iter().enumerate() {
            check_bus(format!("loads[{k}].bus"), l.bus)?;
        }
        for (k, s) in self.shunts.iter().enumerate() {
            check_bus(format!("shunts[{k}].bus"), s.bus)?;
        }
        for (k, br) in self.branches.iter().enumerate() {
            check_bus(format!("branches[{k}].from"), br.from)?;
            check_bus(format!("branches[{k}].to"), br.to)?;
            if br.t.norm_sqr() == 0.0 {
                return Err(case_error(format!("branches[{k}].t"), "zero transformer ratio"));
            }
            if let (Some(l), Some(u)) = (br.theta_l, br.theta_u) {
                if l > u {
                    return Err(case_error(
                        format!("branches[{k}]"),
                        format!("theta_l = {l} exceeds theta_u = {u}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Structured view of an ACOPF output vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcopfDecision {
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl AcopfDecision {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (self.pg.len() + self.vm.len()));
        v.extend_from_slice(&self.pg);
        v.extend_from_slice(&self.qg);
        v.extend_from_slice(&self.vm);
        v.extend_from_slice(&self.va);
        v
    }
}

/// Demand vector in its record form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
}

/// Per-branch polar flow coefficients; each flow is
/// `k1 * vm_end^2 + k2 * vv cos(d) + k3 * vv sin(d)` with `vv = vm_i vm_j` and
/// `d = va_i - va_j`.
#[derive(Clone, Debug, Default)]
struct FlowCoefficients {
    p_fr: [Vec<f64>; 3],
    q_fr: [Vec<f64>; 3],
    p_to: [Vec<f64>; 3],
    q_to: [Vec<f64>; 3],
}

#[derive(Clone, Debug)]
pub struct AcopfProblem {
    case: AcopfCase,
    gen_bus: Vec<usize>,
    load_bus: Vec<usize>,
    shunt_bus: Vec<usize>,
    branch_ends: Vec<(usize, usize)>,
    ref_buses: Vec<usize>,
    /// Loads with nonzero nominal demand, ascending.
    active_loads: Vec<usize>,
    rated: Vec<usize>,
    current_limited: Vec<usize>,
    angle_lower: Vec<usize>,
    angle_upper: Vec<usize>,
    coeffs: FlowCoefficients,
    load_interval: (f64, f64),
}

impl AcopfProblem {
    pub fn new(case: AcopfCase) -> Result<Self> {
        case.validate()?;
        let index: HashMap<i64, usize> =
            case.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
        let gen_bus = case.generators.iter().map(|g| index[&g.bus]).collect();
        let load_bus = case.loads.iter().map(|l| index[&l.bus]).collect();
        let shunt_bus = case.shunts.iter().map(|s| index[&s.bus]).collect();
        let branch_ends = case
            .branches
            .iter()
            .map(|b| (index[&b.from], index[&b.to]))
            .collect();
        let ref_buses = case
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.reference)
            .map(|(k, _)| k)
            .collect();
        let active_loads = case
            .loads
            .iter()
            .enumerate()
            .filter(|(_, l)| l.s_d.re != 0.0 || l.s_d.im != 0.0)
            .map(|(k, _)| k)
            .collect();
        let pick = |f: &dyn Fn(&Branch) -> bool| -> Vec<usize> {
            case.branches
                .iter()
                .enumerate()
                .filter(|(_, b)| f(b))
                .map(|(k, _)| k)
                .collect()
        };
        let rated = pick(&|b| b.s_u.is_some());
        let current_limited = pick(&|b| b.i_u.is_some());
        let angle_lower = pick(&|b| b.theta_l.is_some());
        let angle_upper = pick(&|b| b.theta_u.is_some());

        let mut coeffs = FlowCoefficients::default();
        for br in &case.branches {
            let (g, b) = (br.y.re, br.y.im);
            let (tr, ti) = (br.t.re, br.t.im);
            let tm2 = br.t.norm_sqr();
            let c2 = (-g * tr + b * ti) / tm2;
            let c3 = (-b * tr - g * ti) / tm2;
            let d2 = (-g * tr - b * ti) / tm2;
            let d3 = (b * tr - g * ti) / tm2;
            let push = |dst: &mut [Vec<f64>; 3], k: [f64; 3]| {
                for (d, v) in dst.iter_mut().zip(k) {
                    d.push(v);
                }
            };
            push(&mut coeffs.p_fr, [(g + br.y_c_fr.re) / tm2, c2, c3]);
            push(&mut coeffs.q_fr, [-(b + br.y_c_fr.im) / tm2, -c3, c2]);
            push(&mut coeffs.p_to, [g + br.y_c_to.re, d2, d3]);
            push(&mut coeffs.q_to, [-(b + br.y_c_to.im), d3, -d2]);
        }

        Ok(Self {
            case,
            gen_bus,
            load_bus,
            shunt_bus,
            branch_ends,
            ref_buses,
            active_loads,
            rated,
            current_limited,
            angle_lower,
            angle_upper,
            coeffs,
            load_interval: (0.8, 1.2),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(AcopfCase::load(path)?)
    }

    /// Per-load scaling interval used by [`Problem::sample_inputs`].
    pub fn with_load_interval(mut self, low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite()) || low > high {
            return Err(ProblemError::InvalidParameters(format!(
                "load interval [{low}, {high}]"
            )));
        }
        self.load_interval = (low, high);
        Ok(self)
    }

    pub fn case(&self) -> &AcopfCase {
        &self.case
    }

    fn nb(&self) -> usize {
        self.case.buses.len()
    }

    fn ng(&self) -> usize {
        self.case.generators.len()
    }

    fn na(&self) -> usize {
        self.active_loads.len()
    }

    /// Nominal demand in input layout.
    pub fn nominal_input(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self
            .active_loads
            .iter()
            .map(|&k| self.case.loads[k].s_d.re)
            .collect();
        x.extend(self.active_loads.iter().map(|&k| self.case.loads[k].s_d.im));
        x
    }

    pub fn decision(&self, y: &[f64]) -> Result<AcopfDecision> {
        check_len("y", self.output_dim(), y.len())?;
        let (ng, nb) = (self.ng(), self.nb());
        Ok(AcopfDecision {
            pg: y[..ng].to_vec(),
            qg: y[ng..2 * ng].to_vec(),
            vm: y[2 * ng..2 * ng + nb].to_vec(),
            va: y[2 * ng + nb..].to_vec(),
        })
    }

    fn bus_demand(&self, x: &[f64]) -> Vec<Complex64> {
        let na = self.na();
        let mut d = vec![Complex64::new(0.0, 0.0); self.nb()];
        for (k, &l) in self.active_loads.iter().enumerate() {
            d[self.load_bus[l]] += Complex64::new(x[k], x[na + k]);
        }
        d
    }

    /// Complex flows `(S_ij, S_ji)` per branch from the complex formulation.
    pub fn branch_flows(&self, vm: &[f64], va: &[f64]) -> Vec<(Complex64, Complex64)> {
        self.case
            .branches
            .iter()
            .zip(&self.branch_ends)
            .map(|(br, &(i, j))| {
                let vi = Complex64::from_polar(vm[i], va[i]);
                let vj = Complex64::from_polar(vm[j], va[j]);
                let yc = br.y.conj();
                let s_ij = (br.y + br.y_c_fr).conj() * vi.norm_sqr() / br.t.norm_sqr()
                    - yc * vi * vj.conj() / br.t;
                let s_ji = (br.y + br.y_c_to).conj() * vj.norm_sqr() - yc * vj * vi.conj() / br.t.conj();
                (s_ij, s_ji)
            })
            .collect()
    }

    fn check_xy(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_len("x", self.input_dim(), x.len())?;
        check_len("y", self.output_dim(), y.len())
    }

    pub fn encode_demand(&self, x: &[f64]) -> Demand {
        let na = self.na();
        Demand {
            pd: x[..na].to_vec(),
            qd: x[na..].to_vec(),
        }
    }
}

impl Problem for AcopfProblem {
    fn name(&self) -> &str {
        "acopf"
    }

    fn input_dim(&self) -> usize {
        2 * self.na()
    }

    fn output_dim(&self) -> usize {
        2 * self.ng() + 2 * self.nb()
    }

    fn eq_count(&self) -> usize {
        2 * self.nb() + self.ref_buses.len()
    }

    fn ineq_count(&self) -> usize {
        4 * self.ng()
            + 2 * self.nb()
            + 2 * self.rated.len()
            + 2 * self.current_limited.len()
            + self.angle_lower.len()
            + self.angle_upper.len()
    }

    fn cost(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_xy(x, y)?;
        Ok(self
            .case
            .generators
            .iter()
            .zip(y)
            .map(|(g, &p)| g.cost[0] * p * p + g.cost[1] * p + g.cost[2])
            .sum())
    }

    fn eq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_xy(x, y)?;
        let d = self.decision(y)?;
        let mut balance = self.bus_demand(x).iter().map(|s| -s).collect::<Vec<_>>();
        for (k, &bus) in self.gen_bus.iter().enumerate() {
            balance[bus] += Complex64::new(d.pg[k], d.qg[k]);
        }
        for (sh, &bus) in self.case.shunts.iter().zip(&self.shunt_bus) {
            balance[bus] -= sh.y_s.conj() * d.vm[bus] * d.vm[bus];
        }
        for (&(i, j), (s_ij, s_ji)) in self.branch_ends.iter().zip(self.branch_flows(&d.vm, &d.va)) {
            balance[i] -= s_ij;
            balance[j] -= s_ji;
        }
        let mut out: Vec<f64> = balance.iter().map(|s| s.re).collect();
        out.extend(balance.iter().map(|s| s.im));
        out.extend(self.ref_buses.iter().map(|&r| d.va[r]));
        Ok(out)
    }

    fn ineq_residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_xy(x, y)?;
        let d = self.decision(y)?;
        let gens = &self.case.generators;
        let buses = &self.case.buses;
        let mut out = Vec::with_capacity(self.ineq_count());
        out.extend(gens.iter().zip(&d.pg).map(|(g, p)| g.s_l.re - p));
        out.extend(gens.iter().zip(&d.pg).map(|(g, p)| p - g.s_u.re));
        out.extend(gens.iter().zip(&d.qg).map(|(g, q)| g.s_l.im - q));
        out.extend(gens.iter().zip(&d.qg).map(|(g, q)| q - g.s_u.im));
        out.extend(buses.iter().zip(&d.vm).map(|(b, v)| b.v_l - v));
        out.extend(buses.iter().zip(&d.vm).map(|(b, v)| v - b.v_u));
        let flows = self.branch_flows(&d.vm, &d.va);
        let br = &self.case.branches;
        out.extend(self.rated.iter().map(|&k| flows[k].0.norm() - br[k].s_u.unwrap()));
        out.extend(self.rated.iter().map(|&k| flows[k].1.norm() - br[k].s_u.unwrap()));
        out.extend(self.current_limited.iter().map(|&k| {
            flows[k].0.norm() - d.vm[self.branch_ends[k].0] * br[k].i_u.unwrap()
        }));
        out.extend(self.current_limited.iter().map(|&k| {
            flows[k].1.norm() - d.vm[self.branch_ends[k].1] * br[k].i_u.unwrap()
        }));
        let diff = |k: usize| {
            let (i, j) = self.branch_ends[k];
            (Complex64::from_polar(1.0, d.va[i]) * Complex64::from_polar(1.0, d.va[j]).conj()).arg()
        };
        out.extend(self.angle_lower.iter().map(|&k| br[k].theta_l.unwrap() - diff(k)));
        out.extend(self.angle_upper.iter().map(|&k| diff(k) - br[k].theta_u.unwrap()));
        Ok(out)
    }

    fn output_bounds(&self) -> Vec<Bound> {
        let gens = &self.case.generators;
        let mut b: Vec<Bound> = gens.iter().map(|g| Bound::new(g.s_l.re, g.s_u.re)).collect();
        b.extend(gens.iter().map(|g| Bound::new(g.s_l.im, g.s_u.im)));
        b.extend(self.case.buses.iter().map(|bus| Bound::new(bus.v_l, bus.v_u)));
        b.extend(std::iter::repeat_n(Bound::FREE, self.nb()));
        b
    }

    fn output_groups(&self) -> Vec<OutputGroup> {
        let (ng, nb) = (self.ng(), self.nb());
        [("pg", ng), ("qg", ng), ("vm", nb), ("va", nb)]
            .into_iter()
            .map(|(label, len)| OutputGroup {
                label: label.into(),
                len,
            })
            .collect()
    }

    fn sample_inputs(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        let (lo, hi) = self.load_interval;
        let nominal = self.nominal_input();
        let na = self.na();
        (0..n)
            .map(|_| {
                let mut x = nominal.clone();
                for k in 0..na {
                    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                    x[k] *= s;
                    x[na + k] *= s;
                }
                x
            })
            .collect()
    }

    fn record_residuals(&self, tape: &mut Tape, x: &Matrix, y: NodeId) -> TapeResiduals {
        let (ng, nb) = (self.ng(), self.nb());
        let nbr = self.case.branches.len();
        let batch = x.rows();
        let range = |start: usize, len: usize| (start..start + len).collect::<Vec<_>>();

        let pg = tape.select_cols(y, range(0, ng));
        let qg = tape.select_cols(y, range(ng, ng));
        let vm = tape.select_cols(y, range(2 * ng, nb));
        let va = tape.select_cols(y, range(2 * ng + nb, nb));

        // Demand aggregated per bus is data, not a function of y.
        let mut pd_bus = Matrix::zeros(batch, nb);
        let mut qd_bus = Matrix::zeros(batch, nb);
        for r in 0..batch {
            let d = self.bus_demand(x.row_slice(r));
            for (k, s) in d.iter().enumerate() {
                pd_bus.set(r, k, s.re);
                qd_bus.set(r, k, s.im);
            }
        }

        let mut gen_map = Matrix::zeros(ng, nb);
        for (k, &bus) in self.gen_bus.iter().enumerate() {
            gen_map.set(k, bus, 1.0);
        }
        let gen_map = tape.constant(gen_map);
        let pg_bus = tape.matmul(pg, gen_map);
        let qg_bus = tape.matmul(qg, gen_map);

        let mut gs = vec![0.0; nb];
        let mut bs = vec![0.0; nb];
        for (sh, &bus) in self.case.shunts.iter().zip(&self.shunt_bus) {
            gs[bus] += sh.y_s.re;
            bs[bus] -= sh.y_s.im;
        }
        let vm2 = tape.square(vm);
        let gs = tape.constant(Matrix::row(&gs));
        let bs = tape.constant(Matrix::row(&bs));
        let p_sh = tape.mul(vm2, gs);
        let q_sh = tape.mul(vm2, bs);

        let pd_bus = tape.constant(pd_bus);
        let qd_bus = tape.constant(qd_bus);
        let mut p_bal = tape.sub(pg_bus, pd_bus);
        p_bal = tape.sub(p_bal, p_sh);
        let mut q_bal = tape.sub(qg_bus, qd_bus);
        q_bal = tape.sub(q_bal, q_sh);

        let mut ineq_parts = Vec::new();
        let gens = &self.case.generators;
        let row = |tape: &mut Tape, v: Vec<f64>| tape.constant(Matrix::row(&v));
        let pl = row(tape, gens.iter().map(|g| g.s_l.re).collect());
        let pu = row(tape, gens.iter().map(|g| g.s_u.re).collect());
        let ql = row(tape, gens.iter().map(|g| g.s_l.im).collect());
        let qu = row(tape, gens.iter().map(|g| g.s_u.im).collect());
        let vl = row(tape, self.case.buses.iter().map(|b| b.v_l).collect());
        let vu = row(tape, self.case.buses.iter().map(|b| b.v_u).collect());
        if ng > 0 {
            ineq_parts.push(tape.sub(pl, pg));
            ineq_parts.push(tape.sub(pg, pu));
            ineq_parts.push(tape.sub(ql, qg));
            ineq_parts.push(tape.sub(qg, qu));
        }
        ineq_parts.push(tape.sub(vl, vm));
        ineq_parts.push(tape.sub(vm, vu));

        if nbr > 0 {
            let from: Vec<usize> = self.branch_ends.iter().map(|e| e.0).collect();
            let to: Vec<usize> = self.branch_ends.iter().map(|e| e.1).collect();
            let vm_f = tape.select_cols(vm, from.clone());
            let vm_t = tape.select_cols(vm, to.clone());
            let va_f = tape.select_cols(va, from.clone());
            let va_t = tape.select_cols(va, to.clone());
            let dth = tape.sub(va_f, va_t);
            let cos = tape.cos(dth);
            let sin = tape.sin(dth);
            let vv = tape.mul(vm_f, vm_t);
            let vvc = tape.mul(vv, cos);
            let vvs = tape.mul(vv, sin);
            let vf2 = tape.square(vm_f);
            let vt2 = tape.square(vm_t);

            let flow = |tape: &mut Tape, k: &[Vec<f64>; 3], end2: NodeId| {
                let c1 = tape.constant(Matrix::row(&k[0]));
                let c2 = tape.constant(Matrix::row(&k[1]));
                let c3 = tape.constant(Matrix::row(&k[2]));
                let a = tape.mul(c1, end2);
                let b = tape.mul(c2, vvc);
                let c = tape.mul(c3, vvs);
                let ab = tape.add(a, b);
                tape.add(ab, c)
            };
            let p_fr = flow(tape, &self.coeffs.p_fr, vf2);
            let q_fr = flow(tape, &self.coeffs.q_fr, vf2);
            let p_to = flow(tape, &self.coeffs.p_to, vt2);
            let q_to = flow(tape, &self.coeffs.q_to, vt2);

            let mut cf = Matrix::zeros(nbr, nb);
            let mut ct = Matrix::zeros(nbr, nb);
            for (k, &(i, j)) in self.branch_ends.iter().enumerate() {
                cf.set(k, i, 1.0);
                ct.set(k, j, 1.0);
            }
            let cf = tape.constant(cf);
            let ct = tape.constant(ct);
            let pf_bus = tape.matmul(p_fr, cf);
            let pt_bus = tape.matmul(p_to, ct);
            let qf_bus = tape.matmul(q_fr, cf);
            let qt_bus = tape.matmul(q_to, ct);
            p_bal = tape.sub(p_bal, pf_bus);
            p_bal = tape.sub(p_bal, pt_bus);
            q_bal = tape.sub(q_bal, qf_bus);
            q_bal = tape.sub(q_bal, qt_bus);

            let magnitude = |tape: &mut Tape, p: NodeId, q: NodeId| {
                let p2 = tape.square(p);
                let q2 = tape.square(q);
                let s2 = tape.add(p2, q2);
                tape.sqrt(s2)
            };
            let brs = &self.case.branches;
            if !self.rated.is_empty() || !self.current_limited.is_empty() {
                let s_fr = magnitude(tape, p_fr, q_fr);
                let s_to = magnitude(tape, p_to, q_to);
                if !self.rated.is_empty() {
                    let limit = row(tape, self.rated.iter().map(|&k| brs[k].s_u.unwrap()).collect());
                    let sf = tape.select_cols(s_fr, self.rated.clone());
                    let st = tape.select_cols(s_to, self.rated.clone());
                    ineq_parts.push(tape.sub(sf, limit));
                    ineq_parts.push(tape.sub(st, limit));
                }
                if !self.current_limited.is_empty() {
                    let iu = row(
                        tape,
                        self.current_limited.iter().map(|&k| brs[k].i_u.unwrap()).collect(),
                    );
                    let sf = tape.select_cols(s_fr, self.current_limited.clone());
                    let st = tape.select_cols(s_to, self.current_limited.clone());
                    let vf = tape.select_cols(vm_f, self.current_limited.clone());
                    let vt = tape.select_cols(vm_t, self.current_limited.clone());
                    let cap_f = tape.mul(vf, iu);
                    let cap_t = tape.mul(vt, iu);
                    ineq_parts.push(tape.sub(sf, cap_f));
                    ineq_parts.push(tape.sub(st, cap_t));
                }
            }
            if !self.angle_lower.is_empty() {
                let lim = row(
                    tape,
                    self.angle_lower.iter().map(|&k| brs[k].theta_l.unwrap()).collect(),
                );
                let d = tape.select_cols(dth, self.angle_lower.clone());
                ineq_parts.push(tape.sub(lim, d));
            }
            if !self.angle_upper.is_empty() {
                let lim = row(
                    tape,
                    self.angle_upper.iter().map(|&k| brs[k].theta_u.unwrap()).collect(),
                );
                let d = tape.select_cols(dth, self.angle_upper.clone());
                ineq_parts.push(tape.sub(d, lim));
            }
        }

        let mut eq_parts = vec![p_bal, q_bal];
        if !self.ref_buses.is_empty() {
            eq_parts.push(tape.select_cols(va, self.ref_buses.clone()));
        }
        let eq = tape.concat_cols(eq_parts);
        let ineq = tape.concat_cols(ineq_parts);
        TapeResiduals { eq, ineq }
    }

    fn encode_record(&self, sample: &Sample) -> Value {
        let mut v = json!({ "x": self.encode_demand(&sample.x) });
        if let Some(y) = &sample.y {
            v["y"] = json!(self.decision(y).expect("decision length checked by caller"));
        }
        if let Some(obj) = sample.objective {
            v["objective"] = json!(obj);
        }
        v
    }

    fn decode_record(&self, value: &Value) -> Result<Sample> {
        let x_val = value
            .get("x")
            .ok_or_else(|| ProblemError::Record("missing `x`".into()))?;
        let demand: Demand = serde_json::from_value(x_val.clone())
            .map_err(|e| ProblemError::Record(format!("field `x`: {e}")))?;
        check_len("x.pd", self.na(), demand.pd.len())?;
        check_len("x.qd", self.na(), demand.qd.len())?;
        let mut x = demand.pd;
        x.extend(demand.qd);
        let y = match value.get("y") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let d: AcopfDecision = serde_json::from_value(v.clone())
                    .map_err(|e| ProblemError::Record(format!("field `y`: {e}")))?;
                check_len("y.pg", self.ng(), d.pg.len())?;
                check_len("y.qg", self.ng(), d.qg.len())?;
                check_len("y.vm", self.nb(), d.vm.len())?;
                check_len("y.va", self.nb(), d.va.len())?;
                Some(d.to_vector())
            }
        };
        let objective = value.get("objective").and_then(Value::as_f64);
        Ok(Sample { x, y, objective })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::problems::{feasibility, record_feasibility};
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bus(id: i64, reference: bool) -> Bus {
        Bus {
            id,
            v_l: 0.9,
            v_u: 1.1,
            reference,
        }
    }

    fn line(from: i64, to: i64, y: Complex64) -> Branch {
        Branch {
            from,
            to,
            y,
            y_c_fr: c(0.0, 0.0),
            y_c_to: c(0.0, 0.0),
            t: unit_tap(),
            s_u: None,
            i_u: None,
            theta_l: None,
            theta_u: None,
        }
    }

    fn generator(bus: i64, cost: [f64; 3]) -> Generator {
        Generator {
            bus,
            s_l: c(0.0, -1.0),
            s_u: c(2.0, 1.0),
            cost,
        }
    }

    fn two_bus(y: Complex64) -> AcopfCase {
        AcopfCase {
            name: Some("two".into()),
            base_mva: 100.0,
            buses: vec![bus(1, true), bus(2, false)],
            generators: vec![generator(1, [0.0, 1.0, 0.0])],
            loads: vec![],
            shunts: vec![],
            branches: vec![line(1, 2, y)],
        }
    }

    fn series(r: f64, x: f64) -> Complex64 {
        c(1.0, 0.0) / c(r, x)
    }

    // y = [pg; qg; vm; va]
    fn decision_vec(pg: &[f64], qg: &[f64], vm: &[f64], va: &[f64]) -> Vec<f64> {
        [pg, qg, vm, va].concat()
    }

    /// Three buses with a phase-shifting transformer, charging, shunts, limits
    /// and angle bounds, so every residual row is exercised.
    fn three_bus() -> AcopfProblem {
        let mut tx = line(2, 3, series(0.005, 0.08));
        tx.t = Complex64::from_polar(1.03, 0.05);
        tx.s_u = Some(1.5);
        tx.i_u = Some(1.6);
        tx.theta_l = Some(-0.4);
        tx.theta_u = Some(0.4);
        let mut l12 = line(1, 2, series(0.01, 0.1));
        l12.y_c_fr = c(0.0, 0.02);
        l12.y_c_to = c(0.001, 0.03);
        l12.s_u = Some(2.0);
        l12.theta_u = Some(0.3);
        let case = AcopfCase {
            name: None,
            base_mva: 100.0,
            buses: vec![bus(1, true), bus(2, false), bus(3, false)],
            generators: vec![generator(1, [0.1, 5.0, 10.0]), generator(3, [0.2, 3.0, 1.0])],
            loads: vec![
                Load { bus: 2, s_d: c(0.9, 0.3) },
                Load { bus: 3, s_d: c(0.0, 0.0) },
                Load { bus: 3, s_d: c(0.4, 0.1) },
            ],
            shunts: vec![Shunt { bus: 2, y_s: c(0.01, 0.05) }],
            branches: vec![l12, tx, line(1, 3, series(0.02, 0.2))],
        };
        AcopfProblem::new(case).unwrap()
    }

    #[test]
    fn minimal_one_bus_case_parses() {
        let case = AcopfCase::from_json_str(r#"{"buses":[{"id":7,"v_l":0.95,"v_u":1.05,"reference":true}]}"#)
            .unwrap();
        assert_eq!(case.buses.len(), 1);
        assert!(case.branches.is_empty());
        let p = AcopfProblem::new(case).unwrap();
        assert_eq!(p.input_dim(), 0);
        assert_eq!(p.output_dim(), 2);
    }

    #[test]
    fn inverted_voltage_bounds_name_the_bus() {
        let err = AcopfCase::from_json_str(
            r#"{"buses":[{"id":1,"v_l":0.9,"v_u":1.1,"reference":true},{"id":42,"v_l":1.2,"v_u":1.1}]}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("42"), "{err}");
    }

    #[test]
    fn missing_reference_and_unknown_bus_rejected() {
        assert!(AcopfCase::from_json_str(r#"{"buses":[{"id":1,"v_l":0.9,"v_u":1.1}]}"#).is_err());
        let mut case = two_bus(series(0.01, 0.1));
        case.branches[0].to = 9;
        assert!(case.validate().is_err());
        let mut case = two_bus(series(0.01, 0.1));
        case.branches[0].theta_l = Some(0.2);
        case.branches[0].theta_u = Some(0.1);
        assert!(case.validate().is_err());
        assert!(AcopfCase::from_json_str(r#"{"buses":[],"extra":1}"#).is_err());
    }

    #[test]
    fn two_bus_case_round_trips_bit_identically() {
        let case = three_bus().case().clone();
        let text = case.to_json_string();
        let back = AcopfCase::from_json_str(&text).unwrap();
        assert_eq!(back, case);
        assert_eq!(back.to_json_string(), text);
        let two = two_bus(series(0.01, 0.1));
        assert_eq!(AcopfCase::from_json_str(&two.to_json_string()).unwrap(), two);
    }

    #[test]
    fn isolated_bus_has_zero_residuals() {
        let case = AcopfCase::from_json_str(r#"{"buses":[{"id":1,"v_l":0.9,"v_u":1.1,"reference":true}]}"#)
            .unwrap();
        let p = AcopfProblem::new(case).unwrap();
        for vm in [0.5, 1.0, 1.37] {
            assert_eq!(p.eq_residuals(&[], &[vm, 0.0]).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn flat_voltages_carry_no_flow() {
        let p = AcopfProblem::new(two_bus(series(0.01, 0.1))).unwrap();
        let y = decision_vec(&[0.0], &[0.0], &[1.0, 1.0], &[0.0, 0.0]);
        for r in p.eq_residuals(&[], &y).unwrap() {
            assert_abs_diff_eq!(r, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn angle_difference_drives_real_flow() {
        let yl = series(0.01, 0.1);
        let (g, b) = (yl.re, yl.im);
        let p = AcopfProblem::new(two_bus(yl)).unwrap();
        let flows = p.branch_flows(&[1.0, 1.0], &[0.0, -0.1]);
        // Bus 1 leads bus 2 by 0.1 rad, so power flows 1 -> 2.
        let expected = g * (1.0 - 0.1_f64.cos()) - b * 0.1_f64.sin();
        assert!(expected > 0.0);
        assert_abs_diff_eq!(flows[0].0.re, expected, epsilon = 1e-10);
        let y = decision_vec(&[0.3], &[0.0], &[1.0, 1.0], &[0.0, -0.1]);
        let r = p.eq_residuals(&[], &y).unwrap();
        assert_abs_diff_eq!(r[0], 0.3 - expected, epsilon = 1e-10);
        assert_abs_diff_eq!(r[1], -flows[0].1.re, epsilon = 1e-10);
    }

    #[test]
    fn voltage_above_upper_bound_reported() {
        let p = AcopfProblem::new(two_bus(series(0.01, 0.1))).unwrap();
        let y = decision_vec(&[0.5], &[0.0], &[1.0, 1.15], &[0.0, 0.0]);
        let h = p.ineq_residuals(&[], &y).unwrap();
        // 4 generator rows, 2 lower-voltage rows, then upper-voltage rows.
        assert_abs_diff_eq!(h[4 + 2 + 1], 0.05, epsilon = 1e-12);
        assert!(h[4 + 2] < 0.0);
    }

    #[test]
    fn apparent_power_excess_reported() {
        let mut case = two_bus(c(0.0, -10.0));
        case.branches[0].s_u = Some(1.0);
        let p = AcopfProblem::new(case).unwrap();
        // |S| = 20 |sin(d / 2)| on this line at unit magnitudes.
        let d = 2.0 * 0.06_f64.asin();
        let y = decision_vec(&[0.0], &[0.0], &[1.0, 1.0], &[0.0, -d]);
        let flows = p.branch_flows(&[1.0, 1.0], &[0.0, -d]);
        assert_abs_diff_eq!(flows[0].0.norm(), 1.2, epsilon = 1e-12);
        let h = p.ineq_residuals(&[], &y).unwrap();
        assert_abs_diff_eq!(h[4 + 4], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(h[4 + 5], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn cost_examples() {
        let p = three_bus();
        let x = p.nominal_input();
        let mut y = vec![0.0; p.output_dim()];
        assert_abs_diff_eq!(p.cost(&x, &y).unwrap(), 11.0, epsilon = 1e-12);

        let mut case = two_bus(series(0.01, 0.1));
        case.generators[0].cost = [0.0, 1.0, 0.0];
        let single = AcopfProblem::new(case).unwrap();
        let ys = decision_vec(&[2.5], &[0.0], &[1.0, 1.0], &[0.0, 0.0]);
        assert_abs_diff_eq!(single.cost(&[], &ys).unwrap(), 2.5, epsilon = 1e-12);

        let mut case = three_bus().case().clone();
        for g in &mut case.generators {
            g.cost = [0.1, 5.0, 10.0];
        }
        let twin = AcopfProblem::new(case).unwrap();
        y[0] = 1.0;
        y[1] = 2.0;
        // (0.1 + 5 + 10) + (0.4 + 10 + 10)
        assert_abs_diff_eq!(twin.cost(&x, &y).unwrap(), 35.5, epsilon = 1e-12);
    }

    #[test]
    fn inputs_skip_zero_loads_in_index_order() {
        let p = three_bus();
        assert_eq!(p.nominal_input(), vec![0.9, 0.4, 0.3, 0.1]);
        assert_eq!(p.input_dim(), 4);
    }

    #[test]
    fn degenerate_interval_returns_nominal() {
        let p = three_bus().with_load_interval(1.0, 1.0).unwrap();
        for x in p.sample_inputs(50, 3) {
            assert_eq!(x, p.nominal_input());
        }
        assert!(three_bus().with_load_interval(1.2, 0.8).is_err());
    }

    #[test]
    fn sampling_scales_each_load_uniformly() {
        let p = three_bus();
        let nominal = p.nominal_input();
        let xs = p.sample_inputs(2000, 5);
        assert_eq!(xs, p.sample_inputs(2000, 5));
        for x in &xs {
            for k in 0..2 {
                let s = x[k] / nominal[k];
                assert!((0.8..=1.2).contains(&s));
                assert_abs_diff_eq!(x[2 + k] / nominal[2 + k], s, epsilon = 1e-12);
            }
        }
    }

    fn random_decision(p: &AcopfProblem, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let (ng, nb) = (p.ng(), p.nb());
        let mut y = Vec::new();
        y.extend((0..ng).map(|_| rng.random_range(-0.5..2.5)));
        y.extend((0..ng).map(|_| rng.random_range(-1.2..1.2)));
        y.extend((0..nb).map(|_| rng.random_range(0.85..1.15)));
        y.extend((0..nb).map(|_| rng.random_range(-0.5..0.5)));
        y
    }

    #[test]
    fn tape_residuals_match_complex_evaluation() {
        let p = three_bus();
        let batch = 6;
        let xs = p.sample_inputs(batch, 11);
        let ys: Vec<Vec<f64>> = (0..batch as u64).map(|s| random_decision(&p, s)).collect();
        let mut t = Tape::new();
        let y = t.leaf(batch, p.output_dim());
        let r = p.record_residuals(&mut t, &Matrix::from_rows(&xs, p.input_dim()), y);
        let f = record_feasibility(&mut t, r, 2.0, 3.0);
        t.mark_output(r.eq);
        t.mark_output(r.ineq);
        t.mark_output(f);
        let flat: Vec<f64> = ys.iter().flatten().copied().collect();
        let out = t.evaluate(&[flat]).unwrap();
        assert_eq!(out[0].shape(), (batch, p.eq_count()));
        assert_eq!(out[1].shape(), (batch, p.ineq_count()));
        for k in 0..batch {
            let g = p.eq_residuals(&xs[k], &ys[k]).unwrap();
            let h = p.ineq_residuals(&xs[k], &ys[k]).unwrap();
            for (i, v) in g.iter().enumerate() {
                assert_abs_diff_eq!(out[0].get(k, i), v, epsilon = 1e-12);
            }
            for (i, v) in h.iter().enumerate() {
                assert_abs_diff_eq!(out[1].get(k, i), v, epsilon = 1e-12);
            }
            let fk = feasibility(&p, &xs[k], &ys[k], 2.0, 3.0).unwrap();
            assert_abs_diff_eq!(out[2].get(k, 0), fk, epsilon = 1e-10 * (1.0 + fk));
        }
    }

    #[test]
    fn tape_residual_gradients_match_finite_differences() {
        let p = three_bus();
        let xs = p.sample_inputs(3, 2);
        let mut t = Tape::new();
        let y = t.leaf(3, p.output_dim());
        let r = p.record_residuals(&mut t, &Matrix::from_rows(&xs, p.input_dim()), y);
        let f = record_feasibility(&mut t, r, 1.0, 1.0);
        let total = t.sum(f);
        t.mark_output(total);
        let flat: Vec<f64> = (0..3).flat_map(|s| random_decision(&p, 100 + s)).collect();
        assert!(gradcheck(&t, &[flat], 0, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn records_round_trip_through_nested_json() {
        let p = three_bus();
        let x = p.sample_inputs(1, 9).remove(0);
        let y = random_decision(&p, 9);
        let sample = Sample {
            x,
            y: Some(y),
            objective: Some(12.5),
        };
        let v = p.encode_record(&sample);
        assert!(v["x"]["pd"].is_array());
        assert!(v["y"]["va"].is_array());
        assert_eq!(p.decode_record(&v).unwrap(), sample);
        let unlabeled = Sample {
            y: None,
            objective: None,
            ..sample
        };
        assert_eq!(p.decode_record(&p.encode_record(&unlabeled)).unwrap(), unlabeled);
        assert!(p.decode_record(&json!({"x": {"pd": [1.0], "qd": [1.0]}})).is_err());
    }

    #[test]
    fn feasible_points_have_negligible_feasibility() {
        let p = AcopfProblem::new(two_bus(series(0.01, 0.1))).unwrap();
        let flows = p.branch_flows(&[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(flows[0].0, c(0.0, 0.0));
        let y = decision_vec(&[0.0], &[0.0], &[1.0, 1.0], &[0.0, 0.0]);
        for lambda in [0.0, 1.0, 1e6] {
            assert!(feasibility(&p, &[], &y, lambda, lambda).unwrap() <= 1e-14);
        }
    }

    proptest! {
        #[test]
        fn lossless_branch_is_antisymmetric(
            x in 0.01f64..1.0,
            vm1 in 0.8f64..1.2,
            vm2 in 0.8f64..1.2,
            va1 in -1.0f64..1.0,
            va2 in -1.0f64..1.0,
        ) {
            let p = AcopfProblem::new(two_bus(series(0.0, x))).unwrap();
            let f = p.branch_flows(&[vm1, vm2], &[va1, va2]);
            prop_assert!((f[0].0.re + f[0].1.re).abs() <= 1e-12);
        }
    }
}
