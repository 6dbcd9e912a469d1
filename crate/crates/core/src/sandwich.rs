//! Budgeted training: supervised SVI, alternating supervised / feasibility
//! rounds with posterior chaining, and a deterministic penalty-MLP baseline.
//!
//! Budgets are checked between steps, never mid-step. In
//! [`BudgetMode::Steps`] every budget is read as a step count, which makes
//! runs bit-reproducible; wall times are then left out of the reports.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape};
use crate::dataset::{input_matrix, label_matrix};
use crate::problems::{record_feasibility, Problem, ProblemError, Sample};
use crate::rng::{derive_seed, seeded};
use crate::vi::{
    init_posterior, svi_step, Adam, AdamConfig, ElboEstimate,
    MeanFieldPosterior, MlpSpec, PriorSpec, SupervisedObjective, UnsupervisedObjective, ViError,
    SIGMA_U2,
};

const INIT_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;
const TRIAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("labeled set is empty")]
    NoLabels,
    #[error("{kind:?} stage of round {round}, step {step}: {source}")]
    Stage {
        kind: StageKind,
        round: usize,
        step: u64,
        source: ViError,
    },
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Budgets are seconds of wall time.
    Wall,
    /// Budgets are optimizer steps.
    Steps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    Sandwich,
    DnnBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Sup,
    UnSup,
    Dnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub t_max: f64,
    pub t_round: f64,
    /// Share of each non-final round spent in the supervised stage.
    pub sup_fraction: f64,
    /// Learning-rate multiplier applied once per round.
    pub round_lr_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_max: 600.0,
            t_round: 200.0,
            sup_fraction: 0.4,
            round_lr_factor: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub kind: StageKind,
    pub round: usize,
    pub budget: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Schedule(m));
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max = {} must be finite and non-negative", self.t_max));
        }
        if !(self.t_round > 0.0 && self.t_round.is_finite()) {
            return bad(format!("t_round = {} must be positive", self.t_round));
        }
        if !(self.sup_fraction > 0.0 && self.sup_fraction < 1.0) {
            return bad(format!("sup_fraction = {} must lie in (0, 1)", self.sup_fraction));
        }
        if !(self.round_lr_factor > 0.0 && self.round_lr_factor.is_finite()) {
            return bad(format!("round_lr_factor = {} must be positive", self.round_lr_factor));
        }
        Ok(())
    }

    /// Whole rounds that fit in `t_max`, at least one.
    pub fn rounds(&self) -> usize {
        ((self.t_max / self.t_round + 1e-9).floor() as usize).max(1)
    }

    pub fn t_sup(&self) -> f64 {
        self.sup_fraction * self.t_round
    }

    pub fn t_unsup(&self) -> f64 {
        self.t_round - self.t_sup()
    }

    /// `Sup, UnSup` for every round but the last, which is one `Sup` stage
    /// taking whatever budget remains.
    pub fn stages(&self) -> Vec<StagePlan> {
        let k = self.rounds();
        let mut out = Vec::with_capacity(2 * k - 1);
        for round in 0..k - 1 {
            out.push(StagePlan {
                kind: StageKind::Sup,
                round,
                budget: self.t_sup(),
            });
            out.push(StagePlan {
                kind: StageKind::UnSup,
                round,
                budget: self.t_unsup(),
            });
        }
        out.push(StagePlan {
            kind: StageKind::Sup,
            round: k - 1,
            budget: (self.t_max - (k - 1) as f64 * self.t_round).max(0.0),
        });
        out
    }

    /// Same round structure over a different total budget.
    pub fn scaled_to(&self, t_max: f64) -> Self {
        let rounds = self.rounds() as f64;
        Self {
            t_max,
            t_round: if t_max > 0.0 { t_max / rounds } else { self.t_round },
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub budget_mode: BudgetMode,
    /// Hidden width as a multiple of the input dimension.
    pub hidden_factor: usize,
    pub prior_var: f64,
    /// Initial posterior variance as a fraction of the prior variance.
    pub sigma_fraction: f64,
    pub mc_samples: usize,
    pub lambda_e: f64,
    pub lambda_i: f64,
    pub sigma_u2: f64,
    pub adam: AdamConfig,
    /// Penalty multiplier of the deterministic baseline.
    pub penalty_weight: f64,
    /// Initial learning rate of the deterministic baseline.
    pub dnn_lr: f64,
    pub trials: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            budget_mode: BudgetMode::Wall,
            hidden_factor: 2,
            prior_var: 1e-2,
            sigma_fraction: 0.1,
            mc_samples: 1,
            lambda_e: 1.0,
            lambda_i: 1.0,
            sigma_u2: SIGMA_U2,
            adam: AdamConfig::default(),
            penalty_weight: 1e-2,
            dnn_lr: 1e-4,
            trials: 1,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.prior_var > 0.0 && self.sigma_fraction > 0.0) {
            return bad("prior_var and sigma_fraction must be positive");
        }
        if !(self.lambda_e >= 0.0 && self.lambda_i >= 0.0 && self.penalty_weight >= 0.0) {
            return bad("feasibility weights must be non-negative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn spec(&self, problem: &dyn Problem) -> MlpSpec {
        MlpSpec::for_problem(problem, self.hidden_factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub kind: StageKind,
    pub round: usize,
    pub budget: f64,
    pub lr0: f64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_secs: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub stages: Vec<StageLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_mse: Option<f64>,
}

impl TrainRunReport {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

/// A trained proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    Bayesian {
        spec: MlpSpec,
        posterior: MeanFieldPosterior,
    },
    Deterministic {
        spec: MlpSpec,
        params: Vec<f64>,
    },
}

impl Model {
    pub fn spec(&self) -> &MlpSpec {
        match self {
            Model::Bayesian { spec, .. } | Model::Deterministic { spec, .. } => spec,
        }
    }

    /// Prediction at the variational mean, or at the point estimate.
    pub fn predict_point(&self, xs: &Matrix) -> Matrix {
        match self {
            Model::Bayesian { spec, posterior } => spec.predict(&posterior.mu, xs),
            Model::Deterministic { spec, params } => spec.predict(params, xs),
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainRunReport,
}

/// Prior for the next stage: the current posterior.
pub fn chain_prior(q: &MeanFieldPosterior) -> PriorSpec {
    PriorSpec::from_posterior(q)
}

struct Budget {
    mode: BudgetMode,
    amount: f64,
    start: Instant,
}

impl Budget {
    fn start(mode: BudgetMode, amount: f64) -> Self {
        Self {
            mode,
            amount,
            start: Instant::now(),
        }
    }

    fn exhausted(&self, steps: u64) -> bool {
        match self.mode {
            BudgetMode::Steps => steps as f64 >= (self.amount + 1e-9).floor(),
            BudgetMode::Wall => self.start.elapsed().as_secs_f64() >= self.amount,
        }
    }

    fn wall(&self) -> Option<f64> {
        match self.mode {
            BudgetMode::Steps => None,
            BudgetMode::Wall => Some(self.start.elapsed().as_secs_f64()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    q: &mut MeanFieldPosterior,
    prior: &PriorSpec,
    plan: StagePlan,
    config: &TrainConfig,
    lr0: f64,
    seed: u64,
    trainable: Option<&[bool]>,
    estimate: &dyn Fn(&MeanFieldPosterior, &PriorSpec, u64) -> crate::vi::Result<ElboEstimate>,
) -> Result<StageLog> {
    let mut adam = Adam::new(
        AdamConfig {
            lr0,
            ..config.adam.clone()
        },
        2 * q.len() + 2,
    );
    let budget = Budget::start(config.budget_mode, plan.budget);
    let mut steps = 0;
    let mut initial_loss = None;
    let mut final_loss = None;
    let wrap = |step: u64| {
        move |source: ViError| TrainError::Stage {
            kind: plan.kind,
            round: plan.round,
            step,
            source,
        }
    };
    while !budget.exhausted(steps) {
        let est = estimate(q, prior, derive_seed(seed, steps)).map_err(wrap(steps))?;
        initial_loss.get_or_insert(est.loss);
        final_loss = Some(est.loss);
        svi_step(q, &mut adam, &est.grad, trainable, steps).map_err(wrap(steps))?;
        steps += 1;
    }
    Ok(StageLog {
        kind: plan.kind,
        round: plan.round,
        budget: plan.budget,
        lr0,
        steps,
        wall_secs: budget.wall(),
        initial_loss,
        final_loss,
    })
}

fn initial_state(spec: &MlpSpec, config: &TrainConfig, seed: u64) -> Result<(MeanFieldPosterior, PriorSpec)> {
    let prior = PriorSpec::isotropic(spec.param_count(), config.prior_var);
    let q = init_posterior(spec, &prior, config.sigma_fraction, derive_seed(seed, INIT_STREAM))?;
    Ok((q, prior))
}

/// Runs a list of stages, chaining the posterior into the prior at every
/// boundary after the first.
fn run_stages(
    problem: &dyn Problem,
    labeled: &[Sample],
    unlabeled: &[Sample],
    spec: &MlpSpec,
    config: &TrainConfig,
    seed: u64,
    plans: &[StagePlan],
) -> Result<(MeanFieldPosterior, Vec<StageLog>)> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let (mut q, mut prior) = initial_state(spec, config, seed)?;
    let xs = input_matrix(labeled, spec.input_dim());
    let ys = label_matrix(labeled, spec.output_dim())?;
    let sup = SupervisedObjective::new(spec, &xs, &ys)?;
    let unsup = if unlabeled.is_empty() {
        None
    } else {
        let xu = input_matrix(unlabeled, spec.input_dim());
        Some(UnsupervisedObjective::new(
            spec,
            problem,
            &xu,
            config.lambda_e,
            config.lambda_i,
            config.sigma_u2,
        )?)
    };
    let mc = config.mc_samples;
    let mut logs = Vec::new();
    for (index, &plan) in plans.iter().enumerate() {
        if index > 0 {
            prior = chain_prior(&q);
        }
        let lr0 = config.adam.lr0 * config.schedule.round_lr_factor.powi(plan.round as i32);
        let stage_seed = derive_seed(seed, index as u64);
        let log = match plan.kind {
            StageKind::Sup => run_stage(
                &mut q,
                &prior,
                plan,
                config,
                lr0,
                stage_seed,
                None,
                &|q, p, s| sup.estimate(q, p, mc, s),
            )?,
            StageKind::UnSup => match &unsup {
                Some(obj) => run_stage(
                    &mut q,
                    &prior,
                    plan,
                    config,
                    lr0,
                    stage_seed,
                    Some(obj.trainable()),
                    &|q, p, s| obj.estimate(q, p, mc, s),
                )?,
                None => continue,
            },
            StageKind::Dnn => unreachable!("deterministic stages are not part of SVI schedules"),
        };
        logs.push(log);
    }
    Ok((q, logs))
}

/// Supervised SVI over the whole `t_max` budget as a single stage.
pub fn run_supervised(
    problem: &dyn Problem,
    labeled: &[Sample],
    spec: &MlpSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let plan = StagePlan {
        kind: StageKind::Sup,
        round: 0,
        budget: config.schedule.t_max,
    };
    let (q, stages) = run_stages(problem, labeled, &[], spec, config, seed, &[plan])?;
    Ok(TrainOutcome {
        model: Model::Bayesian {
            spec: spec.clone(),
            posterior: q,
        },
        report: TrainRunReport {
            mode: Mode::Supervised,
            seed,
            rounds: 1,
            stages,
            validation_mse: None,
        },
    })
}

/// Alternating supervised and feasibility stages per [`Schedule::stages`].
/// Feasibility stages are skipped when `unlabeled` is empty.
pub fn run_sandwich(
    problem: &dyn Problem,
    labeled: &[Sample],
    unlabeled: &[Sample],
    spec: &MlpSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.schedule.validate()?;
    let plans = config.schedule.stages();
    let (q, stages) = run_stages(problem, labeled, unlabeled, spec, config, seed, &plans)?;
    Ok(TrainOutcome {
        model: Model::Bayesian {
            spec: spec.clone(),
            posterior: q,
        },
        report: TrainRunReport {
            mode: Mode::Sandwich,
            seed,
            rounds: config.schedule.rounds(),
            stages,
            validation_mse: None,
        },
    })
}

/// Loss `MSE + penalty_weight * mean F` of a deterministic network on a
/// labeled batch.
pub struct DnnObjective {
    spec: MlpSpec,
    tape: Tape,
}

impl DnnObjective {
    pub fn new(
        spec: &MlpSpec,
        problem: &dyn Problem,
        xs: &Matrix,
        ys: &Matrix,
        lambda_e: f64,
        lambda_i: f64,
        penalty_weight: f64,
    ) -> Result<Self> {
        if xs.rows() == 0 {
            return Err(TrainError::NoLabels);
        }
        let mut tape = Tape::new();
        let y = spec.record(&mut tape, xs);
        let target = tape.constant(ys.clone());
        let r = tape.sub(y, target);
        let r2 = tape.square(r);
        let sse = tape.sum(r2);
        let mse = tape.scale(sse, 1.0 / ys.len() as f64);
        let loss = if penalty_weight > 0.0 {
            let res = problem.record_residuals(&mut tape, xs, y);
            let f = record_feasibility(&mut tape, res, lambda_e, lambda_i);
            let total = tape.sum(f);
            let penalty = tape.scale(total, penalty_weight / xs.rows() as f64);
            tape.add(mse, penalty)
        } else {
            mse
        };
        tape.mark_output(loss);
        Ok(Self {
            spec: spec.clone(),
            tape,
        })
    }

    pub fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.tape.forward(&self.spec.leaf_values(params))?;
        let loss = self.tape.output_value(&trace, 0)?.get(0, 0);
        Ok((loss, self.tape.backward(&trace, 0)?.flatten()))
    }
}

/// He-initialized weights, zero biases.
pub fn init_dnn(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    spec.fan_in()
        .iter()
        .zip(spec.bias_mask())
        .map(|(&fan_in, is_bias)| {
            let e: f64 = rng.sample(StandardNormal);
            if is_bias {
                0.0
            } else {
                e * (2.0 / fan_in.max(1) as f64).sqrt()
            }
        })
        .collect()
}

/// Deterministic MLP with sigmoid bound repair, trained by Adam on
/// [`DnnObjective`] for the whole `t_max` budget. `spec` should carry a
/// bound repair; [`train`] adds one from the problem's output bounds.
pub fn run_dnn_baseline(
    problem: &dyn Problem,
    labeled: &[Sample],
    spec: &MlpSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let xs = input_matrix(labeled, spec.input_dim());
    let ys = label_matrix(labeled, spec.output_dim())?;
    let obj = DnnObjective::new(
        spec,
        problem,
        &xs,
        &ys,
        config.lambda_e,
        config.lambda_i,
        config.penalty_weight,
    )?;
    let mut params = init_dnn(spec, derive_seed(seed, INIT_STREAM));
    let mut adam = Adam::new(
        AdamConfig {
            lr0: config.dnn_lr,
            ..config.adam.clone()
        },
        params.len(),
    );
    let budget = Budget::start(config.budget_mode, config.schedule.t_max);
    let mut steps = 0;
    let mut initial_loss = None;
    let mut final_loss = None;
    while !budget.exhausted(steps) {
        let (loss, grad) = obj.evaluate(&params)?;
        initial_loss.get_or_insert(loss);
        final_loss = Some(loss);
        adam.step(&mut params, &grad, None, steps)
            .map_err(|source| TrainError::Stage {
                kind: StageKind::Dnn,
                round: 0,
                step: steps,
                source,
            })?;
        steps += 1;
    }
    let stage = StageLog {
        kind: StageKind::Dnn,
        round: 0,
        budget: config.schedule.t_max,
        lr0: config.dnn_lr,
        steps,
        wall_secs: budget.wall(),
        initial_loss,
        final_loss,
    };
    Ok(TrainOutcome {
        model: Model::Deterministic {
            spec: spec.clone(),
            params,
        },
        report: TrainRunReport {
            mode: Mode::DnnBaseline,
            seed,
            rounds: 1,
            stages: vec![stage],
            validation_mse: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub criterion: String,
    pub validation_size: usize,
    pub scores: Vec<f64>,
    pub selected_trial: usize,
}

pub struct Selection {
    pub model: Model,
    pub trials: Vec<TrainRunReport>,
    pub selection: Option<SelectionRecord>,
}

impl Selection {
    pub fn selected_report(&self) -> &TrainRunReport {
        let k = self.selection.as_ref().map_or(0, |s| s.selected_trial);
        &self.trials[k]
    }
}

fn mse(model: &Model, samples: &[Sample]) -> Result<f64> {
    let spec = model.spec();
    let xs = input_matrix(samples, spec.input_dim());
    let ys = label_matrix(samples, spec.output_dim())?;
    let pred = model.predict_point(&xs);
    let sse: f64 = pred
        .as_slice()
        .iter()
        .zip(ys.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sse / ys.len() as f64)
}

/// Trains `config.trials` independent models. With more than one trial a
/// seeded validation split is held out from `labeled` and the model with the
/// lowest validation MSE at its point prediction is kept; a single trial
/// trains on everything with `seed` itself.
pub fn train(
    mode: Mode,
    problem: &dyn Problem,
    labeled: &[Sample],
    unlabeled: &[Sample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Selection> {
    config.validate()?;
    let mut spec = config.spec(problem);
    if mode == Mode::DnnBaseline {
        spec = spec.with_sigmoid_repair(&problem.output_bounds());
    }
    let one = |data: &[Sample], s: u64| match mode {
        Mode::Supervised => run_supervised(problem, data, &spec, config, s),
        Mode::Sandwich => run_sandwich(problem, data, unlabeled, &spec, config, s),
        Mode::DnnBaseline => run_dnn_baseline(problem, data, &spec, config, s),
    };
    if config.trials == 1 || labeled.len() < 2 {
        let out = one(labeled, seed)?;
        return Ok(Selection {
            model: out.model,
            trials: vec![out.report],
            selection: None,
        });
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut seeded(derive_seed(seed, SPLIT_STREAM)));
    let n_val = ((labeled.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, labeled.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<Sample> = val_idx.iter().map(|&k| labeled[k].clone()).collect();
    let train_set: Vec<Sample> = train_idx.iter().map(|&k| labeled[k].clone()).collect();
    let outcomes: Vec<TrainOutcome> = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut out = one(&train_set, derive_seed(seed, TRIAL_STREAM + t))?;
            out.report.validation_mse = Some(mse(&out.model, &val)?);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = outcomes
        .iter()
        .map(|o| o.report.validation_mse.unwrap_or(f64::INFINITY))
        .collect();
    let selected = scores
        .iter()
        .enumerate()
        .fold(0, |best, (k, &s)| if s < scores[best] { k } else { best });
    let mut trials = Vec::new();
    let mut model = None;
    for (k, o) in outcomes.into_iter().enumerate() {
        if k == selected {
            model = Some(o.model);
        }
        trials.push(o.report);
    }
    Ok(Selection {
        model: model.expect("selected trial exists"),
        trials,
        selection: Some(SelectionRecord {
            criterion: "validation_mse".into(),
            validation_size: n_val,
            scores,
            selected_trial: selected,
        }),
    })
}
