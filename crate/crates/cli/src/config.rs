use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use proxybnn::bounds::RangeCoefficient;
use proxybnn::posterior::SvpCriterion;
use proxybnn::problems::{AcopfProblem, Problem, QpProblem};
use proxybnn::sandwich::{BudgetMode, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Qp,
    Acopf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// QP outputs.
    pub n: usize,
    /// QP equality rows.
    pub m: usize,
    /// Seed of the QP instance.
    pub instance_seed: u64,
    /// ACOPF case file.
    pub case: Option<PathBuf>,
    /// Load scaling interval of the ACOPF input sampler.
    pub load_low: f64,
    pub load_high: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Qp,
            n: 8,
            m: 2,
            instance_seed: 0,
            case: None,
            load_low: 0.8,
            load_high: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Labeled training set; for ACOPF the externally solved ingest file.
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labeled: None,
            unlabeled: None,
            test: None,
            n_labeled: 512,
            n_unlabeled: 2048,
            n_test: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior samples `H` per input.
    pub samples: usize,
    pub svp: SvpCriterion,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            svp: SvpCriterion::Equality,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub confidence: f64,
    pub alpha: f64,
    pub coefficient: RangeCoefficient,
    /// `R` for outputs without finite bounds.
    pub r_cap: f64,
    /// Number of test inputs `M`; all of them when unset.
    pub test_size: Option<usize>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            alpha: 2.0,
            coefficient: RangeCoefficient::ThreeR,
            r_cap: 1.0,
            test_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub m_grid: Vec<usize>,
    pub h_grid: Vec<usize>,
    /// Models pooled by the hypothesis study; the run's own checkpoint when
    /// empty.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            m_grid: vec![10, 100, 1000],
            h_grid: vec![10, 100, 1000],
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub data: DataConfig,
    pub mode: Mode,
    pub seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bounds: BoundsConfig,
    pub meta: MetaConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            data: DataConfig::default(),
            mode: Mode::Sandwich,
            seed: 0,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bounds: BoundsConfig::default(),
            meta: MetaConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub budget_secs: Option<f64>,
    pub budget_steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub case: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub samples: Option<usize>,
    pub confidence: Option<f64>,
    pub trials: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        // A budget flag rescales the schedule and keeps its round count.
        if let Some(secs) = o.budget_secs {
            self.train.schedule = self.train.schedule.scaled_to(secs);
            self.train.budget_mode = BudgetMode::Wall;
        }
        if let Some(steps) = o.budget_steps {
            self.train.schedule = self.train.schedule.scaled_to(steps as f64);
            self.train.budget_mode = BudgetMode::Steps;
        }
        if let Some(v) = o.out {
            self.out = v;
        }
        if let Some(v) = o.case {
            self.problem.kind = ProblemKind::Acopf;
            self.problem.case = Some(v);
        }
        if let Some(v) = o.labeled {
            self.data.labeled = Some(v);
        }
        if let Some(v) = o.unlabeled {
            self.data.unlabeled = Some(v);
        }
        if let Some(v) = o.test {
            self.data.test = Some(v);
        }
        if let Some(v) = o.samples {
            self.eval.samples = v;
        }
        if let Some(v) = o.confidence {
            self.bounds.confidence = v;
        }
        if let Some(v) = o.trials {
            self.train.trials = v;
        }
    }

    pub fn problem(&self) -> Result<Box<dyn Problem>> {
        let p = &self.problem;
        Ok(match p.kind {
            ProblemKind::Qp => Box::new(QpProblem::generate(p.n, p.m, p.instance_seed)?),
            ProblemKind::Acopf => {
                let case = p
                    .case
                    .as_ref()
                    .context("problem.kind = acopf needs a case file (--case)")?;
                Box::new(AcopfProblem::load(case)?.with_load_interval(p.load_low, p.load_high)?)
            }
        })
    }

    pub fn labeled_path(&self) -> PathBuf {
        self.data.labeled.clone().unwrap_or_else(|| self.out.join("labeled.jsonl"))
    }

    pub fn unlabeled_path(&self) -> PathBuf {
        self.data.unlabeled.clone().unwrap_or_else(|| self.out.join("unlabeled.jsonl"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data.test.clone().unwrap_or_else(|| self.out.join("test.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c: RunConfig = toml::from_str("seed = 3\n[train.schedule]\nt_max = 90.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.schedule.t_max, 90.0);
        assert_eq!(c.train.schedule.t_round, 200.0);
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
    }

    #[test]
    fn step_budget_keeps_rounds() {
        let mut c = RunConfig::default();
        c.apply(Overrides {
            budget_steps: Some(300),
            case: Some("c.json".into()),
            ..Overrides::default()
        });
        assert_eq!(c.train.budget_mode, BudgetMode::Steps);
        assert_eq!(c.train.schedule.t_max, 300.0);
        assert_eq!(c.train.schedule.rounds(), 3);
        assert_eq!(c.problem.kind, ProblemKind::Acopf);
    }
}
