use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use proxybnn::bounds::{
    hypothesis_study, metrics, pcb_report, r_policy, MetricsTable, PcbReport, PcbRow,
};
use proxybnn::dataset::{manifest_path, read_jsonl, write_jsonl};
use proxybnn::posterior::{model_ppms, ppm_mean, svp_select, Ppm};
use proxybnn::problems::{max_abs_eq, Problem, QpProblem, Sample};
use proxybnn::rng::derive_seed;
use proxybnn::sandwich::{train, Mode, Model, SelectionRecord, TrainRunReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProblemKind, RunConfig, FORMAT_VERSION};

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const PPM_STREAM: u64 = 4;

/// Every JSON artifact: version, resolved config, then the payload.
#[derive(Serialize, Deserialize)]
struct Artifact<T> {
    format_version: u32,
    config: RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_artifact<T: Serialize>(path: &Path, config: &RunConfig, body: T) -> Result<Vec<u8>> {
    let artifact = Artifact {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        body,
    };
    let mut bytes = serde_json::to_vec_pretty(&artifact)?;
    bytes.push(b'\n');
    fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_out(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out)
        .with_context(|| format!("creating output directory {}", config.out.display()))
}

fn read_data(path: &Path, problem: &dyn Problem, what: &str) -> Result<Vec<Sample>> {
    ensure!(path.exists(), "missing {what} data: {} does not exist", path.display());
    Ok(read_jsonl(path, problem)?)
}

fn read_labeled(path: &Path, problem: &dyn Problem, what: &str) -> Result<Vec<Sample>> {
    let samples = read_data(path, problem, what)?;
    if let Some(k) = samples.iter().position(|s| s.y.is_none()) {
        bail!("{what} data {} line {} has no label", path.display(), k + 1);
    }
    ensure!(!samples.is_empty(), "{what} data {} is empty", path.display());
    Ok(samples)
}

fn split(samples: &[Sample]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    samples
        .iter()
        .map(|s| (s.x.clone(), s.y.clone().unwrap_or_default()))
        .unzip()
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    file: String,
    records: usize,
    labeled: bool,
    seed: Option<u64>,
}

fn write_dataset(
    config: &RunConfig,
    problem: &dyn Problem,
    name: &str,
    samples: &[Sample],
    seed: Option<u64>,
) -> Result<PathBuf> {
    let path = config.out.join(name);
    write_jsonl(&path, problem, samples)?;
    write_artifact(
        &manifest_path(&path),
        config,
        Manifest {
            file: name.into(),
            records: samples.len(),
            labeled: samples.iter().all(|s| s.y.is_some()),
            seed,
        },
    )?;
    Ok(path)
}

fn solve_all(qp: &QpProblem, xs: Vec<Vec<f64>>) -> Result<Vec<Sample>> {
    xs.into_iter()
        .map(|x| {
            let y = qp.solve_oracle(&x)?;
            let objective = qp.cost(&x, &y)?;
            Ok(Sample {
                x,
                y: Some(y),
                objective: Some(objective),
            })
        })
        .collect()
}

fn unlabeled_samples(xs: Vec<Vec<f64>>) -> Vec<Sample> {
    xs.into_iter()
        .map(|x| Sample {
            x,
            y: None,
            objective: None,
        })
        .collect()
}

/// Writes the labeled, unlabeled and test sets. QP labels come from the KKT
/// oracle; ACOPF labels must be ingested from externally solved records.
pub fn gen_data(config: &RunConfig) -> Result<Vec<PathBuf>> {
    create_out(config)?;
    let problem = config.problem()?;
    let d = &config.data;
    let seed = |stream| derive_seed(config.seed, stream);
    let mut written = Vec::new();
    match config.problem.kind {
        ProblemKind::Qp => {
            let p = &config.problem;
            let qp = QpProblem::generate(p.n, p.m, p.instance_seed)?;
            let labeled = solve_all(&qp, qp.sample_inputs(d.n_labeled, seed(LABELED_STREAM)))?;
            written.push(write_dataset(config, &qp, "labeled.jsonl", &labeled, Some(seed(LABELED_STREAM)))?);
            let test = solve_all(&qp, qp.sample_inputs(d.n_test, seed(TEST_STREAM)))?;
            written.push(write_dataset(config, &qp, "test.jsonl", &test, Some(seed(TEST_STREAM)))?);
        }
        ProblemKind::Acopf => {
            for (what, path, n) in [
                ("labeled", &d.labeled, d.n_labeled),
                ("test", &d.test, d.n_test),
            ] {
                match path {
                    Some(path) => {
                        let samples = read_labeled(path, problem.as_ref(), what)?;
                        let name = format!("{what}.jsonl");
                        written.push(write_dataset(config, problem.as_ref(), &name, &samples, None)?);
                    }
                    None if n > 0 => bail!(
                        "no solver: ACOPF {what} labels cannot be generated; \
                         supply externally solved records with --{what} <path> or set data.n_{what} = 0"
                    ),
                    None => {}
                }
            }
        }
    }
    let unlabeled = unlabeled_samples(problem.sample_inputs(d.n_unlabeled, seed(UNLABELED_STREAM)));
    written.push(write_dataset(
        config,
        problem.as_ref(),
        "unlabeled.jsonl",
        &unlabeled,
        Some(seed(UNLABELED_STREAM)),
    )?);
    Ok(written)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointBody {
    /// SHA-256 of the `MlpSpec` JSON.
    pub spec_hash: String,
    pub mode: Mode,
    pub model: Model,
    pub trials: Vec<TrainRunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionRecord>,
}

#[derive(Serialize)]
struct TrainReportBody<'a> {
    checkpoint: String,
    checkpoint_sha256: String,
    spec_hash: &'a str,
    trials: &'a [TrainRunReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: &'a Option<SelectionRecord>,
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub steps: u64,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    create_out(config)?;
    let problem = config.problem()?;
    let labeled = read_labeled(&config.labeled_path(), problem.as_ref(), "labeled")?;
    let unlabeled = if config.mode == Mode::Sandwich {
        read_data(&config.unlabeled_path(), problem.as_ref(), "unlabeled")?
    } else {
        Vec::new()
    };
    let selection = train(config.mode, problem.as_ref(), &labeled, &unlabeled, &config.train, config.seed)?;
    let spec_hash = sha256_hex(&serde_json::to_vec(selection.model.spec())?);
    let steps = selection.selected_report().total_steps();
    let body = CheckpointBody {
        spec_hash: spec_hash.clone(),
        mode: config.mode,
        model: selection.model,
        trials: selection.trials,
        selection: selection.selection,
    };
    let path = config.checkpoint_path();
    let bytes = write_artifact(&path, config, &body)?;
    let digest = sha256_hex(&bytes);
    write_artifact(
        &config.out.join("train_report.json"),
        config,
        TrainReportBody {
            checkpoint: path.display().to_string(),
            checkpoint_sha256: digest.clone(),
            spec_hash: &spec_hash,
            trials: &body.trials,
            selection: &body.selection,
        },
    )?;
    Ok(TrainSummary {
        checkpoint: path,
        checkpoint_sha256: digest,
        steps,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBody> {
    ensure!(path.exists(), "missing checkpoint: {} does not exist", path.display());
    let text = fs::read_to_string(path)?;
    let artifact: Artifact<CheckpointBody> = serde_json::from_str(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    ensure!(
        artifact.format_version == FORMAT_VERSION,
        "checkpoint {} has format version {}, expected {FORMAT_VERSION}",
        path.display(),
        artifact.format_version
    );
    let hash = sha256_hex(&serde_json::to_vec(artifact.body.model.spec())?);
    ensure!(hash == artifact.body.spec_hash, "checkpoint {} failed its spec hash check", path.display());
    Ok(artifact.body)
}

fn ppms_for(config: &RunConfig, model: &Model, xs: &[Vec<f64>], h: usize) -> Result<Vec<Ppm>> {
    Ok(model_ppms(model, xs, h, derive_seed(config.seed, PPM_STREAM))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    #[serde(flatten)]
    pub table: MetricsTable,
}

#[derive(Serialize, Deserialize)]
pub struct SvpDiagnostic {
    pub instance: usize,
    pub selected_column: usize,
    pub svp_max_eq: f64,
    pub mean_max_eq: f64,
    /// Smallest max-|g| over the PPM columns.
    pub column_min_max_eq: f64,
}

#[derive(Serialize, Deserialize)]
struct EvalBody {
    samples: usize,
    rows: Vec<MetricsRow>,
    svp: Vec<SvpDiagnostic>,
}

pub const METRICS_HEADER: [&str; 6] = ["method", "gap_percent", "max_eq", "mean_eq", "max_ineq", "mean_ineq"];

/// Metrics of the posterior-mean prediction and of SvP, side by side.
pub fn cmd_eval(config: &RunConfig) -> Result<Vec<MetricsRow>> {
    create_out(config)?;
    let problem = config.problem()?;
    let ckpt = load_checkpoint(&config.checkpoint_path())?;
    let test = read_labeled(&config.test_path(), problem.as_ref(), "test")?;
    let (xs, ys) = split(&test);
    let ppms = ppms_for(config, &ckpt.model, &xs, config.eval.samples)?;
    let means: Vec<Vec<f64>> = ppms.iter().map(ppm_mean).collect();
    let mut svp_preds = Vec::with_capacity(xs.len());
    let mut diagnostics = Vec::with_capacity(xs.len());
    for (k, ppm) in ppms.iter().enumerate() {
        let choice = svp_select(ppm, problem.as_ref(), &xs[k], config.eval.svp)?;
        let column_min = (0..ppm.samples())
            .map(|j| max_abs_eq(problem.as_ref(), &xs[k], &ppm.column(j)))
            .collect::<std::result::Result<Vec<f64>, _>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        diagnostics.push(SvpDiagnostic {
            instance: k,
            selected_column: choice.index,
            svp_max_eq: max_abs_eq(problem.as_ref(), &xs[k], &choice.y)?,
            mean_max_eq: max_abs_eq(problem.as_ref(), &xs[k], &means[k])?,
            column_min_max_eq: column_min,
        });
        svp_preds.push(choice.y);
    }
    let rows = vec![
        MetricsRow {
            method: "mean".into(),
            table: metrics(problem.as_ref(), &xs, &ys, &means)?,
        },
        MetricsRow {
            method: "svp".into(),
            table: metrics(problem.as_ref(), &xs, &ys, &svp_preds)?,
        },
    ];
    let mut csv = csv::Writer::from_path(config.out.join("metrics.csv"))?;
    csv.write_record(METRICS_HEADER)?;
    for r in &rows {
        let mut record = vec![r.method.clone()];
        record.extend(r.table.values().iter().map(|v| v.to_string()));
        csv.write_record(&record)?;
    }
    csv.flush()?;
    write_artifact(
        &config.out.join("metrics.json"),
        config,
        EvalBody {
            samples: config.eval.samples,
            rows: rows.clone(),
            svp: diagnostics,
        },
    )?;
    Ok(rows)
}

type BoundsInputs = (Box<dyn Problem>, CheckpointBody, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn bounds_inputs(config: &RunConfig, checkpoint: &Path) -> Result<BoundsInputs> {
    let problem = config.problem()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let test = read_labeled(&config.test_path(), problem.as_ref(), "test")?;
    let (mut xs, mut ys) = split(&test);
    if let Some(m) = config.bounds.test_size {
        ensure!(m <= xs.len(), "bounds.test_size = {m} exceeds the {} test records", xs.len());
        xs.truncate(m);
        ys.truncate(m);
    }
    Ok((problem, ckpt, xs, ys))
}

fn report_for(config: &RunConfig, problem: &dyn Problem, ppms: &[Ppm], ys: &[Vec<f64>]) -> Result<PcbReport> {
    let r = r_policy(&problem.output_bounds(), config.bounds.r_cap);
    let b = &config.bounds;
    Ok(pcb_report(ppms, ys, &r, b.confidence, b.alpha, b.coefficient)?)
}

pub fn cmd_bounds(config: &RunConfig) -> Result<PcbReport> {
    create_out(config)?;
    let (problem, ckpt, xs, ys) = bounds_inputs(config, &config.checkpoint_path())?;
    let ppms = ppms_for(config, &ckpt.model, &xs, config.eval.samples)?;
    let report = report_for(config, problem.as_ref(), &ppms, &ys)?;
    report.write_csv(fs::File::create(config.out.join("pcb.csv"))?)?;
    write_artifact(&config.out.join("pcb.json"), config, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    /// `M` or `H`.
    pub sweep: String,
    pub value: usize,
    #[serde(flatten)]
    pub row: PcbRow,
}

pub const CONVERGENCE_HEADER: [&str; 9] = [
    "sweep",
    "value",
    "variable_id",
    "mean_abs_err",
    "eps_hoeffding",
    "eps_emp_bernstein",
    "eps_bernstein_mpv",
    "mpv",
    "var_emp",
];

#[derive(Serialize, Deserialize)]
struct MetaBody {
    checkpoints: Vec<String>,
    convergence: Vec<ConvergenceRow>,
    fractions: Vec<(f64, f64)>,
}

pub struct MetaSummary {
    pub convergence: Vec<ConvergenceRow>,
    pub fractions: Vec<(f64, f64)>,
}

/// Sweeps `M` and `H` on the first checkpoint and pools the hypothesis
/// study over all of them.
pub fn cmd_meta_study(config: &RunConfig) -> Result<MetaSummary> {
    create_out(config)?;
    let meta = &config.meta;
    ensure!(!meta.m_grid.is_empty() && !meta.h_grid.is_empty(), "meta.m_grid and meta.h_grid must be non-empty");
    let checkpoints = if meta.checkpoints.is_empty() {
        vec![config.checkpoint_path()]
    } else {
        meta.checkpoints.clone()
    };
    let (problem, first, xs, ys) = bounds_inputs(config, &checkpoints[0])?;
    let m_max = *meta.m_grid.iter().max().unwrap_or(&0);
    let h_max = *meta.h_grid.iter().max().unwrap_or(&0);
    ensure!(m_max <= xs.len(), "meta.m_grid needs {m_max} test records, found {}", xs.len());
    let ppms = ppms_for(config, &first.model, &xs[..m_max], h_max)?;

    let mut convergence = Vec::new();
    for &m in &meta.m_grid {
        for row in report_for(config, problem.as_ref(), &ppms[..m], &ys[..m])?.rows {
            convergence.push(ConvergenceRow { sweep: "M".into(), value: m, row });
        }
    }
    for &h in &meta.h_grid {
        let prefix: Vec<Ppm> = ppms.iter().map(|p| p.prefix(h)).collect();
        for row in report_for(config, problem.as_ref(), &prefix, &ys[..m_max])?.rows {
            convergence.push(ConvergenceRow { sweep: "H".into(), value: h, row });
        }
    }
    let mut csv = csv::Writer::from_path(config.out.join("convergence.csv"))?;
    csv.write_record(CONVERGENCE_HEADER)?;
    for c in &convergence {
        let r = &c.row;
        csv.write_record([
            c.sweep.clone(),
            c.value.to_string(),
            r.variable_id.to_string(),
            r.mean_abs_err.to_string(),
            r.eps_hoeffding.to_string(),
            r.eps_emp_bernstein.to_string(),
            r.eps_bernstein_mpv.to_string(),
            r.mpv.to_string(),
            r.var_emp.to_string(),
        ])?;
    }
    csv.flush()?;

    let mut runs = vec![(checkpoints[0].display().to_string(), ppms, ys[..m_max].to_vec())];
    for path in &checkpoints[1..] {
        let ckpt = load_checkpoint(path)?;
        let p = ppms_for(config, &ckpt.model, &xs[..m_max], h_max)?;
        runs.push((path.display().to_string(), p, ys[..m_max].to_vec()));
    }
    let study = hypothesis_study(&runs)?;
    study.write_csv(fs::File::create(config.out.join("hypothesis.csv"))?)?;
    write_artifact(
        &config.out.join("meta_study.json"),
        config,
        MetaBody {
            checkpoints: checkpoints.iter().map(|p| p.display().to_string()).collect(),
            convergence: convergence.clone(),
            fractions: study.fractions.clone(),
        },
    )?;
    Ok(MetaSummary {
        convergence,
        fractions: study.fractions,
    })
}
