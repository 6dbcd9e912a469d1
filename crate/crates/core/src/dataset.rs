//! JSON-lines datasets, one record per line, encoded by the owning problem.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Matrix;
use crate::problems::{Problem, ProblemError, Sample};

pub fn to_jsonl(problem: &dyn Problem, samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&problem.encode_record(s).to_string());
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, problem: &dyn Problem, samples: &[Sample]) -> Result<(), ProblemError> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(problem, samples).as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path, problem: &dyn Problem) -> Result<Vec<Sample>, ProblemError> {
    let f = fs::File::open(path).map_err(|e| ProblemError::Case {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| ProblemError::Record(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let sample = problem
            .decode_record(&value)
            .map_err(|e| ProblemError::Record(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(sample);
    }
    Ok(out)
}

/// Sidecar file holding provenance for a data file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Inputs stacked as rows.
pub fn input_matrix(samples: &[Sample], input_dim: usize) -> Matrix {
    Matrix::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>(), input_dim)
}

/// Labels stacked as rows; errors if any record is unlabeled.
pub fn label_matrix(samples: &[Sample], output_dim: usize) -> Result<Matrix, ProblemError> {
    let rows = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            s.y.as_deref()
                .ok_or_else(|| ProblemError::Record(format!("record {k} has no label")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_rows(&rows, output_dim))
}
