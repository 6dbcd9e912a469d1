//! Multi-sub-network ReLU MLPs over a flat parameter vector.
//!
//! Each sub-network reads the full input and predicts one contiguous output
//! group; group outputs are concatenated in order. Parameters are laid out
//! sub-network by sub-network, layer by layer, as `W` (`fan_in x fan_out`,
//! row-major) followed by `b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Matrix, NodeId, Tape};
use crate::problems::{Bound, Problem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubNetwork {
    pub label: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl SubNetwork {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// Box bounds applied through `l + (u - l) sigmoid(z)` on finite coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidRepair {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SigmoidRepair {
    pub fn from_bounds(bounds: &[Bound]) -> Self {
        Self {
            lower: bounds.iter().map(|b| b.lower).collect(),
            upper: bounds.iter().map(|b| b.upper).collect(),
        }
    }

    fn bounded(&self, k: usize) -> bool {
        self.lower[k].is_finite() && self.upper[k].is_finite()
    }

    pub fn apply(&self, k: usize, z: f64) -> f64 {
        if self.bounded(k) {
            self.lower[k] + (self.upper[k] - self.lower[k]) * sigmoid(z)
        } else {
            z
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sub_networks: Vec<SubNetwork>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_repair: Option<SigmoidRepair>,
}

/// One affine layer's position in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    /// One sub-network per output group with two hidden layers of width
    /// `hidden_factor * input_dim` (at least 1).
    pub fn for_problem(problem: &dyn Problem, hidden_factor: usize) -> Self {
        let d = problem.input_dim();
        let width = (hidden_factor * d).max(1);
        Self {
            sub_networks: problem
                .output_groups()
                .into_iter()
                .map(|g| SubNetwork {
                    label: g.label,
                    input_dim: d,
                    hidden: vec![width, width],
                    output_dim: g.len,
                })
                .collect(),
            bound_repair: None,
        }
    }

    pub fn with_sigmoid_repair(mut self, bounds: &[Bound]) -> Self {
        self.bound_repair = Some(SigmoidRepair::from_bounds(bounds));
        self
    }

    pub fn input_dim(&self) -> usize {
        self.sub_networks.first().map_or(0, |s| s.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.sub_networks.iter().map(|s| s.output_dim).sum()
    }

    /// Layers per sub-network, in parameter order.
    pub fn layout(&self) -> Vec<Vec<LayerSlot>> {
        let mut offset = 0;
        self.sub_networks
            .iter()
            .map(|net| {
                net.widths()
                    .windows(2)
                    .map(|w| {
                        let slot = LayerSlot {
                            fan_in: w[0],
                            fan_out: w[1],
                            weight_offset: offset,
                            bias_offset: offset + w[0] * w[1],
                        };
                        offset += w[0] * w[1] + w[1];
                        slot
                    })
                    .collect()
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .flatten()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }

    /// `true` at bias coordinates.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_count()];
        for l in self.layout().iter().flatten() {
            mask[l.bias_offset..l.bias_offset + l.fan_out].fill(true);
        }
        mask
    }

    /// Fan-in of the layer owning each parameter coordinate.
    pub fn fan_in(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layout().iter().flatten() {
            out.extend(std::iter::repeat_n(l.fan_in, l.fan_in * l.fan_out + l.fan_out));
        }
        out
    }

    /// Batched forward pass; `xs` is `batch x input_dim`.
    pub fn predict(&self, params: &[f64], xs: &Matrix) -> Matrix {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let batch = xs.rows();
        let mut out = Matrix::zeros(batch, self.output_dim());
        let mut col = 0;
        for (net, layers) in self.sub_networks.iter().zip(self.layout()) {
            let mut h = xs.clone();
            for (k, l) in layers.iter().enumerate() {
                let w = Matrix::from_vec(
                    l.fan_in,
                    l.fan_out,
                    params[l.weight_offset..l.bias_offset].to_vec(),
                );
                let b = &params[l.bias_offset..l.bias_offset + l.fan_out];
                h = h.matmul(&w);
                let last = k + 1 == layers.len();
                for r in 0..batch {
                    for (c, bc) in b.iter().enumerate() {
                        let v = h.get(r, c) + bc;
                        h.set(r, c, if last { v } else { v.max(0.0) });
                    }
                }
            }
            for r in 0..batch {
                for c in 0..net.output_dim {
                    let z = h.get(r, c);
                    let y = match &self.bound_repair {
                        Some(rep) => rep.apply(col + c, z),
                        None => z,
                    };
                    out.set(r, col + c, y);
                }
            }
            col += net.output_dim;
        }
        out
    }

    pub fn predict_one(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.predict(params, &Matrix::row(x)).into_vec()
    }

    /// Records the network on `tape` with one leaf per weight matrix and bias
    /// row, created in parameter order, so that the flattened gradient of the
    /// returned leaves lines up with the parameter vector. Returns the
    /// `batch x output_dim` prediction node.
    pub fn record(&self, tape: &mut Tape, xs: &Matrix) -> NodeId {
        let x = tape.constant(xs.clone());
        let mut parts = Vec::new();
        for layers in self.layout() {
            let mut h = x;
            for (k, l) in layers.iter().enumerate() {
                let w = tape.leaf(l.fan_in, l.fan_out);
                let b = tape.leaf(1, l.fan_out);
                let z = tape.matmul(h, w);
                h = tape.add(z, b);
                if k + 1 < layers.len() {
                    h = tape.relu(h);
                }
            }
            parts.push(h);
        }
        let z = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(parts)
        };
        match &self.bound_repair {
            Some(rep) => record_repair(tape, rep, z),
            None => z,
        }
    }

    /// Splits a flat parameter vector into the leaf values expected by
    /// [`MlpSpec::record`].
    pub fn leaf_values(&self, params: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in self.layout().iter().flatten() {
            out.push(params[l.weight_offset..l.bias_offset].to_vec());
            out.push(params[l.bias_offset..l.bias_offset + l.fan_out].to_vec());
        }
        out
    }
}

// y = mask (l + w sigmoid(z)) + (1 - mask) z, with zeros standing in for
// infinite bounds so the constants stay finite.
fn record_repair(tape: &mut Tape, rep: &SigmoidRepair, z: NodeId) -> NodeId {
    let n = rep.lower.len();
    let mask: Vec<f64> = (0..n).map(|k| if rep.bounded(k) { 1.0 } else { 0.0 }).collect();
    let low: Vec<f64> = (0..n).map(|k| if rep.bounded(k) { rep.lower[k] } else { 0.0 }).collect();
    let width: Vec<f64> = (0..n)
        .map(|k| if rep.bounded(k) { rep.upper[k] - rep.lower[k] } else { 0.0 })
        .collect();
    let pass: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let low = tape.constant(Matrix::row(&low));
    let width = tape.constant(Matrix::row(&width));
    let pass = tape.constant(Matrix::row(&pass));
    let s = tape.sigmoid(z);
    let ws = tape.mul(s, width);
    let bounded = tape.add(ws, low);
    let free = tape.mul(z, pass);
    // Bounded entries of `free` are zero; unbounded entries of `bounded` are zero.
    let mask = tape.constant(Matrix::row(&mask));
    let bounded = tape.mul(bounded, mask);
    tape.add(bounded, free)
}
