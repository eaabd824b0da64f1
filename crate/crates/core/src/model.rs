//! Shared-backbone network with a teacher head and a student head.
//!
//! The backbone is a ReLU multilayer perceptron; each head is a single affine
//! map from the feature vector to `L` logits. Backward is written out by hand
//! and takes the per-example logit gradients of each branch, so stop-gradient
//! is simply the absence of a teacher gradient for a term.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrasError};
use crate::losses::{argmax, softmax};

/// Affine layer `y = W x + b`, with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn he_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("valid std");
        let weight = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dW += g xᵀ`, `db += g`.
    fn accumulate(&mut self, x: &[f64], g: &[f64]) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            self.bias[o] += go;
            let row = &mut self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            row.iter_mut().zip(x).for_each(|(w, &v)| *w += go * v);
        }
    }

    /// `Wᵀ g`.
    fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            out.iter_mut().zip(row).for_each(|(acc, &w)| *acc += go * w);
        }
        out
    }
}

/// Backbone layers plus the two classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub backbone: Vec<Dense>,
    pub teacher_head: Dense,
    pub student_head: Dense,
}

/// Gradient buffers have exactly the layout of the parameters.
pub type GradientSet = ModelParams;

/// He-initialized weights (`N(0, 2/fan_in)`), zero biases, deterministic in `seed`.
pub fn init_params(input_dim: usize, hidden_dims: &[usize], num_classes: usize, seed: u64) -> Result<ModelParams> {
    if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
        return Err(TrasError::InvalidArgument(format!(
            "all dimensions must be >= 1 (input {input_dim}, hidden {hidden_dims:?}, classes {num_classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Vec::with_capacity(hidden_dims.len());
    let mut fan_in = input_dim;
    for &h in hidden_dims {
        backbone.push(Dense::he_init(fan_in, h, &mut rng));
        fan_in = h;
    }
    let teacher_head = Dense::he_init(fan_in, num_classes, &mut rng);
    let student_head = Dense::he_init(fan_in, num_classes, &mut rng);
    Ok(ModelParams {
        backbone,
        teacher_head,
        student_head,
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.backbone.first().map_or(self.teacher_head.in_dim, |l| l.in_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.teacher_head.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.teacher_head.out_dim
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            teacher_head: Dense::zeros(self.teacher_head.in_dim, self.teacher_head.out_dim),
            student_head: Dense::zeros(self.student_head.in_dim, self.student_head.out_dim),
        }
    }

    /// Every parameter tensor in a fixed order: backbone (weight, bias)...,
    /// teacher (weight, bias), student (weight, bias).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for l in self.layers() {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for l in self
            .backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.teacher_head))
            .chain(std::iter::once(&mut self.student_head))
        {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.teacher_head))
            .chain(std::iter::once(&self.student_head))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Everything a forward pass produces for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Vec<f64>,
    pub teacher_logits: Vec<f64>,
    pub student_logits: Vec<f64>,
    pub teacher_probs: Vec<f64>,
    pub student_probs: Vec<f64>,
    /// Argmax of the raw teacher logits.
    pub pseudo_label: usize,
}

/// Post-activation values of every backbone layer, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("trace holds at least the input")
    }
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(TrasError::ShapeMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Runs the backbone only, returning the trace.
pub fn trace_features(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    check_input(params, x)?;
    let mut activations = Vec::with_capacity(params.backbone.len() + 1);
    activations.push(x.to_vec());
    for layer in &params.backbone {
        let mut h = layer.apply(activations.last().unwrap());
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        activations.push(h);
    }
    Ok(ForwardTrace { activations })
}

pub fn forward_traced(params: &ModelParams, x: &[f64]) -> Result<(ForwardTrace, ForwardOutput)> {
    let trace = trace_features(params, x)?;
    let h = trace.features();
    let teacher_logits = params.teacher_head.apply(h);
    let student_logits = params.student_head.apply(h);
    let teacher_probs = softmax(&teacher_logits);
    let student_probs = softmax(&student_logits);
    let out = ForwardOutput {
        features: h.to_vec(),
        pseudo_label: argmax(&teacher_logits),
        teacher_logits,
        student_logits,
        teacher_probs,
        student_probs,
    };
    Ok((trace, out))
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardOutput> {
    forward_traced(params, x).map(|(_, out)| out)
}

/// Loss gradient arriving at the logits of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub input: Vec<f64>,
    /// dL/dz^T. `None` when no term reaches the teacher head (e.g. the KL term).
    pub teacher_grad: Option<Vec<f64>>,
    /// dL/dz^S.
    pub student_grad: Option<Vec<f64>>,
    /// When false the student gradient stops at the student head.
    pub student_to_backbone: bool,
}

/// Accumulates the gradient of one contribution into `grads`, reusing a trace.
pub fn backward_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    teacher_grad: Option<&[f64]>,
    student_grad: Option<&[f64]>,
    student_to_backbone: bool,
    grads: &mut GradientSet,
) {
    let h = trace.features();
    let mut dh = vec![0.0; h.len()];
    let mut reaches_backbone = false;
    if let Some(g) = teacher_grad {
        grads.teacher_head.accumulate(h, g);
        dh = params.teacher_head.transpose_apply(g);
        reaches_backbone = true;
    }
    if let Some(g) = student_grad {
        grads.student_head.accumulate(h, g);
        if student_to_backbone {
            let ds = params.student_head.transpose_apply(g);
            dh.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
            reaches_backbone = true;
        }
    }
    if !reaches_backbone {
        return;
    }
    for (i, layer) in params.backbone.iter().enumerate().rev() {
        let out = &trace.activations[i + 1];
        dh.iter_mut().zip(out).for_each(|(d, &a)| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        grads.backbone[i].accumulate(&trace.activations[i], &dh);
        if i > 0 {
            dh = layer.transpose_apply(&dh);
        }
    }
}

/// Exact gradient of the summed loss described by `contributions`.
pub fn backward(params: &ModelParams, contributions: &[Contribution]) -> Result<GradientSet> {
    let mut grads = params.zeros_like();
    let l = params.num_classes();
    for c in contributions {
        for g in c.teacher_grad.iter().chain(&c.student_grad) {
            if g.len() != l {
                return Err(TrasError::ShapeMismatch {
                    expected: l,
                    actual: g.len(),
                });
            }
        }
        let trace = trace_features(params, &c.input)?;
        backward_into(
            params,
            &trace,
            c.teacher_grad.as_deref(),
            c.student_grad.as_deref(),
            c.student_to_backbone,
            &mut grads,
        );
    }
    Ok(grads)
}

/// One feature row `ψ(x)` per input, in input order.
pub fn export_features(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| trace_features(params, x).map(|t| t.features().to_vec()))
        .collect()
}

/// Writes feature rows as CSV with header `f0,f1,...`.
pub fn write_features_csv(path: &Path, feature_dim: usize, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..feature_dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}
