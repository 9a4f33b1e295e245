//! The closed set of differentiable primitives used by the model.

use serde::{Deserialize, Serialize};

use super::tape::Op;
use super::{GradTape, Real, Tensor, TensorError, Var};

/// Weights `[out × in]` and bias `[out]` of an affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-feature affine normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BatchNormParams<T> {
    pub fn identity(features: usize) -> Self {
        Self {
            gain: Tensor::full(&[features], T::one()),
            shift: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], T::one()),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gain.len()
    }

    /// Exponential moving update from one training batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

/// Which statistics a normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Batch,
    Running,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `out[.., o] = Σ_j weight[o, j] · input[.., j] + bias[o]` over any leading dims.
pub fn linear<T: Real>(tape: &mut GradTape<T>, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
    let (ii, wi, bi) = (tape.resolve(input)?, tape.resolve(weight)?, tape.resolve(bias)?);
    let x = tape.value(input);
    let w = tape.value(weight);
    let b = tape.value(bias);
    if w.shape().len() != 2 {
        return Err(TensorError::InvalidArgument(format!("linear weight must be 2-d, got {:?}", w.shape())));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != in_dim {
        return Err(shape_err("linear", x.shape(), w.shape()));
    }
    if b.shape() != [out_dim] {
        return Err(shape_err("linear bias", b.shape(), &[out_dim]));
    }
    let rows = x.len() / in_dim;
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    T::gemm(rows, in_dim, out_dim, x.data(), (in_dim, 1), w.data(), (1, in_dim), T::one(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_dim;
    let value = Tensor::new(&shape, out)?;
    Ok(tape.push(
        value,
        Op::Linear {
            input: ii,
            weight: wi,
            bias: bi,
        },
    ))
}

/// Per-feature normalization over every leading position, then `gain · x̂ + shift`.
///
/// `Batch` mode normalizes with the batch's own (biased) statistics and
/// returns them so the caller can fold them into the running estimates.
/// Variance is clamped below at `params.epsilon`.
pub fn batch_norm<T: Real>(
    tape: &mut GradTape<T>,
    input: Var,
    gain: Var,
    shift: Var,
    params: &BatchNormParams<T>,
    mode: NormMode,
) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
    let (ii, gi, si) = (tape.resolve(input)?, tape.resolve(gain)?, tape.resolve(shift)?);
    let x = tape.value(input);
    let features = params.features();
    if x.last_dim() != features || tape.value(gain).len() != features || tape.value(shift).len() != features {
        return Err(shape_err("batch_norm", x.shape(), &[features]));
    }
    let rows = x.len() / features;
    let eps = T::lit(params.epsilon);
    let (mean, var, stats) = match mode {
        NormMode::Batch => {
            if rows < 2 {
                return Err(TensorError::DegenerateStatistics { count: rows });
            }
            let (mean, var) = two_pass_stats(x.data(), features);
            let n = T::from_usize(rows).expect("rows");
            let unbiased_var = var.iter().map(|&v| v * n / (n - T::one())).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
        NormMode::Running => (params.running_mean.data().to_vec(), params.running_var.data().to_vec(), None),
    };
    let clamped: Vec<bool> = var.iter().map(|&v| v < eps).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / v.max(eps).sqrt()).collect();
    let g = tape.value(gain).data();
    let s = tape.value(shift).data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((xrow, hrow), orow) in x.data().chunks(features).zip(xhat.chunks_mut(features)).zip(out.chunks_mut(features)) {
        for f in 0..features {
            hrow[f] = (xrow[f] - mean[f]) * inv_std[f];
            orow[f] = g[f] * hrow[f] + s[f];
        }
    }
    let value = Tensor::new(x.shape(), out)?;
    let var = tape.push(
        value,
        Op::BatchNorm {
            input: ii,
            gain: gi,
            shift: si,
            xhat,
            inv_std,
            batch_stats: mode == NormMode::Batch,
            clamped,
        },
    );
    Ok((var, stats))
}

/// Mean then biased variance per feature, two passes.
fn two_pass_stats<T: Real>(data: &[T], features: usize) -> (Vec<T>, Vec<T>) {
    let rows = data.len() / features;
    let n = T::from_usize(rows).expect("rows");
    let mut mean = vec![T::zero(); features];
    for row in data.chunks(features) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); features];
    for row in data.chunks(features) {
        for f in 0..features {
            let d = row[f] - mean[f];
            var[f] += d * d;
        }
    }
    for v in &mut var {
        *v = *v / n;
    }
    (mean, var)
}

pub fn relu<T: Real>(tape: &mut GradTape<T>, input: Var) -> Result<Var, TensorError> {
    let ii = tape.resolve(input)?;
    let value = tape.value(input).map(|v| v.max(T::zero()));
    Ok(tape.push(value, Op::Relu { input: ii }))
}

/// Max over the points axis of `[batch × points × features]`.
///
/// Returns the pooled `[batch × features]` values and, per output slot, the
/// winning point index (lowest index on ties).
pub fn max_over_points<T: Real>(tape: &mut GradTape<T>, input: Var) -> Result<(Var, Vec<usize>), TensorError> {
    let ii = tape.resolve(input)?;
    let x = tape.value(input);
    if x.shape().len() != 3 {
        return Err(TensorError::InvalidArgument(format!(
            "max_over_points expects [batch, points, features], got {:?}",
            x.shape()
        )));
    }
    let (batch, points, features) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if points == 0 {
        return Err(TensorError::EmptyInput("max_over_points"));
    }
    let mut out = vec![T::zero(); batch * features];
    let mut argmax = vec![0usize; batch * features];
    for b in 0..batch {
        let block = &x.data()[b * points * features..(b + 1) * points * features];
        let (orow, arow) = (
            &mut out[b * features..(b + 1) * features],
            &mut argmax[b * features..(b + 1) * features],
        );
        orow.copy_from_slice(&block[..features]);
        for (p, row) in block.chunks(features).enumerate().skip(1) {
            for f in 0..features {
                if row[f] > orow[f] {
                    orow[f] = row[f];
                    arow[f] = p;
                }
            }
        }
    }
    let value = Tensor::new(&[batch, features], out)?;
    Ok((
        tape.push(
            value,
            Op::MaxOverPoints {
                input: ii,
                argmax: argmax.clone(),
            },
        ),
        argmax,
    ))
}

/// Mean softmax cross-entropy over rows of `[batch × classes]` logits.
pub fn softmax_cross_entropy<T: Real>(tape: &mut GradTape<T>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let li = tape.resolve(logits)?;
    let z = tape.value(logits);
    let classes = z.last_dim();
    let rows = z.len() / classes;
    if rows != labels.len() {
        return Err(shape_err("softmax_cross_entropy", z.shape(), &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    let mut probs = vec![T::zero(); z.len()];
    let mut loss = T::zero();
    for ((row, prow), &label) in z.data().chunks(classes).zip(probs.chunks_mut(classes)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - max).exp();
            total += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / total;
        }
        loss += total.ln() - (row[label] - max);
    }
    let loss = loss / T::from_usize(rows).expect("rows");
    Ok(tape.push(
        Tensor::scalar(loss),
        Op::SoftmaxCrossEntropy {
            logits: li,
            labels: labels.to_vec(),
            probs,
        },
    ))
}

/// Element-wise `scale · Σ inputs`, accumulated in argument order.
fn scaled_sum<T: Real>(tape: &mut GradTape<T>, inputs: &[Var], scale: T) -> Result<Var, TensorError> {
    let first = *inputs.first().ok_or(TensorError::EmptyInput("sum"))?;
    let indices = inputs.iter().map(|&v| tape.resolve(v)).collect::<Result<Vec<_>, _>>()?;
    let mut acc = tape.value(first).clone();
    for &v in &inputs[1..] {
        let next = tape.value(v);
        acc.expect_same_shape(next, "sum")?;
        acc.add_assign(next);
    }
    let value = acc.map(|v| v * scale);
    Ok(tape.push(value, Op::Sum { inputs: indices, scale }))
}

pub fn sum_of<T: Real>(tape: &mut GradTape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
    scaled_sum(tape, inputs, T::one())
}

/// Element-wise mean of same-shaped nodes. Bit-identical to
/// [`mean_tensors`] applied to their values.
pub fn mean_of<T: Real>(tape: &mut GradTape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
    let indices = inputs.iter().map(|&v| tape.resolve(v)).collect::<Result<Vec<_>, _>>()?;
    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| tape.value(v)).collect();
    let value = mean_tensors(&values)?;
    let scale = T::one() / T::from_usize(inputs.len()).expect("count");
    Ok(tape.push(value, Op::Sum { inputs: indices, scale }))
}

/// Sum in order, then divide by the count.
pub fn mean_tensors<T: Real>(values: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = values.first().ok_or(TensorError::EmptyInput("mean"))?;
    let mut acc = (*first).clone();
    for next in &values[1..] {
        acc.expect_same_shape(next, "mean")?;
        acc.add_assign(next);
    }
    let n = T::from_usize(values.len()).expect("count");
    Ok(acc.map(|v| v / n))
}

/// Element-wise product with a fixed mask (dropout).
pub fn apply_mask<T: Real>(tape: &mut GradTape<T>, input: Var, mask: Tensor<T>) -> Result<Var, TensorError> {
    let ii = tape.resolve(input)?;
    let value = tape.value(input).zip_map(&mask, |a, m| a * m)?;
    Ok(tape.push(
        value,
        Op::Mask {
            input: ii,
            mask: mask.into_data(),
        },
    ))
}
