use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor, TensorError};
use crate::neuron;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Recorded operation plus whatever forward intermediates its backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        input: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Whether the statistics came from the batch (training) or were
        /// constants (running stats).
        batch_stats: bool,
        clamped: Vec<bool>,
    },
    Relu {
        input: usize,
    },
    Membrane {
        current: usize,
        prev_membrane: usize,
        prev_spikes: usize,
        leak: T,
        v_th: T,
        detach_reset: bool,
    },
    Spike {
        membrane: usize,
        v_th: T,
        k: T,
    },
    MaxOverPoints {
        input: usize,
        argmax: Vec<usize>,
    },
    Mask {
        input: usize,
        mask: Vec<T>,
    },
    Sum {
        inputs: Vec<usize>,
        scale: T,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::BatchNorm { input, gain, shift, .. } => vec![*input, *gain, *shift],
            Op::Relu { input } | Op::MaxOverPoints { input, .. } | Op::Mask { input, .. } => vec![*input],
            Op::Membrane {
                current,
                prev_membrane,
                prev_spikes,
                ..
            } => vec![*current, *prev_membrane, *prev_spikes],
            Op::Spike { membrane, .. } => vec![*membrane],
            Op::Sum { inputs, .. } => inputs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes only reference earlier nodes, so recording order is a topological
/// order and backward is a single reverse sweep.
pub struct GradTape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf: backward never materializes its gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let index = self.resolve(var).expect("variable belongs to this tape");
        &self.nodes[index].value
    }

    pub fn contains(&self, var: Var) -> bool {
        self.resolve(var).is_ok()
    }

    pub(crate) fn resolve(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id {
            return Err(TensorError::Tape(format!(
                "node {} belongs to tape {}, not tape {}",
                var.index, var.tape, self.id
            )));
        }
        if var.index >= self.nodes.len() {
            return Err(TensorError::Tape(format!("node {} is not recorded", var.index)));
        }
        Ok(var.index)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    /// Reverse sweep from a scalar `loss`, summing contributions over every
    /// path. Paths through recurrent membrane state across time steps are
    /// accumulated exactly like any other fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = self.resolve(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], index: usize, contribution: Tensor<T>) {
        if !self.nodes[index].requires_grad {
            return;
        }
        match &mut grads[index] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, index: usize) -> bool {
        self.nodes[index].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / in_dim;
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    T::gemm(rows, out_dim, in_dim, g.data(), (out_dim, 1), w.data(), (in_dim, 1), T::zero(), &mut dx);
                    self.accumulate(grads, *input, Tensor::new(x.shape(), dx)?);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); out_dim * in_dim];
                    T::gemm(out_dim, rows, in_dim, g.data(), (1, out_dim), x.data(), (in_dim, 1), T::zero(), &mut dw);
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), dw)?);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); out_dim];
                    for row in g.data().chunks(out_dim) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[out_dim], db)?);
                }
            }
            Op::BatchNorm {
                input,
                gain,
                shift,
                xhat,
                inv_std,
                batch_stats,
                clamped,
            } => {
                let gamma = self.nodes[*gain].value.data();
                let features = gamma.len();
                let rows = g.len() / features;
                let mut dgain = vec![T::zero(); features];
                let mut dshift = vec![T::zero(); features];
                for (grow, xrow) in g.data().chunks(features).zip(xhat.chunks(features)) {
                    for f in 0..features {
                        dshift[f] += grow[f];
                        dgain[f] += grow[f] * xrow[f];
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *batch_stats {
                        // dxhat = g·γ, so Σdxhat = γ·dshift and Σ(dxhat·xhat) = γ·dgain.
                        let m = T::from_usize(rows).expect("row count");
                        for ((drow, grow), xrow) in dx.chunks_mut(features).zip(g.data().chunks(features)).zip(xhat.chunks(features)) {
                            for f in 0..features {
                                let dxhat = grow[f] * gamma[f];
                                let mut acc = m * dxhat - gamma[f] * dshift[f];
                                if !clamped[f] {
                                    acc -= xrow[f] * gamma[f] * dgain[f];
                                }
                                drow[f] = acc * inv_std[f] / m;
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_mut(features).zip(g.data().chunks(features)) {
                            for f in 0..features {
                                drow[f] = grow[f] * gamma[f] * inv_std[f];
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(g.shape(), dx)?);
                }
                self.accumulate(grads, *gain, Tensor::new(&[features], dgain)?);
                self.accumulate(grads, *shift, Tensor::new(&[features], dshift)?);
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = &self.nodes[*input].value;
                    let dx = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Membrane {
                current,
                prev_membrane,
                prev_spikes,
                leak,
                v_th,
                detach_reset,
            } => {
                let (d_current, d_membrane, d_spikes) = neuron::membrane_backward(g, *leak, *v_th, *detach_reset);
                self.accumulate(grads, *current, d_current);
                if self.wants(*prev_membrane) {
                    self.accumulate(grads, *prev_membrane, d_membrane);
                }
                if let Some(d_spikes) = d_spikes {
                    self.accumulate(grads, *prev_spikes, d_spikes);
                }
            }
            Op::Spike { membrane, v_th, k } => {
                if self.wants(*membrane) {
                    let u = &self.nodes[*membrane].value;
                    let du = neuron::spike_backward(g, u, *v_th, *k)?;
                    self.accumulate(grads, *membrane, du);
                }
            }
            Op::MaxOverPoints { input, argmax } => {
                if self.wants(*input) {
                    let x = &self.nodes[*input].value;
                    let (points, features) = (x.shape()[1], x.shape()[2]);
                    let mut dx = vec![T::zero(); x.len()];
                    for (slot, (&gv, &p)) in g.data().iter().zip(argmax).enumerate() {
                        let (b, f) = (slot / features, slot % features);
                        dx[(b * points + p) * features + f] += gv;
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape(), dx)?);
                }
            }
            Op::Mask { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *input, Tensor::new(g.shape(), data)?);
            }
            Op::Sum { inputs, scale } => {
                for &input in inputs {
                    self.accumulate(grads, input, g.map(|v| v * *scale));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let upstream = g.data()[0];
                let classes = probs.len() / labels.len();
                let batch = T::from_usize(labels.len()).expect("batch size");
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v = *v * upstream / batch;
                    }
                }
                let shape = self.nodes[*logits].value.shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(&shape, d)?);
            }
        }
        Ok(())
    }
}

/// Result of [`GradTape::backward`]: one optional gradient per recorded node.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` when no path from the loss reaches it
    /// (or it is a constant).
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: Var, tape: &GradTape<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }
}
