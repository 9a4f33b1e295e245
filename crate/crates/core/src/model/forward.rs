use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, Mode, ModelParams, ModelSpec, INPUT_DIM};
use crate::neuron::{lif_step, perturb_init, LayerState, PerturbKey, PerturbationConfig};
use crate::tensor::{
    apply_mask, batch_norm, linear, max_over_points, mean_tensors, relu, BatchStats, GradTape, NormMode, Real, Tensor,
    TensorError, Var,
};
use crate::Error;

/// Per-forward mode switches and side outputs.
pub struct ForwardCtx<T> {
    pub norm_mode: NormMode,
    dropout_rate: f64,
    dropout_rng: Option<ChaCha8Rng>,
    /// One mask per forward sweep, reused across time steps.
    dropout_mask: Option<Tensor<T>>,
    /// Training-mode batch statistics, `(hidden layer index, stats)`, in
    /// the order they were produced.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> ForwardCtx<T> {
    /// Running statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            norm_mode: NormMode::Running,
            dropout_rate: 0.0,
            dropout_rng: None,
            dropout_mask: None,
            batch_stats: Vec::new(),
        }
    }

    /// Batch statistics, dropout drawn from `dropout_rng`.
    pub fn train(dropout_rate: f64, dropout_rng: ChaCha8Rng) -> Self {
        Self {
            norm_mode: NormMode::Batch,
            dropout_rate,
            dropout_rng: Some(dropout_rng),
            dropout_mask: None,
            batch_stats: Vec::new(),
        }
    }

    /// Folds the collected batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, params: &mut ModelParams<T>) {
        let mut layers: Vec<_> = params.hidden_mut().collect();
        for (index, stats) in self.batch_stats.drain(..) {
            layers[index].norm.update_running(&stats);
        }
    }

    fn dropout(&mut self, tape: &mut GradTape<T>, x: Var) -> Result<Var, Error> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if self.dropout_rate == 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        if self.dropout_mask.as_ref().map(|m| m.shape() != shape.as_slice()).unwrap_or(true) {
            let keep = 1.0 - self.dropout_rate;
            let scale = T::lit(1.0 / keep);
            self.dropout_mask = Some(Tensor::from_fn(&shape, |_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            }));
        }
        let mask = self.dropout_mask.clone().expect("mask drawn above");
        Ok(apply_mask(tape, x, mask)?)
    }
}

/// Initial membrane potentials for a fresh [`NetworkState`].
#[derive(Clone, Debug, PartialEq)]
pub enum MembraneInit<T> {
    Zeros,
    /// One tensor per hidden layer, without the batch dimension:
    /// `[points × width]` for point layers, `[width]` for head layers.
    Perturbed(Vec<Tensor<T>>),
}

/// Draws the per-layer perturbation for one `(epoch, batch)`.
pub fn perturbation_init<T: Real>(
    spec: &ModelSpec,
    points: usize,
    pconfig: &PerturbationConfig,
    epoch: u64,
    batch: u64,
) -> Result<MembraneInit<T>, Error> {
    if !pconfig.enabled {
        pconfig.validate(spec.neuron.v_th)?;
        return Ok(MembraneInit::Zeros);
    }
    let shapes = layer_shapes(spec, points);
    let deltas = shapes
        .iter()
        .enumerate()
        .map(|(layer, shape)| {
            perturb_init(
                shape,
                pconfig,
                spec.neuron.v_th,
                PerturbKey {
                    epoch,
                    batch,
                    layer: layer as u64,
                },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MembraneInit::Perturbed(deltas))
}

/// Per-sample state shapes of every hidden layer.
fn layer_shapes(spec: &ModelSpec, points: usize) -> Vec<Vec<usize>> {
    spec.point_mlp_widths
        .iter()
        .map(|&w| vec![points, w])
        .chain(spec.head_widths.iter().map(|&w| vec![w]))
        .collect()
}

/// Membrane and spike state of every spiking layer for one batch.
///
/// Persists across the time steps of one sample and is rebuilt between
/// samples.
#[derive(Clone, Debug)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
    batch: usize,
    points: usize,
}

impl NetworkState {
    pub fn reset<T: Real>(
        tape: &mut GradTape<T>,
        spec: &ModelSpec,
        batch: usize,
        points: usize,
        init: &MembraneInit<T>,
    ) -> Result<Self, Error> {
        let shapes = layer_shapes(spec, points);
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let full: Vec<usize> = std::iter::once(batch).chain(shape.iter().copied()).collect();
            let initial = match init {
                MembraneInit::Zeros => Tensor::zeros(&full),
                MembraneInit::Perturbed(deltas) => {
                    let delta = deltas
                        .get(i)
                        .ok_or_else(|| Error::State(format!("perturbation missing for layer {i}")))?;
                    if delta.shape() != shape.as_slice() {
                        return Err(Error::State(format!(
                            "perturbation for layer {i} has shape {:?}, expected {shape:?}",
                            delta.shape()
                        )));
                    }
                    let tiled = delta.data().repeat(batch);
                    Tensor::new(&full, tiled)?
                }
            };
            layers.push(LayerState::resting(tape, initial));
        }
        if let MembraneInit::Perturbed(deltas) = init {
            if deltas.len() != shapes.len() {
                return Err(Error::State(format!(
                    "{} perturbation tensors for {} layers",
                    deltas.len(),
                    shapes.len()
                )));
            }
        }
        Ok(Self { layers, batch, points })
    }

    fn check<T: Real>(&self, tape: &GradTape<T>, spec: &ModelSpec) -> Result<(), Error> {
        let shapes = layer_shapes(spec, self.points);
        if shapes.len() != self.layers.len() {
            return Err(Error::State(format!(
                "state has {} layers, spec has {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if !tape.contains(layer.membrane) || !tape.contains(layer.last_spikes) {
                return Err(Error::State("state recorded on a different tape".into()));
            }
            let got = tape.value(layer.membrane).shape();
            if got[0] != self.batch || &got[1..] != shape.as_slice() {
                return Err(Error::State(format!("layer state shape {got:?} does not match spec")));
            }
        }
        Ok(())
    }
}

/// Spikes of one time step, for energy accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T> {
    /// LIF output of every hidden layer, point layers then head layers.
    pub layer_spikes: Vec<Tensor<T>>,
    /// Max over points of the last point layer's spikes (head input).
    pub pooled: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeTrace<T> {
    pub steps: Vec<StepTrace<T>>,
}

impl<T: Real> SpikeTrace<T> {
    /// `(nonzero outputs, output slots)` over all layers and steps.
    pub fn spike_counts(&self) -> (u64, u64) {
        let (mut spikes, mut slots) = (0u64, 0u64);
        for step in &self.steps {
            for s in &step.layer_spikes {
                spikes += s.data().iter().filter(|&&v| v != T::zero()).count() as u64;
                slots += s.len() as u64;
            }
        }
        (spikes, slots)
    }

    /// Fraction of LIF output slots that fired, over all layers and steps.
    pub fn firing_rate(&self) -> f64 {
        let (spikes, slots) = self.spike_counts();
        if slots == 0 {
            0.0
        } else {
            spikes as f64 / slots as f64
        }
    }
}

fn check_points<T: Real>(points: &Tensor<T>) -> Result<(usize, usize), Error> {
    let shape = points.shape();
    if shape.len() != 3 || shape[2] != INPUT_DIM {
        return Err(TensorError::InvalidArgument(format!("points must be [batch, n, 3], got {shape:?}")).into());
    }
    Ok((shape[0], shape[1]))
}

/// Shared topology: point MLP, max over points, head, classifier.
/// `activate(tape, hidden_index, pre_activation)` supplies the nonlinearity.
/// Returns `(logits, pooled)`.
fn body<T: Real>(
    tape: &mut GradTape<T>,
    input: Var,
    params: &ModelParams<T>,
    bound: &BoundParams,
    ctx: &mut ForwardCtx<T>,
    mut activate: impl FnMut(&mut GradTape<T>, usize, Var) -> Result<Var, Error>,
) -> Result<(Var, Var), Error> {
    let mut index = 0;
    let mut hidden = |tape: &mut GradTape<T>, ctx: &mut ForwardCtx<T>, x: Var, layer: &super::Layer<T>, b: &super::BoundLayer| {
        let current = linear(tape, x, b.weight, b.bias)?;
        let (normed, stats) = batch_norm(tape, current, b.gain, b.shift, &layer.norm, ctx.norm_mode)?;
        if let Some(stats) = stats {
            ctx.batch_stats.push((index, stats));
        }
        let out = activate(tape, index, normed);
        index += 1;
        out
    };

    let mut x = input;
    for (layer, b) in params.point.iter().zip(&bound.point) {
        x = hidden(tape, ctx, x, layer, b)?;
    }
    let (pooled, _) = max_over_points(tape, x)?;
    x = pooled;
    for (layer, b) in params.head.iter().zip(&bound.head) {
        x = hidden(tape, ctx, x, layer, b)?;
    }
    if !params.head.is_empty() {
        x = ctx.dropout(tape, x)?;
    }
    let logits = linear(tape, x, bound.classifier.0, bound.classifier.1)?;
    Ok((logits, pooled))
}

/// ReLU network forward on `[batch × n × 3]` points, returns `[batch × classes]` logits.
pub fn forward_ann<T: Real>(
    tape: &mut GradTape<T>,
    points: Var,
    params: &ModelParams<T>,
    bound: &BoundParams,
    spec: &ModelSpec,
    ctx: &mut ForwardCtx<T>,
) -> Result<Var, Error> {
    if spec.mode != Mode::Ann {
        return Err(Error::Config("forward_ann needs an ann-mode spec".into()));
    }
    check_points(tape.value(points))?;
    let (logits, _) = body(tape, points, params, bound, ctx, |tape, _, x| Ok(relu(tape, x)?))?;
    Ok(logits)
}

/// One time step of the spiking network. The same coordinates drive the
/// first layer every step; `state` carries membranes to the next step.
/// Logits are the classifier's real-valued output.
#[allow(clippy::too_many_arguments)]
pub fn forward_snn_step<T: Real>(
    tape: &mut GradTape<T>,
    points: Var,
    params: &ModelParams<T>,
    bound: &BoundParams,
    spec: &ModelSpec,
    state: &mut NetworkState,
    ctx: &mut ForwardCtx<T>,
    trace: Option<&mut SpikeTrace<T>>,
) -> Result<Var, Error> {
    if spec.mode != Mode::Snn {
        return Err(Error::Config("forward_snn_step needs an snn-mode spec".into()));
    }
    let (batch, n) = check_points(tape.value(points))?;
    if batch != state.batch || n != state.points {
        return Err(Error::State(format!(
            "state built for batch {} x {} points, input is {batch} x {n}",
            state.batch, state.points
        )));
    }
    state.check(tape, spec)?;
    let neuron = spec.neuron;
    let mut spikes = Vec::with_capacity(state.layers.len());
    let layers = &mut state.layers;
    let (logits, pooled) = body(tape, points, params, bound, ctx, |tape, i, current| {
        let (s, next) = lif_step(tape, layers[i], current, &neuron)?;
        layers[i] = next;
        spikes.push(s);
        Ok(s)
    })?;
    if let Some(trace) = trace {
        trace.steps.push(StepTrace {
            layer_spikes: spikes.iter().map(|&s| tape.value(s).clone()).collect(),
            pooled: tape.value(pooled).clone(),
        });
    }
    Ok(logits)
}

/// Inference-mode ANN forward.
pub fn infer_ann<T: Real>(points: &Tensor<T>, params: &ModelParams<T>, spec: &ModelSpec) -> Result<Tensor<T>, Error> {
    let mut tape = GradTape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let input = tape.constant(points.clone());
    let logits = forward_ann(&mut tape, input, params, &bound, spec, &mut ForwardCtx::eval())?;
    Ok(tape.value(logits).clone())
}

/// Output of a multi-step inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnRun<T> {
    /// Mean of `per_step`, the ensemble prediction.
    pub averaged: Tensor<T>,
    pub per_step: Vec<Tensor<T>>,
    pub trace: SpikeTrace<T>,
}

/// Inference over `steps` time steps with persistent state, starting from
/// `init`. Uses running statistics and no dropout.
pub fn run_snn<T: Real>(
    points: &Tensor<T>,
    params: &ModelParams<T>,
    spec: &ModelSpec,
    steps: usize,
    init: &MembraneInit<T>,
) -> Result<SnnRun<T>, Error> {
    if steps < 1 {
        return Err(Error::Config("time steps must be >= 1".into()));
    }
    let (batch, n) = check_points(points)?;
    let mut tape = GradTape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let input = tape.constant(points.clone());
    let mut state = NetworkState::reset(&mut tape, spec, batch, n, init)?;
    let mut ctx = ForwardCtx::eval();
    let mut trace = SpikeTrace::default();
    let mut per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = forward_snn_step(&mut tape, input, params, &bound, spec, &mut state, &mut ctx, Some(&mut trace))?;
        per_step.push(tape.value(logits).clone());
    }
    let averaged = mean_tensors(&per_step.iter().collect::<Vec<_>>())?;
    Ok(SnnRun {
        averaged,
        per_step,
        trace,
    })
}
