//! Training with few time steps, multi-step evaluation, and the three-way
//! comparison of training paradigms.

mod eval;
mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use eval::{
    compare_paradigms, ensemble_accuracies, evaluate, evaluate_detailed, Comparison, ComparisonRow, EvalOutput, EvalReport,
    Paradigm,
};
pub use optim::{adam_step, AdamHyper, OptimizerState};

use crate::data::{augment, AugmentConfig, Dataset};
use crate::model::{
    forward_ann, forward_snn_step, perturbation_init, BoundParams, ForwardCtx, MembraneInit, Mode, ModelParams,
    ModelSpec, NetworkState, SpikeTrace,
};
use crate::neuron::{PerturbationConfig, ResamplePolicy};
use crate::rng;
use crate::tensor::{mean_of, softmax_cross_entropy, GradTape, Real, Tensor};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub train_time_steps: usize,
    /// Steps used for the per-epoch test accuracy.
    pub eval_time_steps: usize,
    pub seed: u64,
    pub perturbation: PerturbationConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 0.7,
            lr_decay_every: 20,
            train_time_steps: 1,
            eval_time_steps: 1,
            seed: 0,
            perturbation: PerturbationConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<(), Error> {
        if self.epochs < 1 || self.batch_size < 1 || self.train_time_steps < 1 || self.eval_time_steps < 1 {
            return Err(Error::Config(
                "epochs, batch_size, train_time_steps and eval_time_steps must be >= 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every < 1 {
            return Err(Error::Config("lr_decay must lie in (0, 1] and lr_decay_every be >= 1".into()));
        }
        self.hyper(0).validate()?;
        self.perturbation.validate(spec.neuron.v_th)?;
        if self.perturbation.enabled && spec.mode == Mode::Ann {
            return Err(Error::Config("membrane perturbation needs an snn-mode model".into()));
        }
        spec.validate()
    }

    /// Optimizer settings with the step-decayed learning rate of `epoch`.
    pub fn hyper(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every.max(1)) as i32),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Spike fraction of the training forward passes; absent for ANN models.
    pub firing_rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: Vec<EpochRecord>,
}

/// Loss, gradients and outputs of one differentiated batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub loss: f64,
    /// In [`ModelParams::trainable`] order.
    pub grads: Vec<(String, Tensor<T>)>,
    /// Time-averaged logits.
    pub logits: Tensor<T>,
    pub trace: SpikeTrace<T>,
}

/// Runs `steps` time steps on one tape with persistent state, takes the
/// cross-entropy of the time-averaged logits and backpropagates through
/// time. ANN models run a single pass whatever `steps` is.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    points: &Tensor<T>,
    labels: &[usize],
    steps: usize,
    init: &MembraneInit<T>,
    ctx: &mut ForwardCtx<T>,
) -> Result<BatchGradients<T>, Error> {
    if steps < 1 {
        return Err(Error::Config("time steps must be >= 1".into()));
    }
    let mut tape = GradTape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let input = tape.constant(points.clone());
    let mut trace = SpikeTrace::default();
    let averaged = match spec.mode {
        Mode::Ann => forward_ann(&mut tape, input, params, &bound, spec, ctx)?,
        Mode::Snn => {
            let shape = points.shape();
            let (batch, n) = (shape[0], shape.get(1).copied().unwrap_or(0));
            let mut state = NetworkState::reset(&mut tape, spec, batch, n, init)?;
            let mut per_step = Vec::with_capacity(steps);
            for _ in 0..steps {
                per_step.push(forward_snn_step(
                    &mut tape,
                    input,
                    params,
                    &bound,
                    spec,
                    &mut state,
                    ctx,
                    Some(&mut trace),
                )?);
            }
            mean_of(&mut tape, &per_step)?
        }
    };
    let loss = softmax_cross_entropy(&mut tape, averaged, labels)?;
    let grads = tape.backward(loss)?;
    let names = params.trainable();
    let grads = bound
        .vars()
        .into_iter()
        .zip(names)
        .map(|(var, (name, _))| (name, grads.get_or_zeros(var, &tape)))
        .collect();
    Ok(BatchGradients {
        loss: tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN),
        grads,
        logits: tape.value(averaged).clone(),
        trace,
    })
}

fn check_dataset(spec: &ModelSpec, dataset: &Dataset) -> Result<(), Error> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if dataset.num_classes() != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            spec.num_classes
        )));
    }
    dataset.validate()?;
    Ok(())
}

/// Trains from `initial`. Every random draw is keyed by `config.seed` (the
/// perturbation by its own seed), so a run is reproducible bit for bit.
/// `test` adds a test accuracy to every log record; `on_epoch` sees each
/// record as it is produced.
///
/// Batch statistics require two rows per feature, so a trailing batch of a
/// single sample is skipped.
pub fn train<T: Real>(
    spec: &ModelSpec,
    initial: ModelParams<T>,
    dataset: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, Error> {
    config.validate(spec)?;
    initial.check_spec(spec)?;
    check_dataset(spec, dataset)?;
    if let Some(test) = test {
        check_dataset(spec, test)?;
    }
    let n = dataset.manifest.points_per_cloud;
    let mut params = initial;
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let hyper = config.hyper(epoch);
        let epoch_key = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut rng::keyed(config.seed, &[rng::DATA, epoch_key]));
        let per_epoch_init = match config.perturbation.resample_policy {
            ResamplePolicy::PerEpoch => Some(perturbation_init::<T>(spec, n, &config.perturbation, epoch_key, 0)?),
            ResamplePolicy::PerBatch => None,
        };

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let (mut spikes, mut slots) = (0u64, 0u64);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 && seen > 0 {
                continue;
            }
            let batch_key = b as u64;
            let mut aug_rng = rng::keyed(config.seed, &[rng::AUGMENT, epoch_key, batch_key]);
            let mut data = Vec::with_capacity(chunk.len() * n * 3);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let cloud = &dataset.clouds[i];
                data.extend(augment(&cloud.points, &config.augment, &mut aug_rng).data().iter().map(|&v| T::lit(v as f64)));
                labels.push(cloud.label);
            }
            let points = Tensor::new(&[chunk.len(), n, 3], data)?;
            let init = match &per_epoch_init {
                Some(init) => init.clone(),
                None => perturbation_init(spec, n, &config.perturbation, epoch_key, batch_key)?,
            };
            let mut ctx = ForwardCtx::train(spec.dropout_rate, rng::keyed(config.seed, &[rng::DROPOUT, epoch_key, batch_key]));
            let out = batch_gradients(&params, spec, &points, &labels, config.train_time_steps, &init, &mut ctx)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            adam_step(&mut params.trainable_mut(), &out.grads, &mut state, &hyper)?;
            ctx.apply_batch_stats(&mut params);

            loss_sum += out.loss * chunk.len() as f64;
            correct += out
                .logits
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += chunk.len();
            let (s, t) = out.trace.spike_counts();
            spikes += s;
            slots += t;
        }

        let test_accuracy = match test {
            Some(test) => {
                let report = evaluate(&params, spec, test, config.eval_time_steps, config.batch_size)?;
                Some(*report.ensemble_accuracy.last().expect("at least one step"))
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            learning_rate: hyper.learning_rate,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy,
            firing_rate: (spec.mode == Mode::Snn && slots > 0).then(|| spikes as f64 / slots as f64),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}
