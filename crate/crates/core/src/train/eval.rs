use serde::{Deserialize, Serialize};

use super::{train, EpochRecord, TrainConfig};
use crate::data::Dataset;
use crate::model::{build_model, infer_ann, run_snn, MembraneInit, Mode, ModelParams, ModelSpec};
use crate::tensor::{mean_tensors, Real, Tensor};
use crate::Error;

/// Accuracy per time step and per averaging horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub time_steps: usize,
    pub samples: usize,
    /// Entry `t` decodes from the logits of step `t + 1` alone.
    pub per_step_accuracy: Vec<f64>,
    /// Entry `t` decodes from the mean logits of steps `1..=t + 1`.
    pub ensemble_accuracy: Vec<f64>,
    /// Spike fraction over all layers, steps and samples; absent for ANN models.
    pub firing_rate: Option<f64>,
    /// Cross-entropy of the full-horizon mean logits.
    pub loss: f64,
}

/// Evaluation with the raw per-step logits kept.
#[derive(Clone, Debug)]
pub struct EvalOutput<T> {
    pub report: EvalReport,
    /// One `[samples × classes]` tensor per time step.
    pub per_step_logits: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Per-step and prefix-mean accuracies from stored per-step logits, plus the
/// full-horizon mean logits.
pub fn ensemble_accuracies<T: Real>(
    per_step_logits: &[Tensor<T>],
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<f64>, Tensor<T>), Error> {
    if per_step_logits.is_empty() || labels.is_empty() {
        return Err(Error::Config("no logits to decode".into()));
    }
    let per_step = per_step_logits.iter().map(|l| accuracy(l, labels)).collect();
    let mut ensemble = Vec::with_capacity(per_step_logits.len());
    let mut mean = per_step_logits[0].clone();
    for t in 0..per_step_logits.len() {
        mean = mean_tensors(&per_step_logits[..=t].iter().collect::<Vec<_>>())?;
        ensemble.push(accuracy(&mean, labels));
    }
    Ok((per_step, ensemble, mean))
}

fn mean_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = logits.last_dim();
    let total: f64 = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &label)| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .sum();
    total / labels.len() as f64
}

/// Runs every sample for `time_steps` steps from rest, with running batch
/// statistics and no dropout or perturbation. Samples are processed in
/// dataset order in chunks of `batch_size`; chunking does not change results.
pub fn evaluate_detailed<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    dataset: &Dataset,
    time_steps: usize,
    batch_size: usize,
) -> Result<EvalOutput<T>, Error> {
    if time_steps < 1 || batch_size < 1 {
        return Err(Error::Config("time_steps and batch_size must be >= 1".into()));
    }
    params.check_spec(spec)?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let n = dataset.manifest.points_per_cloud;
    let mut per_step: Vec<Vec<T>> = vec![Vec::new(); time_steps];
    let mut labels = Vec::with_capacity(dataset.len());
    let (mut spikes, mut slots) = (0u64, 0u64);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (points, batch_labels) = dataset.batch(chunk);
        let points = Tensor::new(&[chunk.len(), n, 3], points.data().iter().map(|&v| T::lit(v as f64)).collect())?;
        labels.extend(batch_labels);
        match spec.mode {
            Mode::Ann => {
                let logits = infer_ann(&points, params, spec)?;
                for step in &mut per_step {
                    step.extend_from_slice(logits.data());
                }
            }
            Mode::Snn => {
                let run = run_snn(&points, params, spec, time_steps, &MembraneInit::Zeros)?;
                for (step, logits) in per_step.iter_mut().zip(&run.per_step) {
                    step.extend_from_slice(logits.data());
                }
                let (s, t) = run.trace.spike_counts();
                spikes += s;
                slots += t;
            }
        }
    }
    let per_step_logits = per_step
        .into_iter()
        .map(|data| Tensor::new(&[labels.len(), spec.num_classes], data))
        .collect::<Result<Vec<_>, _>>()?;
    let (per_step_accuracy, ensemble_accuracy, mean) = ensemble_accuracies(&per_step_logits, &labels)?;
    let report = EvalReport {
        time_steps,
        samples: labels.len(),
        per_step_accuracy,
        ensemble_accuracy,
        firing_rate: (spec.mode == Mode::Snn).then(|| spikes as f64 / slots.max(1) as f64),
        loss: mean_cross_entropy(&mean, &labels),
    };
    Ok(EvalOutput {
        report,
        per_step_logits,
        labels,
    })
}

pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    dataset: &Dataset,
    time_steps: usize,
    batch_size: usize,
) -> Result<EvalReport, Error> {
    Ok(evaluate_detailed(params, spec, dataset, time_steps, batch_size)?.report)
}

/// The three training regimes being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Several time steps during training, no perturbation.
    MultiStep,
    /// One time step, no perturbation.
    SingleStep,
    /// One time step with random initial membrane potential.
    SingleStepPerturbed,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::MultiStep, Paradigm::SingleStep, Paradigm::SingleStepPerturbed];

    /// Derives this regime's settings from `base`; everything except time
    /// steps and the perturbation switch is shared.
    pub fn config(self, base: &TrainConfig, multi_steps: usize) -> TrainConfig {
        let mut config = base.clone();
        config.train_time_steps = if self == Paradigm::MultiStep { multi_steps } else { 1 };
        config.perturbation.enabled = self == Paradigm::SingleStepPerturbed;
        config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub paradigm: Paradigm,
    pub train_time_steps: usize,
    pub perturbation: bool,
    /// Column `t` is the accuracy when averaging over `t + 1` inference steps.
    pub accuracy: Vec<f64>,
    pub per_step_accuracy: Vec<f64>,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub epochs: usize,
    pub eval_time_steps: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

/// Trains one model per [`Paradigm`] from the same initialization and scores
/// each with 1..=`max_eval_steps` averaged inference steps. A run with `t`
/// steps sees exactly the first `t` steps of a longer run, so one evaluation
/// at `max_eval_steps` yields every column.
pub fn compare_paradigms(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    multi_steps: usize,
    max_eval_steps: usize,
    mut on_epoch: impl FnMut(Paradigm, &EpochRecord),
) -> Result<Comparison, Error> {
    if spec.mode != Mode::Snn {
        return Err(Error::Config("paradigm comparison needs an snn-mode model".into()));
    }
    if multi_steps < 1 || max_eval_steps < 1 {
        return Err(Error::Config("time steps must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(Paradigm::ALL.len());
    for paradigm in Paradigm::ALL {
        let config = paradigm.config(base, multi_steps);
        let initial = build_model::<f32>(spec, base.seed)?;
        let outcome = train(spec, initial, train_set, None, &config, |r| on_epoch(paradigm, r))?;
        let report = evaluate(&outcome.params, spec, test_set, max_eval_steps, config.batch_size)?;
        rows.push(ComparisonRow {
            paradigm,
            train_time_steps: config.train_time_steps,
            perturbation: config.perturbation.enabled,
            accuracy: report.ensemble_accuracy,
            per_step_accuracy: report.per_step_accuracy,
            final_train_loss: outcome.log.last().map_or(f64::NAN, |r| r.train_loss),
        });
    }
    Ok(Comparison {
        seed: base.seed,
        epochs: base.epochs,
        eval_time_steps: (1..=max_eval_steps).collect(),
        rows,
    })
}
