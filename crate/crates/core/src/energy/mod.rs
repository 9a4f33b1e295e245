//! Operation counts and energy estimates for one forward pass, and
//! first-layer gradient histograms.
//!
//! Counting conventions:
//!
//! - A MAC is one multiplication paired with one addition.
//! - A real-valued input into a linear layer costs `in · out` MACs per row.
//! - A binary spike input costs `fan_out` accumulations per spike, and nothing
//!   for silent inputs.
//! - Bias adds are one accumulation per output element.
//! - Batch norm is folded into the preceding linear layer unless
//!   [`CountOptions::fold_norm`] is off, in which case it costs one MAC per
//!   element.
//! - Max pooling costs `(points − 1) · features` comparisons. Comparisons are
//!   reported but carry no energy.

mod hist;

use serde::{Deserialize, Serialize};

pub use hist::{gradient_histogram, GradientHistogram, HistogramBins, HistogramRequest};

use crate::model::{ModelSpec, SpikeTrace};
use crate::tensor::Real;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub technology: String,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
            technology: "45nm CMOS".into(),
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<(), Error> {
        if self.e_mac_pj > 0.0 && self.e_ac_pj > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("energy constants must be positive".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountOptions {
    pub fold_norm: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self { fold_norm: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    pub macs: u64,
    /// Spike-gated synaptic accumulations.
    pub accumulations: u64,
    pub bias_adds: u64,
    pub comparisons: u64,
}

impl LayerOps {
    fn named(name: String) -> Self {
        Self {
            name,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub layers: Vec<LayerOps>,
    pub time_steps: usize,
    /// Forward passes covered by the counts.
    pub samples: usize,
    /// Spike fraction over all spiking outputs; 0 for ANN counts.
    pub firing_rate: f64,
}

impl OpCounts {
    pub fn multiplications(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn additions(&self) -> u64 {
        self.layers.iter().map(|l| l.macs + l.accumulations + l.bias_adds).sum()
    }

    pub fn macs(&self) -> u64 {
        self.multiplications()
    }

    /// Additions not paired with a multiplication.
    pub fn pure_accumulations(&self) -> u64 {
        self.layers.iter().map(|l| l.accumulations + l.bias_adds).sum()
    }

    pub fn comparisons(&self) -> u64 {
        self.layers.iter().map(|l| l.comparisons).sum()
    }

    /// Adds the counts of another run of the same model and horizon, e.g. the
    /// next batch. The firing rate becomes the sample-weighted mean.
    pub fn absorb(&mut self, other: &OpCounts) -> Result<(), Error> {
        let same_layout = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.name == b.name);
        if !same_layout || self.time_steps != other.time_steps {
            return Err(Error::State("op counts come from different models or horizons".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.macs += b.macs;
            a.accumulations += b.accumulations;
            a.bias_adds += b.bias_adds;
            a.comparisons += b.comparisons;
        }
        let total = (self.samples + other.samples).max(1) as f64;
        self.firing_rate = (self.firing_rate * self.samples as f64 + other.firing_rate * other.samples as f64) / total;
        self.samples += other.samples;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mac_pj: f64,
    pub ac_pj: f64,
    pub total_pj: f64,
    pub per_sample_pj: f64,
}

pub fn estimate_energy(counts: &OpCounts, constants: &EnergyConstants) -> EnergyReport {
    let mac_pj = counts.macs() as f64 * constants.e_mac_pj;
    let ac_pj = counts.pure_accumulations() as f64 * constants.e_ac_pj;
    let total_pj = mac_pj + ac_pj;
    EnergyReport {
        mac_pj,
        ac_pj,
        total_pj,
        per_sample_pj: total_pj / counts.samples.max(1) as f64,
    }
}

/// Energy of `baseline` per sample divided by that of `candidate` per sample.
pub fn energy_ratio(baseline: &OpCounts, candidate: &OpCounts, constants: &EnergyConstants) -> f64 {
    estimate_energy(baseline, constants).per_sample_pj / estimate_energy(candidate, constants).per_sample_pj
}

/// Hidden layers in forward order with `(name, in, out, rows per sample)`.
fn hidden_layout(spec: &ModelSpec, n: u64) -> Vec<(String, u64, u64, u64)> {
    let point = spec
        .point_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| (format!("point.{i}"), a as u64, b as u64, n));
    let head = spec
        .head_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| (format!("head.{i}"), a as u64, b as u64, 1));
    point.chain(head).collect()
}

fn pool_ops(spec: &ModelSpec, n: u64) -> LayerOps {
    LayerOps {
        comparisons: (n - 1) * spec.global_features() as u64,
        ..LayerOps::named("pool".into())
    }
}

/// Dense counts for one ANN forward pass over `n` points.
pub fn count_ann_ops(spec: &ModelSpec, n: usize, options: CountOptions) -> Result<OpCounts, Error> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("point count must be positive".into()));
    }
    let n = n as u64;
    let mut layers = Vec::new();
    let layout = hidden_layout(spec, n);
    let points = spec.point_mlp_widths.len();
    for (i, (name, fan_in, fan_out, rows)) in layout.into_iter().enumerate() {
        let norm = if options.fold_norm { 0 } else { rows * fan_out };
        layers.push(LayerOps {
            macs: rows * fan_in * fan_out + norm,
            bias_adds: rows * fan_out,
            ..LayerOps::named(name)
        });
        if i + 1 == points {
            layers.push(pool_ops(spec, n));
        }
    }
    let (fan_in, fan_out) = spec.classifier_shape();
    layers.push(LayerOps {
        macs: (fan_in * fan_out) as u64,
        bias_adds: fan_out as u64,
        ..LayerOps::named("classifier".into())
    });
    Ok(OpCounts {
        layers,
        time_steps: 1,
        samples: 1,
        firing_rate: 0.0,
    })
}

/// Spike counts a spiking layer's input sees, per step.
fn nonzero<T: Real>(values: &[T]) -> Result<u64, Error> {
    let mut count = 0;
    for &v in values {
        if v == T::one() {
            count += 1;
        } else if v != T::zero() {
            return Err(Error::State("spike trace is not binary".into()));
        }
    }
    Ok(count)
}

/// Counts for the spiking forward that produced `trace`: the first layer
/// multiplies the real-valued coordinates every step, every later layer
/// accumulates only over spikes that arrived.
pub fn count_snn_ops<T: Real>(spec: &ModelSpec, trace: &SpikeTrace<T>, options: CountOptions) -> Result<OpCounts, Error> {
    spec.validate()?;
    let steps = trace.steps.len();
    if steps == 0 {
        return Err(Error::State("spike trace has no steps".into()));
    }
    let hidden = spec.hidden_layers();
    let first = &trace.steps[0];
    if first.layer_spikes.len() != hidden {
        return Err(Error::State(format!(
            "trace has {} layers, spec has {hidden}",
            first.layer_spikes.len()
        )));
    }
    let shape0 = first.layer_spikes[0].shape();
    if shape0.len() != 3 {
        return Err(Error::State(format!("point-layer spikes must be [batch, n, w], got {shape0:?}")));
    }
    let (batch, n) = (shape0[0], shape0[1]);
    let layout = hidden_layout(spec, n as u64);
    for step in &trace.steps {
        if step.layer_spikes.len() != hidden {
            return Err(Error::State("trace steps disagree on layer count".into()));
        }
        for (i, ((name, _, fan_out, _), spikes)) in layout.iter().zip(&step.layer_spikes).enumerate() {
            // Point layers keep their point axis even for single-point clouds.
            let expected: Vec<usize> = if i < spec.point_mlp_widths.len() {
                vec![batch, n, *fan_out as usize]
            } else {
                vec![batch, *fan_out as usize]
            };
            if spikes.shape() != expected.as_slice() {
                return Err(Error::State(format!(
                    "{name} spikes have shape {:?}, expected {expected:?}",
                    spikes.shape()
                )));
            }
        }
        if step.pooled.shape() != [batch, spec.global_features()] {
            return Err(Error::State(format!("pooled spikes have shape {:?}", step.pooled.shape())));
        }
    }

    let (b, t) = (batch as u64, steps as u64);
    let points = spec.point_mlp_widths.len();
    let mut layers: Vec<LayerOps> = layout.iter().map(|(name, ..)| LayerOps::named(name.clone())).collect();
    let mut pool = pool_ops(spec, n as u64);
    pool.comparisons *= b * t;
    let mut classifier = LayerOps::named("classifier".into());
    let (_, classes) = spec.classifier_shape();
    let (mut spikes, mut slots) = (0u64, 0u64);

    for step in &trace.steps {
        for (i, (_, fan_in, fan_out, rows)) in layout.iter().enumerate() {
            let out = &mut layers[i];
            out.bias_adds += b * rows * fan_out;
            if !options.fold_norm {
                out.macs += b * rows * fan_out;
            }
            if i == 0 {
                out.macs += b * rows * fan_in * fan_out;
                continue;
            }
            let input = if i == points { &step.pooled } else { &step.layer_spikes[i - 1] };
            out.accumulations += nonzero(input.data())? * fan_out;
        }
        for s in &step.layer_spikes {
            spikes += nonzero(s.data())?;
            slots += s.len() as u64;
        }
        let last = if spec.head_widths.is_empty() {
            &step.pooled
        } else {
            step.layer_spikes.last().expect("hidden layers")
        };
        classifier.accumulations += nonzero(last.data())? * classes as u64;
        classifier.bias_adds += b * classes as u64;
    }
    layers.insert(points, pool);
    layers.push(classifier);
    Ok(OpCounts {
        layers,
        time_steps: steps,
        samples: batch,
        firing_rate: spikes as f64 / slots as f64,
    })
}

/// Expected counts for one sample over `steps` steps when every spiking
/// input fires at `firing_rate`. Accumulations are rounded to the nearest
/// integer per layer.
pub fn count_snn_ops_at_rate(
    spec: &ModelSpec,
    n: usize,
    steps: usize,
    firing_rate: f64,
    options: CountOptions,
) -> Result<OpCounts, Error> {
    if !(0.0..=1.0).contains(&firing_rate) {
        return Err(Error::Config(format!("firing rate must lie in [0, 1], got {firing_rate}")));
    }
    if steps < 1 {
        return Err(Error::Config("time steps must be >= 1".into()));
    }
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("point count must be positive".into()));
    }
    let (n, t) = (n as u64, steps as u64);
    let gated = |dense: u64| (dense as f64 * firing_rate * t as f64).round() as u64;
    let points = spec.point_mlp_widths.len();
    let mut layers = Vec::new();
    for (i, (name, fan_in, fan_out, rows)) in hidden_layout(spec, n).into_iter().enumerate() {
        let mut ops = LayerOps::named(name);
        ops.bias_adds = rows * fan_out * t;
        if !options.fold_norm {
            ops.macs = rows * fan_out * t;
        }
        if i == 0 {
            ops.macs += rows * fan_in * fan_out * t;
        } else {
            ops.accumulations = gated(rows * fan_in * fan_out);
        }
        layers.push(ops);
        if i + 1 == points {
            let mut pool = pool_ops(spec, n);
            pool.comparisons *= t;
            layers.push(pool);
        }
    }
    let (fan_in, fan_out) = spec.classifier_shape();
    layers.push(LayerOps {
        accumulations: gated((fan_in * fan_out) as u64),
        bias_adds: fan_out as u64 * t,
        ..LayerOps::named("classifier".into())
    });
    Ok(OpCounts {
        layers,
        time_steps: steps,
        samples: 1,
        firing_rate,
    })
}
