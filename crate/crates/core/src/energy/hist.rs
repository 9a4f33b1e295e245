use serde::{Deserialize, Serialize};

use crate::model::{build_model, ForwardCtx, MembraneInit, Mode, ModelSpec};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::batch_gradients;
use crate::Error;

/// Uniform bins over `log10 |g|`; magnitudes outside the range land in the
/// edge bins and exact zeros in a separate counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramBins {
    pub log10_min: f64,
    pub log10_max: f64,
    pub bins: usize,
}

impl Default for HistogramBins {
    fn default() -> Self {
        Self {
            log10_min: -12.0,
            log10_max: 4.0,
            bins: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientHistogram {
    pub layer: String,
    pub k: f64,
    pub time_steps: usize,
    pub seed: u64,
    /// `bins + 1` edges in log10 units.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub zero_count: u64,
    pub fraction_below_1e_6: f64,
    pub fraction_above_1e1: f64,
    /// Interquartile range of `log10 |g|` over nonzero gradients.
    pub log10_iqr: f64,
    /// Largest bin count as a fraction of nonzero gradients.
    pub peak_fraction: f64,
    /// `log10_iqr / peak_fraction`; larger means flatter.
    pub flatness: f64,
    /// Raw `|g|`, kept for threshold comparisons across runs.
    #[serde(skip)]
    pub magnitudes: Vec<f64>,
}

impl GradientHistogram {
    pub fn total(&self) -> u64 {
        self.zero_count + self.counts.iter().sum::<u64>()
    }

    /// Fraction of all gradients with `|g|` strictly above `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.magnitudes.iter().filter(|&&m| m > threshold).count() as f64 / self.magnitudes.len() as f64
    }

    /// The `q`-quantile of `|g|` (nearest rank, `q` in `[0, 1]`).
    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&sorted(&self.magnitudes), q)
    }

    pub fn from_magnitudes(
        magnitudes: Vec<f64>,
        bins: &HistogramBins,
        layer: String,
        k: f64,
        time_steps: usize,
        seed: u64,
    ) -> Self {
        let width = (bins.log10_max - bins.log10_min) / bins.bins as f64;
        let edges = (0..=bins.bins).map(|i| bins.log10_min + width * i as f64).collect();
        let mut counts = vec![0u64; bins.bins];
        let mut zero_count = 0;
        let mut logs = Vec::with_capacity(magnitudes.len());
        for &m in &magnitudes {
            if m == 0.0 {
                zero_count += 1;
                continue;
            }
            let l = m.log10();
            logs.push(l);
            let bin = ((l - bins.log10_min) / width).floor().clamp(0.0, (bins.bins - 1) as f64) as usize;
            counts[bin] += 1;
        }
        let total = magnitudes.len().max(1) as f64;
        let logs = sorted(&logs);
        let nonzero = logs.len();
        let log10_iqr = if nonzero == 0 {
            0.0
        } else {
            quantile_sorted(&logs, 0.75) - quantile_sorted(&logs, 0.25)
        };
        let peak_fraction = counts.iter().copied().max().unwrap_or(0) as f64 / nonzero.max(1) as f64;
        Self {
            layer,
            k,
            time_steps,
            seed,
            edges,
            counts,
            zero_count,
            fraction_below_1e_6: magnitudes.iter().filter(|&&m| m < 1e-6).count() as f64 / total,
            fraction_above_1e1: magnitudes.iter().filter(|&&m| m > 1e1).count() as f64 / total,
            log10_iqr,
            peak_fraction,
            flatness: if peak_fraction > 0.0 { log10_iqr / peak_fraction } else { 0.0 },
            magnitudes,
        }
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// One batch and the grid of `(k, T)` cells to histogram.
#[derive(Clone, Debug)]
pub struct HistogramRequest<'a> {
    pub points: &'a Tensor<f32>,
    pub labels: &'a [usize],
    pub ks: &'a [f64],
    pub time_steps: &'a [usize],
    pub seed: u64,
    pub bins: HistogramBins,
}

/// For every `(k, T)`: a fresh model from `seed` with surrogate sharpness
/// `k`, one training-mode forward and backward over `T` steps on the batch,
/// and a histogram of the first layer's weight gradients.
pub fn gradient_histogram(spec: &ModelSpec, request: &HistogramRequest<'_>) -> Result<Vec<GradientHistogram>, Error> {
    if spec.mode != Mode::Snn {
        return Err(Error::Config("gradient histograms need an snn-mode model".into()));
    }
    if request.ks.iter().any(|&k| !(k > 0.0)) || request.time_steps.contains(&0) {
        return Err(Error::Config("k values must be positive and time steps >= 1".into()));
    }
    if request.bins.bins == 0 || !(request.bins.log10_max > request.bins.log10_min) {
        return Err(Error::Config("histogram needs at least one bin over a nonempty range".into()));
    }
    let mut out = Vec::with_capacity(request.ks.len() * request.time_steps.len());
    for &k in request.ks {
        let mut cell_spec = spec.clone();
        cell_spec.neuron.k = k;
        cell_spec.validate()?;
        let params = build_model::<f32>(&cell_spec, request.seed)?;
        for &steps in request.time_steps {
            let mut ctx = ForwardCtx::train(cell_spec.dropout_rate, rng::keyed(request.seed, &[rng::DROPOUT]));
            let result = batch_gradients(
                &params,
                &cell_spec,
                request.points,
                request.labels,
                steps,
                &MembraneInit::Zeros,
                &mut ctx,
            )?;
            let (name, grad) = result.grads.into_iter().next().expect("first layer weight");
            let magnitudes = grad.data().iter().map(|g| (*g as f64).abs()).collect();
            out.push(GradientHistogram::from_magnitudes(
                magnitudes,
                &request.bins,
                name,
                k,
                steps,
                request.seed,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_cover_every_value() {
        let mags = vec![0.0, 1e-20, 1e-3, 1e-3, 5.0, 1e9];
        let h = GradientHistogram::from_magnitudes(mags, &HistogramBins::default(), "w".into(), 5.0, 1, 0);
        assert_eq!(h.total(), 6);
        assert_eq!(h.zero_count, 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(*h.counts.last().unwrap(), 1);
        assert_eq!(h.edges.len(), 65);
        assert!((h.fraction_below_1e_6 - 2.0 / 6.0).abs() < 1e-15);
        assert!((h.fraction_above_1e1 - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(h.fraction_above(1.0), 2.0 / 6.0);
    }
}
