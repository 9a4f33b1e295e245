//! Leaky integrate-and-fire neurons with a tanh surrogate gradient.
//!
//! Forward dynamics per step, with soft reset by subtraction:
//!
//! ```text
//! u' = leak · (u − v_th · s) + I
//! s' = H(u' − v_th)
//! ```
//!
//! Backward replaces `∂s/∂u` with `φ'(u)`, where
//! `φ(x) = ½ tanh(k (x − v_th)) + ½`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Op;
use crate::tensor::{GradTape, Real, Tensor, TensorError, Var};
use crate::Error;

/// Constants of the neuron model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronConfig {
    pub v_th: f64,
    pub leak: f64,
    /// Surrogate slope.
    pub k: f64,
    /// `u == v_th` fires when set.
    pub spike_at_threshold: bool,
    /// Drop the `∂u[t+1]/∂s[t]` reset path from the gradient.
    pub detach_reset: bool,
    /// Forward emits `φ(u)` instead of the Heaviside step. Only for
    /// gradient verification.
    pub relaxed: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            v_th: 0.5,
            leak: 0.25,
            k: 5.0,
            spike_at_threshold: true,
            detach_reset: false,
            relaxed: false,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        // A leak of 0 is a legal degenerate (memoryless) neuron; 1 is not leaky.
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Config(format!("leak must lie in [0, 1), got {}", self.leak)));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("surrogate slope k must be positive, got {}", self.k)));
        }
        Ok(())
    }

    fn fires<T: Real>(&self, u: T, v_th: T) -> bool {
        if self.spike_at_threshold {
            u >= v_th
        } else {
            u > v_th
        }
    }
}

/// Membrane potential and last emitted spikes of one layer, as tape nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerState {
    pub membrane: Var,
    pub last_spikes: Var,
}

impl LayerState {
    /// Records a resting state (`initial` membrane, no spikes) as constants.
    pub fn resting<T: Real>(tape: &mut GradTape<T>, initial: Tensor<T>) -> Self {
        let spikes = Tensor::zeros(initial.shape());
        Self {
            membrane: tape.constant(initial),
            last_spikes: tape.constant(spikes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    PerEpoch,
    PerBatch,
}

/// Random initial membrane potential applied during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub delta_max: f64,
    pub enabled: bool,
    pub resample_policy: ResamplePolicy,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.5,
            enabled: false,
            resample_policy: ResamplePolicy::PerEpoch,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    /// Draws come from the half-open `[0, delta_max)`, so `delta_max == v_th`
    /// still keeps every initial potential strictly below threshold.
    pub fn validate(&self, v_th: f64) -> Result<(), Error> {
        if !(self.delta_max >= 0.0 && self.delta_max <= v_th) {
            return Err(Error::Config(format!(
                "perturbation delta_max must lie in [0, v_th={v_th}], got {}",
                self.delta_max
            )));
        }
        Ok(())
    }
}

/// Identifies one perturbation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerturbKey {
    pub epoch: u64,
    pub batch: u64,
    pub layer: u64,
}

/// Per-neuron `δ ~ U[0, delta_max)`, or zeros when disabled.
///
/// Under the per-epoch policy the batch index is ignored, so every batch of
/// an epoch sees the same tensor.
pub fn perturb_init<T: Real>(
    shape: &[usize],
    pconfig: &PerturbationConfig,
    v_th: f64,
    key: PerturbKey,
) -> Result<Tensor<T>, Error> {
    pconfig.validate(v_th)?;
    if !pconfig.enabled {
        return Ok(Tensor::zeros(shape));
    }
    let batch = match pconfig.resample_policy {
        ResamplePolicy::PerEpoch => 0,
        ResamplePolicy::PerBatch => key.batch,
    };
    let mut stream = rng::keyed(pconfig.seed, &[rng::PERTURBATION, key.epoch, batch, key.layer]);
    let delta_max = pconfig.delta_max;
    Ok(Tensor::from_fn(shape, |_| T::lit(stream.random::<f64>() * delta_max)))
}

/// `φ(x) = ½ tanh(k (x − v_th)) + ½`
pub fn surrogate_scalar<T: Real>(x: T, v_th: T, k: T) -> T {
    let half = T::lit(0.5);
    half * (k * (x - v_th)).tanh() + half
}

/// `φ'(x) = (k/2) (1 − tanh²(z))` with `z = k (x − v_th)`, evaluated as
/// `2k e / (1 + e)²` with `e = exp(−2|z|)`: one exponential, and exactly
/// even in `z`.
pub fn surrogate_grad_scalar<T: Real>(x: T, v_th: T, k: T) -> T {
    let e = (-(T::lit(2.0) * k * (x - v_th)).abs()).exp();
    let d = T::one() + e;
    T::lit(2.0) * k * e / (d * d)
}

pub fn surrogate_value<T: Real>(x: &Tensor<T>, config: &NeuronConfig) -> Tensor<T> {
    let (v_th, k) = (T::lit(config.v_th), T::lit(config.k));
    x.map(|v| surrogate_scalar(v, v_th, k))
}

pub fn surrogate_grad<T: Real>(x: &Tensor<T>, config: &NeuronConfig) -> Tensor<T> {
    let (v_th, k) = (T::lit(config.v_th), T::lit(config.k));
    x.map(|v| surrogate_grad_scalar(v, v_th, k))
}

/// One LIF update. Records the membrane and spike nodes on the tape and
/// returns the emitted spikes with the successor state.
pub fn lif_step<T: Real>(
    tape: &mut GradTape<T>,
    state: LayerState,
    current: Var,
    config: &NeuronConfig,
) -> Result<(Var, LayerState), TensorError> {
    let (ci, mi, si) = (
        tape.resolve(current)?,
        tape.resolve(state.membrane)?,
        tape.resolve(state.last_spikes)?,
    );
    let input = tape.value(current);
    let u = tape.value(state.membrane);
    let s = tape.value(state.last_spikes);
    input.expect_same_shape(u, "lif_step")?;
    input.expect_same_shape(s, "lif_step")?;

    let (leak, v_th, k) = (T::lit(config.leak), T::lit(config.v_th), T::lit(config.k));
    let mut next = input.clone();
    for ((n, &uv), &sv) in next.data_mut().iter_mut().zip(u.data()).zip(s.data()) {
        *n = leak * (uv - v_th * sv) + *n;
    }
    let spikes = if config.relaxed {
        next.map(|v| surrogate_scalar(v, v_th, k))
    } else {
        next.map(|v| if config.fires(v, v_th) { T::one() } else { T::zero() })
    };
    let membrane = tape.push(
        next,
        Op::Membrane {
            current: ci,
            prev_membrane: mi,
            prev_spikes: si,
            leak,
            v_th,
            detach_reset: config.detach_reset,
        },
    );
    let mi_new = tape.resolve(membrane)?;
    let spike_var = tape.push(
        spikes,
        Op::Spike {
            membrane: mi_new,
            v_th,
            k,
        },
    );
    Ok((
        spike_var,
        LayerState {
            membrane,
            last_spikes: spike_var,
        },
    ))
}

/// Gradient of the membrane update `u' = leak (u − v_th s) + I` with
/// respect to `(I, u, s)`, given `∂L/∂u'`.
pub(crate) fn membrane_backward<T: Real>(
    upstream: &Tensor<T>,
    leak: T,
    v_th: T,
    detach_reset: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let d_membrane = upstream.map(|g| g * leak);
    let d_spikes = (!detach_reset).then(|| upstream.map(|g| -(g * leak * v_th)));
    (upstream.clone(), d_membrane, d_spikes)
}

/// Surrogate rule for the spike node: `∂L/∂u' += ∂L/∂s · φ'(u')`.
pub(crate) fn spike_backward<T: Real>(upstream: &Tensor<T>, membrane: &Tensor<T>, v_th: T, k: T) -> Result<Tensor<T>, TensorError> {
    upstream.zip_map(membrane, |g, u| if g == T::zero() { g } else { g * surrogate_grad_scalar(u, v_th, k) })
}

/// Gradients leaving one LIF step.
#[derive(Clone, Debug, PartialEq)]
pub struct LifGrads<T> {
    pub current: Tensor<T>,
    pub prev_membrane: Tensor<T>,
    /// `None` when the reset path is detached.
    pub prev_spikes: Option<Tensor<T>>,
}

/// Closed-form backward of a single LIF step: combines the spike path
/// (through the surrogate) with any direct membrane gradient, then splits
/// it across the three inputs of the membrane update.
pub fn lif_backward<T: Real>(
    saved_membrane: Option<&Tensor<T>>,
    upstream_spikes: &Tensor<T>,
    upstream_membrane: Option<&Tensor<T>>,
    config: &NeuronConfig,
) -> Result<LifGrads<T>, TensorError> {
    let u = saved_membrane.ok_or_else(|| TensorError::Tape("lif_backward: saved membrane missing".into()))?;
    let (leak, v_th, k) = (T::lit(config.leak), T::lit(config.v_th), T::lit(config.k));
    let mut total = spike_backward(upstream_spikes, u, v_th, k)?;
    if let Some(extra) = upstream_membrane {
        total.expect_same_shape(extra, "lif_backward")?;
        total.add_assign(extra);
    }
    let (current, prev_membrane, prev_spikes) = membrane_backward(&total, leak, v_th, config.detach_reset);
    Ok(LifGrads {
        current,
        prev_membrane,
        prev_spikes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(tape: &mut GradTape<f64>, u: f64, s: f64) -> LayerState {
        LayerState {
            membrane: tape.constant(Tensor::scalar(u)),
            last_spikes: tape.constant(Tensor::scalar(s)),
        }
    }

    fn step(u: f64, s: f64, i: f64) -> (f64, f64) {
        let mut tape = GradTape::new();
        let state = scalar_state(&mut tape, u, s);
        let current = tape.constant(Tensor::scalar(i));
        let (spk, next) = lif_step(&mut tape, state, current, &NeuronConfig::default()).unwrap();
        (tape.value(next.membrane).data()[0], tape.value(spk).data()[0])
    }

    #[test]
    fn rest_stays_at_rest() {
        assert_eq!(step(0.0, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn fires_then_soft_resets() {
        let (u1, s1) = step(0.0, 0.0, 0.6);
        assert_eq!((u1, s1), (0.6, 1.0));
        let (u2, s2) = step(u1, s1, 0.6);
        assert!((u2 - 0.625).abs() < 1e-15);
        assert_eq!(s2, 1.0);
    }

    #[test]
    fn leaks_below_threshold() {
        let (u, s) = step(0.4, 0.0, 0.0);
        assert!((u - 0.1).abs() < 1e-15);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn threshold_equality_is_configurable() {
        let mut tape = GradTape::new();
        let state = scalar_state(&mut tape, 0.0, 0.0);
        let current = tape.constant(Tensor::scalar(0.5));
        let strict = NeuronConfig {
            spike_at_threshold: false,
            ..Default::default()
        };
        let (spk, _) = lif_step(&mut tape, state, current, &strict).unwrap();
        assert_eq!(tape.value(spk).data()[0], 0.0);
        let (spk, _) = lif_step(&mut tape, state, current, &NeuronConfig::default()).unwrap();
        assert_eq!(tape.value(spk).data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = GradTape::<f64>::new();
        let state = LayerState::resting(&mut tape, Tensor::zeros(&[2, 3]));
        let current = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            lif_step(&mut tape, state, current, &NeuronConfig::default()),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn surrogate_reference_points() {
        let cfg = NeuronConfig::default();
        assert_eq!(surrogate_scalar(0.5, 0.5, 5.0), 0.5);
        assert_eq!(surrogate_grad_scalar(0.5, 0.5, 5.0), 2.5);
        let expected = 0.5 * 1f64.tanh() + 0.5;
        assert!((surrogate_scalar(0.7, cfg.v_th, cfg.k) - expected).abs() < 1e-15);
        assert!((expected - 0.880_797).abs() < 1e-6);
        assert!(surrogate_scalar(50.0, 0.5, 5.0) > 1.0 - 1e-12);
        assert!(surrogate_scalar(-50.0, 0.5, 5.0) < 1e-12);
    }

    #[test]
    fn surrogate_grad_is_even_about_threshold() {
        for i in 0..50 {
            let d = i as f64 * 0.037;
            let a = surrogate_grad_scalar(0.5 + d, 0.5, 5.0);
            let b = surrogate_grad_scalar(0.5 - d, 0.5, 5.0);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{d}: {a} vs {b}");
            assert!(a > 0.0 && a <= 2.5);
        }
    }

    #[test]
    fn lif_backward_single_step_collapses_to_surrogate() {
        let cfg = NeuronConfig::default();
        let u = Tensor::new(&[3], vec![0.2, 0.5, 0.9]).unwrap();
        let up = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let grads = lif_backward(Some(&u), &up, None, &cfg).unwrap();
        for i in 0..3 {
            let want = up.data()[i] * surrogate_grad_scalar(u.data()[i], 0.5, 5.0);
            assert_eq!(grads.current.data()[i], want);
            assert_eq!(grads.prev_membrane.data()[i], want * 0.25);
            assert_eq!(grads.prev_spikes.as_ref().unwrap().data()[i], -(want * 0.25 * 0.5));
        }
    }

    #[test]
    fn zero_leak_blocks_state_gradient() {
        let cfg = NeuronConfig {
            leak: 0.0,
            ..Default::default()
        };
        let u = Tensor::new(&[2], vec![0.3, 0.6]).unwrap();
        let up = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let grads = lif_backward(Some(&u), &up, Some(&up), &cfg).unwrap();
        assert!(grads.prev_membrane.data().iter().all(|&g| g == 0.0));
        assert!(grads.prev_spikes.unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lif_backward_requires_saved_membrane() {
        let up = Tensor::<f64>::scalar(1.0);
        let res = lif_backward(None, &up, None, &NeuronConfig::default());
        assert!(matches!(res, Err(TensorError::Tape(_))));
    }

    #[test]
    fn perturbation_bounds_and_policy() {
        let p = PerturbationConfig {
            enabled: true,
            seed: 3,
            ..Default::default()
        };
        let key = |epoch, batch| PerturbKey { epoch, batch, layer: 0 };
        let a: Tensor<f64> = perturb_init(&[64, 8], &p, 0.5, key(0, 0)).unwrap();
        let b: Tensor<f64> = perturb_init(&[64, 8], &p, 0.5, key(0, 5)).unwrap();
        let c: Tensor<f64> = perturb_init(&[64, 8], &p, 0.5, key(1, 0)).unwrap();
        assert!(a.data().iter().all(|&d| (0.0..=0.5).contains(&d)));
        assert_eq!(a, b, "per-epoch policy ignores the batch");
        assert_ne!(a, c);

        let per_batch = PerturbationConfig {
            resample_policy: ResamplePolicy::PerBatch,
            ..p
        };
        let d: Tensor<f64> = perturb_init(&[64, 8], &per_batch, 0.5, key(0, 0)).unwrap();
        let e: Tensor<f64> = perturb_init(&[64, 8], &per_batch, 0.5, key(0, 1)).unwrap();
        assert_ne!(d, e);
    }

    #[test]
    fn disabled_perturbation_is_zero() {
        let p = PerturbationConfig::default();
        let t: Tensor<f32> = perturb_init(&[4, 4], &p, 0.5, PerturbKey { epoch: 0, batch: 0, layer: 0 }).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbation_must_stay_below_threshold() {
        let p = PerturbationConfig {
            delta_max: 0.6,
            enabled: true,
            ..Default::default()
        };
        let key = PerturbKey { epoch: 0, batch: 0, layer: 0 };
        assert!(matches!(perturb_init::<f64>(&[2], &p, 0.5, key), Err(Error::Config(_))));
        assert!(perturb_init::<f64>(&[2], &p, 0.6, key).is_ok());
        let negative = PerturbationConfig { delta_max: -0.1, ..p };
        assert!(perturb_init::<f64>(&[2], &negative, 0.5, key).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NeuronConfig::default().validate().is_ok());
        assert!(NeuronConfig { leak: 1.0, ..Default::default() }.validate().is_err());
        assert!(NeuronConfig { k: 0.0, ..Default::default() }.validate().is_err());
        assert!(NeuronConfig { v_th: -1.0, ..Default::default() }.validate().is_err());
    }
}
