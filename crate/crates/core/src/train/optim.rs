use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};
use crate::Error;

/// Adaptive-moment hyperparameters with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }
}

/// One update of every parameter from its `(name, gradient)` pair.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[(String, Tensor<T>)],
    state: &mut OptimizerState<T>,
    hyper: &AdamHyper,
) -> Result<(), Error> {
    if params.len() != grads.len() {
        return Err(Error::State(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (p, (name, g)) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::State(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.second = state.first.clone();
    } else if state.first.len() != params.len() {
        return Err(Error::State("optimizer state does not match parameters".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = hyper.learning_rate;
    let decay = 1.0 - lr * hyper.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].1.data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64().unwrap_or(f64::NAN);
            let mj = b1 * m[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let m_hat = mj / correction1;
            let v_hat = vj / correction2;
            let wj = w.to_f64().unwrap_or(0.0) * decay - lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
            *w = T::lit(wj);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(p: &mut Tensor<f64>, g: Tensor<f64>, state: &mut OptimizerState<f64>, hyper: &AdamHyper) -> Result<(), Error> {
        adam_step(&mut [p], &[("w".to_string(), g)], state, hyper)
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new();
        for _ in 0..5 {
            step_once(&mut p, Tensor::zeros(&[3]), &mut state, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let hyper = AdamHyper::default();
        let g = [0.3, -4.0, 1e-9, 0.0];
        let mut p = Tensor::<f64>::zeros(&[4]);
        step_once(&mut p, Tensor::new(&[4], g.to_vec()).unwrap(), &mut OptimizerState::new(), &hyper).unwrap();
        for (w, g) in p.data().iter().zip(g) {
            let expected = -hyper.learning_rate * g / (g.abs() + hyper.epsilon);
            assert!((w - expected).abs() <= 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut a = Tensor::<f64>::full(&[2], 1.0);
        let mut b = Tensor::<f64>::full(&[2], 1.0);
        let grads = vec![
            ("layer.a".to_string(), Tensor::full(&[2], 0.5)),
            ("layer.b".to_string(), Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap()),
        ];
        let mut state = OptimizerState::new();
        let err = adam_step(&mut [&mut a, &mut b], &grads, &mut state, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref name) if name == "layer.b"));
        assert_eq!(a, Tensor::full(&[2], 1.0));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let target = [1.5, -2.0, 3.0];
        let loss = |p: &Tensor<f64>| p.data().iter().zip(target).map(|(w, t)| (w - t).powi(2)).sum::<f64>();
        let mut p = Tensor::<f64>::zeros(&[3]);
        let mut state = OptimizerState::new();
        let hyper = AdamHyper {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut losses = vec![loss(&p)];
        for _ in 0..100 {
            let g = Tensor::from_fn(&[3], |i| 2.0 * (p.data()[i] - target[i]));
            step_once(&mut p, g, &mut state, &hyper).unwrap();
            losses.push(loss(&p));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = Tensor::<f64>::full(&[1], 2.0);
        step_once(&mut p, Tensor::zeros(&[1]), &mut OptimizerState::new(), &hyper).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
