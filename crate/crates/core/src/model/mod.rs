//! Vanilla PointNet (shared per-point MLP, max over points, MLP head) in two
//! flavours: ReLU activations, or LIF neurons driven for several time steps.

mod checkpoint;
mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::neuron::NeuronConfig;
use crate::rng;
use crate::tensor::{BatchNormParams, GradTape, LinearParams, Real, Tensor, Var};
use crate::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward_ann, forward_snn_step, infer_ann, perturbation_init, run_snn, ForwardCtx, MembraneInit, NetworkState,
    SnnRun, SpikeTrace, StepTrace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ann,
    Snn,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ann" => Ok(Mode::Ann),
            "snn" => Ok(Mode::Snn),
            other => Err(format!("unknown mode {other:?}, expected ann or snn")),
        }
    }
}

/// Architecture description. Defaults follow the PointNet reference widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub point_mlp_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub mode: Mode,
    pub neuron: NeuronConfig,
    /// Applied after the last hidden head layer, training only.
    pub dropout_rate: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            point_mlp_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256],
            num_classes: 40,
            mode: Mode::Snn,
            neuron: NeuronConfig::default(),
            dropout_rate: 0.3,
        }
    }
}

pub const INPUT_DIM: usize = 3;

impl ModelSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.point_mlp_widths.is_empty() {
            return Err(Error::Config("point_mlp_widths must be nonempty".into()));
        }
        if self.point_mlp_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        self.neuron.validate()
    }

    /// `(in, out)` of every point-MLP layer.
    pub fn point_shapes(&self) -> Vec<(usize, usize)> {
        chain_shapes(INPUT_DIM, &self.point_mlp_widths)
    }

    /// `(in, out)` of every hidden head layer.
    pub fn head_shapes(&self) -> Vec<(usize, usize)> {
        chain_shapes(self.global_features(), &self.head_widths)
    }

    pub fn classifier_shape(&self) -> (usize, usize) {
        let last = self.head_widths.last().copied().unwrap_or(self.global_features());
        (last, self.num_classes)
    }

    pub fn global_features(&self) -> usize {
        *self.point_mlp_widths.last().expect("validated nonempty")
    }

    /// Layers carrying a nonlinearity (ReLU or LIF).
    pub fn hidden_layers(&self) -> usize {
        self.point_mlp_widths.len() + self.head_widths.len()
    }
}

fn chain_shapes(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = input;
    widths
        .iter()
        .map(|&w| {
            let shape = (prev, w);
            prev = w;
            shape
        })
        .collect()
}

/// Affine map followed by per-feature normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub linear: LinearParams<T>,
    pub norm: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub point: Vec<Layer<T>>,
    pub head: Vec<Layer<T>>,
    pub classifier: LinearParams<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn hidden(&self) -> impl Iterator<Item = &Layer<T>> {
        self.point.iter().chain(&self.head)
    }

    pub fn hidden_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.point.iter_mut().chain(self.head.iter_mut())
    }

    /// Trainable tensors in canonical order with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layer_names().into_iter().zip(self.hidden()) {
            out.push((format!("{name}.weight"), &layer.linear.weight));
            out.push((format!("{name}.bias"), &layer.linear.bias));
            out.push((format!("{name}.gain"), &layer.norm.gain));
            out.push((format!("{name}.shift"), &layer.norm.shift));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.point.iter_mut().chain(self.head.iter_mut()) {
            out.push(&mut layer.linear.weight);
            out.push(&mut layer.linear.bias);
            out.push(&mut layer.norm.gain);
            out.push(&mut layer.norm.shift);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Every tensor including running statistics, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.trainable();
        for (name, layer) in self.layer_names().into_iter().zip(self.hidden()) {
            out.push((format!("{name}.running_mean"), &layer.norm.running_mean));
            out.push((format!("{name}.running_var"), &layer.norm.running_var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.layer_names();
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let mut stats = Vec::new();
        for (name, layer) in names.iter().zip(self.point.iter_mut().chain(self.head.iter_mut())) {
            out.push((format!("{name}.weight"), &mut layer.linear.weight));
            out.push((format!("{name}.bias"), &mut layer.linear.bias));
            out.push((format!("{name}.gain"), &mut layer.norm.gain));
            out.push((format!("{name}.shift"), &mut layer.norm.shift));
            stats.push((format!("{name}.running_mean"), &mut layer.norm.running_mean));
            stats.push((format!("{name}.running_var"), &mut layer.norm.running_var));
        }
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        out.extend(stats);
        out
    }

    fn layer_names(&self) -> Vec<String> {
        (0..self.point.len())
            .map(|i| format!("point.{i}"))
            .chain((0..self.head.len()).map(|i| format!("head.{i}")))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let layer = |l: &Layer<T>| Layer {
            linear: LinearParams {
                weight: l.linear.weight.cast(),
                bias: l.linear.bias.cast(),
            },
            norm: BatchNormParams {
                gain: l.norm.gain.cast(),
                shift: l.norm.shift.cast(),
                running_mean: l.norm.running_mean.cast(),
                running_var: l.norm.running_var.cast(),
                epsilon: l.norm.epsilon,
                momentum: l.norm.momentum,
            },
        };
        ModelParams {
            point: self.point.iter().map(layer).collect(),
            head: self.head.iter().map(layer).collect(),
            classifier: LinearParams {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
        }
    }

    /// Checks that parameter shapes match `spec`.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<(), Error> {
        let matches = |layers: &[Layer<T>], shapes: &[(usize, usize)]| {
            layers.len() == shapes.len()
                && layers
                    .iter()
                    .zip(shapes)
                    .all(|(l, &(i, o))| l.linear.weight.shape() == [o, i] && l.norm.features() == o)
        };
        let (ci, co) = spec.classifier_shape();
        if !matches(&self.point, &spec.point_shapes())
            || !matches(&self.head, &spec.head_shapes())
            || self.classifier.weight.shape() != [co, ci]
        {
            return Err(Error::State("parameters do not match the model spec".into()));
        }
        Ok(())
    }
}

/// Kaiming-uniform weights (fan-in), zero biases, identity normalization.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>, Error> {
    spec.validate()?;
    let mut stream = rng::keyed(seed, &[rng::INIT]);
    let mut linear = |fan_in: usize, out: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        LinearParams {
            weight: Tensor::from_fn(&[out, fan_in], |_| T::lit(stream.random_range(-bound..bound))),
            bias: Tensor::zeros(&[out]),
        }
    };
    let mut layers = |shapes: Vec<(usize, usize)>| -> Vec<Layer<T>> {
        shapes
            .into_iter()
            .map(|(i, o)| Layer {
                linear: linear(i, o),
                norm: BatchNormParams::identity(o),
            })
            .collect()
    };
    let point = layers(spec.point_shapes());
    let head = layers(spec.head_shapes());
    let (ci, co) = spec.classifier_shape();
    let classifier = linear(ci, co);
    Ok(ModelParams { point, head, classifier })
}

/// Parameters recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub point: Vec<BoundLayer>,
    pub head: Vec<BoundLayer>,
    pub classifier: (Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub gain: Var,
    pub shift: Var,
}

impl BoundParams {
    /// `trainable` selects parameter (gradient-tracking) or constant leaves.
    pub fn bind<T: Real>(tape: &mut GradTape<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let mut bind_layer = |l: &Layer<T>| BoundLayer {
            weight: tape.leaf(l.linear.weight.clone(), trainable),
            bias: tape.leaf(l.linear.bias.clone(), trainable),
            gain: tape.leaf(l.norm.gain.clone(), trainable),
            shift: tape.leaf(l.norm.shift.clone(), trainable),
        };
        let point = params.point.iter().map(&mut bind_layer).collect();
        let head = params.head.iter().map(&mut bind_layer).collect();
        let classifier = (
            tape.leaf(params.classifier.weight.clone(), trainable),
            tape.leaf(params.classifier.bias.clone(), trainable),
        );
        Self { point, head, classifier }
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.point.iter().chain(&self.head) {
            out.extend([l.weight, l.bias, l.gain, l.shift]);
        }
        out.extend([self.classifier.0, self.classifier.1]);
        out
    }

    pub fn hidden(&self) -> impl Iterator<Item = &BoundLayer> {
        self.point.iter().chain(&self.head)
    }
}
