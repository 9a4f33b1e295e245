//! Loop-level reference implementations shared by the integration tests.
//! Nothing here touches the tape: plain nested loops in f64, with an op
//! counter threaded through every arithmetic step.

#![allow(dead_code)]

use spnet::energy::LayerOps;
use spnet::model::{Layer, Mode, ModelParams, ModelSpec};
use spnet::tensor::LinearParams;

/// Per-layer operation tallies in forward order: point layers, pool, head
/// layers, classifier.
pub struct Counters {
    pub layers: Vec<LayerOps>,
}

impl Counters {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut layers: Vec<LayerOps> = (0..spec.point_mlp_widths.len())
            .map(|i| LayerOps {
                name: format!("point.{i}"),
                ..Default::default()
            })
            .collect();
        layers.push(LayerOps {
            name: "pool".into(),
            ..Default::default()
        });
        layers.extend((0..spec.head_widths.len()).map(|i| LayerOps {
            name: format!("head.{i}"),
            ..Default::default()
        }));
        layers.push(LayerOps {
            name: "classifier".into(),
            ..Default::default()
        });
        Self { layers }
    }
}

/// `W x + b` for one row. Real inputs cost a MAC per weight; binary inputs
/// add the weight column of every active input and skip silent ones.
fn affine(lin: &LinearParams<f64>, x: &[f64], binary: bool, ops: &mut LayerOps) -> Vec<f64> {
    let (out, inp) = (lin.out_dim(), lin.in_dim());
    let w = lin.weight.data();
    let mut acc = vec![0.0; out];
    for (j, &xj) in x.iter().enumerate().take(inp) {
        if binary {
            assert!(xj == 0.0 || xj == 1.0, "binary input expected, got {xj}");
            if xj == 0.0 {
                continue;
            }
            for (o, a) in acc.iter_mut().enumerate() {
                *a += w[o * inp + j];
                ops.accumulations += 1;
            }
        } else {
            for (o, a) in acc.iter_mut().enumerate() {
                *a += w[o * inp + j] * xj;
                ops.macs += 1;
            }
        }
    }
    for (a, &b) in acc.iter_mut().zip(lin.bias.data()) {
        *a += b;
        ops.bias_adds += 1;
    }
    acc
}

/// Inference normalization with running statistics.
fn norm(layer: &Layer<f64>, x: &mut [f64], fold: bool, ops: &mut LayerOps) {
    let n = &layer.norm;
    for (f, v) in x.iter_mut().enumerate() {
        let inv_std = 1.0 / n.running_var.data()[f].max(n.epsilon).sqrt();
        *v = n.gain.data()[f] * ((*v - n.running_mean.data()[f]) * inv_std) + n.shift.data()[f];
        if !fold {
            ops.macs += 1;
        }
    }
}

fn max_pool(rows: &[Vec<f64>], ops: &mut LayerOps) -> Vec<f64> {
    let mut out = rows[0].clone();
    for row in &rows[1..] {
        for (o, &v) in out.iter_mut().zip(row) {
            ops.comparisons += 1;
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

/// One LIF update per neuron: leak, soft reset, integrate, fire.
fn lif(u: &mut [f64], s: &mut [f64], current: &[f64], spec: &ModelSpec) {
    let (leak, v_th) = (spec.neuron.leak, spec.neuron.v_th);
    for i in 0..u.len() {
        u[i] = leak * (u[i] - v_th * s[i]) + current[i];
        let fire = if spec.neuron.spike_at_threshold { u[i] >= v_th } else { u[i] > v_th };
        s[i] = if fire { 1.0 } else { 0.0 };
    }
}

/// Spiking forward of one cloud (`n × 3` row-major) from rest, returning
/// the logits of every step.
pub fn reference_snn(
    cloud: &[f64],
    params: &ModelParams<f64>,
    spec: &ModelSpec,
    steps: usize,
    fold: bool,
    counters: &mut Counters,
) -> Vec<Vec<f64>> {
    assert_eq!(spec.mode, Mode::Snn);
    let n = cloud.len() / 3;
    let points = params.point.len();
    let mut mem: Vec<Vec<Vec<f64>>> = params.point.iter().map(|l| vec![vec![0.0; l.norm.features()]; n]).collect();
    let mut spk = mem.clone();
    let mut head_mem: Vec<Vec<f64>> = params.head.iter().map(|l| vec![0.0; l.norm.features()]).collect();
    let mut head_spk = head_mem.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rows: Vec<Vec<f64>> = cloud.chunks(3).map(|p| p.to_vec()).collect();
        for (i, layer) in params.point.iter().enumerate() {
            for (r, row) in rows.iter_mut().enumerate() {
                let mut cur = affine(&layer.linear, row, i > 0, &mut counters.layers[i]);
                norm(layer, &mut cur, fold, &mut counters.layers[i]);
                lif(&mut mem[i][r], &mut spk[i][r], &cur, spec);
                *row = spk[i][r].clone();
            }
        }
        let mut x = max_pool(&rows, &mut counters.layers[points]);
        for (h, layer) in params.head.iter().enumerate() {
            let ops = &mut counters.layers[points + 1 + h];
            let mut cur = affine(&layer.linear, &x, true, ops);
            norm(layer, &mut cur, fold, ops);
            lif(&mut head_mem[h], &mut head_spk[h], &cur, spec);
            x = head_spk[h].clone();
        }
        let last = counters.layers.len() - 1;
        out.push(affine(&params.classifier, &x, true, &mut counters.layers[last]));
    }
    out
}

/// ReLU forward of one cloud.
pub fn reference_ann(cloud: &[f64], params: &ModelParams<f64>, spec: &ModelSpec, fold: bool, counters: &mut Counters) -> Vec<f64> {
    assert_eq!(spec.mode, Mode::Ann);
    let points = params.point.len();
    let relu = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(0.0));
    let mut rows: Vec<Vec<f64>> = cloud.chunks(3).map(|p| p.to_vec()).collect();
    for (i, layer) in params.point.iter().enumerate() {
        for row in rows.iter_mut() {
            let mut cur = affine(&layer.linear, row, false, &mut counters.layers[i]);
            norm(layer, &mut cur, fold, &mut counters.layers[i]);
            relu(&mut cur);
            *row = cur;
        }
    }
    let mut x = max_pool(&rows, &mut counters.layers[points]);
    for (h, layer) in params.head.iter().enumerate() {
        let ops = &mut counters.layers[points + 1 + h];
        let mut cur = affine(&layer.linear, &x, false, ops);
        norm(layer, &mut cur, fold, ops);
        relu(&mut cur);
        x = cur;
    }
    let last = counters.layers.len() - 1;
    affine(&params.classifier, &x, false, &mut counters.layers[last])
}

/// Replaces identity normalization with arbitrary running statistics and
/// affine terms so that inference exercises every term.
pub fn randomize_norms(params: &mut ModelParams<f64>, mut next: impl FnMut() -> f64) {
    for layer in params.point.iter_mut().chain(params.head.iter_mut()) {
        let n = &mut layer.norm;
        for v in n.gain.data_mut() {
            *v = 0.5 + next();
        }
        for v in n.shift.data_mut() {
            *v = next() - 0.3;
        }
        for v in n.running_mean.data_mut() {
            *v = next() - 0.5;
        }
        for v in n.running_var.data_mut() {
            *v = 0.2 + next();
        }
    }
    for v in params.classifier.bias.data_mut() {
        *v = next() - 0.5;
    }
}
