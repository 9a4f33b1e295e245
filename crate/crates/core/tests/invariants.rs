//! Structural properties that must hold for any parameters and inputs.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spnet::data::{synth_shapes, Dataset, ShapeClass, Split};
use spnet::model::{
    build_model, infer_ann, read_checkpoint, run_snn, write_checkpoint, MembraneInit, Mode, ModelParams, ModelSpec,
};
use spnet::neuron::{perturb_init, PerturbKey, PerturbationConfig, ResamplePolicy};
use spnet::tensor::Tensor;
use spnet::train::{evaluate_detailed, train, TrainConfig};

fn spec_strategy(mode: Mode) -> impl Strategy<Value = ModelSpec> {
    (
        prop::collection::vec(1usize..12, 1..4),
        prop::collection::vec(1usize..10, 0..3),
        2usize..6,
    )
        .prop_map(move |(points, head, classes)| ModelSpec {
            point_mlp_widths: points,
            head_widths: head,
            num_classes: classes,
            mode,
            ..Default::default()
        })
}

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Ann), Just(Mode::Snn)]
}

/// Running statistics away from identity so inference exercises them.
fn perturbed_model(spec: &ModelSpec, seed: u64) -> ModelParams<f32> {
    let mut params = build_model::<f32>(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in params.hidden_mut() {
        for v in layer.norm.running_mean.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in layer.norm.running_var.data_mut() {
            *v = rng.random_range(0.05..0.5);
        }
    }
    params
}

fn logits(points: &Tensor<f32>, params: &ModelParams<f32>, spec: &ModelSpec, steps: usize) -> Vec<u32> {
    let out = match spec.mode {
        Mode::Ann => infer_ann(points, params, spec).unwrap(),
        Mode::Snn => run_snn(points, params, spec, steps, &MembraneInit::Zeros).unwrap().averaged,
    };
    out.data().iter().map(|v| v.to_bits()).collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[b, n, 3], |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn point_order_does_not_matter(
        spec in mode_strategy().prop_flat_map(spec_strategy),
        spec_seed in 0u64..1000,
        n in 1usize..40,
        steps in prop_oneof![Just(1usize), Just(4usize)],
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = perturbed_model(&spec, spec_seed);
        let points = random_cloud(&mut rng, 1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = Tensor::new(
            &[1, n, 3],
            order.iter().flat_map(|&i| points.data()[i * 3..i * 3 + 3].to_vec()).collect(),
        )
        .unwrap();
        prop_assert_eq!(logits(&points, &params, &spec, steps), logits(&shuffled, &params, &spec, steps));
    }

    #[test]
    fn spikes_are_binary_and_rates_bounded(spec in spec_strategy(Mode::Snn), seed: u64, steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = perturbed_model(&spec, seed);
        let points = random_cloud(&mut rng, 2, 9);
        let run = run_snn(&points, &params, &spec, steps, &MembraneInit::Zeros).unwrap();
        prop_assert_eq!(run.trace.steps.len(), steps);
        for step in &run.trace.steps {
            for s in step.layer_spikes.iter().chain([&step.pooled]) {
                prop_assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
        let rate = run.trace.firing_rate();
        prop_assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn shorter_runs_are_prefixes_of_longer_ones(spec in spec_strategy(Mode::Snn), seed: u64, short in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = perturbed_model(&spec, seed);
        let points = random_cloud(&mut rng, 3, 7);
        let long = run_snn(&points, &params, &spec, short + 2, &MembraneInit::Zeros).unwrap();
        let head = run_snn(&points, &params, &spec, short, &MembraneInit::Zeros).unwrap();
        prop_assert_eq!(&long.per_step[..short], &head.per_step[..]);
    }

    #[test]
    fn dense_output_ignores_time_steps(spec in spec_strategy(Mode::Ann), seed: u64) {
        let set = tiny_set(spec.num_classes.min(4), seed);
        let spec = ModelSpec { num_classes: set.num_classes(), ..spec };
        let params = perturbed_model(&spec, seed);
        let one = evaluate_detailed(&params, &spec, &set, 1, 5).unwrap();
        let four = evaluate_detailed(&params, &spec, &set, 4, 5).unwrap();
        for step in &four.per_step_logits {
            prop_assert_eq!(step, &one.per_step_logits[0]);
        }
        prop_assert_eq!(four.report.ensemble_accuracy[3], one.report.ensemble_accuracy[0]);
    }

    #[test]
    fn eval_batching_does_not_change_logits(spec in spec_strategy(Mode::Snn), seed: u64, batch in 1usize..9) {
        let set = tiny_set(spec.num_classes.min(4), seed);
        let spec = ModelSpec { num_classes: set.num_classes(), ..spec };
        let params = perturbed_model(&spec, seed);
        let whole = evaluate_detailed(&params, &spec, &set, 3, set.len()).unwrap();
        let chunked = evaluate_detailed(&params, &spec, &set, 3, batch).unwrap();
        prop_assert_eq!(whole.per_step_logits, chunked.per_step_logits);
        prop_assert_eq!(whole.report, chunked.report);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit(mode in mode_strategy(), seed: u64) {
        let spec = ModelSpec { point_mlp_widths: vec![3, 5], head_widths: vec![4], num_classes: 3, mode, ..Default::default() };
        let params = perturbed_model(&spec, seed);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &spec, &params).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.spec, &spec);
        let bits = |p: &ModelParams<f32>| -> Vec<u32> {
            p.trainable().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
        };
        prop_assert_eq!(bits(&back.params), bits(&params));
        prop_assert_eq!(back.params, params);
    }

    #[test]
    fn perturbation_stays_in_range(seed: u64, epoch in 0u64..50, delta_max in 0.01f64..0.5) {
        let config = PerturbationConfig { delta_max, enabled: true, resample_policy: ResamplePolicy::PerEpoch, seed };
        let key = |epoch, batch| PerturbKey { epoch, batch, layer: 0 };
        let d: Tensor<f64> = perturb_init(&[16, 8], &config, 0.5, key(epoch, 0)).unwrap();
        prop_assert!(d.data().iter().all(|&v| (0.0..delta_max).contains(&v)));
        // Per-epoch policy: every batch of an epoch shares one draw; epochs differ.
        prop_assert_eq!(&d, &perturb_init::<f64>(&[16, 8], &config, 0.5, key(epoch, 7)).unwrap());
        prop_assert_ne!(&d, &perturb_init::<f64>(&[16, 8], &config, 0.5, key(epoch + 1, 0)).unwrap());
    }
}

fn tiny_set(classes: usize, seed: u64) -> Dataset {
    synth_shapes(&ShapeClass::ALL[..classes.max(2)], 4, 24, Split::Test, seed).unwrap()
}

#[test]
fn disabled_perturbation_is_zero() {
    let config = PerturbationConfig::default();
    let key = PerturbKey { epoch: 3, batch: 1, layer: 2 };
    let d: Tensor<f32> = perturb_init(&[4, 4], &config, 0.5, key).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn training_is_reproducible() {
    let spec = ModelSpec {
        point_mlp_widths: vec![8, 16],
        head_widths: vec![8],
        num_classes: 4,
        ..Default::default()
    };
    let set = synth_shapes(&ShapeClass::ALL, 6, 32, Split::Train, 1).unwrap();
    let mut config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 17,
        ..Default::default()
    };
    config.perturbation.enabled = true;
    let run = || {
        let initial = build_model::<f32>(&spec, config.seed).unwrap();
        train(&spec, initial, &set, Some(&set), &config, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    let other = {
        let config = TrainConfig { seed: 18, ..config.clone() };
        train(&spec, build_model::<f32>(&spec, 18).unwrap(), &set, None, &config, |_| {}).unwrap()
    };
    assert_ne!(other.params, a.params);
}
