use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, TriangleMesh};
use crate::tensor::Tensor;

/// Area-weighted uniform sampling of `n` surface points, `[n × 3]`.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, rng: &mut impl Rng) -> Result<Tensor<f32>, DataError> {
    if n == 0 {
        return Err(DataError::Dataset("cannot sample zero points".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for face in 0..mesh.faces.len() {
        total += mesh.face_area(face);
        cumulative.push(total);
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(DataError::DegenerateMesh);
    }
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let r = rng.random::<f64>() * total;
        // Zero-area faces share a cumulative value with their predecessor and are never selected.
        let face = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
        let [a, b, c] = mesh.faces[face].map(|i| mesh.vertices[i]);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        for d in 0..3 {
            out.push((a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d])) as f32);
        }
    }
    Ok(Tensor::new(&[n, 3], out).expect("n × 3"))
}

/// Centres on the centroid and scales to unit maximum radius. A cloud that
/// collapses to a single point stays at the origin.
pub fn normalize_cloud(points: &Tensor<f32>) -> Tensor<f32> {
    let data = points.data();
    let n = (data.len() / 3) as f64;
    let mut centroid = [0.0f64; 3];
    for p in data.chunks_exact(3) {
        for d in 0..3 {
            centroid[d] += p[d] as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let radius = data
        .chunks_exact(3)
        .map(|p| (0..3).map(|d| (p[d] as f64 - centroid[d]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let out = data
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |d| toward_zero((p[d] as f64 - centroid[d]) * scale)))
        .collect();
    Tensor::new(points.shape(), out).expect("same shape")
}

/// Narrowing that never increases magnitude, so unit-radius points stay in the unit ball.
fn toward_zero(v: f64) -> f32 {
    let f = v as f32;
    if f != 0.0 && (f as f64).abs() > v.abs() {
        f32::from_bits(f.to_bits() - 1)
    } else {
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate_z: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_z: true,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

pub fn rotate_z(points: &Tensor<f32>, angle: f64) -> Tensor<f32> {
    let (s, c) = angle.sin_cos();
    let out = points
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let (x, y) = (p[0] as f64, p[1] as f64);
            [(c * x - s * y) as f32, (s * x + c * y) as f32, p[2]]
        })
        .collect();
    Tensor::new(points.shape(), out).expect("same shape")
}

/// Adds clipped Gaussian noise to every coordinate.
pub fn jitter(points: &Tensor<f32>, sigma: f64, clip: f64, rng: &mut impl Rng) -> Tensor<f32> {
    if sigma <= 0.0 {
        return points.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let out = points.data().iter().map(|&v| {
        let delta = normal.sample(rng).clamp(-clip, clip);
        // Keep the stored displacement inside the clip after rounding to f32.
        let mut out = (v as f64 + delta) as f32;
        while (out as f64 - v as f64).abs() > clip {
            out = if out > v { out.next_down() } else { out.next_up() };
        }
        out
    });
    Tensor::new(points.shape(), out.collect()).expect("same shape")
}

pub fn augment(points: &Tensor<f32>, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let rotated = if config.rotate_z {
        rotate_z(points, rng.random::<f64>() * std::f64::consts::TAU)
    } else {
        points.clone()
    };
    jitter(&rotated, config.jitter_sigma, config.jitter_clip, rng)
}
