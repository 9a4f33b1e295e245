//! Procedural primitives for runs without the real dataset.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{jitter, sample_mesh, DataError, Dataset, DatasetManifest, PointCloud, Split, TriangleMesh};
use crate::rng;
use crate::tensor::Tensor;

// Every canonical shape is centred with bounding radius 1.
const TORUS_MAJOR: f64 = 1.0 / 1.35;
const TORUS_MINOR: f64 = 0.35 / 1.35;
const SCALE_SPREAD: f64 = 0.2;
const JITTER_SIGMA: f64 = 0.01;
const JITTER_CLIP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Pyramid,
    Torus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Pyramid, ShapeClass::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::Dataset(format!("unknown shape class {s:?}")))
    }
}

fn cube() -> TriangleMesh {
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        let half = 1.0 / 3f64.sqrt();
        vertices.push([0, 1, 2].map(|bit| if i >> bit & 1 == 1 { half } else { -half }));
    }
    // Two triangles per face, vertex index bits are (x, y, z).
    let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh { vertices, faces }
}

fn pyramid() -> TriangleMesh {
    // Base corners and apex all at distance 1 from the origin.
    let a = 0.375f64.sqrt();
    let vertices = vec![[-a, -a, -0.5], [a, -a, -0.5], [a, a, -0.5], [-a, a, -0.5], [0.0, 0.0, 1.0]];
    let faces = vec![[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    TriangleMesh { vertices, faces }
}

fn sphere_points(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| loop {
            let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-12 {
                break v.map(|x| x / norm);
            }
        })
        .collect()
}

/// Uniform on the torus surface: the area element scales with the distance
/// from the axis, so angles are accepted with that probability.
fn torus_points(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (theta, phi) = (rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
        let w = TORUS_MAJOR + TORUS_MINOR * phi.cos();
        if rng.random::<f64>() * (TORUS_MAJOR + TORUS_MINOR) <= w {
            out.push([w * theta.cos(), w * theta.sin(), TORUS_MINOR * phi.sin()]);
        }
    }
    out
}

/// Rotation about the vertical axis; shapes keep their upright pose.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let (s, c) = (rng.random::<f64>() * TAU).sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn shape_cloud(class: ShapeClass, n: usize, rng: &mut impl Rng) -> Result<Tensor<f32>, DataError> {
    let raw: Vec<[f64; 3]> = match class {
        ShapeClass::Sphere => sphere_points(n, rng),
        ShapeClass::Torus => torus_points(n, rng),
        ShapeClass::Cube | ShapeClass::Pyramid => {
            let mesh = if class == ShapeClass::Cube { cube() } else { pyramid() };
            let pts = sample_mesh(&mesh, n, rng)?;
            pts.data()
                .chunks_exact(3)
                .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                .collect()
        }
    };
    let rot = random_rotation(rng);
    let scale = 1.0 + SCALE_SPREAD * (2.0 * rng.random::<f64>() - 1.0);
    let data = raw
        .iter()
        .flat_map(|p| rot.map(|row| (scale * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2])) as f32))
        .collect();
    let cloud = Tensor::new(&[n, 3], data).expect("n × 3");
    Ok(jitter(&cloud, JITTER_SIGMA, JITTER_CLIP, rng))
}

/// `per_class` clouds of every class, class-major, each from its own keyed
/// stream so the set is reproducible from `seed` alone.
///
/// Shapes are centred, upright and of bounding radius 1 before a random
/// isotropic scale in `[0.8, 1.2]`, a random turn about z and jitter. They
/// are not renormalized, so size stays a per-sample nuisance.
pub fn synth_shapes(
    classes: &[ShapeClass],
    per_class: usize,
    n: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes.is_empty() || per_class == 0 || n == 0 {
        return Err(DataError::Dataset("synthetic set needs classes, samples and points".into()));
    }
    let mut names: Vec<&str> = classes.iter().map(|c| c.name()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != classes.len() {
        return Err(DataError::Dataset("duplicate shape class".into()));
    }
    let mut ordered = classes.to_vec();
    ordered.sort_by_key(|c| c.name());

    let split_key = split as u64;
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    for (label, &class) in ordered.iter().enumerate() {
        for i in 0..per_class {
            let mut r = rng::keyed(seed, &[rng::SYNTH, split_key, label as u64, i as u64]);
            clouds.push(PointCloud {
                points: shape_cloud(class, n, &mut r)?,
                label,
                class_name: class.name().to_string(),
            });
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            class_names: names.into_iter().map(String::from).collect(),
            split,
            sample_count: clouds.len(),
            points_per_cloud: n,
            source_checksums: Vec::new(),
        },
        clouds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_and_pyramid_areas() {
        let c = cube();
        let area: f64 = (0..c.faces.len()).map(|f| c.face_area(f)).sum();
        assert!((area - 8.0).abs() < 1e-12);
        for mesh in [cube(), pyramid()] {
            let radius = mesh.vertices.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
            assert!(radius.into_iter().all(|r| (r - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = random_rotation(&mut rng::keyed(4, &[]));
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn labels_follow_sorted_names() {
        let set = synth_shapes(&[ShapeClass::Torus, ShapeClass::Cube], 2, 16, Split::Train, 1).unwrap();
        assert_eq!(set.manifest.class_names, ["cube", "torus"]);
        assert_eq!(set.class_counts(), [2, 2]);
        assert!(set.clouds.iter().all(|c| set.manifest.class_names[c.label] == c.class_name));
        set.validate().unwrap();
    }

    #[test]
    fn duplicate_classes_rejected() {
        assert!(synth_shapes(&[ShapeClass::Cube, ShapeClass::Cube], 1, 8, Split::Train, 0).is_err());
    }
}
