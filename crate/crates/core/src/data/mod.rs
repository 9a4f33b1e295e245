//! Point-cloud ingestion: OFF meshes, surface sampling, normalization,
//! augmentation, synthetic shapes and the binary dataset cache.

mod cache;
mod modelnet;
mod off;
mod sample;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use cache::{cache_read, cache_write, read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use modelnet::{load_modelnet, LoadReport};
pub use off::{parse_off, TriangleMesh};
pub use sample::{augment, jitter, normalize_cloud, rotate_z, sample_mesh, AugmentConfig};
pub use synth::{synth_shapes, ShapeClass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("OFF parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh has no face with positive area")]
    DegenerateMesh,
    #[error("cache: bad magic")]
    CacheMagic,
    #[error("cache: unsupported version {found}, expected {expected}")]
    CacheVersion { found: u32, expected: u32 },
    #[error("cache: truncated ({0})")]
    CacheTruncated(String),
    #[error("cache: {0}")]
    CacheFormat(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Points `[n × 3]` with their class.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Tensor<f32>,
    pub label: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Sorted; the index is the label.
    pub class_names: Vec<String>,
    pub split: Split,
    pub sample_count: usize,
    pub points_per_cloud: usize,
    pub source_checksums: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    /// Stacks the selected clouds into `[batch × n × 3]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let n = self.manifest.points_per_cloud;
        let mut data = Vec::with_capacity(indices.len() * n * 3);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.clouds[i].points.data());
            labels.push(self.clouds[i].label);
        }
        (Tensor::new(&[indices.len(), n, 3], data).expect("uniform cloud sizes"), labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for c in &self.clouds {
            counts[c.label] += 1;
        }
        counts
    }

    /// Checks the manifest against the samples.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.manifest.points_per_cloud;
        if self.manifest.sample_count != self.clouds.len() {
            return Err(DataError::Dataset(format!(
                "manifest says {} samples, found {}",
                self.manifest.sample_count,
                self.clouds.len()
            )));
        }
        for (i, c) in self.clouds.iter().enumerate() {
            if c.points.shape() != [n, 3] {
                return Err(DataError::Dataset(format!("sample {i} has shape {:?}", c.points.shape())));
            }
            if c.label >= self.num_classes() {
                return Err(DataError::Dataset(format!("sample {i} has label {}", c.label)));
            }
        }
        Ok(())
    }
}
