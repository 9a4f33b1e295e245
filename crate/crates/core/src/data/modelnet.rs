//! Loader for the `class_name/{train,test}/*.off` directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{normalize_cloud, parse_off, sample_mesh, DataError, Dataset, DatasetManifest, PointCloud, Split};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Files that could not be read, parsed or sampled, with the reason.
    pub failures: Vec<(PathBuf, DataError)>,
}

fn file_error(path: &Path, e: impl ToString) -> DataError {
    DataError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| file_error(dir, e))? {
        let path = entry.map_err(|e| file_error(dir, e))?.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Class directories are the sorted subdirectories of `root`; every class is
/// listed in the manifest even when the split has no files for it. Each file
/// samples from its own keyed stream, so results do not depend on visit order.
/// Without `strict`, unusable files are skipped and reported.
pub fn load_modelnet(
    root: &Path,
    split: Split,
    n: usize,
    seed: u64,
    strict: bool,
) -> Result<(Dataset, LoadReport), DataError> {
    let class_dirs = sorted_entries(root, Path::is_dir)?;
    if class_dirs.is_empty() {
        return Err(DataError::Dataset(format!("no class directories under {}", root.display())));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();

    let mut clouds = Vec::new();
    let mut checksums = Vec::new();
    let mut report = LoadReport::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        let split_dir = dir.join(split.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        let files = sorted_entries(&split_dir, |p| {
            p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off"))
        })?;
        for (i, path) in files.iter().enumerate() {
            let mut r = rng::keyed(seed, &[rng::SAMPLE, split as u64, label as u64, i as u64]);
            let loaded = fs::read(path)
                .map_err(|e| file_error(path, e))
                .and_then(|bytes| {
                    let mesh = parse_off(&bytes).map_err(|e| file_error(path, e))?;
                    let points = sample_mesh(&mesh, n, &mut r).map_err(|e| file_error(path, e))?;
                    Ok((normalize_cloud(&points), hex(&Sha256::digest(&bytes))))
                });
            match loaded {
                Ok((points, sum)) => {
                    clouds.push(PointCloud {
                        points,
                        label,
                        class_name: class_names[label].clone(),
                    });
                    checksums.push(sum);
                }
                Err(e) if strict => return Err(e),
                Err(e) => report.failures.push((path.clone(), e)),
            }
        }
    }
    let manifest = DatasetManifest {
        class_names,
        split,
        sample_count: clouds.len(),
        points_per_cloud: n,
        source_checksums: checksums,
    };
    Ok((Dataset { manifest, clouds }, report))
}
