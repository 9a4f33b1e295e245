//! Binary dataset cache.
//!
//! ```text
//! magic          8 bytes "SPNCACHE"
//! version        u32 LE
//! manifest_len   u32 LE
//! manifest       JSON DatasetManifest
//! sample_count × { label i32 LE, n × 3 × f32 LE }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetManifest, PointCloud};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: [u8; 8] = *b"SPNCACHE";
pub const CACHE_VERSION: u32 = 1;

pub fn write_cache(dataset: &Dataset, mut out: impl Write) -> Result<(), DataError> {
    dataset.validate()?;
    let manifest = serde_json::to_vec(&dataset.manifest).map_err(|e| DataError::CacheFormat(e.to_string()))?;
    let n = dataset.manifest.points_per_cloud;
    let mut buf = Vec::with_capacity(16 + manifest.len() + dataset.len() * (4 + n * 12));
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for cloud in &dataset.clouds {
        buf.extend_from_slice(&(cloud.label as i32).to_le_bytes());
        for v in cloud.points.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| DataError::CacheFormat(format!("write failed: {e}")))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], DataError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| DataError::CacheTruncated(format!("{what} at byte {pos}")))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn u32_at(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, DataError> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4, what)?.try_into().expect("4 bytes")))
}

pub fn read_cache(mut input: impl Read) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| DataError::CacheFormat(format!("read failed: {e}")))?;
    let pos = &mut 0;
    if take(&bytes, pos, 8, "magic")? != CACHE_MAGIC {
        return Err(DataError::CacheMagic);
    }
    let version = u32_at(&bytes, pos, "version")?;
    if version != CACHE_VERSION {
        return Err(DataError::CacheVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let manifest_len = u32_at(&bytes, pos, "manifest length")? as usize;
    let manifest: DatasetManifest = serde_json::from_slice(take(&bytes, pos, manifest_len, "manifest")?)
        .map_err(|e| DataError::CacheFormat(format!("manifest: {e}")))?;
    let n = manifest.points_per_cloud;
    if n == 0 {
        return Err(DataError::CacheFormat("zero points per cloud".into()));
    }
    let record = n
        .checked_mul(12)
        .and_then(|b| b.checked_add(4))
        .ok_or_else(|| DataError::CacheFormat("points per cloud overflows".into()))?;
    let expected = manifest
        .sample_count
        .checked_mul(record)
        .ok_or_else(|| DataError::CacheFormat("sample count overflows".into()))?;
    let remaining = bytes.len() - *pos;
    if remaining < expected {
        return Err(DataError::CacheTruncated(format!("{remaining} sample bytes, expected {expected}")));
    }
    if remaining > expected {
        return Err(DataError::CacheFormat(format!("{} trailing bytes", remaining - expected)));
    }

    let mut clouds = Vec::with_capacity(manifest.sample_count);
    for i in 0..manifest.sample_count {
        let label = i32::from_le_bytes(take(&bytes, pos, 4, "label")?.try_into().expect("4 bytes"));
        let class_name = usize::try_from(label)
            .ok()
            .and_then(|l| manifest.class_names.get(l))
            .ok_or_else(|| DataError::CacheFormat(format!("sample {i} has label {label}")))?
            .clone();
        let data = take(&bytes, pos, n * 12, "points")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        clouds.push(PointCloud {
            points: Tensor::new(&[n, 3], data).expect("n × 3"),
            label: label as usize,
            class_name,
        });
    }
    Ok(Dataset { manifest, clouds })
}

pub fn cache_write(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_cache(dataset, std::io::BufWriter::new(file))
}

pub fn cache_read(path: &Path) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_cache(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shapes, ShapeClass, Split};

    fn tiny() -> Dataset {
        synth_shapes(&[ShapeClass::Sphere, ShapeClass::Cube], 3, 10, Split::Test, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let set = tiny();
        let mut bytes = Vec::new();
        write_cache(&set, &mut bytes).unwrap();
        let back = read_cache(bytes.as_slice()).unwrap();
        assert_eq!(back.manifest, set.manifest);
        for (a, b) in set.clouds.iter().zip(&back.clouds) {
            assert_eq!(a.label, b.label);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.points), bits(&b.points));
        }
        let mut again = Vec::new();
        write_cache(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_corruption_and_truncation() {
        let mut bytes = Vec::new();
        write_cache(&tiny(), &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[9] ^= 0x01;
        assert!(matches!(read_cache(bad.as_slice()), Err(DataError::CacheVersion { .. })));

        let mut bad = bytes.clone();
        bad[2] = b'X';
        assert_eq!(read_cache(bad.as_slice()), Err(DataError::CacheMagic));

        assert!(matches!(
            read_cache(&bytes[..bytes.len() - 1]),
            Err(DataError::CacheTruncated(_))
        ));
        assert!(matches!(read_cache(&bytes[..5]), Err(DataError::CacheTruncated(_))));
    }
}
