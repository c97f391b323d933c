//! MNIST IDX files: big-endian `u32` magic, `u32` dims, `u8` payload.

use std::fs;
use std::path::Path;

use crate::datasets::{RawDigitSet, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Length {
        what: what.to_string(),
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let actual = read_u32(bytes, 0, &path.display().to_string())?;
    if actual != expected {
        return Err(Error::Magic {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// Parses an image file into `(count, pixels/255)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f64>)> {
    check_magic(bytes, path, IMAGE_MAGIC)?;
    let what = path.display().to_string();
    let n = read_u32(bytes, 4, &what)? as usize;
    let rows = read_u32(bytes, 8, &what)? as usize;
    let cols = read_u32(bytes, 12, &what)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Format(format!(
            "{what}: expected {IMAGE_SIDE}x{IMAGE_SIDE} images, found {rows}x{cols}"
        )));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Length {
            what,
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((n, pixels))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, path, LABEL_MAGIC)?;
    let what = path.display().to_string();
    let n = read_u32(bytes, 4, &what)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Length {
            what,
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("{what}: label {bad} outside 0..9")));
    }
    Ok(labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDigitSet> {
    let ib = fs::read(images_path)
        .map_err(|e| Error::io(format!("reading {}", images_path.display()), e))?;
    let lb = fs::read(labels_path)
        .map_err(|e| Error::io(format!("reading {}", labels_path.display()), e))?;
    let (n, pixels) = parse_images(&ib, images_path)?;
    let labels = parse_labels(&lb, labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Format(format!(
            "{} contains no images",
            images_path.display()
        )));
    }
    RawDigitSet::new(
        Tensor::new(vec![n, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
        labels,
    )
}

pub fn encode_images(set: &RawDigitSet) -> Vec<u8> {
    let n = set.len();
    let mut out = Vec::with_capacity(16 + n * IMAGE_SIDE * IMAGE_SIDE);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend(
        set.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_labels(set: &RawDigitSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

/// Writes `set` as an IDX image/label pair.
pub fn write_idx(set: &RawDigitSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_images(set))
        .map_err(|e| Error::io(format!("writing {}", images_path.display()), e))?;
    fs::write(labels_path, encode_labels(set))
        .map_err(|e| Error::io(format!("writing {}", labels_path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(magic: u32, n: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&magic.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend((0..payload).map(|i| (i % 256) as u8));
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn minimal_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &image_file(IMAGE_MAGIC, 1, 784));
        let lp = write(dir.path(), "l", &label_file(&[3]));
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![3]);
        assert_eq!(set.images.data()[255], 1.0);
        assert_eq!(set.images.data()[51], 51.0 / 255.0);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &image_file(0x0000_0802, 1, 784));
        let lp = write(dir.path(), "l", &label_file(&[3]));
        match load_idx(&ip, &lp) {
            Err(Error::Magic {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 0x803);
                assert_eq!(actual, 0x802);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &image_file(IMAGE_MAGIC, 1, 784));
        let lp = write(dir.path(), "l", &label_file(&[3, 4]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &image_file(IMAGE_MAGIC, 2, 784 + 100));
        let lp = write(dir.path(), "l", &label_file(&[3, 4]));
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Length { .. })));
    }

    #[test]
    fn encode_then_parse_preserves_bytes() {
        let bytes = image_file(IMAGE_MAGIC, 2, 2 * 784);
        let (n, px) = parse_images(&bytes, Path::new("mem")).unwrap();
        let set = RawDigitSet::new(Tensor::new(vec![n, 28, 28], px).unwrap(), vec![1, 2]).unwrap();
        assert_eq!(encode_images(&set), bytes);
    }
}
