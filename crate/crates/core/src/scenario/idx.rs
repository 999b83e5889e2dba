//! IDX image/label files (the MNIST distribution format).
//!
//! Layout: big-endian `u32` magic, one big-endian `u32` per dimension, then
//! unsigned bytes. Images use magic `0x0000_0803` (3 dims: count, rows,
//! cols), labels `0x0000_0801` (1 dim: count).

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use ndarray::Array2;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed image file: one row per image, pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub features: Array2<f32>,
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.offset + 4;
        if end > self.bytes.len() {
            return Err(self.err(self.offset, format!("truncated while reading {what}")));
        }
        let v = BigEndian::read_u32(&self.bytes[self.offset..end]);
        self.offset = end;
        Ok(v)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let at = self.offset;
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(self.err(
                at,
                format!("bad magic {found:#010x}, expected {expected:#010x}"),
            ));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.offset;
        if have < len {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: {len} bytes declared, {have} present"),
            ));
        }
        if have > len {
            return Err(self.err(
                self.offset + len,
                format!("{} trailing bytes after payload", have - len),
            ));
        }
        Ok(&self.bytes[self.offset..])
    }
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor {
        path,
        bytes,
        offset: 0,
    };
    cur.magic(IMAGES_MAGIC)?;
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let pixels = cur.payload(count * rows * cols)?;
    let features = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .expect("length checked");
    Ok(IdxImages {
        rows,
        cols,
        features,
    })
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u32>> {
    let mut cur = Cursor {
        path,
        bytes,
        offset: 0,
    };
    cur.magic(LABELS_MAGIC)?;
    let count = cur.u32("label count")? as usize;
    Ok(cur.payload(count)?.iter().map(|&b| b as u32).collect())
}

/// Reads and cross-checks an image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u32>)> {
    let image_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let imgs = parse_images(images, &image_bytes)?;
    let labs = parse_labels(labels, &label_bytes)?;
    if imgs.features.nrows() != labs.len() {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            offset: 4,
            msg: format!(
                "label count {} does not match image count {}",
                labs.len(),
                imgs.features.nrows()
            ),
        });
    }
    Ok((imgs, labs))
}

/// Inverse of [`parse_images`]; pixels are rounded back to bytes.
pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.features.len());
    for v in [
        IMAGES_MAGIC,
        images.features.nrows() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        images
            .features
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn p() -> &'static Path {
        Path::new("test.idx")
    }

    #[test]
    fn two_tiny_images_scale_by_255() {
        let mut bytes = Vec::new();
        for v in [IMAGES_MAGIC, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 128, 64, 1, 2, 3, 4]);
        let img = parse_images(p(), &bytes).unwrap();
        assert_eq!((img.rows, img.cols), (2, 2));
        let first: Vec<f32> = img.features.row(0).to_vec();
        assert_eq!(first, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((first[2] - 0.50196).abs() < 1e-5 && (first[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn label_magic_in_image_file_names_expected_magic() {
        let bytes = encode_labels(&[1, 2, 3]);
        let err = parse_images(p(), &bytes).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn empty_file_is_truncated_at_offset_zero() {
        let err = parse_labels(p(), &[]).unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 0, .. }), "{err}");
    }

    #[test]
    fn short_payload_is_reported() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes.pop();
        let err = parse_labels(p(), &bytes).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
    }

    proptest! {
        #[test]
        fn image_bytes_round_trip(count in 0usize..4, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut bytes = Vec::new();
            for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
            let mut x = seed;
            for _ in 0..count * rows * cols {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                bytes.push((x >> 56) as u8);
            }
            let parsed = parse_images(p(), &bytes).unwrap();
            prop_assert_eq!(encode_images(&parsed), bytes);
        }

        #[test]
        fn label_bytes_round_trip(labels in proptest::collection::vec(0u32..256, 0..50)) {
            let bytes = encode_labels(&labels);
            prop_assert_eq!(parse_labels(p(), &bytes).unwrap(), labels);
        }
    }
}
