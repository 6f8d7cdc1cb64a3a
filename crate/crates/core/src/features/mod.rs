//! Keypoints, descriptors and matching.
//!
//! The built-in detector is a Harris corner detector with per-cell top-k
//! selection and a 256-bit BRIEF descriptor. Externally computed features can be
//! brought in through the binary container in [`container`].

pub mod container;
pub mod detect;
pub mod matching;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pixel;

pub use container::{export_features, import_features, read_features, write_features, ContainerError};
pub use detect::{detect_and_describe, load_gray, DetectorConfig};
pub use matching::{epipolar_inliers, fundamental_matrix, match_features, Match};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("descriptor mismatch: {0:?} vs {1:?}")]
    DescriptorMismatch(DescriptorKind, DescriptorKind),
    #[error("descriptor width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Pixel,
    pub response: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptorKind {
    Binary,
    Float,
}

/// Row-major descriptor matrix. Binary rows are `width` bytes compared by
/// Hamming distance; float rows are `width` values compared by Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub enum Descriptors {
    Binary { width: usize, data: Vec<u8> },
    Float { width: usize, data: Vec<f32> },
}

impl Descriptors {
    pub fn empty(kind: DescriptorKind, width: usize) -> Self {
        match kind {
            DescriptorKind::Binary => Descriptors::Binary { width, data: Vec::new() },
            DescriptorKind::Float => Descriptors::Float { width, data: Vec::new() },
        }
    }

    pub fn kind(&self) -> DescriptorKind {
        match self {
            Descriptors::Binary { .. } => DescriptorKind::Binary,
            Descriptors::Float { .. } => DescriptorKind::Float,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Descriptors::Binary { width, .. } | Descriptors::Float { width, .. } => *width,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Descriptors::Binary { width, data } => data.len().checked_div(*width).unwrap_or(0),
            Descriptors::Float { width, data } => data.len().checked_div(*width).unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn binary_row(&self, i: usize) -> Option<&[u8]> {
        match self {
            Descriptors::Binary { width, data } => Some(&data[i * width..(i + 1) * width]),
            Descriptors::Float { .. } => None,
        }
    }

    pub fn float_row(&self, i: usize) -> Option<&[f32]> {
        match self {
            Descriptors::Float { width, data } => Some(&data[i * width..(i + 1) * width]),
            Descriptors::Binary { .. } => None,
        }
    }

    /// Copies row `i` of `other` onto the end of `self`. Panics on kind or width mismatch.
    pub fn push_from(&mut self, other: &Descriptors, i: usize) {
        assert_eq!(self.width(), other.width());
        match (self, other) {
            (Descriptors::Binary { data, .. }, Descriptors::Binary { width, data: src }) => {
                data.extend_from_slice(&src[i * width..(i + 1) * width])
            }
            (Descriptors::Float { data, .. }, Descriptors::Float { width, data: src }) => {
                data.extend_from_slice(&src[i * width..(i + 1) * width])
            }
            _ => panic!("descriptor kind mismatch"),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Descriptors {
        let mut out = Descriptors::empty(self.kind(), self.width());
        for &i in rows {
            out.push_from(self, i);
        }
        out
    }

    pub fn check_compatible(&self, other: &Descriptors) -> Result<(), FeatureError> {
        if self.kind() != other.kind() {
            return Err(FeatureError::DescriptorMismatch(self.kind(), other.kind()));
        }
        if self.width() != other.width() {
            return Err(FeatureError::WidthMismatch(self.width(), other.width()));
        }
        Ok(())
    }

    /// Distance between row `i` of `self` and row `j` of `other`. Both must be compatible.
    #[inline]
    pub fn distance(&self, i: usize, other: &Descriptors, j: usize) -> f32 {
        match (self, other) {
            (Descriptors::Binary { width, data: a }, Descriptors::Binary { data: b, .. }) => {
                hamming(&a[i * width..(i + 1) * width], &b[j * width..(j + 1) * width]) as f32
            }
            (Descriptors::Float { width, data: a }, Descriptors::Float { data: b, .. }) => a[i * width..(i + 1) * width]
                .iter()
                .zip(&b[j * width..(j + 1) * width])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>()
                .sqrt(),
            _ => f32::INFINITY,
        }
    }
}

#[inline]
pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    let mut d = 0;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        d += (u64::from_le_bytes(x.try_into().unwrap()) ^ u64::from_le_bytes(y.try_into().unwrap())).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        d += (x ^ y).count_ones();
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub image_id: u32,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Descriptors,
}

impl FeatureSet {
    pub fn empty(image_id: u32, kind: DescriptorKind, width: usize) -> Self {
        Self {
            image_id,
            keypoints: Vec::new(),
            descriptors: Descriptors::empty(kind, width),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> FeatureSet {
        FeatureSet {
            image_id: self.image_id,
            keypoints: rows.iter().map(|&i| self.keypoints[i]).collect(),
            descriptors: self.descriptors.select(rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_counts_bits() {
        let a = [0u8; 32];
        let mut b = [0u8; 32];
        b[0] = 0b1011;
        b[31] = 0xff;
        b[9] = 1;
        assert_eq!(hamming(&a, &b), 3 + 8 + 1);
        assert_eq!(hamming(&[0xf0], &[0x0f]), 8);
    }

    #[test]
    fn descriptor_rows_and_distances() {
        let f = Descriptors::Float {
            width: 2,
            data: vec![0.0, 0.0, 3.0, 4.0],
        };
        assert_eq!(f.len(), 2);
        assert_eq!(f.distance(0, &f, 1), 5.0);
        let sel = f.select(&[1]);
        assert_eq!(sel.float_row(0), Some(&[3.0f32, 4.0][..]));
        let b = Descriptors::empty(DescriptorKind::Binary, 32);
        assert!(matches!(f.check_compatible(&b), Err(FeatureError::DescriptorMismatch(..))));
    }
}
