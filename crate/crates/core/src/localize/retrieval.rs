//! Global image descriptor and nearest-neighbour retrieval.
//!
//! The descriptor is the image shrunk to 32x32, blurred, normalized to
//! zero mean and unit variance, then scaled to unit length.

use image::{imageops, GrayImage, ImageBuffer, Luma};

pub const GLOBAL_SIDE: u32 = 32;
pub const GLOBAL_LEN: usize = (GLOBAL_SIDE * GLOBAL_SIDE) as usize;
/// Blur on the 32x32 thumbnail, in thumbnail pixels. Wide enough that a
/// few degrees of rotation still leaves neighbouring views close.
pub const GLOBAL_BLUR_SIGMA: f32 = 2.0;

pub fn global_descriptor(img: &GrayImage) -> Vec<f32> {
    if img.width() == 0 || img.height() == 0 {
        return flat_descriptor();
    }
    let float: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(img.width(), img.height(), |x, y| Luma([img.get_pixel(x, y).0[0] as f32 / 255.0]));
    let small = imageops::resize(&float, GLOBAL_SIDE, GLOBAL_SIDE, imageops::FilterType::Triangle);
    let small = imageops::blur(&small, GLOBAL_BLUR_SIGMA);
    let mut v: Vec<f64> = small.into_raw().into_iter().map(f64::from).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return flat_descriptor();
    }
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Descriptor for images without any contrast.
fn flat_descriptor() -> Vec<f32> {
    vec![1.0 / (GLOBAL_LEN as f32).sqrt(); GLOBAL_LEN]
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u32>,
    descriptors: Vec<Vec<f32>>,
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u32, descriptor: Vec<f32>) {
        self.ids.push(id);
        self.descriptors.push(descriptor);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` closest references by Euclidean distance, ties by id.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Vec<u32> {
        let mut scored: Vec<(f32, u32)> = self
            .ids
            .iter()
            .zip(&self.descriptors)
            .map(|(&id, d)| (d.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f32>(), id))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    }
}
