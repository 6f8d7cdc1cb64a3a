//! Harris corners with per-cell top-k selection and BRIEF-256 descriptors.

use std::path::Path;
use std::sync::OnceLock;

use image::GrayImage;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Descriptors, FeatureSet, Keypoint};
use crate::geometry::Pixel;

pub const BRIEF_BITS: usize = 256;
const BRIEF_SEED: u64 = 0x6272_6965_6632_3536;
const PATCH_HALF: f32 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub max_features: usize,
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub harris_k: f64,
    /// Corners weaker than this fraction of the strongest response are dropped.
    pub relative_threshold: f64,
    pub nms_radius: u32,
    /// Keypoints closer than this to the image edge are dropped so the
    /// descriptor patch stays inside the image.
    pub border: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            max_features: 1000,
            grid_cols: 8,
            grid_rows: 6,
            harris_k: 0.04,
            relative_threshold: 0.01,
            nms_radius: 2,
            border: 16,
        }
    }
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage, image::ImageError> {
    Ok(image::open(path)?.into_luma8())
}

#[derive(Clone)]
struct FloatImage {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl FloatImage {
    fn from_gray(img: &GrayImage) -> Self {
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            w: self.w,
            h: self.h,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.at(x, y)
    }

    /// Bilinear sample in array coordinates (pixel centers at integers).
    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.clamped(xi, yi) * (1.0 - fx) + self.clamped(xi + 1, yi) * fx;
        let bottom = self.clamped(xi, yi + 1) * (1.0 - fx) + self.clamped(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn blur(&self, sigma: f32) -> Self {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.clamped(x as isize + k as isize - radius, y as isize))
                    .sum();
            }
        }
        let tmp = Self {
            w: self.w,
            h: self.h,
            data: tmp,
        };
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp.clamped(x as isize, y as isize + k as isize - radius))
                    .sum();
            }
        }
        Self {
            w: self.w,
            h: self.h,
            data: out,
        }
    }

    fn gradients(&self) -> (Self, Self) {
        let mut gx = vec![0.0; self.data.len()];
        let mut gy = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx[i] = 0.5 * (self.clamped(x + 1, y) - self.clamped(x - 1, y));
                gy[i] = 0.5 * (self.clamped(x, y + 1) - self.clamped(x, y - 1));
            }
        }
        let wrap = |data| Self {
            w: self.w,
            h: self.h,
            data,
        };
        (wrap(gx), wrap(gy))
    }
}

fn brief_pattern() -> &'static [[f32; 4]] {
    static PATTERN: OnceLock<Vec<[f32; 4]>> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(BRIEF_SEED);
        (0..BRIEF_BITS)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-PATCH_HALF..=PATCH_HALF).round()))
            .collect()
    })
}

struct Candidate {
    x: usize,
    y: usize,
    response: f32,
}

fn harris_candidates(smooth: &FloatImage, config: &DetectorConfig) -> (Vec<Candidate>, FloatImage, FloatImage) {
    let (gx, gy) = smooth.gradients();
    let sxx = gx.map(|g| g * g).blur(1.5);
    let syy = gy.map(|g| g * g).blur(1.5);
    let sxy = FloatImage {
        w: gx.w,
        h: gx.h,
        data: gx.data.iter().zip(&gy.data).map(|(a, b)| a * b).collect(),
    }
    .blur(1.5);
    let k = config.harris_k as f32;
    let response: Vec<f32> = (0..sxx.data.len())
        .map(|i| {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            a * b - c * c - k * (a + b) * (a + b)
        })
        .collect();
    let max = response.iter().copied().fold(0.0f32, f32::max);
    let threshold = (max * config.relative_threshold as f32).max(1e-10);
    let (w, h) = (smooth.w, smooth.h);
    let border = config.border as usize;
    let r = config.nms_radius as isize;
    let mut out = Vec::new();
    if w <= 2 * border || h <= 2 * border {
        return (out, gx, gy);
    }
    for y in border..h - border {
        'px: for x in border..w - border {
            let i = y * w + x;
            let v = response[i];
            if v <= threshold {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = response[ny as usize * w + nx as usize];
                    // Raster-earlier neighbours win ties.
                    let earlier = (dy, dx) < (0, 0);
                    if n > v || (earlier && n == v) {
                        continue 'px;
                    }
                }
            }
            out.push(Candidate { x, y, response: v });
        }
    }
    (out, gx, gy)
}

/// Moves a corner to the point where the gradients in a small window are
/// orthogonal to the offsets, which is the exact corner for ideal L and X junctions.
fn refine(gx: &FloatImage, gy: &FloatImage, x: usize, y: usize) -> Pixel {
    const R: isize = 3;
    let start = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for dy in -R..=R {
        for dx in -R..=R {
            let (px, py) = (x as isize + dx, y as isize + dy);
            let g = Vector2::new(gx.clamped(px, py) as f64, gy.clamped(px, py) as f64);
            let w = (-((dx * dx + dy * dy) as f64) / 8.0).exp();
            let ggt = g * g.transpose() * w;
            a += ggt;
            b += ggt * Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
        }
    }
    let trace = a.trace();
    if a.determinant() > 1e-6 * trace * trace {
        if let Some(inv) = a.try_inverse() {
            let c = inv * b;
            if (c - start).norm() <= 3.0 {
                return Pixel::new(c.x, c.y);
            }
        }
    }
    Pixel::new(start.x, start.y)
}

/// Detects up to `config.max_features` corners and describes them with BRIEF-256.
/// A featureless image yields an empty set.
pub fn detect_and_describe(img: &GrayImage, image_id: u32, config: &DetectorConfig) -> FeatureSet {
    let mut set = FeatureSet::empty(image_id, super::DescriptorKind::Binary, BRIEF_BITS / 8);
    if img.width() == 0 || img.height() == 0 || config.max_features == 0 {
        return set;
    }
    let base = FloatImage::from_gray(img);
    let smooth = base.blur(1.0);
    let (candidates, gx, gy) = harris_candidates(&smooth, config);

    let (w, h) = (img.width() as f64, img.height() as f64);
    let border = config.border as f64;
    let mut refined: Vec<Keypoint> = candidates
        .iter()
        .map(|c| Keypoint {
            position: refine(&gx, &gy, c.x, c.y),
            response: c.response as f64,
        })
        .filter(|k| {
            let p = k.position;
            p.u >= border && p.v >= border && p.u < w - border && p.v < h - border
        })
        .collect();
    let order = |a: &Keypoint, b: &Keypoint| {
        b.response
            .total_cmp(&a.response)
            .then(a.position.v.total_cmp(&b.position.v))
            .then(a.position.u.total_cmp(&b.position.u))
    };
    refined.sort_by(order);

    let cols = config.grid_cols.max(1) as usize;
    let rows = config.grid_rows.max(1) as usize;
    let budget = config.max_features.div_ceil(cols * rows);
    let mut used = vec![0usize; cols * rows];
    let mut kept: Vec<Keypoint> = Vec::new();
    for k in refined {
        let cx = ((k.position.u / w * cols as f64) as usize).min(cols - 1);
        let cy = ((k.position.v / h * rows as f64) as usize).min(rows - 1);
        let cell = cy * cols + cx;
        if used[cell] < budget {
            used[cell] += 1;
            kept.push(k);
        }
    }
    kept.truncate(config.max_features);

    let desc_img = base.blur(2.0);
    let pattern = brief_pattern();
    let mut data = Vec::with_capacity(kept.len() * BRIEF_BITS / 8);
    for k in &kept {
        let (u, v) = (k.position.u as f32 - 0.5, k.position.v as f32 - 0.5);
        let mut bytes = [0u8; BRIEF_BITS / 8];
        for (bit, p) in pattern.iter().enumerate() {
            if desc_img.bilinear(u + p[0], v + p[1]) < desc_img.bilinear(u + p[2], v + p[3]) {
                bytes[bit / 8] |= 1 << (bit % 8);
            }
        }
        data.extend_from_slice(&bytes);
    }
    set.keypoints = kept;
    set.descriptors = Descriptors::Binary {
        width: BRIEF_BITS / 8,
        data,
    };
    set
}
