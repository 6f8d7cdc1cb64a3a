//! Synthetic scenes of textured axis-aligned rectangles: a sampled point cloud,
//! posed grayscale renders, and exact ray-cast ground truth.

pub mod oracle;
pub mod scenes;

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Vec3};
use crate::manifest::{entry_for, ManifestFile};
use crate::pointcloud::{save_ply, PlyError, PlyFormat, PointCloud};

pub use oracle::Oracle;
pub use scenes::{scene, SCENE_NAMES};

/// Side of the square texture tiles in meters.
pub const TILE_M: f64 = 0.1;
/// Spacing and width of the dark grid lines drawn over the tiles.
pub const GRID_M: f64 = 0.5;
pub const GRID_LINE_M: f64 = 0.02;
/// Subsamples per pixel side when rendering.
pub const SUPERSAMPLE: u32 = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("unknown scene `{0}`; available: wall, two-walls, room, two-floor, park")]
    UnknownScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rectangle perpendicular to world axis `axis` at coordinate `offset`,
/// spanning `[min[0], max[0]] x [min[1], max[1]]` over the other two axes in
/// increasing order (x,y for a z-normal, x,z for a y-normal, y,z for an x-normal).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub axis: usize,
    pub offset: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub texture_seed: u64,
}

impl Rect {
    pub fn new(axis: usize, offset: f64, min: [f64; 2], max: [f64; 2], texture_seed: u64) -> Self {
        Self {
            axis,
            offset,
            min,
            max,
            texture_seed,
        }
    }

    /// The two in-plane world axes.
    pub fn plane_axes(&self) -> (usize, usize) {
        match self.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.max[0] - self.min[0], self.max[1] - self.min[1])
    }

    pub fn area(&self) -> f64 {
        let (w, h) = self.extent();
        w * h
    }

    pub fn point_at(&self, a: f64, b: f64) -> Point3 {
        let (i, j) = self.plane_axes();
        let mut p = Point3::origin();
        p[self.axis] = self.offset;
        p[i] = a;
        p[j] = b;
        p
    }

    /// Ray parameter of the hit with `origin + s * dir`, for `s > 0`.
    pub fn intersect(&self, origin: &Point3, dir: &Vec3) -> Option<f64> {
        let d = dir[self.axis];
        if d == 0.0 {
            return None;
        }
        let s = (self.offset - origin[self.axis]) / d;
        if !(s > 0.0) {
            return None;
        }
        let (i, j) = self.plane_axes();
        let a = origin[i] + s * dir[i];
        let b = origin[j] + s * dir[j];
        (a >= self.min[0] && a <= self.max[0] && b >= self.min[1] && b <= self.max[1]).then_some(s)
    }

    /// Texture intensity in `[0, 1]` at a point of the rectangle.
    pub fn shade(&self, p: &Point3) -> f64 {
        let (i, j) = self.plane_axes();
        texture(self.texture_seed, p[i] - self.min[0], p[j] - self.min[1])
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random gray tiles crossed by dark grid lines; `s`, `t` in meters.
pub fn texture(seed: u64, s: f64, t: f64) -> f64 {
    let on_line = |x: f64| (x / GRID_M - (x / GRID_M).floor()) * GRID_M < GRID_LINE_M;
    if on_line(s) || on_line(t) {
        return 0.02;
    }
    let (ti, tj) = ((s / TILE_M).floor() as i64, (t / TILE_M).floor() as i64);
    let h = mix(seed ^ mix((ti as u64) ^ mix(tj as u64 ^ 0x5bd1_e995)));
    0.12 + 0.86 * (h % 1024) as f64 / 1023.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub surfaces: Vec<Rect>,
    /// Cloud points per square meter of surface.
    pub density: f64,
    /// Standard deviation of optional isotropic point jitter in meters.
    pub jitter_m: f64,
    pub intrinsics: CameraIntrinsics,
    pub references: Vec<Pose>,
    pub queries: Vec<Pose>,
    /// Intensity of rays that miss every surface.
    pub background: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        if !(self.jitter_m >= 0.0 && self.jitter_m.is_finite()) {
            return bad(format!("jitter must be non-negative, got {}", self.jitter_m));
        }
        for (k, r) in self.surfaces.iter().enumerate() {
            let (w, h) = r.extent();
            if r.axis > 2 || !(w > 0.0 && h > 0.0) || !r.offset.is_finite() {
                return bad(format!("surface {k} is degenerate"));
            }
        }
        self.intrinsics
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub image: GrayImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub cloud: PointCloud,
    /// Surface index of every cloud point.
    pub point_surface: Vec<usize>,
    pub references: Vec<View>,
    pub queries: Vec<View>,
}

impl SyntheticDataset {
    pub fn oracle(&self) -> Oracle<'_> {
        Oracle::new(&self.spec.surfaces)
    }
}

/// Stratified samples: one jittered point per cell of a grid whose cell count
/// per side is the side length times the square root of the density, rounded.
pub fn sample_surface(rect: &Rect, density: f64, rng: &mut impl Rng) -> Vec<Point3> {
    let (w, h) = rect.extent();
    let per_m = density.sqrt();
    let (nx, ny) = (((w * per_m).round() as usize).max(1), ((h * per_m).round() as usize).max(1));
    let (dx, dy) = (w / nx as f64, h / ny as f64);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = rect.min[0] + (i as f64 + rng.gen::<f64>()) * dx;
            let b = rect.min[1] + (j as f64 + rng.gen::<f64>()) * dy;
            out.push(rect.point_at(a, b));
        }
    }
    out
}

/// World ray through a (sub)pixel position.
pub fn pixel_ray(pose: &Pose, intr: &CameraIntrinsics, px: &Pixel) -> (Point3, Vec3) {
    let dir = pose.rotation().inverse() * intr.backproject(px, 1.0).coords;
    (pose.center(), dir)
}

/// Nearest surface hit: (surface index, ray parameter).
pub fn raycast(surfaces: &[Rect], origin: &Point3, dir: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, r) in surfaces.iter().enumerate() {
        if let Some(s) = r.intersect(origin, dir) {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((k, s));
            }
        }
    }
    best
}

/// Renders the textured scene with exact occlusion and `SUPERSAMPLE`^2 rays per pixel.
pub fn render(surfaces: &[Rect], pose: &Pose, intr: &CameraIntrinsics, background: f64) -> GrayImage {
    let (w, h) = (intr.width, intr.height);
    let n = SUPERSAMPLE as f64;
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut acc = 0.0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px = Pixel::new(x as f64 + (sx as f64 + 0.5) / n, y as f64 + (sy as f64 + 0.5) / n);
                            let (o, d) = pixel_ray(pose, intr, &px);
                            acc += match raycast(surfaces, &o, &d) {
                                Some((k, s)) => surfaces[k].shade(&(o + d * s)),
                                None => background,
                            };
                        }
                    }
                    (255.0 * acc / (n * n)).round().clamp(0.0, 255.0) as u8
                })
                .collect()
        })
        .collect();
    GrayImage::from_fn(w, h, |x, y| Luma([rows[y as usize][x as usize]]))
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut point_surface = Vec::new();
    for (k, r) in spec.surfaces.iter().enumerate() {
        let pts = sample_surface(r, spec.density, &mut rng);
        point_surface.extend(std::iter::repeat(k).take(pts.len()));
        points.extend(pts);
    }
    let colors: Vec<[u8; 3]> = points
        .iter()
        .zip(&point_surface)
        .map(|(p, &k)| {
            let g = (255.0 * spec.surfaces[k].shade(p)).round() as u8;
            [g, g, g]
        })
        .collect();
    if spec.jitter_m > 0.0 {
        let normal = Normal::new(0.0, spec.jitter_m).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        for p in &mut points {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    let views = |prefix: &str, poses: &[Pose]| -> Vec<View> {
        poses
            .iter()
            .enumerate()
            .map(|(i, pose)| View {
                name: format!("images/{prefix}_{i:03}.png"),
                pose: *pose,
                intrinsics: spec.intrinsics,
                image: render(&spec.surfaces, pose, &spec.intrinsics, spec.background),
            })
            .collect()
    };
    Ok(SyntheticDataset {
        spec: spec.clone(),
        cloud: PointCloud::with_colors(points, colors),
        point_surface,
        references: views("ref", &spec.references),
        queries: views("query", &spec.queries),
    })
}

impl SyntheticDataset {
    /// Writes `cloud.ply`, `images/*.png`, `manifest.json` (queries carry their
    /// ground-truth poses) and `scene.json`. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, SynthError> {
        fs::create_dir_all(dir.join("images"))?;
        save_ply(&self.cloud, dir.join("cloud.ply"), PlyFormat::BinaryLittleEndian)?;
        for v in self.references.iter().chain(&self.queries) {
            v.image.save(dir.join(&v.name))?;
        }
        let manifest = ManifestFile {
            cloud: "cloud.ply".into(),
            references: self
                .references
                .iter()
                .map(|v| entry_for(&v.name, &v.intrinsics, Some(&v.pose)))
                .collect(),
            queries: self
                .queries
                .iter()
                .map(|v| entry_for(&v.name, &v.intrinsics, Some(&v.pose)))
                .collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_world;
    use crate::manifest::load_manifest;
    use crate::pointcloud::load_ply;

    #[test]
    fn wall_point_count_is_exact() {
        let rect = Rect::new(2, 5.0, [0.0, 0.0], [4.0, 3.0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = sample_surface(&rect, 100.0, &mut rng);
        assert_eq!(pts.len(), 1200);
        assert!(pts.iter().all(|p| p.z == 5.0 && (0.0..=4.0).contains(&p.x) && (0.0..=3.0).contains(&p.y)));
    }

    #[test]
    fn intersection_examples() {
        let rect = Rect::new(2, 2.0, [-1.0, -1.0], [1.0, 1.0], 0);
        let o = Point3::origin();
        assert_eq!(rect.intersect(&o, &Vec3::z()), Some(2.0));
        assert_eq!(rect.intersect(&o, &-Vec3::z()), None);
        assert_eq!(rect.intersect(&o, &Vec3::x()), None);
        assert_eq!(rect.intersect(&o, &Vec3::new(0.6, 0.0, 1.0)), None);
    }

    #[test]
    fn texture_is_high_contrast_and_deterministic() {
        let vals: Vec<f64> = (0..200).map(|i| texture(7, 0.031 + i as f64 * 0.1, 0.25)).collect();
        assert_eq!(vals, (0..200).map(|i| texture(7, 0.031 + i as f64 * 0.1, 0.25)).collect::<Vec<_>>());
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.7);
        assert_eq!(texture(7, 0.5, 0.25), 0.02);
    }

    #[test]
    fn near_wall_hides_far_wall_in_render() {
        let spec = scene("two-walls", 1).unwrap();
        let data = generate(&spec).unwrap();
        let view = &data.references[0];
        // Hand geometry: the optical-axis ray from the first camera meets the
        // near wall, so the center pixel shows near-wall texture only.
        let near = &spec.surfaces[0];
        let (o, d) = pixel_ray(&view.pose, &view.intrinsics, &Pixel::new(160.5, 120.5));
        let s = near.intersect(&o, &d).expect("axis ray hits the near wall");
        let hit = o + d * s;
        let expected = (255.0 * near.shade(&hit)).round() as i32;
        let got = view.image.get_pixel(160, 120).0[0] as i32;
        // The pixel averages 9 subsamples of one tile unless a tile edge or grid
        // line crosses it, so compare against the center texel with slack.
        assert!((got - expected).abs() <= 40 || near.shade(&hit) < 0.05, "{got} vs {expected}");
        let far = &spec.surfaces[1];
        assert!(far.intersect(&o, &d).unwrap() > s);
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = scene("wall", 3).unwrap();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        a.write(&d1).unwrap();
        b.write(&d2).unwrap();
        for f in ["cloud.ply", "manifest.json", "images/ref_000.png"] {
            assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn written_dataset_round_trips() {
        let data = generate(&scene("wall", 1).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = load_manifest(data.write(dir.path()).unwrap()).unwrap();
        assert_eq!(load_ply(&manifest.cloud).unwrap(), data.cloud);
        assert_eq!(manifest.references.len(), data.references.len());
        assert_eq!(manifest.queries[0].pose.is_some(), true);
        let img = image::open(&manifest.references[0].path).unwrap().into_luma8();
        assert_eq!(img, data.references[0].image);
    }

    #[test]
    fn cloud_points_project_to_their_rendered_texture() {
        // A cloud point seen head-on lands on a pixel whose render uses the same texture.
        let data = generate(&scene("wall", 2).unwrap()).unwrap();
        let view = &data.references[0];
        let mut agree = 0;
        let mut total = 0;
        for (p, c) in data.cloud.points.iter().zip(data.cloud.colors.as_ref().unwrap()).step_by(7) {
            let Some(px) = project_world(&view.pose, &view.intrinsics, p).filter(|px| view.intrinsics.contains(px)) else {
                continue;
            };
            total += 1;
            let (x, y) = (px.u as u32, px.v as u32);
            agree += ((view.image.get_pixel(x, y).0[0] as i32 - c[0] as i32).abs() <= 60) as usize;
        }
        assert!(total > 100 && agree as f64 > 0.8 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = scene("wall", 1).unwrap();
        spec.density = 0.0;
        assert!(generate(&spec).is_err());
        let mut spec = scene("wall", 1).unwrap();
        spec.surfaces[0].max[0] = spec.surfaces[0].min[0];
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn jitter_moves_points() {
        let mut spec = scene("wall", 1).unwrap();
        spec.references.truncate(1);
        let clean = generate(&spec).unwrap();
        spec.jitter_m = 0.01;
        let noisy = generate(&spec).unwrap();
        let mean: f64 = clean
            .cloud
            .points
            .iter()
            .zip(&noisy.cloud.points)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / clean.cloud.len() as f64;
        assert!(mean > 0.01 && mean < 0.03, "{mean}");
    }
}
