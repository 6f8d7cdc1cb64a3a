//! LiDAR virtual image: a z-buffer of cloud points rendered through a reference
//! camera, where each occupied pixel remembers which world point it came from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Z_MIN};

#[derive(Debug, Error)]
pub enum VirtualImageError {
    #[error("mask has {mask} entries but cloud has {cloud} points")]
    MaskLength { mask: usize, cloud: usize },
    #[error("keypoint ({u}, {v}) lies outside the {width}x{height} image")]
    OutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("debug dump failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("debug dump failed: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VirtualImageConfig {
    pub splat_radius: f64,
    pub search_radius: f64,
}

impl Default for VirtualImageConfig {
    fn default() -> Self {
        Self {
            splat_radius: 1.0,
            search_radius: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub point_id: u32,
    /// Camera-frame z in meters.
    pub depth: f64,
    pub world_position: Point3,
    pub subpixel: Pixel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualImage {
    width: u32,
    height: u32,
    slots: Vec<Option<Slot>>,
}

impl VirtualImage {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            slots: vec![None; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> Option<&Slot> {
        if x < self.width && y < self.height {
            self.slots[(y * self.width + x) as usize].as_ref()
        } else {
            None
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Occupied pixels in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = ((u32, u32), &Slot)> {
        let w = self.width;
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(i, s)| s.as_ref().map(|s| ((i as u32 % w, i as u32 / w), s)))
    }

    fn offer(&mut self, x: i64, y: i64, candidate: &Slot) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let slot = &mut self.slots[(y as usize) * self.width as usize + x as usize];
        let wins = match slot {
            None => true,
            Some(cur) => (candidate.depth, candidate.point_id) < (cur.depth, cur.point_id),
        };
        if wins {
            *slot = Some(*candidate);
        }
    }

    /// Writes a 16-bit depth PNG (millimeters, 0 = empty) and a sidecar table
    /// `<stem>.vimg` of `(pixel index, point id, x, y, z)` records.
    pub fn write_debug(&self, png_path: &Path) -> Result<(), VirtualImageError> {
        let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width, self.height);
        for ((x, y), s) in self.occupied() {
            let mm = (s.depth * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16;
            depth.put_pixel(x, y, image::Luma([mm]));
        }
        depth.save(png_path)?;
        let mut out = BufWriter::new(File::create(png_path.with_extension("vimg"))?);
        out.write_all(b"VIMG")?;
        out.write_u32::<LittleEndian>(self.width)?;
        out.write_u32::<LittleEndian>(self.height)?;
        out.write_u64::<LittleEndian>(self.occupied_count() as u64)?;
        for ((x, y), s) in self.occupied() {
            out.write_u32::<LittleEndian>(y * self.width + x)?;
            out.write_u32::<LittleEndian>(s.point_id)?;
            for c in s.world_position.iter() {
                out.write_f64::<LittleEndian>(*c)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Splats every visible, in-image point into the pixels whose centers lie within
/// `splat_radius` of its projection (always including the pixel it falls in).
/// Conflicts go to the smaller depth, then the smaller point id.
pub fn render_virtual_image(
    cloud: &[Point3],
    mask: &[bool],
    pose: &Pose,
    intr: &CameraIntrinsics,
    splat_radius: f64,
) -> Result<VirtualImage, VirtualImageError> {
    if mask.len() != cloud.len() {
        return Err(VirtualImageError::MaskLength {
            mask: mask.len(),
            cloud: cloud.len(),
        });
    }
    let mut img = VirtualImage::empty(intr.width, intr.height);
    let reach = splat_radius.max(0.0).ceil() as i64 + 1;
    let r2 = splat_radius * splat_radius;
    for (i, (p, _)) in cloud.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let pc = pose.transform(p);
        if pc.z <= Z_MIN {
            continue;
        }
        let Some(px) = intr.project(&pc) else { continue };
        if !intr.contains(&px) {
            continue;
        }
        let slot = Slot {
            point_id: i as u32,
            depth: pc.z,
            world_position: *p,
            subpixel: px,
        };
        let (cx, cy) = px.cell();
        img.offer(cx, cy, &slot);
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                let du = x as f64 + 0.5 - px.u;
                let dv = y as f64 + 0.5 - px.v;
                if du * du + dv * dv <= r2 {
                    img.offer(x, y, &slot);
                }
            }
        }
    }
    Ok(img)
}

/// Looks up the world point for a keypoint: among occupied pixels near the
/// keypoint, the stored point whose projection is closest to the keypoint wins
/// if that distance is at most `search_radius`. Ties go to the lower point id.
pub fn lookup_3d(vimg: &VirtualImage, kp: &Pixel, search_radius: f64) -> Result<Option<(u32, Point3)>, VirtualImageError> {
    if !(kp.u >= 0.0 && kp.v >= 0.0 && kp.u < vimg.width as f64 && kp.v < vimg.height as f64) {
        return Err(VirtualImageError::OutOfBounds {
            u: kp.u,
            v: kp.v,
            width: vimg.width,
            height: vimg.height,
        });
    }
    let (cx, cy) = kp.cell();
    // A point within `search_radius` of the keypoint owns its own pixel unless a
    // nearer point took it, so this window sees every qualifying point that survived.
    let reach = search_radius.max(0.0).ceil() as i64 + 1;
    let mut best: Option<(f64, u32, Point3)> = None;
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            if x < 0 || y < 0 {
                continue;
            }
            let Some(s) = vimg.get(x as u32, y as u32) else { continue };
            let d = s.subpixel.distance(kp);
            if d > search_radius {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bid, _)) => (d, s.point_id) < (bd, bid),
            };
            if better {
                best = Some((d, s.point_id, s.world_position));
            }
        }
    }
    Ok(best.map(|(_, id, p)| (id, p)))
}
