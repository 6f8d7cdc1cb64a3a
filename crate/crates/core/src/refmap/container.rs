//! Single-file map container (little endian):
//!
//! ```text
//! magic    "LMAP"
//! u32      version (1)
//! u64      metadata JSON length, then the JSON bytes
//! u32      record count, then records
//! u32      CRC-32 of every preceding byte
//! ```
//!
//! A record is the image id, the name, intrinsics, pose, global descriptor and
//! the keypoints, each followed by its descriptor and an optional assignment.
//! The full layout is in `docs/formats.md`.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{Assignment, MapMetadata, ReferenceMap, ReferenceRecord};
use crate::features::{DescriptorKind, Descriptors, FeatureSet, Keypoint};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};

pub const MAGIC: &[u8; 4] = b"LMAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapFormatError {
    #[error("not a map file (bad magic)")]
    BadMagic,
    #[error("map file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("map file is corrupt: {0}")]
    Corrupt(String),
    #[error("map file is truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn eof(e: io::Error) -> MapFormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        MapFormatError::Truncated
    } else {
        MapFormatError::Io(e)
    }
}

fn encode(map: &ReferenceMap) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let meta = serde_json::to_vec(&map.metadata).map_err(io::Error::other)?;
    out.write_u64::<LittleEndian>(meta.len() as u64)?;
    out.write_all(&meta)?;
    out.write_u32::<LittleEndian>(map.records.len() as u32)?;
    for r in &map.records {
        out.write_u32::<LittleEndian>(r.image_id)?;
        out.write_u32::<LittleEndian>(r.name.len() as u32)?;
        out.write_all(r.name.as_bytes())?;
        let k = &r.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            out.write_f64::<LittleEndian>(v)?;
        }
        out.write_u32::<LittleEndian>(k.width)?;
        out.write_u32::<LittleEndian>(k.height)?;
        let t = r.pose.translation();
        for v in r.pose.wxyz().into_iter().chain([t.x, t.y, t.z]) {
            out.write_f64::<LittleEndian>(v)?;
        }
        out.write_u32::<LittleEndian>(r.global_descriptor.len() as u32)?;
        for &v in &r.global_descriptor {
            out.write_f32::<LittleEndian>(v)?;
        }
        let d = &r.features.descriptors;
        out.write_u8(match d.kind() {
            DescriptorKind::Binary => 0,
            DescriptorKind::Float => 1,
        })?;
        out.write_u32::<LittleEndian>(d.width() as u32)?;
        out.write_u64::<LittleEndian>(r.features.len() as u64)?;
        for (i, (kp, a)) in r.features.keypoints.iter().zip(&r.assignments).enumerate() {
            out.write_f64::<LittleEndian>(kp.position.u)?;
            out.write_f64::<LittleEndian>(kp.position.v)?;
            out.write_f64::<LittleEndian>(kp.response)?;
            match d {
                Descriptors::Binary { .. } => out.write_all(d.binary_row(i).unwrap())?,
                Descriptors::Float { .. } => {
                    for &x in d.float_row(i).unwrap() {
                        out.write_f32::<LittleEndian>(x)?;
                    }
                }
            }
            match a {
                None => out.write_u8(0)?,
                Some(a) => {
                    out.write_u8(1)?;
                    out.write_u32::<LittleEndian>(a.point_id)?;
                    for v in a.world_position.iter() {
                        out.write_f64::<LittleEndian>(*v)?;
                    }
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> MapFormatError {
    MapFormatError::Corrupt(msg.into())
}

fn decode_record(input: &mut Cursor<&[u8]>) -> Result<ReferenceRecord, MapFormatError> {
    let image_id = input.read_u32::<LittleEndian>().map_err(eof)?;
    let name_len = input.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let remaining = input.get_ref().len() - input.position() as usize;
    if name_len > remaining {
        return Err(MapFormatError::Truncated);
    }
    let mut name = vec![0; name_len];
    input.read_exact(&mut name).map_err(eof)?;
    let name = String::from_utf8(name).map_err(|_| corrupt("image name is not UTF-8"))?;
    let mut f = || input.read_f64::<LittleEndian>().map_err(eof);
    let (fx, fy, cx, cy) = (f()?, f()?, f()?, f()?);
    let width = input.read_u32::<LittleEndian>().map_err(eof)?;
    let height = input.read_u32::<LittleEndian>().map_err(eof)?;
    let intrinsics =
        CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| corrupt(format!("record {image_id}: {e}")))?;
    let mut vals = [0.0; 7];
    for v in &mut vals {
        *v = input.read_f64::<LittleEndian>().map_err(eof)?;
    }
    let pose = Pose::from_wxyz_exact([vals[0], vals[1], vals[2], vals[3]], [vals[4], vals[5], vals[6]])
        .map_err(|e| corrupt(format!("record {image_id}: {e}")))?;
    let global_len = input.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if global_len * 4 > remaining {
        return Err(MapFormatError::Truncated);
    }
    let global_descriptor = (0..global_len)
        .map(|_| input.read_f32::<LittleEndian>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(eof)?;
    let kind = match input.read_u8().map_err(eof)? {
        0 => DescriptorKind::Binary,
        1 => DescriptorKind::Float,
        k => return Err(corrupt(format!("unknown descriptor kind {k}"))),
    };
    let width = input.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let count = input.read_u64::<LittleEndian>().map_err(eof)?;
    if width > 1 << 16 {
        return Err(corrupt(format!("descriptor width {width}")));
    }
    let mut features = FeatureSet::empty(image_id, kind, width);
    let mut assignments = Vec::new();
    for _ in 0..count {
        let mut f = || input.read_f64::<LittleEndian>().map_err(eof);
        let (u, v, response) = (f()?, f()?, f()?);
        features.keypoints.push(Keypoint {
            position: Pixel::new(u, v),
            response,
        });
        match &mut features.descriptors {
            Descriptors::Binary { data, .. } => {
                let start = data.len();
                data.resize(start + width, 0);
                input.read_exact(&mut data[start..]).map_err(eof)?;
            }
            Descriptors::Float { data, .. } => {
                for _ in 0..width {
                    data.push(input.read_f32::<LittleEndian>().map_err(eof)?);
                }
            }
        }
        assignments.push(match input.read_u8().map_err(eof)? {
            0 => None,
            1 => {
                let point_id = input.read_u32::<LittleEndian>().map_err(eof)?;
                let mut f = || input.read_f64::<LittleEndian>().map_err(eof);
                Some(Assignment {
                    point_id,
                    world_position: Point3::new(f()?, f()?, f()?),
                })
            }
            b => return Err(corrupt(format!("bad assignment flag {b}"))),
        });
    }
    Ok(ReferenceRecord {
        image_id,
        name,
        intrinsics,
        pose,
        global_descriptor,
        features,
        assignments,
    })
}

fn decode(bytes: &[u8]) -> Result<ReferenceMap, MapFormatError> {
    if bytes.len() < 4 {
        return Err(MapFormatError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(MapFormatError::BadMagic);
    }
    if bytes.len() < 8 + 8 + 4 + 4 {
        return Err(MapFormatError::Truncated);
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != VERSION {
        return Err(MapFormatError::Version {
            found,
            expected: VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut input = Cursor::new(body);
    input.set_position(8);
    let meta_len = input.read_u64::<LittleEndian>().map_err(eof)?;
    if meta_len > (body.len() - 16) as u64 {
        return Err(MapFormatError::Truncated);
    }
    let start = input.position() as usize;
    let end = start + meta_len as usize;
    let metadata: MapMetadata =
        serde_json::from_slice(&body[start..end]).map_err(|e| corrupt(format!("metadata: {e}")))?;
    input.set_position(end as u64);
    let count = input.read_u32::<LittleEndian>().map_err(eof)?;
    let records = (0..count)
        .map(|_| decode_record(&mut input))
        .collect::<Result<Vec<_>, _>>()?;
    if input.position() as usize != body.len() {
        return Err(corrupt("trailing bytes after the last record"));
    }
    Ok(ReferenceMap { metadata, records })
}

pub fn write_map(map: &ReferenceMap, out: &mut impl Write) -> Result<(), MapFormatError> {
    out.write_all(&encode(map)?)?;
    Ok(())
}

pub fn read_map(input: &mut impl Read) -> Result<ReferenceMap, MapFormatError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_map(map: &ReferenceMap, path: impl AsRef<Path>) -> Result<(), MapFormatError> {
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<ReferenceMap, MapFormatError> {
    decode(&fs::read(path)?)
}
