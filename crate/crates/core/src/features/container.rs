//! Binary feature container (little endian):
//!
//! ```text
//! magic   "FEAT"
//! u32     version (1)
//! u8      descriptor kind (0 = binary, 1 = float32)
//! u8[3]   reserved, zero
//! u32     descriptor width (bytes for binary, values for float32)
//! u32     image id
//! u64     keypoint count
//! records f64 u, f64 v, f64 response, descriptor
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{DescriptorKind, Descriptors, FeatureSet, Keypoint};
use crate::geometry::Pixel;

pub const MAGIC: &[u8; 4] = b"FEAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a feature container (bad magic)")]
    BadMagic,
    #[error("unsupported feature container version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown descriptor kind {0}")]
    UnknownKind(u8),
    #[error("feature container truncated: {0}")]
    Truncated(String),
    #[error("invalid feature container: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(io::Error),
}

fn map_eof(what: &str) -> impl Fn(io::Error) -> ContainerError + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ContainerError::Truncated(what.to_string())
        } else {
            ContainerError::Io(e)
        }
    }
}

pub fn write_features(set: &FeatureSet, out: &mut impl Write) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u8(match set.descriptors.kind() {
        DescriptorKind::Binary => 0,
        DescriptorKind::Float => 1,
    })?;
    out.write_all(&[0; 3])?;
    out.write_u32::<LittleEndian>(set.descriptors.width() as u32)?;
    out.write_u32::<LittleEndian>(set.image_id)?;
    out.write_u64::<LittleEndian>(set.keypoints.len() as u64)?;
    for (i, k) in set.keypoints.iter().enumerate() {
        out.write_f64::<LittleEndian>(k.position.u)?;
        out.write_f64::<LittleEndian>(k.position.v)?;
        out.write_f64::<LittleEndian>(k.response)?;
        match &set.descriptors {
            Descriptors::Binary { .. } => out.write_all(set.descriptors.binary_row(i).unwrap())?,
            Descriptors::Float { .. } => {
                for &x in set.descriptors.float_row(i).unwrap() {
                    out.write_f32::<LittleEndian>(x)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_features(input: &mut impl Read) -> Result<FeatureSet, ContainerError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(map_eof("header"))?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = input.read_u32::<LittleEndian>().map_err(map_eof("header"))?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let kind = match input.read_u8().map_err(map_eof("header"))? {
        0 => DescriptorKind::Binary,
        1 => DescriptorKind::Float,
        k => return Err(ContainerError::UnknownKind(k)),
    };
    let mut reserved = [0u8; 3];
    input.read_exact(&mut reserved).map_err(map_eof("header"))?;
    let width = input.read_u32::<LittleEndian>().map_err(map_eof("header"))? as usize;
    let image_id = input.read_u32::<LittleEndian>().map_err(map_eof("header"))?;
    let count = input.read_u64::<LittleEndian>().map_err(map_eof("header"))?;
    if width == 0 || width > 1 << 16 {
        return Err(ContainerError::Invalid(format!("descriptor width {width}")));
    }
    let mut set = FeatureSet::empty(image_id, kind, width);
    let cap = count.min(1 << 20) as usize;
    set.keypoints.reserve(cap);
    for i in 0..count {
        let what = format!("record {i} of {count}");
        let mut rd = || input.read_f64::<LittleEndian>().map_err(map_eof(&what));
        let (u, v, response) = (rd()?, rd()?, rd()?);
        set.keypoints.push(Keypoint {
            position: Pixel::new(u, v),
            response,
        });
        match &mut set.descriptors {
            Descriptors::Binary { data, .. } => {
                let start = data.len();
                data.resize(start + width, 0);
                input.read_exact(&mut data[start..]).map_err(map_eof(&what))?;
            }
            Descriptors::Float { data, .. } => {
                for _ in 0..width {
                    data.push(input.read_f32::<LittleEndian>().map_err(map_eof(&what))?);
                }
            }
        }
    }
    Ok(set)
}

pub fn export_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut out = BufWriter::new(File::create(path).map_err(ContainerError::Io)?);
    write_features(set, &mut out).map_err(ContainerError::Io)?;
    out.flush().map_err(ContainerError::Io)
}

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureSet, ContainerError> {
    read_features(&mut BufReader::new(File::open(path).map_err(ContainerError::Io)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_set() -> impl Strategy<Value = FeatureSet> {
        let binary = (0usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0.0f64..640.0, 0.0f64..480.0, 0.0f64..1.0), n),
                prop::collection::vec(any::<u8>(), n * 32),
                any::<u32>(),
            )
                .prop_map(|(kps, data, id)| (kps, Descriptors::Binary { width: 32, data }, id))
        });
        let float = (0usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0.0f64..640.0, 0.0f64..480.0, 0.0f64..1.0), n),
                prop::collection::vec(-1.0f32..1.0, n * 8),
                any::<u32>(),
            )
                .prop_map(|(kps, data, id)| (kps, Descriptors::Float { width: 8, data }, id))
        });
        prop_oneof![binary, float].prop_map(|(kps, descriptors, image_id)| FeatureSet {
            image_id,
            keypoints: kps
                .into_iter()
                .map(|(u, v, response)| Keypoint {
                    position: Pixel::new(u, v),
                    response,
                })
                .collect(),
            descriptors,
        })
    }

    proptest! {
        #[test]
        fn round_trip(set in arb_set()) {
            let mut buf = Vec::new();
            write_features(&set, &mut buf).unwrap();
            prop_assert_eq!(read_features(&mut buf.as_slice()).unwrap(), set);
        }
    }

    #[test]
    fn empty_set_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.feat");
        let set = FeatureSet::empty(7, DescriptorKind::Binary, 32);
        export_features(&set, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 28);
        assert_eq!(import_features(&path).unwrap(), set);
    }

    #[test]
    fn malformed_headers() {
        let set = FeatureSet::empty(1, DescriptorKind::Float, 4);
        let mut buf = Vec::new();
        write_features(&set, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_features(&mut bad.as_slice()), Err(ContainerError::BadMagic)));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_features(&mut bad.as_slice()), Err(ContainerError::UnsupportedVersion(9))));
        let mut bad = buf.clone();
        bad[8] = 5;
        assert!(matches!(read_features(&mut bad.as_slice()), Err(ContainerError::UnknownKind(5))));
        let mut bad = buf.clone();
        bad[20] = 1;
        assert!(matches!(read_features(&mut bad.as_slice()), Err(ContainerError::Truncated(_))));
        assert!(matches!(read_features(&mut &buf[..10]), Err(ContainerError::Truncated(_))));
    }
}
