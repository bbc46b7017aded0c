//! `.pcv` volume files: one JSON header line, a newline, then the raw
//! little-endian `f32` payload in the canonical voxel order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, VolumeMeta, VoxelVolume, CHANNELS};
use crate::error::{Error, FormatError, Result};

pub const PCV_MAGIC: &str = "PCV1";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    dims: [usize; 3],
    channels: usize,
    dtype: String,
    voxel_size_um: f64,
    palette_id: String,
    seed: Option<u64>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

pub fn write_pcv<W: Write>(volume: &VoxelVolume, mut out: W) -> Result<()> {
    let d = volume.dims();
    let header = Header {
        magic: PCV_MAGIC.into(),
        dims: d.as_array(),
        channels: CHANNELS,
        dtype: DTYPE.into(),
        voxel_size_um: volume.voxel_size_um(),
        palette_id: volume.meta.palette_id.clone(),
        seed: volume.meta.seed,
        metadata: volume.meta.extra.clone(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(volume.data().len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes).map_err(|e| Error::io("<pcv stream>", e))
}

pub fn read_pcv<R: Read>(mut input: R) -> Result<VoxelVolume> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<pcv stream>", e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<VoxelVolume> {
    let unrecognized = |found: String| FormatError::UnrecognizedFormat {
        expected: PCV_MAGIC.into(),
        found,
    };
    if bytes.first() != Some(&b'{') {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(unrecognized(found).into());
    }
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::MalformedHeader("missing header terminator".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    match raw.get("magic").and_then(|m| m.as_str()) {
        Some(PCV_MAGIC) => {}
        other => return Err(unrecognized(other.unwrap_or("<none>").to_string()).into()),
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(FormatError::UnsupportedDtype(header.dtype).into());
    }
    if header.channels != CHANNELS {
        return Err(FormatError::MalformedHeader(format!("channels must be 3, got {}", header.channels)).into());
    }
    let payload = &bytes[nl + 1..];
    if !payload.len().is_multiple_of(4) {
        return Err(FormatError::TruncatedPayload {
            bytes: payload.len(),
            unit: 4,
        }
        .into());
    }
    let [x, y, z] = header.dims;
    let dims = Dims::new(x, y, z);
    let expected = dims.len() * CHANNELS;
    let actual = payload.len() / 4;
    if expected != actual {
        return Err(FormatError::PayloadSizeMismatch { expected, actual }.into());
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let meta = VolumeMeta {
        palette_id: header.palette_id,
        seed: header.seed,
        extra: header.metadata,
    };
    Ok(VoxelVolume::new(dims, data, header.voxel_size_um)?.with_meta(meta))
}

pub fn save(volume: &VoxelVolume, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pcv(volume, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load(path: &Path) -> Result<VoxelVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize) -> VoxelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = Dims::cube(n);
        let data = (0..dims.len() * 3).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let mut meta = VolumeMeta {
            palette_id: "default-v1".into(),
            seed: Some(42),
            extra: Default::default(),
        };
        meta.extra.insert("note".into(), serde_json::json!("hello"));
        VoxelVolume::new(dims, data, 0.5).unwrap().with_meta(meta)
    }

    fn encode(v: &VoxelVolume) -> Vec<u8> {
        let mut buf = Vec::new();
        write_pcv(v, &mut buf).unwrap();
        buf
    }

    #[test]
    fn roundtrip_64_cubed_is_bitwise() {
        let v = random_volume(64);
        let back = read_pcv(encode(&v).as_slice()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.meta, v.meta);
        assert_eq!(back.voxel_size_um().to_bits(), v.voxel_size_um().to_bits());
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn payload_order_is_channel_fastest_x_slowest() {
        let dims = Dims::new(2, 1, 2);
        let data = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, -0.1];
        let v = VoxelVolume::new(dims, data, 0.5).unwrap();
        let bytes = encode(&v);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload = &bytes[nl + 1..];
        // voxel (x=1, y=0, z=0) channel 0 is the 7th value
        assert_eq!(&payload[24..28], &0.6f32.to_le_bytes());
        assert_eq!(v.voxel_at(1, 0, 0), [0.6, 0.7, 0.8]);
    }

    #[test]
    fn dims_payload_mismatch_is_reported() {
        let small = random_volume(32);
        let mut bytes = encode(&small);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..nl].to_vec()).unwrap();
        let patched = header.replace("[32,32,32]", "[64,64,64]");
        bytes.splice(..nl, patched.into_bytes());
        match read_pcv(bytes.as_slice()) {
            Err(Error::Format(FormatError::PayloadSizeMismatch { expected, actual })) => {
                assert_eq!(expected, 64 * 64 * 64 * 3);
                assert_eq!(actual, 32 * 32 * 32 * 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_magic_is_unrecognized() {
        let v = random_volume(2);
        let bytes = encode(&v);
        let text = String::from_utf8_lossy(&bytes).replacen("PCV1", "XYZ9", 1);
        let err = read_pcv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::UnrecognizedFormat { .. })));
        let err = read_pcv(&b"\x00\x01binary"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::UnrecognizedFormat { .. })));
    }

    #[test]
    fn partial_value_is_truncation() {
        let v = random_volume(2);
        let mut bytes = encode(&v);
        bytes.truncate(bytes.len() - 2);
        let err = read_pcv(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::TruncatedPayload { .. })));
    }

    #[test]
    fn missing_newline_is_malformed() {
        let err = read_pcv(&b"{\"magic\":\"PCV1\""[..]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::MalformedHeader(_))));
    }

    #[test]
    fn save_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pcv");
        let v = random_volume(5);
        save(&v, &path).unwrap();
        assert_eq!(load(&path).unwrap(), v);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_any_finite_payload(
                vals in proptest::collection::vec(-1.0f32..=1.0, 2 * 3 * 4 * 3),
                vs in 0.01f64..10.0,
            ) {
                let v = VoxelVolume::new(Dims::new(2, 3, 4), vals, vs).unwrap();
                let back = read_pcv(encode(&v).as_slice()).unwrap();
                prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
                prop_assert_eq!(back.voxel_size_um().to_bits(), vs.to_bits());
            }
        }
    }
}
