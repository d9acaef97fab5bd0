//! FTNS feature map files.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "FTNS" | version=1 | layer_id | h | w | f | downsample | id_len | id bytes
//! h*w*f f32 values, row-major (i, j, channel)
//! ```

use std::fs;
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::io_util::{checked_product, write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"FTNS";
const VERSION: u32 = 1;

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    if let Some(pos) = map.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite feature value at flat index {pos}")));
    }
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(map.layer_id());
    w.len_u32(map.grid_h(), "grid height")?;
    w.len_u32(map.grid_w(), "grid width")?;
    w.len_u32(map.dim(), "feature dimension")?;
    w.len_u32(map.downsample(), "downsample factor")?;
    w.string(map.image_id())?;
    for &v in map.values() {
        w.f32(v);
    }
    Ok(w.finish())
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported FTNS version {version}")));
    }
    let layer_id = r.u32()?;
    let h = r.usize()?;
    let w = r.usize()?;
    let f = r.usize()?;
    let d = r.usize()?;
    let image_id = r.string()?;
    let n = checked_product(&[h, w, f])?;
    let values = r.f32_vec(n)?;
    r.expect_end()?;
    FeatureMap::new(layer_id, h, w, f, d, values, image_id)
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_feature_map(map)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> FeatureMap {
        FeatureMap::new(3, 1, 1, 2, 4, vec![0.5, -1.0], "img001").unwrap()
    }

    #[test]
    fn header_is_38_bytes_for_six_byte_id() {
        let bytes = encode_feature_map(&tiny()).unwrap();
        assert_eq!(bytes.len(), 38 + 8);
        assert_eq!(&bytes[..4], b"FTNS");
        assert_eq!(&bytes[38..42], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[42..46], &(-1.0f32).to_le_bytes());
        assert_eq!(decode_feature_map(&bytes).unwrap(), tiny());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ftns");
        write_feature_map(&tiny(), &path).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), tiny());
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(
            FeatureMap::new(3, 1, 1, 2, 4, vec![f32::NAN, 0.0], "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_feature_map(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_feature_map(&tiny()).unwrap();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_feature_map(short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn overflowing_header() {
        let mut bytes = encode_feature_map(&tiny()).unwrap();
        for field in [12usize, 16, 20] {
            bytes[field..field + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_feature_map(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            h in 1usize..5, w in 1usize..5, f in 1usize..4,
            seed in proptest::collection::vec(-1e6f32..1e6, 64),
            id in "[a-z0-9_]{0,12}",
        ) {
            let values: Vec<f32> = (0..h * w * f).map(|k| seed[k % seed.len()]).collect();
            let m = FeatureMap::new(5, h, w, f, 8, values, id).unwrap();
            let back = decode_feature_map(&encode_feature_map(&m).unwrap()).unwrap();
            prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, m);
        }
    }
}
