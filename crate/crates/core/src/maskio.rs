//! `LMSK` binary container for LangMasks.
//!
//! Layout (all integers little-endian `u32`):
//! magic `LMSK`, version, H, W, D, then `H·W·D` little-endian `f32` in
//! `(y, x, channel)` order, then the byte length of a UTF-8 JSON trailer and
//! the trailer itself (the spec list).

use std::path::Path;

use crate::error::{Error, Result};
use crate::langmask::LangMask;
use crate::types::EditSpec;

pub const MAGIC: &[u8; 4] = b"LMSK";
pub const VERSION: u32 = 1;

pub fn encode_mask(mask: &LangMask) -> Result<Vec<u8>> {
    let trailer = serde_json::to_vec(mask.specs())?;
    let dims = [mask.height(), mask.width(), mask.dim()];
    let mut out = Vec::with_capacity(24 + mask.data().len() * 4 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::MaskFormat(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in mask.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let len = u32::try_from(trailer.len()).map_err(|_| Error::MaskFormat("trailer too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::MaskFormat(format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len().saturating_sub(self.pos)
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<LangMask> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::MaskFormat("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::MaskFormat(format!("unsupported version {version}")));
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let dim = r.u32("dim")? as usize;
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::MaskFormat("dimensions overflow".into()))?;
    let raw = r.take(
        count
            .checked_mul(4)
            .ok_or_else(|| Error::MaskFormat("dimensions overflow".into()))?,
        "tensor",
    )?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let len = r.u32("trailer length")? as usize;
    let trailer = r.take(len, "trailer")?;
    if r.pos != bytes.len() {
        return Err(Error::MaskFormat(format!(
            "{} trailing bytes after trailer",
            bytes.len() - r.pos
        )));
    }
    let specs: Vec<EditSpec> =
        serde_json::from_slice(trailer).map_err(|e| Error::MaskFormat(format!("bad spec trailer: {e}")))?;
    LangMask::from_parts(width, height, dim, data, specs)
}

/// Writes the mask and returns the number of bytes written.
pub fn serialize_mask(mask: &LangMask, path: &Path) -> Result<usize> {
    let bytes = encode_mask(mask)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn deserialize_mask(path: &Path) -> Result<LangMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::image::BBox;
    use crate::types::{ClassLabel, EditAction};

    #[test]
    fn zero_mask_roundtrip() {
        let m = LangMask::blank(2, 2, 4);
        assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let m = LangMask::blank(3, 2, 5);
        let b = encode_mask(&m).unwrap();
        assert_eq!(&b[0..4], b"LMSK");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes()); // H
        assert_eq!(&b[12..16], &3u32.to_le_bytes()); // W
        assert_eq!(&b[16..20], &5u32.to_le_bytes()); // D
        let tensor_end = 20 + 2 * 3 * 5 * 4;
        assert_eq!(&b[tensor_end..tensor_end + 4], &2u32.to_le_bytes());
        assert_eq!(&b[tensor_end + 4..], b"[]");
    }

    #[test]
    fn structured_errors() {
        let m = LangMask::blank(2, 2, 4);
        let b = encode_mask(&m).unwrap();
        for cut in [0, 3, 10, 30, b.len() - 1] {
            assert!(matches!(decode_mask(&b[..cut]), Err(Error::MaskFormat(_))), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_mask(&bad), Err(Error::MaskFormat(m)) if m.contains("magic")));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(decode_mask(&bad), Err(Error::MaskFormat(m)) if m.contains("version")));
    }

    #[test]
    fn file_roundtrip_with_specs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EditSpec {
            action: EditAction::Replace,
            subject_class: ClassLabel::Car,
            bbox: BBox::new(0, 0, 1, 2),
            target_description: Some("blue truck".into()),
            distance_m: 12.5,
            instruction_sentence: "replace the car with a blue truck".into(),
        };
        let mut data = vec![0.0f32; 2 * 3 * 2];
        data[0] = 0.25;
        let m = LangMask::from_parts(3, 2, 2, data, vec![spec]).unwrap();
        let path = dir.path().join("m.lmsk");
        let n = serialize_mask(&m, &path).unwrap();
        assert_eq!(n as u64, std::fs::metadata(&path).unwrap().len());
        assert_eq!(deserialize_mask(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn random_masks_roundtrip_bit_exact(
            w in 1usize..9, h in 1usize..9, d in 1usize..17,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..w * h * d).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
            let m = LangMask::from_parts(w, h, d, data, vec![]).unwrap();
            let back = decode_mask(&encode_mask(&m).unwrap()).unwrap();
            let same = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.specs(), m.specs());
        }
    }
}
