//! Deterministic lossless intra-only reference codec (`REF_LOSSLESS`).
//!
//! Payload layout (see `docs/codec.md`):
//!
//! ```text
//! 0x52 | width u16 BE | half-height u16 BE | (run u8, value u8)*
//! ```
//!
//! The pair stream run-length codes the prediction residuals of the
//! superframe bytes. Each byte is predicted from the same channel of the
//! pixel to its left; the first pixel of a row is predicted from the first
//! pixel of the row above (zero for the top row). Residuals are wrapping
//! byte differences. Runs are 1..=255 and may span row boundaries.

use super::{CodecError, CodecId, EncodedAccessUnit, FLAG_KEYFRAME};
use crate::frame::RGB0_BPP;
use crate::superframe::Superframe;

pub const REF_MAGIC: u8 = 0x52;
const HEADER_LEN: usize = 5;

/// Residuals of one row given the row above (`None` for the top row).
fn row_residuals(row: &[u8], above: Option<&[u8]>, out: &mut [u8]) {
    let first: [u8; RGB0_BPP] = match above {
        Some(a) => a[..RGB0_BPP].try_into().unwrap(),
        None => [0; RGB0_BPP],
    };
    for c in 0..RGB0_BPP {
        out[c] = row[c].wrapping_sub(first[c]);
    }
    for ((o, &cur), &left) in out[RGB0_BPP..].iter_mut().zip(&row[RGB0_BPP..]).zip(row) {
        *o = cur.wrapping_sub(left);
    }
}

pub fn ref_encode(sf: &Superframe) -> Result<EncodedAccessUnit, CodecError> {
    let width =
        u16::try_from(sf.width()).map_err(|_| CodecError::Bitstream(format!("width {} exceeds u16", sf.width())))?;
    let half = u16::try_from(sf.height() / 2)
        .map_err(|_| CodecError::Bitstream(format!("height {} exceeds u16", sf.height())))?;
    let data = sf.data();
    let row_len = sf.width() * RGB0_BPP;

    let mut out = Vec::with_capacity(HEADER_LEN + data.len() / 16);
    out.push(REF_MAGIC);
    out.extend_from_slice(&width.to_be_bytes());
    out.extend_from_slice(&half.to_be_bytes());

    let mut residuals = vec![0u8; row_len];
    let mut run_value = 0u8;
    let mut run_len = 0u8;
    for (y, row) in data.chunks_exact(row_len).enumerate() {
        let above = y.checked_sub(1).map(|p| &data[p * row_len..y * row_len]);
        row_residuals(row, above, &mut residuals);
        for &r in &residuals {
            if run_len > 0 && (r != run_value || run_len == u8::MAX) {
                out.extend_from_slice(&[run_len, run_value]);
                run_len = 0;
            }
            run_value = r;
            run_len += 1;
        }
    }
    if run_len > 0 {
        out.extend_from_slice(&[run_len, run_value]);
    }
    EncodedAccessUnit::new(CodecId::RefLossless, FLAG_KEYFRAME, out)
}

pub fn ref_decode(au: &EncodedAccessUnit) -> Result<Superframe, CodecError> {
    if au.codec_id() != CodecId::RefLossless {
        return Err(CodecError::Adapter {
            expected: CodecId::RefLossless,
            actual: au.codec_id(),
        });
    }
    let p = au.payload();
    if p.len() < HEADER_LEN {
        return Err(CodecError::Bitstream(format!(
            "payload of {} bytes is shorter than the header",
            p.len()
        )));
    }
    if p[0] != REF_MAGIC {
        return Err(CodecError::Bitstream(format!("bad magic 0x{:02x}", p[0])));
    }
    let width = usize::from(u16::from_be_bytes([p[1], p[2]]));
    let height = 2 * usize::from(u16::from_be_bytes([p[3], p[4]]));
    if width == 0 || height == 0 {
        return Err(CodecError::Bitstream("zero dimension".into()));
    }
    let expected = width * height * RGB0_BPP;
    let pairs = &p[HEADER_LEN..];
    if !pairs.len().is_multiple_of(2) {
        return Err(CodecError::Bitstream("truncated run pair".into()));
    }

    let mut data = Vec::with_capacity(expected);
    for (offset, pair) in pairs.chunks_exact(2).enumerate() {
        let (run, value) = (usize::from(pair[0]), pair[1]);
        if run == 0 {
            return Err(CodecError::Bitstream(format!(
                "zero-length run at byte {}",
                HEADER_LEN + 2 * offset
            )));
        }
        if data.len() + run > expected {
            return Err(CodecError::Bitstream(format!(
                "runs overflow declared {width}x{height} ({expected} bytes)"
            )));
        }
        data.resize(data.len() + run, value);
    }
    if data.len() != expected {
        return Err(CodecError::Bitstream(format!(
            "decoded {} bytes, declared {width}x{height} needs {expected}",
            data.len()
        )));
    }

    let row_len = width * RGB0_BPP;
    for y in 0..height {
        let (done, rest) = data.split_at_mut(y * row_len);
        let row = &mut rest[..row_len];
        if y > 0 {
            let above = &done[(y - 1) * row_len..];
            for c in 0..RGB0_BPP {
                row[c] = row[c].wrapping_add(above[c]);
            }
        }
        for i in RGB0_BPP..row_len {
            row[i] = row[i].wrapping_add(row[i - RGB0_BPP]);
        }
    }
    Ok(Superframe::new(width, height, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sf(w: usize, h: usize, data: Vec<u8>) -> Superframe {
        Superframe::new(w, h, data).unwrap()
    }

    #[test]
    fn hand_encoded_two_pixel_payload() {
        // Row 0 predicted from zero: residuals 5 5 5 0.
        // Row 1 predicted from the pixel above: residuals 4 4 4 0.
        let au = ref_encode(&sf(1, 2, vec![5, 5, 5, 0, 9, 9, 9, 0])).unwrap();
        assert_eq!(au.payload(), &[0x52, 0x00, 0x01, 0x00, 0x01, 3, 5, 1, 0, 3, 4, 1, 0]);
        assert!(au.is_keyframe());
    }

    #[test]
    fn constant_vga_superframe_collapses() {
        let data: Vec<u8> = [90u8, 140, 200, 0].repeat(640 * 960);
        let au = ref_encode(&sf(640, 960, data)).unwrap();
        // Three literal pairs, then a zero-residual run of 2,457,597 bytes.
        let zero_pairs = (2_457_600 - 3usize).div_ceil(255);
        assert_eq!(au.payload().len(), 5 + 2 * (3 + zero_pairs));
        assert!(au.payload().len() * 100 < 2_457_600);
    }

    #[test]
    fn truncated_payload_is_bitstream_error() {
        let au = ref_encode(&sf(
            2,
            2,
            (0u8..16).map(|b| if b % 4 == 3 { 0 } else { b * 7 }).collect(),
        ))
        .unwrap();
        let mut p = au.payload().to_vec();
        p.pop();
        let cut = EncodedAccessUnit::new(CodecId::RefLossless, 0, p).unwrap();
        assert!(matches!(ref_decode(&cut), Err(CodecError::Bitstream(_))));
    }

    #[test]
    fn declared_dims_mismatch_is_bitstream_error() {
        let au = ref_encode(&sf(1, 2, vec![5, 5, 5, 0, 9, 9, 9, 0])).unwrap();
        let mut p = au.payload().to_vec();
        p[2] = 2; // claim width 2
        let bad = EncodedAccessUnit::new(CodecId::RefLossless, 0, p.clone()).unwrap();
        assert!(matches!(ref_decode(&bad), Err(CodecError::Bitstream(_))));
        p[2] = 1;
        p.extend_from_slice(&[1, 0]); // one byte too many
        let bad = EncodedAccessUnit::new(CodecId::RefLossless, 0, p).unwrap();
        assert!(matches!(ref_decode(&bad), Err(CodecError::Bitstream(_))));
    }

    #[test]
    fn zero_run_and_bad_magic_rejected() {
        let bad = EncodedAccessUnit::new(CodecId::RefLossless, 0, vec![0x52, 0, 1, 0, 1, 0, 5]).unwrap();
        assert!(ref_decode(&bad).is_err());
        let bad = EncodedAccessUnit::new(CodecId::RefLossless, 0, vec![0x53, 0, 1, 0, 1, 8, 0]).unwrap();
        assert!(ref_decode(&bad).is_err());
    }

    #[test]
    fn wrong_codec_id_is_adapter_error() {
        let au = EncodedAccessUnit::new(CodecId::External, 0, vec![1, 2, 3]).unwrap();
        assert!(matches!(ref_decode(&au), Err(CodecError::Adapter { .. })));
    }

    #[test]
    fn runs_split_at_255() {
        let au = ref_encode(&sf(128, 2, vec![0; 128 * 2 * 4])).unwrap();
        // 1024 zero residuals: 4 runs of 255 and one of 4.
        assert_eq!(&au.payload()[5..], &[255, 0, 255, 0, 255, 0, 255, 0, 4, 0]);
        assert_eq!(ref_decode(&au).unwrap().data(), &[0u8; 1024][..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn lossless_round_trip_random((w, h, data) in (1usize..9, 1usize..5).prop_flat_map(|(w, hh)| {
            (Just(w), Just(hh * 2), proptest::collection::vec(any::<u8>(), w * hh * 2 * 4))
        })) {
            let frame = sf(w, h, data);
            let au = ref_encode(&frame).unwrap();
            prop_assert_eq!(ref_encode(&frame).unwrap(), au.clone());
            prop_assert_eq!(ref_decode(&au).unwrap(), frame);
        }
    }
}
