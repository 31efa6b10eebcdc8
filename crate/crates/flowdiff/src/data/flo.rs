//! Middlebury `.flo` optical flow files.
//!
//! Layout (all little-endian): the 4-byte magic float `202021.25` (reads
//! as ASCII "PIEH"), `i32` width, `i32` height, then row-major interleaved
//! `(u, v)` float32 pairs. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warping::FlowField;

const FLO_MAGIC: f32 = 202021.25;
const MAX_DIM: i32 = 1 << 20;

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (height, width) = (flow.height(), flow.width());
    w.write_f32::<LittleEndian>(FLO_MAGIC)
        .map_err(|e| Error::io(path, e))?;
    w.write_i32::<LittleEndian>(width as i32)
        .map_err(|e| Error::io(path, e))?;
    w.write_i32::<LittleEndian>(height as i32)
        .map_err(|e| Error::io(path, e))?;
    let data = flow.tensor().data();
    let plane = height * width;
    for p in 0..plane {
        w.write_f32::<LittleEndian>(data[p])
            .map_err(|e| Error::io(path, e))?;
        w.write_f32::<LittleEndian>(data[plane + p])
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };

    let magic = r
        .read_f32::<LittleEndian>()
        .map_err(|_| format_err("truncated before magic (offset 0)".into()))?;
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(format_err(format!(
            "bad magic {magic} (expected {FLO_MAGIC})"
        )));
    }
    let width = r
        .read_i32::<LittleEndian>()
        .map_err(|_| format_err("truncated in width (offset 4)".into()))?;
    let height = r
        .read_i32::<LittleEndian>()
        .map_err(|_| format_err("truncated in height (offset 8)".into()))?;
    if width <= 0 || height <= 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(format_err(format!("implausible dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let plane = width * height;

    let mut payload = vec![0u8; plane * 2 * 4];
    let mut filled = 0usize;
    while filled < payload.len() {
        match r.read(&mut payload[filled..]) {
            Ok(0) => {
                return Err(format_err(format!(
                    "truncated payload at byte offset {}",
                    12 + filled
                )))
            }
            Ok(n) => filled += n,
            Err(e) => return Err(Error::io(path, e)),
        }
    }

    let mut data = vec![0.0f32; plane * 2];
    for p in 0..plane {
        let off = p * 8;
        data[p] = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
        data[plane + p] = f32::from_le_bytes(payload[off + 4..off + 8].try_into().unwrap());
    }
    FlowField::new(Tensor::from_vec(&[2, height, width], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = FlowField::new(Tensor::randn(&[2, 7, 5], &mut rng).scale(13.7)).unwrap();
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(flow.tensor().data(), back.tensor().data());
    }

    #[test]
    fn known_28_byte_fixture() {
        // 2x1 field with (u,v) = (1,2) and (3,4), assembled by hand.
        let expected: [u8; 28] = [
            0x50, 0x49, 0x45, 0x48, // "PIEH" = 202021.25f32
            0x02, 0x00, 0x00, 0x00, // width 2
            0x01, 0x00, 0x00, 0x00, // height 1
            0x00, 0x00, 0x80, 0x3f, // 1.0
            0x00, 0x00, 0x00, 0x40, // 2.0
            0x00, 0x00, 0x40, 0x40, // 3.0
            0x00, 0x00, 0x80, 0x40, // 4.0
        ];
        let flow = FlowField::new(Tensor::from_vec(
            &[2, 1, 2],
            vec![1.0, 3.0, 2.0, 4.0], // u plane then v plane
        ))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.flo");
        write_flo(&flow, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, expected);

        let back = read_flo(&path).unwrap();
        assert_eq!(back.uv(0, 0), (1.0, 2.0));
        assert_eq!(back.uv(0, 1), (3.0, 4.0));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut bytes = vec![0u8; 28];
        bytes[4] = 2;
        bytes[8] = 1;
        std::fs::write(&path, &bytes).unwrap();
        match read_flo(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.flo");
        let flow = FlowField::constant(2, 2, 1.0, -1.0);
        write_flo(&flow, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(20);
        std::fs::write(&path, &bytes).unwrap();
        match read_flo(&path) {
            Err(Error::Format { reason, .. }) => {
                assert!(reason.contains("byte offset 20"), "{reason}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
