//! The `.cvol` container: one JSON header line, then raw little-endian
//! `f32` voxels in slice-major order. The format is deliberately dumb —
//! it round-trips bit-exactly and can be inspected with `head -1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Volume;

#[derive(Serialize, Deserialize)]
struct Header {
    h: usize,
    w: usize,
    l: usize,
    sy: f32,
    sx: f32,
    sz: f32,
    lo: f32,
    hi: f32,
    dtype: String,
}

/// Writes `v` to `path`, replacing any existing file.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, l) = v.dims();
    let (sy, sx, sz) = v.spacing();
    let (lo, hi) = v.intensity_range();
    let header = Header { h, w, l, sy, sx, sz, lo, hi, dtype: "f32le".to_string() };

    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for &x in v.data() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a `.cvol` file, validating the header against the payload.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = BufReader::new(File::open(path)?);

    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read(&mut byte)? {
            0 => return Err(Error::format(&shown, "missing newline after header")),
            _ if byte[0] == b'\n' => break,
            _ => header_line.push(byte[0]),
        }
        if header_line.len() > 4096 {
            return Err(Error::format(&shown, "header line exceeds 4096 bytes"));
        }
    }
    let header: Header = serde_json::from_slice(&header_line)
        .map_err(|e| Error::format(&shown, format!("bad header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::format(&shown, format!("unsupported dtype {:?}", header.dtype)));
    }
    let voxels = header
        .h
        .checked_mul(header.w)
        .and_then(|n| n.checked_mul(header.l))
        .ok_or_else(|| Error::format(&shown, "dimensions overflow"))?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != voxels * 4 {
        return Err(Error::format(
            &shown,
            format!("payload is {} bytes, header promises {} voxels ({} bytes)", payload.len(), voxels, voxels * 4),
        ));
    }
    let mut data = Vec::with_capacity(voxels);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::non_finite(format!("{shown}: voxel {i} is {x}")));
        }
        data.push(x);
    }
    Volume::new(
        header.h,
        header.w,
        header.l,
        (header.sy, header.sx, header.sz),
        (header.lo, header.hi),
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomKind};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cvol");
        let v = make_phantom(PhantomKind::BandlimitedNoise, (7, 9, 5), 42).unwrap();
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_a_readable_json_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cvol");
        let v = Volume::filled(2, 3, 4, 0.25).unwrap();
        write_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["h"], 2);
        assert_eq!(header["w"], 3);
        assert_eq!(header["l"], 4);
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(bytes.len() - nl - 1, 2 * 3 * 4 * 4);
    }

    #[test]
    fn corrupt_files_give_structured_errors() {
        let dir = tempfile::tempdir().unwrap();

        let no_newline = dir.path().join("no_newline.cvol");
        std::fs::write(&no_newline, b"{\"h\":1").unwrap();
        assert!(matches!(read_volume(&no_newline), Err(Error::Format { .. })));

        let bad_json = dir.path().join("bad_json.cvol");
        std::fs::write(&bad_json, b"not json\n").unwrap();
        assert!(matches!(read_volume(&bad_json), Err(Error::Format { .. })));

        let v = Volume::filled(2, 2, 2, 0.5).unwrap();
        let truncated = dir.path().join("truncated.cvol");
        write_volume(&v, &truncated).unwrap();
        let mut bytes = std::fs::read(&truncated).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&truncated, &bytes).unwrap();
        assert!(matches!(read_volume(&truncated), Err(Error::Format { .. })));

        let trailing = dir.path().join("trailing.cvol");
        write_volume(&v, &trailing).unwrap();
        let mut bytes = std::fs::read(&trailing).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(read_volume(&trailing), Err(Error::Format { .. })));

        let wrong_dtype = dir.path().join("dtype.cvol");
        std::fs::write(
            &wrong_dtype,
            b"{\"h\":1,\"w\":1,\"l\":1,\"sy\":1.0,\"sx\":1.0,\"sz\":1.0,\"lo\":0.0,\"hi\":1.0,\"dtype\":\"f64le\"}\n\0\0\0\0",
        )
        .unwrap();
        assert!(matches!(read_volume(&wrong_dtype), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.cvol");
        let mut bytes =
            b"{\"h\":1,\"w\":1,\"l\":1,\"sy\":1.0,\"sx\":1.0,\"sz\":1.0,\"lo\":0.0,\"hi\":1.0,\"dtype\":\"f32le\"}\n"
                .to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::NonFinite(_))));
    }
}
