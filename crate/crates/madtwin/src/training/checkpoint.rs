//! Checkpoint persistence: a small self-describing binary tensor container
//! with an integrity checksum.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MADT" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u64 size per dim
//!             | f32 row-major payload
//! u32 CRC-32 (IEEE) over all tensor-record bytes
//! ```
//!
//! Tensor names are the stable dotted names of [`ParameterSet::visit`];
//! optimizer state rides along as the flat tensors `adam.m`, `adam.v`, and
//! `adam.step`. Loading is self-describing: network widths come from the
//! stored shapes, and the twin branch shares the masker's projection exactly
//! when `twin.proj.w` is absent.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::training::adam::AdamState;
use crate::training::params::{NetDims, ParameterSet};

pub const MAGIC: &[u8; 4] = b"MADT";
pub const VERSION: u32 = 1;

/// Default checkpoint file name used by the trainer.
pub const CHECKPOINT_FILE: &str = "checkpoint.madt";

fn crc_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 {
                    0xEDB8_8320 ^ (c >> 1)
                } else {
                    c >> 1
                };
            }
            *slot = c;
        }
        t
    })
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// A parameter set plus optional optimizer state, as read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub opt: Option<AdamState>,
}

fn encode_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes parameters (and optimizer state, when given) to the container
/// format. Values are truncated to f32 on the way out.
pub fn checkpoint_bytes(params: &ParameterSet, opt: Option<&AdamState>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    params.visit(&mut |name, t| {
        encode_record(&mut body, &name, &t.shape(), t.as_slice());
        count += 1;
    });
    if let Some(o) = opt {
        encode_record(&mut body, "adam.m", &[o.m.len()], &o.m);
        encode_record(&mut body, "adam.v", &[o.v.len()], &o.v);
        encode_record(&mut body, "adam.step", &[1], &[o.step as f64]);
        count += 3;
    }
    let mut out = Vec::with_capacity(12 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_le_bytes());
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet,
    opt: Option<&AdamState>,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, opt))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(
                "file truncated inside a tensor record".into(),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn parse_records(body: &[u8], count: u32) -> Result<RawTensors> {
    let mut r = Reader { bytes: body, at: 0 };
    let mut tensors = RawTensors::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            len = len.checked_mul(d).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("tensor {name} has an absurd shape"))
            })?;
            shape.push(d);
        }
        let payload = r.take(len * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::CorruptCheckpoint(format!(
                "duplicate tensor {name}"
            )));
        }
    }
    if r.at != body.len() {
        return Err(Error::CorruptCheckpoint(
            "trailing bytes after the last tensor record".into(),
        ));
    }
    Ok(tensors)
}

fn take_tensor(tensors: &mut RawTensors, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let (got_shape, data) = tensors
        .remove(name)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
    if got_shape != shape {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor {name} has shape {got_shape:?}, expected {shape:?}"
        )));
    }
    Ok(data)
}

/// Parses checkpoint bytes, verifying magic, version, and checksum.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let body = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut tensors = parse_records(body, count)?;

    let proj_shape = tensors
        .get("masker.proj.w")
        .map(|(s, _)| s.clone())
        .ok_or_else(|| Error::CorruptCheckpoint("missing tensor masker.proj.w".into()))?;
    if proj_shape.len() != 2 {
        return Err(Error::CorruptCheckpoint(
            "masker.proj.w is not a matrix".into(),
        ));
    }
    let dims = NetDims {
        trim_bins: proj_shape[0],
        n_bins: proj_shape[1],
    };
    let shared = !tensors.contains_key("twin.proj.w");
    let mut params = ParameterSet::zeros(&dims, shared)?;
    let mut fill_err = None;
    params.visit_mut(&mut |name, mut t| {
        if fill_err.is_some() {
            return;
        }
        let shape: Vec<usize> = match &t {
            crate::training::params::TensorMut::Mat(m) => m.shape().to_vec(),
            crate::training::params::TensorMut::Vec(v) => vec![v.len()],
        };
        match take_tensor(&mut tensors, &name, &shape) {
            Ok(data) => t.as_slice_mut().copy_from_slice(&data),
            Err(e) => fill_err = Some(e),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    let opt = if tensors.contains_key("adam.m") {
        let flat = params.flat_len();
        let m = take_tensor(&mut tensors, "adam.m", &[flat])?;
        let v = take_tensor(&mut tensors, "adam.v", &[flat])?;
        let step_raw = take_tensor(&mut tensors, "adam.step", &[1])?[0];
        if !(step_raw.is_finite() && step_raw >= 0.0 && step_raw.fract() == 0.0) {
            return Err(Error::CorruptCheckpoint(format!(
                "adam.step value {step_raw} is not a step count"
            )));
        }
        let mut state = AdamState::new(flat);
        state.m = m;
        state.v = v;
        state.step = step_raw as u64;
        Some(state)
    } else {
        None
    };

    if let Some(name) = tensors.keys().next() {
        return Err(Error::CorruptCheckpoint(format!(
            "unexpected tensor {name}"
        )));
    }
    Ok(Checkpoint { params, opt })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::CorruptCheckpoint(msg) => {
            Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::params::init_parameters;

    fn dims() -> NetDims {
        NetDims {
            n_bins: 10,
            trim_bins: 6,
        }
    }

    #[test]
    fn crc_known_answer() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn roundtrip_is_f32_exact_and_idempotent() {
        let params = init_parameters(3, &dims(), false).unwrap();
        let mut opt = AdamState::new(params.flat_len());
        opt.m[5] = 0.125;
        opt.v[5] = 1e-9;
        opt.step = 42;

        let bytes = checkpoint_bytes(&params, Some(&opt));
        let loaded = parse_checkpoint(&bytes).unwrap();

        // Values come back at f32 precision exactly.
        let orig = params.flatten();
        let got = loaded.params.flatten();
        assert_eq!(orig.len(), got.len());
        for (o, g) in orig.iter().zip(got.iter()) {
            assert_eq!(*g, *o as f32 as f64);
        }
        let lopt = loaded.opt.as_ref().unwrap();
        assert_eq!(lopt.step, 42);
        assert_eq!(lopt.m[5], 0.125);
        assert_eq!(lopt.v[5], 1e-9f64 as f32 as f64);

        // A second save of the loaded state reproduces the file bit for bit.
        let again = checkpoint_bytes(&loaded.params, loaded.opt.as_ref());
        assert_eq!(again, bytes);
    }

    #[test]
    fn roundtrip_without_optimizer_and_with_shared_projection() {
        let params = init_parameters(9, &dims(), true).unwrap();
        let bytes = checkpoint_bytes(&params, None);
        let loaded = parse_checkpoint(&bytes).unwrap();
        assert!(loaded.opt.is_none());
        assert!(loaded.params.twin_shares_projection());
        assert_eq!(loaded.params.dims(), dims());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        let params = init_parameters(1, &dims(), false).unwrap();
        save_checkpoint(&path, &params, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.flat_len(), params.flat_len());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let params = init_parameters(2, &dims(), false).unwrap();
        let bytes = checkpoint_bytes(&params, None);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            parse_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    parse_checkpoint(&bytes[..cut]),
                    Err(Error::CorruptCheckpoint(_))
                ),
                "cut at {cut} was accepted"
            );
        }
    }

    #[test]
    fn rejects_flipped_payload_byte() {
        let params = init_parameters(4, &dims(), false).unwrap();
        let mut bytes = checkpoint_bytes(&params, None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(
            matches!(&err, Error::CorruptCheckpoint(m) if m.contains("checksum")),
            "got {err:?}"
        );
    }

    #[test]
    fn rejects_extra_and_missing_tensors() {
        let params = init_parameters(5, &dims(), false).unwrap();
        let bytes = checkpoint_bytes(&params, None);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let body = &bytes[12..bytes.len() - 4];

        // Append a bogus tensor record and fix up count and checksum.
        let mut extra_body = body.to_vec();
        encode_record(&mut extra_body, "mystery", &[2], &[1.0, 2.0]);
        let mut extra = Vec::new();
        extra.extend_from_slice(MAGIC);
        extra.extend_from_slice(&VERSION.to_le_bytes());
        extra.extend_from_slice(&(count + 1).to_le_bytes());
        extra.extend_from_slice(&extra_body);
        extra.extend_from_slice(&crc32(&extra_body).to_le_bytes());
        let err = parse_checkpoint(&extra).unwrap_err();
        assert!(
            matches!(&err, Error::CorruptCheckpoint(m) if m.contains("mystery")),
            "got {err:?}"
        );

        // Drop the final record (the last parameter tensor in visit order).
        let visit_len = {
            let mut lens = Vec::new();
            params.visit(&mut |name, t| {
                lens.push(2 + name.len() + 1 + 8 * t.shape().len() + 4 * t.len())
            });
            *lens.last().unwrap()
        };
        let short_body = &body[..body.len() - visit_len];
        let mut short = Vec::new();
        short.extend_from_slice(MAGIC);
        short.extend_from_slice(&VERSION.to_le_bytes());
        short.extend_from_slice(&(count - 1).to_le_bytes());
        short.extend_from_slice(short_body);
        short.extend_from_slice(&crc32(short_body).to_le_bytes());
        let err = parse_checkpoint(&short).unwrap_err();
        assert!(
            matches!(&err, Error::CorruptCheckpoint(m) if m.contains("missing tensor")),
            "got {err:?}"
        );
    }
}
