//! The `.sfw` weight file.
//!
//! Little-endian layout:
//!
//! ```text
//! "SFW1"                      magic
//! u32                         format version (1)
//! u32                         entry count
//! per entry:
//!   u16, [u8]                 name length, UTF-8 name
//!   u8, [u32]                 ndim, dims
//!   u8                        dtype (0 = f32)
//!   [f32]                     row-major payload
//! u32                         CRC32 of every byte after the magic
//! ```
//!
//! Kernels are stored with 4 dims `(co, ci, k, k)`, biases with 1 dim `(co)`.
//! Activation archives use the same framing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result, WeightFileError};
use crate::network::{decoder_forward, encoder_activations, NetworkParams};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SFW1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// One framed entry: name, stored dims and payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawEntry {
    /// Interprets stored dims as a tensor: 4 dims map directly, 1 dim `(c)`
    /// becomes `(1, c, 1, 1)`.
    pub fn to_tensor(&self) -> Result<Tensor, WeightFileError> {
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        let shape = match d.as_slice() {
            [n, c, h, w] => Shape::new(*n, *c, *h, *w),
            [c] => Shape::new(1, *c, 1, 1),
            _ => {
                return Err(WeightFileError::ShapeChain {
                    entry: self.name.clone(),
                    detail: format!("unsupported rank {}", d.len()),
                })
            }
        };
        Tensor::from_vec(shape, self.data.clone()).map_err(|_| WeightFileError::Truncated)
    }
}

fn stored_dims(name: &str, t: &Tensor) -> Vec<u32> {
    let s = t.shape();
    if name.ends_with(".b") {
        vec![s.c as u32]
    } else {
        s.dims().iter().map(|&v| v as u32).collect()
    }
}

/// Serializes entries with the shared framing.
pub fn encode_entries(entries: &[RawEntry]) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        body.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        body.extend_from_slice(e.name.as_bytes());
        body.push(e.dims.len() as u8);
        for d in &e.dims {
            body.extend_from_slice(&d.to_le_bytes());
        }
        body.push(DTYPE_F32);
        for v in &e.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(4 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).ok_or(WeightFileError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WeightFileError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and checks magic, version, checksum and framing.
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<RawEntry>, WeightFileError> {
    if bytes.len() < 4 {
        return Err(WeightFileError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightFileError::BadName)?
            .to_owned();
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WeightFileError::UnsupportedDtype(dtype));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or(WeightFileError::Truncated)?;
        let payload = r.take(numel.checked_mul(4).ok_or(WeightFileError::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(RawEntry { name, dims, data });
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes);
    }
    let computed = crc32fast::hash(&bytes[4..body_end]);
    if stored != computed {
        return Err(WeightFileError::Checksum { stored, computed });
    }
    Ok(entries)
}

pub fn to_bytes(params: &NetworkParams) -> Vec<u8> {
    let entries: Vec<RawEntry> = params
        .entries()
        .into_iter()
        .map(|(name, t)| RawEntry {
            name: name.to_string(),
            dims: stored_dims(name, t),
            data: t.data().to_vec(),
        })
        .collect();
    encode_entries(&entries)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkParams, WeightFileError> {
    let entries = decode_entries(bytes)?
        .into_iter()
        .map(|e| Ok((e.name.clone(), e.to_tensor()?)))
        .collect::<Result<Vec<_>, WeightFileError>>()?;
    NetworkParams::from_entries(entries)
}

pub fn save_weights(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    for (name, t) in params.entries() {
        if !t.is_finite() {
            return Err(WeightFileError::NonFiniteParam(name.to_string()).into());
        }
    }
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let bytes = fs::read(path)?;
    let mut params = from_bytes(&bytes).map_err(Error::from)?;
    params.metadata.creation = format!("loaded, crc32={:#010x}", file_crc(&bytes));
    Ok(params)
}

/// The CRC stored in a well-formed file.
pub fn file_crc(bytes: &[u8]) -> u32 {
    let n = bytes.len();
    if n < 8 {
        return 0;
    }
    u32::from_le_bytes(bytes[n - 4..].try_into().unwrap())
}

/// Entry names of an activation archive, in file order.
pub const ARCHIVE_ENTRIES: [&str; 8] = ["input", "x1", "x2", "x3", "x4", "se_gate", "features", "reconstruction"];

fn tensor_entry(name: &str, t: &Tensor) -> RawEntry {
    RawEntry {
        name: name.to_string(),
        dims: t.shape().dims().iter().map(|&v| v as u32).collect(),
        data: t.data().to_vec(),
    }
}

/// Every layer output of one forward pass, framed like a weight file.
/// Entries keep their full `(n, c, h, w)` dims.
pub fn activation_archive(params: &NetworkParams, image: &Tensor) -> Result<Vec<RawEntry>> {
    let acts = encoder_activations(&params.encoder, image)?;
    let out = decoder_forward(&params.decoder, &acts.features)?;
    Ok(vec![
        tensor_entry("input", image),
        tensor_entry("x1", &acts.x1),
        tensor_entry("x2", &acts.x2),
        tensor_entry("x3", &acts.x3),
        tensor_entry("x4", &acts.x4),
        tensor_entry("se_gate", &acts.gate),
        tensor_entry("features", acts.features.tensor()),
        tensor_entry("reconstruction", &out),
    ])
}

pub fn save_activation_archive(entries: &[RawEntry], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_entries(entries))?;
    Ok(())
}

/// Reads an archive and checks that it holds exactly the expected layers.
pub fn load_activation_archive(path: impl AsRef<Path>) -> Result<Vec<RawEntry>> {
    let entries = decode_entries(&fs::read(path)?).map_err(Error::from)?;
    if entries.len() != ARCHIVE_ENTRIES.len() {
        return Err(WeightFileError::EntryCount {
            expected: ARCHIVE_ENTRIES.len(),
            found: entries.len(),
        }
        .into());
    }
    for (e, want) in entries.iter().zip(ARCHIVE_ENTRIES) {
        if e.name != want {
            return Err(WeightFileError::UnexpectedEntry {
                expected: want.to_string(),
                found: e.name.clone(),
            }
            .into());
        }
    }
    Ok(entries)
}

/// Largest absolute difference between two archives, or `None` when their
/// names or dims disagree.
pub fn archive_max_diff(a: &[RawEntry], b: &[RawEntry]) -> Option<f32> {
    if a.len() != b.len() {
        return None;
    }
    let mut worst = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.dims != y.dims {
            return None;
        }
        for (u, v) in x.data.iter().zip(&y.data) {
            worst = worst.max((u - v).abs());
        }
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ChannelPlan;

    fn small() -> NetworkParams {
        NetworkParams::init(
            ChannelPlan {
                growth: 2,
                se_hidden: 1,
                decoder: [4, 3, 2],
            },
            11,
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let p = small();
        let bytes = to_bytes(&p);
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&q), bytes);
        assert_eq!(q.encoder, p.encoder);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small());
        assert_eq!(&bytes[..4], b"SFW1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 20);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 4);
        assert_eq!(&bytes[14..18], b"c1.w");
        assert_eq!(bytes[18], 4);
    }

    #[test]
    fn distinct_errors() {
        let bytes = to_bytes(&small());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(from_bytes(&bad).unwrap_err(), WeightFileError::BadMagic);

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(from_bytes(&bad).unwrap_err(), WeightFileError::UnsupportedVersion(2));

        assert_eq!(
            from_bytes(&bytes[..bytes.len() - 9]).unwrap_err(),
            WeightFileError::Truncated
        );

        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(WeightFileError::Checksum { .. })));

        let codes: Vec<u8> = [
            WeightFileError::BadMagic,
            WeightFileError::UnsupportedVersion(2),
            WeightFileError::Truncated,
            WeightFileError::Checksum { stored: 0, computed: 1 },
        ]
        .iter()
        .map(WeightFileError::code)
        .collect();
        let mut dedup = codes.clone();
        dedup.dedup();
        assert_eq!(codes, dedup);
    }

    #[test]
    fn rejects_wrong_entry_order() {
        let p = small();
        let mut entries: Vec<RawEntry> = p
            .entries()
            .into_iter()
            .map(|(name, t)| RawEntry {
                name: name.to_string(),
                dims: stored_dims(name, t),
                data: t.data().to_vec(),
            })
            .collect();
        entries.swap(0, 2);
        let err = from_bytes(&encode_entries(&entries)).unwrap_err();
        assert!(matches!(err, WeightFileError::UnexpectedEntry { .. }));
    }

    #[test]
    fn rejects_non_f32_dtype() {
        let entries = vec![RawEntry {
            name: "c1.w".into(),
            dims: vec![1],
            data: vec![0.0],
        }];
        let mut bytes = encode_entries(&entries);
        // dtype byte sits after name (4) + ndim (1) + dims (4).
        let dtype_at = 4 + 4 + 4 + 2 + 4 + 1 + 4;
        bytes[dtype_at] = 3;
        let body_end = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[4..body_end]);
        bytes[body_end..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode_entries(&bytes).unwrap_err(), WeightFileError::UnsupportedDtype(3));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.sfw");
        let p = small();
        save_weights(&p, &path).unwrap();
        let q = load_weights(&path).unwrap();
        let path2 = dir.path().join("w2.sfw");
        save_weights(&q, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    fn fixed_image() -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| ((x * 5 + y * 3) % 16) as f32 / 15.0)
    }

    #[test]
    fn archive_has_eight_framed_entries() {
        let p = NetworkParams::init(crate::network::ChannelPlan::default(), 3);
        let entries = activation_archive(&p, &fixed_image()).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ARCHIVE_ENTRIES);
        assert_eq!(entries[6].dims, vec![1, 64, 16, 16]);
        assert!(entries[5].data.iter().all(|&g| g > 0.0 && g < 1.0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.sfw");
        save_activation_archive(&entries, &path).unwrap();
        let back = load_activation_archive(&path).unwrap();
        assert_eq!(back, entries);
        assert_eq!(archive_max_diff(&back, &entries), Some(0.0));
    }

    #[test]
    fn zero_image_and_biases_give_zero_archive() {
        let mut p = NetworkParams::init(crate::network::ChannelPlan::default(), 4);
        for (name, t) in p.entries_mut() {
            if name.ends_with(".b") {
                t.data_mut().fill(0.0);
            }
        }
        let zero = Tensor::zeros(Shape::new(1, 1, 16, 16));
        let entries = activation_archive(&p, &zero).unwrap();
        for e in entries.iter().filter(|e| e.name != "se_gate") {
            assert!(e.data.iter().all(|&v| v == 0.0), "{}", e.name);
        }
    }

    #[test]
    fn archive_with_wrong_layers_is_rejected() {
        let p = NetworkParams::init(crate::network::ChannelPlan::default(), 3);
        let mut entries = activation_archive(&p, &fixed_image()).unwrap();
        entries.pop();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.sfw");
        save_activation_archive(&entries, &path).unwrap();
        assert!(load_activation_archive(&path).is_err());
    }
}
