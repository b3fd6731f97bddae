//! Versioned encoder checkpoints.
//!
//! Layout: compact JSON header, the two bytes `\n\0`, the parameter payload
//! as little-endian `f64`, then an 8-byte little-endian FNV-1a checksum over
//! header and payload bytes.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const FORMAT: &str = "intentkd-checkpoint";
pub const VERSION: u32 = 1;
pub const CHECKSUM_ALGORITHM: &str = "fnv1a64";
const SEPARATOR: &[u8; 2] = b"\n\0";

/// 64-bit FNV-1a.
#[derive(Clone, Debug)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
    pub payload_values: usize,
    pub checksum: String,
}

pub fn to_bytes(model: &EncoderModel, vocab: &Vocab) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.names().len());
    let mut offset = 0;
    for (name, t) in model.names().iter().zip(model.parameters()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        encoder: model.config.clone(),
        vocab: vocab.clone(),
        tensors,
        payload_values: offset,
        checksum: CHECKSUM_ALGORITHM.into(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::InvalidData(e.to_string()))?;
    out.extend_from_slice(SEPARATOR);
    for t in model.parameters() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv64::new();
    h.update(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let sep = bytes
        .windows(2)
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Corrupt {
            offset: bytes.len(),
            msg: "header separator not found".into(),
        })?;
    let header = parse_header(&bytes[..sep])?;
    Ok((header, sep + SEPARATOR.len()))
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::Corrupt {
        offset: e.column().saturating_sub(1),
        msg: format!("header is not valid JSON: {e}"),
    })?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(Error::Corrupt {
            offset: 0,
            msg: "not an intentkd checkpoint".into(),
        });
    }
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt {
        offset: 0,
        msg: format!("malformed header: {e}"),
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EncoderModel, Vocab)> {
    let (header, start) = split_header(bytes)?;
    let payload_len = header.payload_values * 8;
    let expected = start + payload_len + 8;
    if bytes.len() < expected {
        return Err(Error::Corrupt {
            offset: bytes.len(),
            msg: format!("truncated: expected {expected} bytes"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt {
            offset: expected,
            msg: "trailing bytes after checksum".into(),
        });
    }
    let body_end = start + payload_len;
    let mut h = Fnv64::new();
    h.update(&bytes[..body_end]);
    let stored = u64::from_le_bytes(bytes[body_end..expected].try_into().expect("8 bytes"));
    if stored != h.finish() {
        return Err(Error::Corrupt {
            offset: body_end,
            msg: "checksum mismatch".into(),
        });
    }
    let values: Vec<f64> = bytes[start..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > values.len() {
            return Err(Error::Corrupt {
                offset: start + entry.offset * 8,
                msg: format!("tensor {} overruns payload", entry.name),
            });
        }
        let t = Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec())?;
        params.push((entry.name.clone(), t));
    }
    if header.vocab.len() != header.encoder.vocab_size {
        return Err(Error::InvalidData(format!(
            "vocabulary has {} entries but encoder expects {}",
            header.vocab.len(),
            header.encoder.vocab_size
        )));
    }
    let model = EncoderModel::from_parameters(header.encoder, params)?;
    Ok((model, header.vocab))
}

pub fn save_checkpoint(model: &EncoderModel, vocab: &Vocab, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, vocab)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, Vocab)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the header, leaving the payload untouched.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut buf = Vec::new();
    loop {
        let n = r.read_until(0, &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Corrupt {
                offset: buf.len(),
                msg: "header separator not found".into(),
            });
        }
        if buf.ends_with(SEPARATOR) {
            buf.truncate(buf.len() - SEPARATOR.len());
            return parse_header(&buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_model;
    use crate::tokenizer::build_vocab;

    fn fixture() -> (EncoderModel, Vocab) {
        let vocab = build_vocab(&["hello world", "hola mundo"], 40).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
            seed: 1,
        };
        (init_model(&cfg).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, v) = fixture();
        let bytes = to_bytes(&m, &v).unwrap();
        let (m2, v2) = from_bytes(&bytes).unwrap();
        assert_eq!(m, m2);
        assert_eq!(v, v2);
        assert_eq!(to_bytes(&m2, &v2).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bit_flips_are_corruption() {
        let (m, v) = fixture();
        let bytes = to_bytes(&m, &v).unwrap();
        for cut in [1, 9, bytes.len() / 2] {
            let r = from_bytes(&bytes[..bytes.len() - cut]);
            assert!(matches!(r, Err(Error::Corrupt { .. })), "cut {cut}: {r:?}");
        }
        let mut flipped = bytes.clone();
        let k = flipped.len() - 20;
        flipped[k] ^= 0x10;
        assert!(matches!(from_bytes(&flipped), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (m, v) = fixture();
        let bytes = to_bytes(&m, &v).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":7", 1);
        let bytes = text.into_bytes();
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
