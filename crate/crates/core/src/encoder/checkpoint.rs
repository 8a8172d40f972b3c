//! Checkpoint files.
//!
//! Layout (little-endian): magic `MHCK`, u32 version, u32 header length,
//! a JSON header holding the encoder config and string metadata, u32
//! tensor count, then per tensor: u32 name length, UTF-8 name, u32 rank,
//! u64 dims, f64 values. Masks are stored as extra tensors named
//! `<param>.mask`. The file ends with the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MHCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A decoded checkpoint: weights plus free-form metadata such as
/// `student_of`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: EncoderWeights,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(weights: &EncoderWeights, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        metadata: metadata.clone(),
    })?;
    let named = weights.named_params();
    let count = named.len() + named.iter().filter(|(_, p)| p.mask.is_some()).count();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, count)?;
    for (name, p) in &named {
        put_tensor(&mut out, name, &p.value)?;
    }
    for (name, p) in &named {
        if let Some(mask) = &p.mask {
            put_tensor(&mut out, &format!("{name}.mask"), mask)?;
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        usize::try_from(u64::from_le_bytes(a)).map_err(|_| Error::CorruptCheckpoint(format!("{what} too large")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("missing MHCK magic".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let header_len = c.u32("header length")?;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    let count = c.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")?);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| {
                let mut a = [0u8; 8];
                a.copy_from_slice(b);
                f64::from_le_bytes(a)
            })
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
    }

    let mut weights = EncoderWeights::init(&header.config, 0)?;
    let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, param) in names.iter().zip(weights.params_mut()) {
        let value = tensors
            .remove(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        *param = crate::numcore::Parameter::new(value);
        if let Some(mask) = tensors.remove(&format!("{name}.mask")) {
            param.set_mask(mask)?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected tensor {extra}")));
    }
    let head_dim = header.config.head_dim();
    for (i, layer) in weights.layers.iter_mut().enumerate() {
        let width = layer.q.fan_out();
        if width % head_dim != 0 || width == 0 {
            return Err(Error::CorruptCheckpoint(format!(
                "layer {i} query width {width} is not a multiple of head dim {head_dim}"
            )));
        }
        let heads = width / head_dim;
        layer.head_ids = header
            .metadata
            .get(&format!("layers.{i}.head_ids"))
            .and_then(|s| serde_json::from_str::<Vec<usize>>(s).ok())
            .filter(|ids| ids.len() == heads)
            .unwrap_or_else(|| (0..heads).collect());
    }
    validate_shapes(&weights)?;
    let mut metadata = header.metadata;
    metadata.retain(|k, _| !k.ends_with(".head_ids"));
    Ok(Checkpoint { weights, metadata })
}

fn validate_shapes(w: &EncoderWeights) -> Result<()> {
    let d = w.config.d_model;
    let bad = |what: String| Err(Error::CorruptCheckpoint(what));
    if w.input.fan_out() != d || w.classifier.fan_in() != d || w.mask_embedding.value.shape() != [1, d] {
        return bad("embedding or classifier shape does not match model dim".into());
    }
    for (i, l) in w.layers.iter().enumerate() {
        let width = l.q.fan_out();
        let f = l.ffn_dim();
        let ok = l.k.fan_out() == width
            && l.v.fan_out() == width
            && l.o.fan_in() == width
            && l.o.fan_out() == d
            && l.fc2.fan_in() == f
            && l.fc2.fan_out() == d
            && l.q.fan_in() == d
            && l.fc1.fan_in() == d
            && l.q.bias.value.shape() == [1, width]
            && l.fc1.bias.value.shape() == [1, f];
        if !ok {
            return bad(format!("layer {i} tensor shapes are inconsistent"));
        }
    }
    Ok(())
}

fn with_head_ids(weights: &EncoderWeights, metadata: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut meta = metadata.clone();
    for (i, layer) in weights.layers.iter().enumerate() {
        if layer.head_ids != (0..layer.live_heads()).collect::<Vec<_>>() {
            meta.insert(
                format!("layers.{i}.head_ids"),
                serde_json::to_string(&layer.head_ids).expect("ids serialize"),
            );
        }
    }
    meta
}

/// Write a checkpoint and return the hex SHA-256 of the written file.
pub fn save_checkpoint(path: &Path, weights: &EncoderWeights, metadata: &BTreeMap<String, String>) -> Result<String> {
    let bytes = encode_checkpoint(weights, &with_head_ids(weights, metadata))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Hex SHA-256 of the checkpoint encoding of `weights` with no metadata.
pub fn weights_hash(weights: &EncoderWeights) -> Result<String> {
    let bytes = encode_checkpoint(weights, &with_head_ids(weights, &BTreeMap::new()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
