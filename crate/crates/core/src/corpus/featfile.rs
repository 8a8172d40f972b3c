//! Binary feature files and corpus manifests.
//!
//! Layout (little-endian): magic `MHFT`, u32 version (1), u32 T, u32 D,
//! u8 flags (bit 0: frame states present, bit 1: sequence class present),
//! `T*D` f32 features row-major, then optionally `T` u32 states, then
//! optionally one u32 sequence class.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Utterance;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MHFT";
pub const FEATURE_VERSION: u32 = 1;
const FLAG_STATES: u8 = 1;
const FLAG_CLASS: u8 = 2;

pub fn encode_features(u: &Utterance) -> Result<Vec<u8>> {
    let (t, d) = (u.frames(), u.dim());
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit in u32")))
    };
    let mut flags = 0u8;
    if u.frame_states.is_some() {
        flags |= FLAG_STATES;
    }
    if u.seq_class.is_some() {
        flags |= FLAG_CLASS;
    }
    let mut out = Vec::with_capacity(17 + 4 * t * (d + 1) + 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&as_u32(t, "frame count")?.to_le_bytes());
    out.extend_from_slice(&as_u32(d, "feature dim")?.to_le_bytes());
    out.push(flags);
    for &x in u.features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(states) = &u.frame_states {
        if states.len() != t {
            return Err(Error::shape(format!("{} frame states for {t} frames", states.len())));
        }
        for &s in states {
            out.extend_from_slice(&as_u32(s, "frame state")?.to_le_bytes());
        }
    }
    if let Some(c) = u.seq_class {
        out.extend_from_slice(&as_u32(c, "sequence class")?.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Utterance> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != FEATURE_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected MHFT"));
    }
    let version_at = r.pos;
    let raw_version = r.take(4, "version")?;
    if raw_version == FEATURE_VERSION.to_be_bytes() {
        r.pos = version_at;
        return Err(r.err("big-endian feature file; only little-endian is supported"));
    }
    let version = u32::from_le_bytes([raw_version[0], raw_version[1], raw_version[2], raw_version[3]]);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "feature file",
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if t == 0 || d == 0 {
        r.pos -= 8;
        return Err(r.err(format!("empty feature matrix {t}x{d}")));
    }
    let flags = r.take(1, "flags")?[0];
    if flags & !(FLAG_STATES | FLAG_CLASS) != 0 {
        r.pos -= 1;
        return Err(r.err(format!("unknown flag bits {flags:#04x}")));
    }
    let n = t
        .checked_mul(d)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| r.err("feature matrix size overflows"))?;
    let raw = r.take(n * 4, "features")?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse {
            offset: (17 + 4 * i) as u64,
            message: "non-finite feature value".into(),
        });
    }
    let mut u = Utterance::new(Tensor::from_rows(t, d, data))?;
    if flags & FLAG_STATES != 0 {
        let mut states = Vec::with_capacity(t);
        for _ in 0..t {
            states.push(r.u32("frame state")? as usize);
        }
        u.frame_states = Some(states);
    }
    if flags & FLAG_CLASS != 0 {
        u.seq_class = Some(r.u32("sequence class")? as usize);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(u)
}

pub fn write_features(path: &Path, u: &Utterance) -> Result<()> {
    let bytes = encode_features(u)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Utterance> {
    decode_features(&fs::read(path)?)
}

/// Read a manifest: one feature-file path per line. Relative paths are
/// resolved against the manifest's directory; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    read_manifest(path)?.iter().map(|p| load_features(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Utterance {
        let data = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut u = Utterance::new(Tensor::from_rows(4, 3, data)).unwrap();
        u.frame_states = Some(vec![0, 1, 1, 2]);
        u.seq_class = Some(3);
        u
    }

    #[test]
    fn roundtrip_is_identity() {
        let u = sample();
        assert_eq!(decode_features(&encode_features(&u).unwrap()).unwrap(), u);
        let bare = Utterance::new(u.features.clone()).unwrap();
        assert_eq!(decode_features(&encode_features(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode_features(&sample()).unwrap();
        match decode_features(&bytes[..bytes.len() - 2]) {
            Err(Error::Parse { offset, message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert_eq!(offset, (bytes.len() - 4) as u64);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn big_endian_file_is_rejected_explicitly() {
        let mut bytes = encode_features(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&1u32.to_be_bytes());
        match decode_features(&bytes) {
            Err(Error::Parse { offset: 4, message }) => assert!(message.contains("big-endian")),
            other => panic!("expected big-endian rejection, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = encode_features(&sample()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_features(&bytes), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_features(&dir.path().join("a.mhft"), &sample()).unwrap();
        fs::write(dir.path().join("list.txt"), "a.mhft\n\n").unwrap();
        let utts = load_manifest(&dir.path().join("list.txt")).unwrap();
        assert_eq!(utts, vec![sample()]);
    }
}
