//! Versioned binary containers for checkpoints and recorded episodes.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the concatenated blob payload. The header carries a SHA-256
//! of the payload so truncated or corrupted files fail loudly on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DLCCTNR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F64(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F64(_) => "f64",
            BlobData::U8(_) => "u8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl Blob {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data: BlobData::F64(data) }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self { name: name.into(), shape, data: BlobData::U8(data) }
    }
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
    sha256: String,
}

/// A named collection of arrays plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, blobs: Vec::new() }
    }

    pub fn push(&mut self, blob: Blob) {
        self.blobs.push(blob);
    }

    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs.iter().find(|b| b.name == name).ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.blob(name)? {
            Blob { shape, data: BlobData::F64(v), .. } => Ok((shape, v)),
            _ => Err(Error::Checkpoint(format!("array {name:?} is not f64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.blob(name)? {
            Blob { shape, data: BlobData::U8(v), .. } => Ok((shape, v)),
            _ => Err(Error::Checkpoint(format!("array {name:?} is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.blobs.len());
        for b in &self.blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::Checkpoint(format!("array {:?}: shape {:?} does not match data", b.name, b.shape)));
            }
            let offset = payload.len();
            match &b.data {
                BlobData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                BlobData::U8(v) => payload.extend_from_slice(v),
            }
            entries.push(BlobEntry {
                name: b.name.clone(),
                dtype: b.data.dtype().into(),
                shape: b.shape.clone(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blobs: entries,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + head.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a container file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let head_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let payload = &bytes[body..];
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for e in header.blobs {
            let raw = payload.get(e.offset..e.offset + e.bytes).ok_or_else(|| bad("array outside payload"))?;
            let n: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f64" if raw.len() == 8 * n => {
                    BlobData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                "u8" if raw.len() == n => BlobData::U8(raw.to_vec()),
                _ => return Err(Error::Format(format!("array {:?}: bad dtype or size", e.name))),
            };
            blobs.push(Blob { name: e.name, shape: e.shape, data });
        }
        Ok(Self { kind: header.kind, meta: header.meta, blobs })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind == kind {
            Ok(self)
        } else {
            Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)))
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push(Blob::f64("w", vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]));
        c.push(Blob::u8("img", vec![3], vec![0, 128, 255]));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = sample().to_bytes().unwrap();
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(matches!(Container::from_bytes(&b), Err(Error::Format(_))));
        assert!(Container::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        sample().write_atomic(&p).unwrap();
        assert_eq!(Container::read(&p).unwrap(), sample());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        for _ in 0..17 {
            rng.gen::<u32>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| back.gen()).collect();
        assert_eq!(a, b);
    }
}
