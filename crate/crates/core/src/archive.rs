//! Named-tensor archive used for checkpoints and pretrained encoder weights.
//!
//! Layout (little endian): magic `AURAARC1`, `u32` version, `u8` dtype,
//! `u64` metadata length and JSON metadata, `u64` tensor count, then per
//! tensor a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and the
//! values. A SHA-256 digest of everything before it closes the file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"AURAARC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("archive truncated or malformed: {0}")]
    Malformed(String),
    #[error("checksum mismatch: expected {expected}, found {actual}")]
    Checksum { expected: String, actual: String },
    #[error("fetch failed for {url}: {reason}")]
    Fetch { url: String, reason: String },
    #[error("no pretrained weights: {0}")]
    Unavailable(String),
}

/// An ordered map of named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive<T> {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, ArchivedTensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ArchiveError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize, ArchiveError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| ArchiveError::Malformed("length overflow".into()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "archived tensor length mismatch");
        self.tensors.insert(name.into(), ArchivedTensor { shape, data });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE);
        let meta = serde_json::to_vec(&self.metadata).expect("json metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses an archive, converting values to `T` if it was written with
    /// the other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let actual = sha256_hex(body);
        let expected = hex::encode(trailer);
        if actual != expected {
            return Err(ArchiveError::Checksum { expected, actual });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ArchiveError::Version(version));
        }
        let dtype = r.take(1)?[0];
        let width = match dtype {
            d if d == f32::DTYPE => 4,
            d if d == f64::DTYPE => 8,
            d => return Err(ArchiveError::Dtype(d)),
        };
        let meta_len = r.u64()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| ArchiveError::Malformed(format!("metadata: {e}")))?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ArchiveError::Malformed("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ArchiveError::Malformed("tensor size overflow".into()))?;
            let raw = r.take(len.checked_mul(width).ok_or_else(|| ArchiveError::Malformed("tensor size overflow".into()))?)?;
            let data = if width == 4 {
                raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c).as_f64())).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()
            };
            if tensors.insert(name.clone(), ArchivedTensor { shape, data }).is_some() {
                return Err(ArchiveError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(ArchiveError::Malformed("trailing bytes".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let io = |source| ArchiveError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        // Write to a sibling and rename so readers never see a partial file.
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over names, shapes and values, independent of metadata.
    pub fn tensor_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            t.data.iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

/// Where pretrained encoder weights come from.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSource {
    /// Local archive; used as is when it exists.
    pub path: Option<PathBuf>,
    /// `http(s)://` or `file://` location fetched into the cache.
    pub url: Option<String>,
    /// Expected SHA-256 of the archive file, hex encoded.
    pub sha256: Option<String>,
    /// Cache directory; defaults to `$AURANET_WEIGHTS_DIR`, then
    /// `$HOME/.cache/auranet`.
    pub cache_dir: Option<PathBuf>,
}

pub const WEIGHTS_DIR_ENV: &str = "AURANET_WEIGHTS_DIR";
pub const DEFAULT_ARCHIVE_NAME: &str = "resnet18_imagenet.aura";

impl WeightSource {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache").join("auranet")))
            .unwrap_or_else(|| PathBuf::from(".auranet-cache"))
    }

    fn verify(&self, bytes: &[u8]) -> Result<(), ArchiveError> {
        match &self.sha256 {
            Some(expected) => {
                let actual = sha256_hex(bytes);
                if actual.eq_ignore_ascii_case(expected) {
                    Ok(())
                } else {
                    Err(ArchiveError::Checksum {
                        expected: expected.clone(),
                        actual,
                    })
                }
            }
            None => Ok(()),
        }
    }

    /// Returns a verified local file, fetching into the cache when needed.
    pub fn resolve(&self) -> Result<PathBuf, ArchiveError> {
        let read = |p: &Path| {
            std::fs::read(p).map_err(|source| ArchiveError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        if let Some(p) = self.path.as_ref().filter(|p| p.exists()) {
            self.verify(&read(p)?)?;
            return Ok(p.clone());
        }
        let cached_default = self.cache_dir().join(DEFAULT_ARCHIVE_NAME);
        let Some(url) = &self.url else {
            if self.path.is_none() && cached_default.exists() {
                self.verify(&read(&cached_default)?)?;
                return Ok(cached_default);
            }
            return Err(ArchiveError::Unavailable(match &self.path {
                Some(p) => format!("{} does not exist and no url is configured", p.display()),
                None => "no path or url configured".into(),
            }));
        };
        let file_name = url.rsplit('/').next().filter(|s| !s.is_empty()).unwrap_or(DEFAULT_ARCHIVE_NAME);
        let target = self.cache_dir().join(file_name);
        if target.exists() {
            let bytes = read(&target)?;
            if self.verify(&bytes).is_ok() {
                return Ok(target);
            }
            log::warn!("cached weights at {} failed verification; refetching", target.display());
        }
        let bytes = fetch(url)?;
        self.verify(&bytes)?;
        let io = |source| ArchiveError::Io {
            path: target.clone(),
            source,
        };
        std::fs::create_dir_all(target.parent().unwrap()).map_err(io)?;
        let tmp = target.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(io)?;
        std::fs::rename(&tmp, &target).map_err(io)?;
        log::info!("cached pretrained weights at {}", target.display());
        Ok(target)
    }
}

fn fetch(url: &str) -> Result<Vec<u8>, ArchiveError> {
    let fail = |reason: String| ArchiveError::Fetch {
        url: url.to_string(),
        reason,
    };
    if let Some(p) = url.strip_prefix("file://") {
        return std::fs::read(p).map_err(|e| fail(e.to_string()));
    }
    log::info!("fetching {url}");
    let resp = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| fail(e.to_string()))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive<f32> {
        let mut a = TensorArchive::new(serde_json::json!({"kind": "test"}));
        a.insert("b", vec![2], vec![1.5, -2.0]);
        a.insert("a.weight", vec![1, 2, 1, 1], vec![0.25, f32::MIN_POSITIVE]);
        a
    }

    #[test]
    fn round_trip_and_widening() {
        let a = sample();
        let bytes = a.to_bytes();
        assert_eq!(TensorArchive::<f32>::from_bytes(&bytes).unwrap(), a);
        let wide = TensorArchive::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(wide.tensors["b"].data, vec![1.5, -2.0]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(TensorArchive::<f32>::from_bytes(&bytes), Err(ArchiveError::Checksum { .. })));
        assert!(matches!(TensorArchive::<f32>::from_bytes(b"nonsense"), Err(ArchiveError::BadMagic)));
    }

    #[test]
    fn resolve_fetches_file_url_into_cache_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("w.aura");
        let bytes = sample().to_bytes();
        std::fs::write(&src, &bytes).unwrap();
        let mut ws = WeightSource {
            path: None,
            url: Some(format!("file://{}", src.display())),
            sha256: Some(sha256_hex(&bytes)),
            cache_dir: Some(dir.path().join("cache")),
        };
        let got = ws.resolve().unwrap();
        assert_eq!(got, dir.path().join("cache").join("w.aura"));
        assert_eq!(std::fs::read(&got).unwrap(), bytes);
        ws.sha256 = Some("00".repeat(32));
        std::fs::remove_file(&got).unwrap();
        assert!(matches!(ws.resolve(), Err(ArchiveError::Checksum { .. })));
        ws.url = None;
        assert!(matches!(ws.resolve(), Err(ArchiveError::Unavailable(_))));
    }
}
