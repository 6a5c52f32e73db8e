//! Binary feature cache.
//!
//! Layout (little endian):
//!
//! ```text
//! header : magic "AFTFEATS" | version u32 | config hash u64 | entry count u64
//! entry  : payload length u64 | payload | crc32(payload) u32
//! payload: id length u32 | id utf-8 | label u64 | coeffs u32 | frames u32 | coeffs*frames f64
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::FeatureMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AFTFEATS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CacheRead {
    Hit(Vec<FeatureMap>),
    /// The file was written under a different front-end configuration.
    Miss { found_hash: u64, expected_hash: u64 },
}

fn encode_entry(m: &FeatureMap) -> Vec<u8> {
    let mut p = Vec::with_capacity(24 + m.clip_id.len() + 8 * m.data.len());
    p.write_u32::<LE>(m.clip_id.len() as u32).unwrap();
    p.extend_from_slice(m.clip_id.as_bytes());
    p.write_u64::<LE>(m.label as u64).unwrap();
    p.write_u32::<LE>(m.n_coeffs as u32).unwrap();
    p.write_u32::<LE>(m.frames as u32).unwrap();
    for &v in &m.data {
        p.write_f64::<LE>(v).unwrap();
    }
    p
}

fn decode_entry(payload: &[u8]) -> std::io::Result<FeatureMap> {
    let mut c = Cursor::new(payload);
    let id_len = c.read_u32::<LE>()? as usize;
    let mut id = vec![0u8; id_len];
    c.read_exact(&mut id)?;
    let clip_id = String::from_utf8(id).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let label = c.read_u64::<LE>()? as usize;
    let n_coeffs = c.read_u32::<LE>()? as usize;
    let frames = c.read_u32::<LE>()? as usize;
    let mut data = vec![0.0; n_coeffs * frames];
    c.read_f64_into::<LE>(&mut data)?;
    Ok(FeatureMap {
        clip_id,
        label,
        n_coeffs,
        frames,
        data,
    })
}

pub fn write_cache(path: &Path, config_hash: u64, maps: &[FeatureMap]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LE>(VERSION).map_err(io)?;
    w.write_u64::<LE>(config_hash).map_err(io)?;
    w.write_u64::<LE>(maps.len() as u64).map_err(io)?;
    for m in maps {
        let payload = encode_entry(m);
        w.write_u64::<LE>(payload.len() as u64).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        w.write_u32::<LE>(crc32fast::hash(&payload)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_cache(path: &Path, expected_hash: u64) -> Result<CacheRead> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Cache {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor::new(&bytes[..]);
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a feature cache (bad magic)".into()));
    }
    let version = c.read_u32::<LE>().map_err(|_| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let found_hash = c.read_u64::<LE>().map_err(|_| bad("truncated header".into()))?;
    let count = c.read_u64::<LE>().map_err(|_| bad("truncated header".into()))?;
    if found_hash != expected_hash {
        return Ok(CacheRead::Miss {
            found_hash,
            expected_hash,
        });
    }
    let mut maps = Vec::new();
    for i in 0..count {
        let name = |maps: &Vec<FeatureMap>| match maps.last() {
            Some(prev) => format!("#{i} (after {})", prev.clip_id),
            None => format!("#{i}"),
        };
        let len = c.read_u64::<LE>().map_err(|_| Error::Checksum { entry: name(&maps) })? as usize;
        let start = c.position() as usize;
        if start + len + 4 > bytes.len() {
            return Err(Error::Checksum { entry: name(&maps) });
        }
        let payload = &bytes[start..start + len];
        c.set_position((start + len) as u64);
        let crc = c.read_u32::<LE>().map_err(|_| Error::Checksum { entry: name(&maps) })?;
        if crc != crc32fast::hash(payload) {
            let entry = decode_entry(payload)
                .map(|m| format!("#{i} ({})", m.clip_id))
                .unwrap_or_else(|_| name(&maps));
            return Err(Error::Checksum { entry });
        }
        let m = decode_entry(payload).map_err(|e| bad(format!("entry #{i}: {e}")))?;
        maps.push(m);
    }
    Ok(CacheRead::Hit(maps))
}

/// In-memory view of a cache file keyed by clip id.
#[derive(Debug, Default)]
pub struct FeatureCache {
    pub config_hash: u64,
    pub entries: HashMap<String, FeatureMap>,
}

impl FeatureCache {
    /// Loads `path` if it exists and was written under `config_hash`;
    /// otherwise starts empty. The second value reports why nothing was
    /// loaded, if so.
    pub fn open(path: &Path, config_hash: u64) -> Result<(Self, Option<String>)> {
        let mut cache = Self {
            config_hash,
            entries: HashMap::new(),
        };
        if !path.exists() {
            return Ok((cache, Some("no cache file".into())));
        }
        match read_cache(path, config_hash)? {
            CacheRead::Hit(maps) => {
                cache.entries = maps.into_iter().map(|m| (m.clip_id.clone(), m)).collect();
                Ok((cache, None))
            }
            CacheRead::Miss { found_hash, .. } => Ok((
                cache,
                Some(format!("front-end config changed (cache hash {found_hash:016x})")),
            )),
        }
    }

    pub fn get(&self, clip_id: &str) -> Option<&FeatureMap> {
        self.entries.get(clip_id)
    }
}
