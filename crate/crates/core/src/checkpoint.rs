//! Versioned binary container for trained models.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "AFTCKPT1" | version u32 | architecture hash u64
//! metadata length u32 | metadata JSON
//! tensor count u32 | per tensor: name length u32, name, rank u32, dims u64.., values f64..
//! crc32 of everything above u32
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::audio::{normalize_clip, AudioClip, FeatureMap, FrontendConfig, MfccExtractor, Standardizer};
use crate::backbone::{argmax_rows, batch_tensor, Backbone, BackboneConfig, ClassifierHead};
use crate::error::{Error, Result};
use crate::feature_space::FeatureSpace;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"AFTCKPT1";
pub const VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<Float>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<(Vec<usize>, Vec<Float>)> {
        self.tensors
            .iter()
            .find(|t| t.0 == name)
            .map(|t| (t.1.clone(), t.2.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.write_u32::<LE>(VERSION).unwrap();
        b.write_u64::<LE>(self.arch_hash).unwrap();
        let meta = serde_json::to_vec(&self.metadata).expect("json value serializes");
        b.write_u32::<LE>(meta.len() as u32).unwrap();
        b.extend_from_slice(&meta);
        b.write_u32::<LE>(self.tensors.len() as u32).unwrap();
        for (name, shape, data) in &self.tensors {
            b.write_u32::<LE>(name.len() as u32).unwrap();
            b.extend_from_slice(name.as_bytes());
            b.write_u32::<LE>(shape.len() as u32).unwrap();
            shape.iter().for_each(|&d| b.write_u64::<LE>(d as u64).unwrap());
            data.iter().for_each(|&v| b.write_f64::<LE>(v as f64).unwrap());
        }
        let crc = crc32fast::hash(&b);
        b.write_u32::<LE>(crc).unwrap();
        b
    }

    /// Parses a container. With `expected_hash`, a different architecture
    /// hash is an error.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 4 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if stored != crc32fast::hash(body) {
            return Err(Error::Checksum {
                entry: "checkpoint body".into(),
            });
        }
        let mut c = Cursor::new(&body[8..]);
        let trunc = |_| bad("truncated checkpoint");
        let version = c.read_u32::<LE>().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let arch_hash = c.read_u64::<LE>().map_err(trunc)?;
        if let Some(h) = expected_hash {
            if h != arch_hash {
                return Err(Error::Checkpoint(format!(
                    "architecture hash {arch_hash:016x} does not match expected {h:016x}"
                )));
            }
        }
        let meta_len = c.read_u32::<LE>().map_err(trunc)? as usize;
        let mut meta = vec![0u8; meta_len];
        c.read_exact(&mut meta).map_err(trunc)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = c.read_u32::<LE>().map_err(trunc)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = c.read_u32::<LE>().map_err(trunc)? as usize;
            let mut name = vec![0u8; len];
            c.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
            let rank = c.read_u32::<LE>().map_err(trunc)? as usize;
            let shape = (0..rank)
                .map(|_| c.read_u64::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(trunc)?;
            let n: usize = shape.iter().product();
            if n > body.len() / 8 {
                return Err(Error::Checkpoint(format!("tensor {name} claims {n} values")));
            }
            let mut data = vec![0.0f64; n];
            c.read_f64_into::<LE>(&mut data).map_err(trunc)?;
            tensors.push((name, shape, data.into_iter().map(|v| v as Float).collect()));
        }
        Ok(Self {
            arch_hash,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub backbone: BackboneConfig,
    pub frontend: FrontendConfig,
    /// Class names in head-row order.
    pub class_names: Vec<String>,
    pub standardizer: Option<Standardizer>,
    pub method: String,
    pub tasks_learned: usize,
}

/// A trained classifier with everything needed to label raw audio.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub space: FeatureSpace,
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.backbone.named_state();
        tensors.push(("head.weight".into(), self.head.weight.shape().to_vec(), self.head.weight.data().to_vec()));
        tensors.push(("head.bias".into(), self.head.bias.shape().to_vec(), self.head.bias.data().to_vec()));
        tensors.extend(self.space.named_state());
        Checkpoint {
            arch_hash: self.meta.backbone.hash(),
            metadata: serde_json::to_value(&self.meta).expect("metadata serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BundleMeta = serde_json::from_value(ck.metadata.clone())?;
        if meta.backbone.hash() != ck.arch_hash {
            return Err(Error::Checkpoint("stored architecture does not match its hash".into()));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut backbone = Backbone::new(&meta.backbone, &mut rng)?;
        backbone.load_named_state(&|name| ck.get(name))?;
        let fetch = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
                .and_then(|(s, d)| Tensor::new(s, d))
        };
        let head = ClassifierHead::from_parts(fetch("head.weight")?, fetch("head.bias")?)?;
        if head.num_classes() != meta.class_names.len() {
            return Err(Error::Checkpoint(format!(
                "head has {} rows for {} class names",
                head.num_classes(),
                meta.class_names.len()
            )));
        }
        let space = FeatureSpace::from_named_state(&ck.tensors)?;
        Ok(Self {
            meta,
            backbone,
            head,
            space,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, None)?)
    }

    /// Logits for already extracted, unstandardized MFCC maps.
    pub fn logits(&self, maps: &[FeatureMap]) -> Result<Tensor> {
        let maps: Vec<FeatureMap> = match &self.meta.standardizer {
            Some(s) => maps.iter().map(|m| s.apply(m)).collect(),
            None => maps.to_vec(),
        };
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        self.head.logits(&self.backbone.features(&batch_tensor(&refs)?)?)
    }

    pub fn predict_maps(&self, maps: &[FeatureMap]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(maps)?))
    }

    /// Normalises, encodes and classifies one clip; returns the head row.
    pub fn predict_clip(&self, clip: &AudioClip) -> Result<usize> {
        let fe = &self.meta.frontend;
        let clip = normalize_clip(clip, fe.sample_rate, fe.target_seconds)?;
        let map = MfccExtractor::new(fe)?.extract(&clip)?;
        Ok(self.predict_maps(&[map])?[0])
    }
}
