//! Checkpoint file: magic, little-endian u64 header length, JSON header with
//! a tensor manifest, then one blob of little-endian f32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CrwkvModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{HasParams, Scalar};

pub const MAGIC: &[u8; 8] = b"CRWKVCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    iteration: u64,
    #[serde(default)]
    run_hash: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub iteration: u64,
    /// Hash of the full training configuration, checked on resume.
    pub run_hash: Option<String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &CrwkvModel<T>, seed: u64, iteration: u64) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, p| {
            tensors.push((
                name.to_string(),
                p.shape.clone(),
                p.value.iter().map(|v| v.f64() as f32).collect(),
            ))
        });
        Self {
            config: model.config().clone(),
            seed,
            iteration,
            run_hash: None,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Rebuilds the model and copies every parameter array by name.
    pub fn to_model<T: Scalar>(&self) -> Result<CrwkvModel<T>> {
        let mut model = CrwkvModel::<T>::build(&self.config, self.seed)?;
        let mut missing = None;
        model.visit_mut("", &mut |name, p| {
            if missing.is_some() {
                return;
            }
            match self.tensor(name) {
                Some((shape, data)) if shape == p.shape.as_slice() => {
                    p.value = data.iter().map(|&v| T::of(v as f64)).collect();
                }
                Some((shape, _)) => {
                    missing = Some(format!("{name}: stored shape {shape:?}, model expects {:?}", p.shape))
                }
                None => missing = Some(format!("{name}: missing from checkpoint")),
            }
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok(model),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len() * 4;
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.seed,
            iteration: self.iteration,
            run_hash: self.run_hash.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(16 + json.len() + offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(&e.to_string()))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        header.config.validate()?;
        let blob = &bytes[blob_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > blob.len() {
                return Err(bad(&format!("tensor {} runs past the end of the file", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            iteration: header.iteration,
            run_hash: header.run_hash,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::FeatureMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_forward_is_bit_identical() {
        let cfg = ModelConfig::toy(8, [1, 1, 1, 1]);
        let model = CrwkvModel::<f32>::build(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::from_model(&model, 11, 5);
        ck.run_hash = Some("abc".into());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model::<f32>().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = FeatureMap::randn([1, 3, 16, 16], &mut rng);
        let (a, b) = (model.forward(&x).unwrap(), restored.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = ModelConfig::toy(8, [1, 1, 1, 1]);
        let model = CrwkvModel::<f32>::build(&cfg, 1).unwrap();
        let mut ck = Checkpoint::from_model(&model, 1, 0);
        ck.config.base_channels = 4;
        assert!(matches!(ck.to_model::<f32>(), Err(Error::Checkpoint(_))));
    }
}
