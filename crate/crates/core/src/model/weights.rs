use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DType, Scalar, Tensor};

use super::plan::{param_specs, plan};
use super::{ModelConfig, ModelError};

pub const WEIGHT_MAGIC: &[u8; 8] = b"SPKWGT\0\0";
pub const WEIGHT_VERSION: u32 = 1;

/// Initial bias of the classification logits, a prior of about 0.1.
const CLS_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters plus the configuration that implies them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T: Scalar> {
    pub config: ModelConfig,
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> WeightStore<T> {
    /// Kaiming-uniform conv/linear weights, zero biases, identity batch norm.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in: BTreeMap<String, usize> = plan(config).iter().map(|l| (l.name.clone(), l.fan_in())).collect();
        let mut params = BTreeMap::new();
        for spec in param_specs(config) {
            let (layer, field) = spec.name.rsplit_once('.').expect("dotted name");
            let tensor = match field {
                "weight" => {
                    let bound = (6.0 / fan_in[layer] as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                "bias" if layer == "head.cls.conv5" => Tensor::full(&spec.shape, T::of(CLS_PRIOR_BIAS)),
                "gamma" | "running_var" => Tensor::ones(&spec.shape),
                _ => Tensor::zeros(&spec.shape),
            };
            params.insert(
                spec.name.clone(),
                Parameter {
                    name: spec.name,
                    tensor,
                    trainable: spec.trainable,
                },
            );
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), ModelError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(ModelError::Format(format!(
                "{name}: shape {:?} does not match {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Layout: magic, version, config JSON, then `(name, dtype, trainable,
    /// dims, raw data)` records, all little-endian.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in self.params.values() {
            w.write_all(&(p.name.len() as u16).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[T::DTYPE.code(), p.trainable as u8, p.tensor.shape().len() as u8])?;
            for &d in p.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.tensor.data() {
                match T::DTYPE {
                    DType::F32 => w.write_all(&(v.f64() as f32).to_le_bytes())?,
                    DType::F64 => w.write_all(&v.f64().to_le_bytes())?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a weight file completely before returning. When `expected` is
    /// given, the stored configuration must imply the same parameter set.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        if r.take(8)? != WEIGHT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(cfg_len)?).map_err(|e| ModelError::Format(format!("config blob: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| ModelError::Format(e.to_string()))?;
            let head = r.take(3)?;
            let dtype = DType::from_code(head[0]).ok_or_else(|| ModelError::Format(format!("{name}: dtype {}", head[0])))?;
            let trainable = head[1] != 0;
            let shape = (0..head[2]).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<T> = match dtype {
                DType::F32 => r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                    .collect(),
                DType::F64 => r
                    .take(8 * n)?
                    .chunks_exact(8)
                    .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                    .collect(),
            };
            let tensor = Tensor::new(&shape, data)?;
            params.insert(name.clone(), Parameter { name, tensor, trainable });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let implied = expected.unwrap_or(&config);
        check_name_set(implied, &params)?;
        if let Some(exp) = expected {
            if param_specs(exp) != param_specs(&config) {
                return Err(ModelError::Format("stored config implies different parameter shapes".into()));
            }
        }
        Ok(Self { config, params })
    }
}

fn check_name_set<T: Scalar>(config: &ModelConfig, params: &BTreeMap<String, Parameter<T>>) -> Result<(), ModelError> {
    let specs = param_specs(config);
    let want: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    let have: BTreeSet<&str> = params.keys().map(String::as_str).collect();
    let missing: Vec<String> = want.difference(&have).map(|s| s.to_string()).collect();
    let extra: Vec<String> = have.difference(&want).map(|s| s.to_string()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ModelError::NameMismatch { missing, extra });
    }
    for s in &specs {
        if params[&s.name].tensor.shape() != s.shape.as_slice() {
            return Err(ModelError::Format(format!(
                "{}: stored shape {:?}, expected {:?}",
                s.name,
                params[&s.name].tensor.shape(),
                s.shape
            )));
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Format(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for seed in [1, 2] {
            let w = WeightStore::<f32>::init(&ModelConfig::toy(), seed).unwrap();
            let p = dir.path().join("w.bin");
            w.save(&p).unwrap();
            assert_eq!(WeightStore::<f32>::load(&p, Some(&ModelConfig::toy())).unwrap(), w);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        WeightStore::<f32>::init(&ModelConfig::toy(), 0).unwrap().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(WeightStore::<f32>::load(&p, None), Err(ModelError::Format(_))));
        }
    }

    #[test]
    fn tiny_into_base_lists_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        WeightStore::<f32>::init(&ModelConfig::tiny(), 0).unwrap().save(&p).unwrap();
        match WeightStore::<f32>::load(&p, Some(&ModelConfig::base())) {
            Err(ModelError::NameMismatch { missing, extra }) => {
                assert!(missing.iter().any(|n| n.starts_with("tf0.block6")));
                assert!(extra.is_empty());
            }
            other => panic!("expected name mismatch, got {other:?}"),
        }
    }

    #[test]
    fn init_matches_param_specs() {
        let cfg = ModelConfig::toy();
        let w = WeightStore::<f64>::init(&cfg, 0).unwrap();
        let names: Vec<&str> = w.names().collect();
        let specs = param_specs(&cfg);
        assert_eq!(names.len(), specs.len());
        assert_eq!(w.trainable_count(), super::super::plan::parameter_count(&cfg));
    }
}
