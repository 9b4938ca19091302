//! Binary checkpoint of an online model and its EMA target.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMCL" | u32 version (=1) | u32 array count
//! per array: u16 name length | UTF-8 name | u8 rank | rank × u64 dims | f64 data
//! ```
//!
//! Arrays are `extractor.layer{i}.weight`, `extractor.layer{i}.bias`,
//! `domain{j}.W`, `global.W` and the same extractor/global names under the
//! `ema.` prefix. Three rank-0 arrays carry the remaining scalars:
//! `extractor.input_dim`, `extractor.final_relu` (0 or 1) and `ema.alpha`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{AffineLayer, CmclModel, EmaState, FeatureExtractor, SoftmaxClassifier};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMCL";

fn extractor_arrays(prefix: &str, ex: &FeatureExtractor, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (i, l) in ex.layers().iter().enumerate() {
        out.push((format!("{prefix}extractor.layer{i}.weight"), l.weight.shape().to_vec(), l.weight.data().to_vec()));
        out.push((format!("{prefix}extractor.layer{i}.bias"), l.bias.shape().to_vec(), l.bias.data().to_vec()));
    }
}

/// Serializes the model and EMA state.
pub fn checkpoint_write(model: &CmclModel, ema: &EmaState) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    arrays.push(("extractor.input_dim".to_string(), vec![], vec![model.input_dim() as f64]));
    arrays.push((
        "extractor.final_relu".to_string(),
        vec![],
        vec![if model.extractor.final_relu() { 1.0 } else { 0.0 }],
    ));
    extractor_arrays("", &model.extractor, &mut arrays);
    for (j, c) in model.domain_classifiers.iter().enumerate() {
        arrays.push((format!("domain{j}.W"), c.w.shape().to_vec(), c.w.data().to_vec()));
    }
    let g = &model.global_classifier.w;
    arrays.push(("global.W".to_string(), g.shape().to_vec(), g.data().to_vec()));
    arrays.push(("ema.alpha".to_string(), vec![], vec![ema.alpha()]));
    extractor_arrays("ema.", &ema.target_extractor, &mut arrays);
    let tg = &ema.target_global.w;
    arrays.push(("ema.global.W".to_string(), tg.shape().to_vec(), tg.data().to_vec()));

    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(arrays.len() as u32);
    for (name, dims, data) in &arrays {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("array name too long: {name}")))?;
        w.u16(len);
        w.bytes(name.as_bytes());
        w.u8(dims.len() as u8);
        for &d in dims {
            w.u64(d as u64);
        }
        w.f64s(data);
    }
    Ok(w.buf)
}

pub fn checkpoint_save(model: &CmclModel, ema: &EmaState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_write(model, ema)?)?;
    Ok(())
}

struct RawArray {
    offset: u64,
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Parses a checkpoint. Nothing is returned unless the whole buffer is valid.
pub fn checkpoint_read(bytes: &[u8]) -> Result<(CmclModel, EmaState)> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("array count")?;
    let mut arrays: BTreeMap<String, RawArray> = BTreeMap::new();
    for _ in 0..count {
        let offset = r.offset();
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "array name")?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.len("dimension")?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail(format!("dimensions of {name} overflow")))?;
        let data = r.f64s(n, &name)?;
        if arrays.insert(name.clone(), RawArray { offset, dims, data }).is_some() {
            return Err(Error::Format {
                offset,
                reason: format!("duplicate array {name}"),
            });
        }
    }
    r.finish()?;
    let end = r.offset();
    Assembler { arrays, end }.build()
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<(CmclModel, EmaState)> {
    checkpoint_read(&std::fs::read(path)?)
}

struct Assembler {
    arrays: BTreeMap<String, RawArray>,
    end: u64,
}

impl Assembler {
    fn missing(&self, name: &str) -> Error {
        Error::Format {
            offset: self.end,
            reason: format!("missing array {name}"),
        }
    }

    fn take(&mut self, name: &str) -> Result<RawArray> {
        self.arrays.remove(name).ok_or_else(|| self.missing(name))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let a = self.take(name)?;
        if !a.dims.is_empty() {
            return Err(Error::Format {
                offset: a.offset,
                reason: format!("{name} must be rank 0"),
            });
        }
        Ok(a.data[0])
    }

    fn tensor(&mut self, name: &str, rank: usize) -> Result<Tensor> {
        let a = self.take(name)?;
        if a.dims.len() != rank {
            return Err(Error::Format {
                offset: a.offset,
                reason: format!("{name} has rank {}, expected {rank}", a.dims.len()),
            });
        }
        Tensor::new(a.dims, a.data).map_err(|e| Error::Format {
            offset: a.offset,
            reason: format!("{name}: {e}"),
        })
    }

    fn extractor(&mut self, prefix: &str, input_dim: usize, final_relu: bool) -> Result<FeatureExtractor> {
        let mut layers = Vec::new();
        while self.arrays.contains_key(&format!("{prefix}extractor.layer{}.weight", layers.len())) {
            let i = layers.len();
            let weight = self.tensor(&format!("{prefix}extractor.layer{i}.weight"), 2)?;
            let bias = self.tensor(&format!("{prefix}extractor.layer{i}.bias"), 1)?;
            layers.push(AffineLayer { weight, bias });
        }
        FeatureExtractor::new(input_dim, layers, final_relu).map_err(|e| Error::Format {
            offset: self.end,
            reason: e.to_string(),
        })
    }

    fn build(mut self) -> Result<(CmclModel, EmaState)> {
        let input_dim = self.scalar("extractor.input_dim")?;
        if !(input_dim >= 1.0 && input_dim.fract() == 0.0) {
            return Err(Error::Format {
                offset: self.end,
                reason: format!("invalid input_dim {input_dim}"),
            });
        }
        let input_dim = input_dim as usize;
        let final_relu = self.scalar("extractor.final_relu")? != 0.0;
        let extractor = self.extractor("", input_dim, final_relu)?;
        let mut domain = Vec::new();
        while self.arrays.contains_key(&format!("domain{}.W", domain.len())) {
            let w = self.tensor(&format!("domain{}.W", domain.len()), 2)?;
            domain.push(SoftmaxClassifier { w });
        }
        let global = SoftmaxClassifier {
            w: self.tensor("global.W", 2)?,
        };
        let alpha = self.scalar("ema.alpha")?;
        let target_extractor = self.extractor("ema.", input_dim, final_relu)?;
        let target_global = SoftmaxClassifier {
            w: self.tensor("ema.global.W", 2)?,
        };
        if let Some((name, a)) = self.arrays.iter().next() {
            return Err(Error::Format {
                offset: a.offset,
                reason: format!("unexpected array {name}"),
            });
        }
        let wrap = |e: Error| Error::Format {
            offset: self.end,
            reason: e.to_string(),
        };
        let model = CmclModel::new(extractor, domain, global).map_err(wrap)?;
        let ema = EmaState::from_parts(target_extractor, target_global, alpha).map_err(wrap)?;
        let shapes_match = ema
            .target_params()
            .zip(model.extractor.params().chain([&model.global_classifier.w]))
            .all(|(a, b)| a.shape() == b.shape())
            && ema.target_params().count() == model.extractor.params().count() + 1;
        if !shapes_match {
            return Err(Error::Format {
                offset: self.end,
                reason: "EMA target shapes do not mirror the online model".into(),
            });
        }
        Ok((model, ema))
    }
}
