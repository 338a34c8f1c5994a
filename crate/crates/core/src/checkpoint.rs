//! Versioned archive of named parameter arrays plus the config that built
//! them.
//!
//! ```text
//! magic    8 bytes  "FGHCKPT1"
//! version  u32 LE   1
//! config   u64 LE length, then UTF-8 config text
//! count    u64 LE
//! each array:
//!   name   u32 LE length, then UTF-8
//!   ndim   u32 LE, then ndim × u64 LE dims
//!   values product(dims) × f64 LE
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameters;

pub const CKPT_MAGIC: &[u8; 8] = b"FGHCKPT1";
pub const CKPT_VERSION: u32 = 1;

/// Serialize `model` with `config`; the stored class count is the model's.
pub fn to_bytes(model: &Model, config: &Config) -> Vec<u8> {
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    cfg.num_classes = model.config.num_classes;
    let text = cfg.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut arrays = Vec::new();
    model.visit("", &mut |name, p| arrays.push((name.to_string(), p.shape.clone(), p.value.clone())));
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, shape, values) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { self.u32()? as u64 };
        usize::try_from(n).map_err(|_| Error::Format("length overflows".into()))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Config)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = Config::parse(&c.string(true)?)?;
    let count = c.len(true)?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name = c.string(false)?;
        let ndim = c.len(false)?;
        let shape = (0..ndim).map(|_| c.len(true)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if arrays.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Format(format!("array `{name}` stored twice")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut model = Model::zeros(config.model.clone())?;
    let mut problem = None;
    model.visit_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        match arrays.remove(name) {
            Some((shape, values)) if shape == p.shape => p.value = values,
            Some((shape, _)) => {
                problem = Some(format!("array `{name}` has shape {shape:?}, model expects {:?}", p.shape))
            }
            None => problem = Some(format!("array `{name}` missing")),
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Format(msg));
    }
    if let Some(name) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array `{name}`")));
    }
    Ok((model, config))
}

pub fn save(path: &Path, model: &Model, config: &Config) -> Result<()> {
    std::fs::write(path, to_bytes(model, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Config)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::geometry::AnchorSpec;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Model, Config) {
        let model_cfg = ModelConfig {
            backbone: BackboneConfig::toy(),
            anchors: AnchorSpec {
                sizes: vec![8.0, 12.0, 24.0],
                ..AnchorSpec::default()
            },
            num_classes: 3,
            fusion_dim: 6,
            code_bits: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(model_cfg.clone(), &mut rng).unwrap();
        let cfg = Config {
            model: model_cfg,
            ..Config::default()
        };
        (model, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, cfg) = toy();
        let bytes = to_bytes(&model, &cfg);
        let (back, back_cfg) = from_bytes(&bytes).unwrap();
        assert_eq!(back.backbone, model.backbone);
        assert_eq!(back.comparer, model.comparer);
        assert_eq!(back.ranker, model.ranker);
        assert_eq!(back_cfg.num_classes, 3);
        assert_eq!(to_bytes(&back, &back_cfg), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (model, cfg) = toy();
        let bytes = to_bytes(&model, &cfg);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (model, cfg) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &cfg).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back.ranker, model.ranker);
        assert!(load(&dir.path().join("missing.ckpt")).unwrap_err().to_string().contains("missing.ckpt"));
    }
}
