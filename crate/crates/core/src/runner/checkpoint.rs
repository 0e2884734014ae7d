//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "WEDL"            magic
//! u8                version (1)
//! u32 len, bytes    run configuration as compact JSON
//! u32, u32          input dimension, training class count
//! u32 n             number of parameter blocks, then n blocks of
//!   u32 len, bytes    parameter name
//!   u32, u32          rows, cols
//!   f64 × rows·cols   values, row-major
//! u8                running means present (0/1); if 1:
//!   u32 M, f64 s, u64 k, f64 × M
//! u8                compression regressor present (0/1); if 1:
//!   two parameter blocks (weight, bias)
//! ```
//!
//! Model parameters appear in [`EnsembleModel::params`] order: heads, member
//! parameters, coefficients.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::compressor::CompressionRegressor;
use crate::ensemble::{EmaState, EnsembleModel};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Param};

pub const MAGIC: &[u8; 4] = b"WEDL";
pub const VERSION: u8 = 1;

/// Everything needed to rebuild a trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub input_dim: usize,
    pub classes: usize,
    pub model: EnsembleModel,
    pub regressor: Option<CompressionRegressor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_bytes(&mut out, json.as_bytes());
        put_u32(&mut out, self.input_dim);
        put_u32(&mut out, self.classes);
        let params = self.model.params();
        put_u32(&mut out, params.len());
        for p in params {
            put_param(&mut out, p);
        }
        match &self.model.ema {
            Some(ema) => {
                out.push(1);
                put_u32(&mut out, ema.means.len());
                out.extend_from_slice(&ema.smoothing.to_le_bytes());
                out.extend_from_slice(&ema.iteration.to_le_bytes());
                for m in &ema.means {
                    out.extend_from_slice(&m.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        match &self.regressor {
            Some(reg) => {
                out.push(1);
                put_param(&mut out, &reg.weight);
                put_param(&mut out, &reg.bias);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = r.u32()?;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| Error::Checkpoint("configuration block is not UTF-8".into()))?;
        let config = RunConfig::from_json(json)?;
        let input_dim = r.u32()?;
        let classes = r.u32()?;

        // Shapes come from the configuration; values are overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = EnsembleModel::new(config.mode, config.model.clone(), input_dim, classes, &mut rng)?;
        let count = r.u32()?;
        {
            let mut params = model.params_mut();
            if count != params.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} parameter blocks, found {count}",
                    params.len()
                )));
            }
            for p in params.iter_mut() {
                r.param_into(p)?;
            }
        }
        if r.u8()? == 1 {
            let m = r.u32()?;
            let smoothing = r.f64()?;
            let iteration = r.u64()?;
            let means = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if m != model.member_count() {
                return Err(Error::Checkpoint(format!(
                    "running means for {m} losses, model has {}",
                    model.member_count()
                )));
            }
            model.ema = Some(EmaState {
                means,
                smoothing,
                iteration,
            });
        }
        let regressor = if r.u8()? == 1 {
            let weight = r.param()?;
            let bias = r.param()?;
            if bias.value.rows() != 1 || bias.value.cols() != weight.value.cols() {
                return Err(Error::Checkpoint("regressor bias shape does not match weight".into()));
            }
            Some(CompressionRegressor { weight, bias })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            input_dim,
            classes,
            model,
            regressor,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

fn put_param(out: &mut Vec<u8>, p: &Param) {
    put_bytes(out, p.name.as_bytes());
    put_u32(out, p.value.rows());
    put_u32(out, p.value.cols());
    for v in p.value.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn param(&mut self) -> Result<Param> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is too large")))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint(format!("parameter {name} is truncated")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Param::new(name, Matrix::from_vec(rows, cols, data)?))
    }

    fn param_into(&mut self, target: &mut Param) -> Result<()> {
        let p = self.param()?;
        if p.name != target.name || p.value.shape() != target.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter block {} {:?} does not match expected {} {:?}",
                p.name,
                p.value.shape(),
                target.name,
                target.value.shape()
            )));
        }
        target.value = p.value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleMode;
    use crate::featstore::{SynthSpec, Warp};
    use crate::runner::DatasetSource;

    fn sample(mode: EnsembleMode) -> Checkpoint {
        let mut config = RunConfig::new(
            DatasetSource::Synthetic(SynthSpec { classes: 6, per_class: 4, dim: 5, sep: 2.0, warp: Warp::None }),
            mode,
            3,
        );
        config.model.embed_dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = EnsembleModel::new(mode, config.model.clone(), 5, 3, &mut rng).unwrap();
        model.ema = Some(EmaState::init(&vec![0.5; model.member_count()], 2.0));
        let regressor = (mode == EnsembleMode::Wedl).then(|| CompressionRegressor::new(16, 4, &mut rng));
        Checkpoint {
            config,
            input_dim: 5,
            classes: 3,
            model,
            regressor,
        }
    }

    #[test]
    fn round_trip_every_mode() {
        for mode in ["WEL", "WEL-equal", "WEDL", "baseline:proxy_nca", "baseline:triplet"] {
            let ck = sample(mode.parse().unwrap());
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], b"WEDL");
            assert_eq!(bytes[4], VERSION);
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck, "{mode}");
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(EnsembleMode::Wedl).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
