//! Binary checkpoints holding parameters, optimizer state and the config.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PICR" | version u32 | step u64 | config_len u32 | config text
//! n_params u32 | n_params × (name_len u16 | name | dtype u8 | trainable u8
//!                            | rank u8 | rank × dim u32 | data f32...)
//! has_adam u8 | [adam_step u64 | n_params × (m f32... | v f32...)]
//! ```

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PICR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    fn floats(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(f32::DTYPE_CODE);
            out.push(p.trainable as u8);
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, &p.value);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for (m, v) in a.m.iter().zip(&a.v) {
                    put_floats(&mut out, m);
                    put_floats(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config = Config::from_text(&r.str(len)?)?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = r.str(len)?;
            let dtype = r.u8()?;
            if dtype != f32::DTYPE_CODE {
                return Err(Error::Format(format!("parameter `{name}` has dtype code {dtype}")));
            }
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad trainable flag {b} for `{name}`"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = r.floats(&shape)?;
            params.add(name, value, trainable).map_err(|e| Error::Format(e.to_string()))?;
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let astep = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (_, p) in params.iter() {
                    m.push(r.floats(p.value.shape())?);
                    v.push(r.floats(p.value.shape())?);
                }
                Some(Adam { step: astep, m, v })
            }
            b => return Err(Error::Format(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that this checkpoint fits a model built from `config` with
    /// parameters `store`. Nothing is loaded unless everything matches.
    pub fn check_compatible(&self, config: &Config, store: &ParamStore<f32>) -> Result<()> {
        if self.config.model != config.model {
            let ours = config.to_text();
            let theirs = self.config.to_text();
            let diff: Vec<String> = theirs
                .lines()
                .zip(ours.lines())
                .filter(|(a, b)| a != b && !a.starts_with("seed") && !a.starts_with("optim."))
                .map(|(a, b)| format!("checkpoint `{a}` vs requested `{b}`"))
                .collect();
            return Err(Error::Mismatch(format!("model configuration differs: {}", diff.join("; "))));
        }
        if self.params.len() != store.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((_, a), (_, b)) in self.params.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces `store` with the checkpoint parameters after
    /// [`Checkpoint::check_compatible`] succeeds.
    pub fn restore(&self, config: &Config, store: &mut ParamStore<f32>) -> Result<()> {
        self.check_compatible(config, store)?;
        *store = self.params.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 0.3), true).unwrap();
        params.add("b", Tensor::from_fn([4], |i| -(i as f32)), false).unwrap();
        let mut adam = Adam::new(&params);
        adam.step = 5;
        adam.m[0] = Tensor::full([2, 3], 0.125);
        Checkpoint {
            config: Config::toy(),
            step: 5,
            params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam, sample().adam);
        assert_eq!(back.config, Config::toy());
        assert!(!back.params.get(back.params.id("b").unwrap()).trainable);
    }

    #[test]
    fn corrupt_inputs_are_refused() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn mismatch_is_refused_without_loading() {
        let ck = sample();
        let mut store = ck.params.clone();
        *store.value_mut(store.id("b").unwrap()) = Tensor::zeros([4]);
        let mut other = Config::toy();
        other.model.cmpi_window = 3;
        let err = ck.restore(&other, &mut store).unwrap_err();
        assert!(matches!(&err, Error::Mismatch(m) if m.contains("cmpi.window")), "{err}");
        assert_eq!(store.get(store.id("b").unwrap()).value.data(), &[0.0; 4]);

        let mut small = ParamStore::new();
        small.add("a.weight", Tensor::zeros([3, 2]), true).unwrap();
        small.add("b", Tensor::zeros([4]), true).unwrap();
        assert!(matches!(ck.restore(&Config::toy(), &mut small), Err(Error::Mismatch(_))));
        ck.restore(&Config::toy(), &mut store).unwrap();
        assert_eq!(store.get(store.id("b").unwrap()).value.data(), &[0.0, -1.0, -2.0, -3.0]);
    }
}
