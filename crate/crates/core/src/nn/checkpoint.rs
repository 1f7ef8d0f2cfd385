use std::path::Path;

use super::{AdamState, ParamStore, Tensor};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"STRL1";

const STEP_ENTRY: &str = "adam.step";

/// Named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Every parameter and buffer in the store, optionally followed by the
    /// optimizer moments as `<name>.m` / `<name>.v` and the step count.
    pub fn from_store(store: &ParamStore, adam: Option<&AdamState>) -> Self {
        let mut entries: Vec<(String, Tensor)> =
            store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if let Some(state) = adam {
            for (p, m) in store.params().iter().zip(&state.m) {
                entries.push((format!("{}.m", p.name), m.clone()));
            }
            for (p, v) in store.params().iter().zip(&state.v) {
                entries.push((format!("{}.v", p.name), v.clone()));
            }
            entries.push((STEP_ENTRY.to_string(), Tensor::filled(&[1], state.step as f64)));
        }
        Self { entries }
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take_into(&self, name: &str, target: &mut Tensor) -> Result<()> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry '{name}'")))?;
        if t.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "checkpoint entry '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(t.data());
        Ok(())
    }

    /// Copies values into a store built with the same architecture.
    pub fn load_into(&self, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
        for p in store.params_mut() {
            self.take_into(&p.name, &mut p.value)?;
        }
        if let Some(state) = adam {
            for (p, (m, v)) in store.params().iter().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
                self.take_into(&format!("{}.m", p.name), m)?;
                self.take_into(&format!("{}.v", p.name), v)?;
            }
            let step = self
                .get(STEP_ENTRY)
                .and_then(|t| t.data().first().copied())
                .ok_or_else(|| Error::Data("checkpoint has no optimizer step".into()))?;
            state.step = step as u64;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(self.entries.len());
        for (name, t) in &self.entries {
            w.u32(name.len()).bytes(name.as_bytes()).u32(t.rank());
            for &e in t.shape() {
                w.u32(e);
            }
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, CHECKPOINT_MAGIC, "checkpoint")?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::Format {
                    what: "checkpoint",
                    detail: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(Error::Format {
                what: "checkpoint",
                detail: "extent overflow".into(),
            })?;
            entries.push((name, Tensor::new(shape, r.f64s(n)?)?));
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_file(path, &checkpoint.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("conv.weight", Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        s.add_buffer("bn.running_var", Tensor::filled(&[2], 0.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step = 7;
        adam.m[0].fill(0.25);
        let ck = Checkpoint::from_store(&s, Some(&adam));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        fresh.value_mut(fresh.id("conv.weight").unwrap()).fill(0.0);
        let mut fresh_adam = AdamState::new(&fresh, AdamConfig::default());
        back.load_into(&mut fresh, Some(&mut fresh_adam)).unwrap();
        assert_eq!(fresh.params()[0].value, s.params()[0].value);
        assert_eq!(fresh_adam.step, 7);
        assert_eq!(fresh_adam.m[0].data()[3], 0.25);
    }

    #[test]
    fn layout_and_errors() {
        let ck = Checkpoint::from_store(&store(), None);
        let bytes = ck.to_bytes();
        assert!(bytes.starts_with(b"STRL1"));
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX1").is_err());
        let mut other = ParamStore::new();
        other.add("conv.weight", Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(ck.load_into(&mut other, None), Err(Error::Shape(_))));
    }
}
