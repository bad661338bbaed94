//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GFMRCKPT" | version u32
//! config text      (u64 length + UTF-8)
//! step u64 | images_seen u64 | r1_total f64
//! group count u32, then per group:
//!   group name (u32 length + UTF-8) | tensor count u32, then per tensor:
//!     name (u32 length + UTF-8) | dtype u8 | rank u32 | dims u64… | data
//! ```
//!
//! Groups are `g`, `d`, `g_ema`, `g_adam_m`, `g_adam_v`, `d_adam_m`, `d_adam_v`.
//! Tensors are stored in parameter order with row-major element data.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};
use crate::training::TrainState;

const MAGIC: &[u8; 8] = b"GFMRCKPT";
const VERSION: u32 = 1;
const GROUPS: [&str; 7] = ["g", "d", "g_ema", "g_adam_m", "g_adam_v", "d_adam_m", "d_adam_v"];

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_store<T: Real>(out: &mut Vec<u8>, name: &str, store: &ParamStore<T>) {
    put_str(out, name);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (n, t) in store.iter() {
        put_str(out, n);
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

pub fn to_bytes<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = state.config().to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.images_seen.to_le_bytes());
    out.extend_from_slice(&state.r1_total.to_le_bytes());
    let m = &state.model;
    let stores = [
        &m.g_params,
        &m.d_params,
        &m.g_ema,
        &state.g_moments.m,
        &state.g_moments.v,
        &state.d_moments.m,
        &state.d_moments.v,
    ];
    out.extend_from_slice(&(GROUPS.len() as u32).to_le_bytes());
    for (name, store) in GROUPS.iter().zip(stores) {
        put_store(&mut out, name, store);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Overwrites every tensor of `store` from the next group, requiring the same
/// names and shapes in the same order.
fn read_store<T: Real>(r: &mut Reader<'_>, expected: &str, store: &mut ParamStore<T>) -> Result<()> {
    let group = r.string(false)?;
    if group != expected {
        return Err(Error::Checkpoint(format!("expected group `{expected}`, found `{group}`")));
    }
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "group `{group}` has {count} tensors, the model has {}",
            store.len()
        )));
    }
    for i in 0..count {
        let name = r.string(false)?;
        if name != store.names()[i] {
            return Err(Error::Checkpoint(format!("expected `{}`, found `{name}`", store.names()[i])));
        }
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("`{name}` stored as {dtype:?}, loading as {:?}", T::DTYPE)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len(true)?);
        }
        if shape != store.values()[i].shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, the model expects {:?}",
                store.values()[i].shape()
            )));
        }
        let n: usize = shape.iter().product();
        let size = dtype.size();
        let raw = r.take(n * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        store.values_mut()[i] = Tensor::new(shape, data)?;
    }
    Ok(())
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = Config::from_text(&r.string(true)?)?;
    let mut state = TrainState::<T>::new(&config)?;
    state.step = r.u64()?;
    state.images_seen = r.u64()?;
    state.r1_total = f64::from_bits(r.u64()?);
    let groups = r.u32()? as usize;
    if groups != GROUPS.len() {
        return Err(Error::Checkpoint(format!("expected {} groups, found {groups}", GROUPS.len())));
    }
    let m = &mut state.model;
    read_store(&mut r, GROUPS[0], &mut m.g_params)?;
    read_store(&mut r, GROUPS[1], &mut m.d_params)?;
    read_store(&mut r, GROUPS[2], &mut m.g_ema)?;
    read_store(&mut r, GROUPS[3], &mut state.g_moments.m)?;
    read_store(&mut r, GROUPS[4], &mut state.g_moments.v)?;
    read_store(&mut r, GROUPS[5], &mut state.d_moments.m)?;
    read_store(&mut r, GROUPS[6], &mut state.d_moments.v)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}

pub fn save<T: Real>(path: &Path, state: &TrainState<T>) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{DatasetHandle, SyntheticSpec};
    use crate::training::Trainer;

    fn small(variant: Variant) -> Config {
        let mut c = Config::default();
        c.variant = variant;
        c.resolution = 16;
        c.channels = vec![(4, 4), (8, 4), (16, 4)];
        c.components = 2;
        c.latent_size = 4;
        c.dlatent_size = 4;
        c.mapping_layers = 1;
        c.batch = 2;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let c = small(v);
            let ds = DatasetHandle::synthetic(SyntheticSpec::new(16, 0), 16, 0).unwrap();
            let mut t = Trainer::<f32>::new(&c, &ds).unwrap();
            t.step().unwrap();
            t.step().unwrap();
            let state = t.state;
            let bytes = to_bytes(&state);
            let back = from_bytes::<f32>(&bytes).unwrap();
            assert_eq!(to_bytes(&back), bytes);
            assert_eq!(back.step, 2);
            assert_eq!(back.images_seen, 4);
            assert_eq!(back.config(), state.config());
            let z = state.model.sample_latents(2, 9);
            assert_eq!(state.model.generate(&z, 3, true).unwrap(), back.model.generate(&z, 3, true).unwrap());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let state = TrainState::<f32>::new(&small(Variant::Duplex)).unwrap();
        let bytes = to_bytes(&state);
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes::<f32>(b"nonsense").is_err());
        assert!(from_bytes::<f64>(&bytes).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut wrong = bytes;
        wrong[8] = 9;
        assert!(from_bytes::<f32>(&wrong).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load::<f32>(Path::new("/nonexistent/ckpt-0.bin")).unwrap_err();
        assert!(err.to_string().contains("ckpt-0.bin"));
    }
}
