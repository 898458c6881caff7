//! Saving and restoring trainer state.
//!
//! A checkpoint directory holds a `manifest.json` plus one tensor file per
//! parameter under `params/`, and, when optimizer state is included, matching
//! first and second moments under `adam_m/` and `adam_v/`. Loading a
//! checkpoint and continuing training produces the same bytes as never having
//! stopped, which is what the persistence checks assert.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tft::{self, path_str};

pub const CHECKPOINT_SCHEMA: &str = "checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    dtype: String,
    step: u64,
    epoch: usize,
    params: Vec<String>,
    has_moments: bool,
}

/// Everything training needs to continue: parameters, Adam moments, and the
/// step and epoch counters that drive bias correction and the lr schedule.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub step: u64,
    pub epoch: usize,
    pub params: ParamStore<T>,
    pub moments: Option<(ParamStore<T>, ParamStore<T>)>,
}

fn write_store<T: Scalar>(dir: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, tensor) in store.iter() {
        tft::write_tensor(&dir.join(format!("{name}.tft")), tensor)?;
    }
    Ok(())
}

fn read_store<T: Scalar>(dir: &Path, names: &[String]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::empty();
    for name in names {
        let tensor = tft::read_tensor::<T>(&dir.join(format!("{name}.tft")))?;
        store.insert(name.clone(), tensor);
    }
    Ok(store)
}

pub fn save<T: Scalar>(dir: &Path, ck: &Checkpoint<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_store(&dir.join("params"), &ck.params)?;
    if let Some((m, v)) = &ck.moments {
        let mismatch = m.names().ne(ck.params.names()) || v.names().ne(ck.params.names());
        if mismatch {
            return Err(Error::config("moment names do not match parameter names"));
        }
        write_store(&dir.join("adam_m"), m)?;
        write_store(&dir.join("adam_v"), v)?;
    }
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA.into(),
        dtype: T::DTYPE.name().into(),
        step: ck.step,
        epoch: ck.epoch,
        params: ck.params.names().map(str::to_string).collect(),
        has_moments: ck.moments.is_some(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::format(path_str(&manifest_path), format!("cannot read: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(path_str(&manifest_path), e.to_string()))?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(Error::format(
            path_str(&manifest_path),
            format!("schema {} is not {}", manifest.schema, CHECKPOINT_SCHEMA),
        ));
    }
    if manifest.dtype != T::DTYPE.name() {
        return Err(Error::format(
            path_str(&manifest_path),
            format!("checkpoint dtype {} but requested {}", manifest.dtype, T::DTYPE.name()),
        ));
    }
    let params = read_store::<T>(&dir.join("params"), &manifest.params)?;
    let moments = if manifest.has_moments {
        Some((
            read_store::<T>(&dir.join("adam_m"), &manifest.params)?,
            read_store::<T>(&dir.join("adam_v"), &manifest.params)?,
        ))
    } else {
        None
    };
    Ok(Checkpoint { step: manifest.step, epoch: manifest.epoch, params, moments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn random_store(seed: u64, with: &[(&str, &[usize])]) -> ParamStore<f32> {
        let mut store = ParamStore::empty();
        let mut rng = Rng::new(seed);
        for (name, shape) in with {
            store.insert(name.to_string(), Tensor::uniform(shape, -1.0, 1.0, &mut rng));
        }
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let shapes: &[(&str, &[usize])] = &[("a.w", &[3, 4]), ("b.bias", &[5])];
        let ck = Checkpoint {
            step: 17,
            epoch: 3,
            params: random_store(1, shapes),
            moments: Some((random_store(2, shapes), random_store(3, shapes))),
        };
        let tmp = tempfile::tempdir().unwrap();
        save(tmp.path(), &ck).unwrap();
        let back = load::<f32>(tmp.path()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.epoch, 3);
        for (name, tensor) in ck.params.iter() {
            assert_eq!(back.params.get(name).unwrap().data(), tensor.data());
        }
        let (m0, v0) = ck.moments.as_ref().unwrap();
        let (m1, v1) = back.moments.as_ref().unwrap();
        for name in ["a.w", "b.bias"] {
            assert_eq!(m1.get(name).unwrap().data(), m0.get(name).unwrap().data());
            assert_eq!(v1.get(name).unwrap().data(), v0.get(name).unwrap().data());
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let ck = Checkpoint {
            step: 0,
            epoch: 0,
            params: random_store(1, &[("p", &[2])]),
            moments: None,
        };
        let tmp = tempfile::tempdir().unwrap();
        save(tmp.path(), &ck).unwrap();
        assert!(load::<f64>(tmp.path()).is_err());
        assert!(load::<f32>(tmp.path()).unwrap().moments.is_none());
    }

    #[test]
    fn missing_parameter_file_is_an_error() {
        let ck = Checkpoint {
            step: 0,
            epoch: 0,
            params: random_store(1, &[("p", &[2]), ("q", &[2])]),
            moments: None,
        };
        let tmp = tempfile::tempdir().unwrap();
        save(tmp.path(), &ck).unwrap();
        fs::remove_file(tmp.path().join("params").join("q.tft")).unwrap();
        assert!(load::<f32>(tmp.path()).is_err());
    }
}
