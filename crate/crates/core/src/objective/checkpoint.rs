use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Trainer;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::spotter::{Spotter, SpotterConfig};
use crate::tensor::Real;

pub const PARAMS_FILE: &str = "params.bin";
pub const VELOCITY_FILE: &str = "velocity.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config_hash: String,
    pub vocabulary: String,
    pub seed: u64,
    pub no_positive_rois: u64,
    pub model: SpotterConfig,
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes parameters, optimizer velocity and metadata; each file is replaced atomically
/// and the metadata is written last.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    trainer: &Trainer<T>,
    config_hash: &str,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(PARAMS_FILE), |w| trainer.store.write_to(w))?;
    write_atomic(&dir.join(VELOCITY_FILE), |w| {
        trainer.opt.velocity().write_to(w)
    })?;
    let meta = CheckpointMeta {
        step: trainer.step,
        config_hash: config_hash.to_string(),
        vocabulary: trainer.model.recognizer.vocab().symbols(),
        seed: trainer.seed,
        no_positive_rois: trainer.no_positive_rois,
        model: trainer.model.config().clone(),
    };
    write_atomic(&dir.join(META_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &meta)?;
        Ok(())
    })?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let f =
        fs::File::open(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Reads metadata, parameters and velocity of a checkpoint directory.
pub fn load_checkpoint<T: Real>(
    dir: &Path,
) -> Result<(CheckpointMeta, ParamStore<T>, ParamStore<T>)> {
    let meta = read_meta(dir)?;
    let open = |name: &str| -> Result<BufReader<fs::File>> {
        let p = dir.join(name);
        fs::File::open(&p)
            .map(BufReader::new)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
    };
    let params = ParamStore::read_from(open(PARAMS_FILE)?)?;
    let velocity = ParamStore::read_from(open(VELOCITY_FILE)?)?;
    Ok((meta, params, velocity))
}

/// Rebuilds the model of a checkpoint with its trained parameters.
pub fn load_model<T: Real>(dir: &Path) -> Result<(CheckpointMeta, Spotter, ParamStore<T>)> {
    let (meta, params, _) = load_checkpoint::<T>(dir)?;
    let mut store = ParamStore::new();
    let model = Spotter::new(
        &meta.model,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(meta.seed),
    )?;
    store.load_values(&params)?;
    Ok((meta, model, store))
}

impl<T: Real> Trainer<T> {
    /// Restores parameters, velocity and step count, refusing a different configuration.
    pub fn resume(&mut self, dir: &Path, expected_hash: &str) -> Result<CheckpointMeta> {
        let (meta, params, velocity) = load_checkpoint::<T>(dir)?;
        if meta.config_hash != expected_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint hash {}",
                expected_hash, meta.config_hash
            )));
        }
        self.store.load_values(&params)?;
        self.opt.set_velocity(&velocity)?;
        self.step = meta.step;
        self.seed = meta.seed;
        self.no_positive_rois = meta.no_positive_rois;
        Ok(meta)
    }
}
