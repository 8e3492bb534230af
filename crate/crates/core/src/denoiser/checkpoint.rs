//! Checkpoint directories: a key=value manifest plus one MCLT tensor per
//! parameter. Round-trips are bitwise.

use std::fs;
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::io as tio;

pub const MANIFEST: &str = "manifest.txt";

fn config_kv(kv: &mut KvFile, cfg: &DenoiserConfig) {
    kv.set("config.frames", cfg.frames);
    kv.set("config.channels", cfg.channels);
    kv.set("config.width", cfg.width);
    kv.set("config.levels", cfg.levels);
    kv.set("config.input_size", cfg.input_size);
    kv.set("config.time_dim", cfg.time_dim);
    kv.set("config.vocab", cfg.vocab);
    kv.set("config.max_t", cfg.max_t);
}

fn config_from_kv(path: &Path, kv: &KvFile) -> Result<DenoiserConfig> {
    Ok(DenoiserConfig {
        frames: kv.parse(path, "config.frames")?,
        channels: kv.parse(path, "config.channels")?,
        width: kv.parse(path, "config.width")?,
        levels: kv.parse(path, "config.levels")?,
        input_size: kv.parse(path, "config.input_size")?,
        time_dim: kv.parse(path, "config.time_dim")?,
        vocab: kv.parse(path, "config.vocab")?,
        max_t: kv.parse(path, "config.max_t")?,
    })
}

/// Saves the model under `dir` with training progress metadata.
pub fn save(model: &Denoiser, dir: &Path, step: usize) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut kv = KvFile::new();
    config_kv(&mut kv, model.config());
    kv.set("step", step);
    kv.set("seed", model.seed());
    // guidance gradients flow through normalization statistics on the tape
    kv.set("tape_norm_stats", "differentiated");
    kv.set("param_count", model.params().len());
    for (i, name) in model.param_names().iter().enumerate() {
        kv.set(format!("param.{i}"), name);
        tio::write_tensor(&params_dir.join(format!("{name}.mclt")), &model.params()[i])?;
    }
    kv.write(&dir.join(MANIFEST))
}

/// Loads a checkpoint, rebuilding the model from its manifest config.
/// Returns the model, its manifest, and the stored training step.
pub fn load(dir: &Path) -> Result<(Denoiser, KvFile, usize)> {
    let manifest_path = dir.join(MANIFEST);
    let kv = KvFile::read(&manifest_path)?;
    let cfg = config_from_kv(&manifest_path, &kv)?;
    let seed: u64 = kv.parse(&manifest_path, "seed")?;
    let step: usize = kv.parse(&manifest_path, "step")?;
    let mut model = Denoiser::init(cfg, seed)?;
    let count: usize = kv.parse(&manifest_path, "param_count")?;
    if count != model.params().len() {
        return Err(Error::manifest(
            &manifest_path,
            format!("{count} params stored, model has {}", model.params().len()),
        ));
    }
    for i in 0..count {
        let name = kv.require(&manifest_path, &format!("param.{i}"))?.to_string();
        if name != model.param_names()[i] {
            return Err(Error::manifest(
                &manifest_path,
                format!("param {i} is {name:?}, expected {:?}", model.param_names()[i]),
            ));
        }
        let tensor = tio::read_tensor(&dir.join("params").join(format!("{name}.mclt")))?;
        model.set_param(i, tensor).map_err(|e| {
            Error::manifest(&manifest_path, format!("param {name}: {e}"))
        })?;
    }
    Ok((model, kv, step))
}

/// Loads a checkpoint that must match `expected`; mismatched fields are
/// reported by name.
pub fn load_with_config(dir: &Path, expected: &DenoiserConfig) -> Result<(Denoiser, KvFile, usize)> {
    let manifest_path = dir.join(MANIFEST);
    let kv = KvFile::read(&manifest_path)?;
    let stored = config_from_kv(&manifest_path, &kv)?;
    if stored != *expected {
        let mut diffs = Vec::new();
        let pairs = [
            ("frames", stored.frames, expected.frames),
            ("channels", stored.channels, expected.channels),
            ("width", stored.width, expected.width),
            ("levels", stored.levels, expected.levels),
            ("input_size", stored.input_size, expected.input_size),
            ("time_dim", stored.time_dim, expected.time_dim),
            ("vocab", stored.vocab, expected.vocab),
            ("max_t", stored.max_t, expected.max_t),
        ];
        for (name, got, want) in pairs {
            if got != want {
                diffs.push(format!("{name}: stored {got}, expected {want}"));
            }
        }
        return Err(Error::manifest(&manifest_path, format!("config mismatch: {}", diffs.join("; "))));
    }
    load(dir)
}
