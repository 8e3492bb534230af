//! Run configuration: a flat key=value file with command-line overrides.
//!
//! Unknown keys are rejected, and every command writes the fully resolved
//! configuration into its run directory so a run is reproducible from that
//! file plus the seed.

use std::path::Path;

use mcl_core::denoiser::DenoiserConfig;
use mcl_core::diffusion::{GuidanceMode, CAMERA_SCHEDULE, OBJECT_SCHEDULE};
use mcl_core::error::{Error, Result};
use mcl_core::guidance::{ExtractionMode, NoiseMode};
use mcl_core::kv::KvFile;
use mcl_core::schedule::NoiseSchedule;
use mcl_core::synth::SynthConfig;
use mcl_core::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    // model
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    pub width: usize,
    pub levels: usize,
    pub time_dim: usize,
    pub vocab: usize,
    // schedule
    pub t_total: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    // data
    pub clips_per_class: usize,
    // training
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub p_uncond: f32,
    pub log_every: usize,
    // extraction
    pub k: usize,
    pub t_alpha: usize,
    pub block: String,
    pub extract_noise: NoiseMode,
    pub extract_mode: ExtractionMode,
    pub extract_seed: u64,
    // sampling
    pub mode: GuidanceMode,
    pub lambda: f32,
    pub cfg_scale: f32,
    pub schedule: String,
    pub sample_class: u32,
    pub sweep_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            frames: 8,
            size: 32,
            channels: 1,
            width: 8,
            levels: 2,
            time_dim: 32,
            vocab: 5,
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            clips_per_class: 48,
            train_steps: 1600,
            batch: 4,
            lr: 2e-3,
            p_uncond: 0.1,
            log_every: 100,
            k: 1,
            t_alpha: 400,
            block: "up_block.1".into(),
            extract_noise: NoiseMode::FrameShared,
            extract_mode: ExtractionMode::SingleStep,
            extract_seed: 9000,
            mode: GuidanceMode::Off,
            lambda: 2000.0,
            cfg_scale: 7.5,
            schedule: "camera".into(),
            sample_class: 0,
            sweep_seeds: 2,
        }
    }
}

impl RunConfig {
    /// Applies a config file on top of the defaults; unknown keys error.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let kv = KvFile::read(path)?;
        for (key, value) in kv.pairs() {
            self.apply_key(key, value)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key {key:?} has unparsable value {value:?}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "time_dim" => self.time_dim = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "t_total" => self.t_total = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "clips_per_class" => self.clips_per_class = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "p_uncond" => self.p_uncond = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "t_alpha" => self.t_alpha = parse(key, value)?,
            "block" => self.block = value.to_string(),
            "extract_noise" => self.extract_noise = NoiseMode::from_str(value)?,
            "extract_mode" => self.extract_mode = ExtractionMode::from_str(value)?,
            "extract_seed" => self.extract_seed = parse(key, value)?,
            "mode" => self.mode = GuidanceMode::from_str(value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "schedule" => {
                parse_schedule(value)?; // validate now
                self.schedule = value.to_string();
            }
            "sample_class" => self.sample_class = parse(key, value)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            frames: self.frames,
            channels: self.channels,
            width: self.width,
            levels: self.levels,
            input_size: self.size,
            time_dim: self.time_dim,
            vocab: self.vocab,
            max_t: self.t_total,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { frames: self.frames, size: self.size, channels: self.channels }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_total, self.beta_start, self.beta_end)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch: self.batch,
            lr: self.lr,
            p_uncond: self.p_uncond,
            seed: self.seed,
            threads: self.threads,
        }
    }

    /// (total steps, guided steps) from the schedule preset or `N,M`.
    pub fn sample_schedule(&self) -> (usize, usize) {
        parse_schedule(&self.schedule).expect("validated at parse time")
    }

    /// Serializes every resolved key.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("seed", self.seed);
        kv.set("threads", self.threads);
        kv.set("frames", self.frames);
        kv.set("size", self.size);
        kv.set("channels", self.channels);
        kv.set("width", self.width);
        kv.set("levels", self.levels);
        kv.set("time_dim", self.time_dim);
        kv.set("vocab", self.vocab);
        kv.set("t_total", self.t_total);
        kv.set("beta_start", self.beta_start);
        kv.set("beta_end", self.beta_end);
        kv.set("clips_per_class", self.clips_per_class);
        kv.set("train_steps", self.train_steps);
        kv.set("batch", self.batch);
        kv.set("lr", self.lr);
        kv.set("p_uncond", self.p_uncond);
        kv.set("log_every", self.log_every);
        kv.set("k", self.k);
        kv.set("t_alpha", self.t_alpha);
        kv.set("block", &self.block);
        kv.set("extract_noise", self.extract_noise.as_str());
        kv.set("extract_mode", self.extract_mode.as_str());
        kv.set("extract_seed", self.extract_seed);
        kv.set("mode", self.mode.as_str());
        kv.set("lambda", self.lambda);
        kv.set("cfg_scale", self.cfg_scale);
        kv.set("schedule", &self.schedule);
        kv.set("sample_class", self.sample_class);
        kv.set("sweep_seeds", self.sweep_seeds);
        kv
    }
}

pub fn parse_schedule(s: &str) -> Result<(usize, usize)> {
    match s {
        "camera" => Ok(CAMERA_SCHEDULE),
        "object" => Ok(OBJECT_SCHEDULE),
        other => {
            let (n, m) = other
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("schedule must be camera, object or N,M; got {other:?}")))?;
            let steps: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule step count {n:?}")))?;
            let guided: usize = m
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad guided step count {m:?}")))?;
            if guided > steps {
                return Err(Error::Config(format!(
                    "guided steps {guided} exceed total steps {steps}"
                )));
            }
            Ok((steps, guided))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_key("no_such_key", "1").is_err());
        assert!(cfg.apply_key("seed", "12").is_ok());
        assert_eq!(cfg.seed, 12);
    }

    #[test]
    fn schedule_forms() {
        assert_eq!(parse_schedule("camera").unwrap(), (100, 50));
        assert_eq!(parse_schedule("object").unwrap(), (300, 180));
        assert_eq!(parse_schedule("40,10").unwrap(), (40, 10));
        assert!(parse_schedule("10,40").is_err());
        assert!(parse_schedule("fast").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        let mut cfg = RunConfig::default();
        cfg.apply_key("lambda", "123.5").unwrap();
        cfg.apply_key("mode", "primary").unwrap();
        cfg.to_kv().write(&path).unwrap();

        let mut back = RunConfig::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back.lambda, 123.5);
        assert_eq!(back.mode, GuidanceMode::Primary);
    }
}
