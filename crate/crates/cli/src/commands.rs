//! Command implementations. Every command resolves its configuration,
//! creates a timestamped run directory, writes the resolved config next to
//! its outputs and never mutates its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use mcl_core::denoiser::{checkpoint, Condition, Denoiser};
use mcl_core::diffusion::{sample, GuidanceInput, GuidanceMode, SamplerConfig};
use mcl_core::error::{Error, Result};
use mcl_core::experiments::{
    ablation_sweep, demo, AblationAxis, ExperimentOptions, SweepOptions,
};
use mcl_core::guidance::{
    extract_representation, extract_trajectory, ExtractOptions, GuidanceTrajectory,
    MotionRepresentation,
};
use mcl_core::kv::KvFile;
use mcl_core::metrics::{motion_fidelity, temporal_consistency};
use mcl_core::pgm;
use mcl_core::synth::{gen_dataset, read_truth, Dataset, MotionTruth, VideoClip};
use mcl_core::tensor::io as tio;
use mcl_core::train::{train, TrainItem};

use crate::config::RunConfig;

/// Creates `<out>/<cmd>-<stamp>-s<seed>/` and drops the resolved config in it.
pub fn run_dir(out: &Path, cmd: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let mut dir = out.join(format!("{cmd}-{stamp}-s{}", cfg.seed));
    let mut suffix = 1;
    while dir.exists() {
        suffix += 1;
        dir = out.join(format!("{cmd}-{stamp}-s{}-{}", cfg.seed, suffix));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.to_kv().write(&dir.join("config.txt"))?;
    Ok(dir)
}

fn load_model(dir: &Path) -> Result<(Denoiser, usize)> {
    let (model, _, step) = checkpoint::load(dir)?;
    Ok((model, step))
}

fn load_reference(
    cfg: &RunConfig,
    data: Option<&Path>,
    id: Option<&str>,
    clip: Option<&Path>,
    truth: Option<&Path>,
) -> Result<(VideoClip, MotionTruth)> {
    match (data, id, clip, truth) {
        (Some(dir), Some(id), _, _) => {
            let ds = Dataset::load(dir)?;
            let item = ds.find(id).ok_or_else(|| {
                Error::Config(format!(
                    "clip {id:?} not in dataset; available: {}",
                    ds.items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>().join(", ")
                ))
            })?;
            Ok((ds.load_clip(item)?, read_truth(&item.truth_path)?))
        }
        (_, _, Some(clip_path), truth_path) => {
            let data = tio::read_tensor(clip_path)?;
            let clip = VideoClip {
                data,
                id: clip_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                class: cfg.sample_class,
            };
            let truth = match truth_path {
                Some(p) => read_truth(p)?,
                None => return Err(Error::Config("--truth is required with --clip".into())),
            };
            Ok((clip, truth))
        }
        _ => Err(Error::Config("need either --data with --id, or --clip with --truth".into())),
    }
}

fn extract_options(cfg: &RunConfig, plain: bool) -> ExtractOptions {
    ExtractOptions {
        t_alpha: cfg.t_alpha,
        k: cfg.k,
        block: cfg.block.clone(),
        cond: Condition::NULL,
        seed: cfg.extract_seed,
        plain,
        noise: cfg.extract_noise,
        extraction: cfg.extract_mode,
    }
}

fn experiment_options(cfg: &RunConfig) -> ExperimentOptions {
    ExperimentOptions {
        k: cfg.k,
        t_alpha: cfg.t_alpha,
        block: cfg.block.clone(),
        lambda: cfg.lambda,
        cfg_scale: cfg.cfg_scale,
        extract_seed: cfg.extract_seed,
        threads: cfg.threads,
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(c) = count {
        cfg.clips_per_class = c;
    }
    let dir = run_dir(out, "gen-data", &cfg)?;
    let data_dir = dir.join("dataset");
    let ds = gen_dataset(&cfg.synth_config(), cfg.clips_per_class, cfg.seed, &data_dir)?;
    println!("dataset: {} clips under {}", ds.items.len(), data_dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, data: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.train_steps = s;
    }
    let dir = run_dir(out, "train", &cfg)?;
    let ds = Dataset::load(data)?;
    let items: Vec<TrainItem> = ds
        .items
        .iter()
        .map(|it| Ok(TrainItem { clip: ds.load_clip(it)?.data, class: it.class }))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Denoiser::init(cfg.denoiser_config(), cfg.seed)?;
    let sched = cfg.noise_schedule()?;
    let log_every = cfg.log_every.max(1);
    let report = train(&mut model, &sched, &items, &cfg.train_config(), |step, loss| {
        if step % log_every == 0 {
            println!("step {step}: loss {loss:.4}");
        }
    })?;
    let ckpt_dir = dir.join("checkpoint");
    checkpoint::save(&model, &ckpt_dir, cfg.train_steps)?;
    let losses: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("losses.txt"), losses).map_err(|e| Error::io(&dir, e))?;
    println!(
        "trained {} steps: final loss {:.4}, 200-step moving-average drop {:.1}%, checkpoint at {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f32::NAN),
        report.drop_fraction(200) * 100.0,
        ckpt_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_extract(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    data: Option<&Path>,
    id: Option<&str>,
    clip: Option<&Path>,
    truth: Option<&Path>,
    plain: bool,
    trajectory: bool,
) -> Result<()> {
    let dir = run_dir(out, "extract", cfg)?;
    let (model, _) = load_model(ckpt)?;
    let sched = cfg.noise_schedule()?;
    let (clip, _) = load_reference(cfg, data, id, clip, truth)?;
    if trajectory {
        let (steps, guided) = cfg.sample_schedule();
        let traj = extract_trajectory(
            &model,
            &sched,
            &clip,
            steps,
            guided,
            cfg.k,
            &cfg.block,
            Condition::NULL,
        )?;
        let traj_dir = dir.join("trajectory");
        traj.save(&traj_dir)?;
        println!(
            "trajectory: {} steps for block {} at {}",
            traj.entries.len(),
            traj.block,
            traj_dir.display()
        );
    } else {
        let rep = extract_representation(&model, &sched, &clip, &extract_options(cfg, plain))?;
        let rep_dir = dir.join("representation");
        rep.save(&rep_dir)?;
        let map = rep.intensity_map(false)?;
        pgm::write_heatmap(&dir.join("intensity.pgm"), &map)?;
        println!(
            "representation: block {} t_alpha {} k {} ({}) at {}",
            rep.block,
            rep.t_alpha,
            rep.k,
            if rep.plain { "plain" } else { "topk" },
            rep_dir.display()
        );
    }
    Ok(())
}

/// Loads a representation or trajectory directory, detected by manifest keys.
fn load_guidance(dir: &Path) -> Result<LoadedGuidance> {
    let kv = KvFile::read(&dir.join("manifest.txt"))?;
    if kv.get("steps").is_some() {
        Ok(LoadedGuidance::Trajectory(GuidanceTrajectory::load(dir)?))
    } else {
        Ok(LoadedGuidance::Single(MotionRepresentation::load(dir)?))
    }
}

pub enum LoadedGuidance {
    Single(MotionRepresentation),
    Trajectory(GuidanceTrajectory),
}

impl LoadedGuidance {
    pub fn as_input(&self) -> GuidanceInput<'_> {
        match self {
            LoadedGuidance::Single(rep) => GuidanceInput::Single(rep),
            LoadedGuidance::Trajectory(traj) => GuidanceInput::Trajectory(traj),
        }
    }
}

pub fn cmd_sample(cfg: &RunConfig, out: &Path, ckpt: &Path, rep: Option<&Path>) -> Result<()> {
    let dir = run_dir(out, "sample", cfg)?;
    let (model, _) = load_model(ckpt)?;
    let sched = cfg.noise_schedule()?;
    let (steps, guided) = cfg.sample_schedule();
    let mut sampler_cfg = SamplerConfig::new(steps, guided, cfg.mode, cfg.seed);
    sampler_cfg.cfg_scale = cfg.cfg_scale;
    sampler_cfg.lambda = cfg.lambda;

    let guidance = match (cfg.mode, rep) {
        (GuidanceMode::Off, _) => None,
        (_, Some(path)) => Some(load_guidance(path)?),
        (_, None) => {
            return Err(Error::Config(format!(
                "mode {} needs --rep pointing at a representation",
                cfg.mode.as_str()
            )))
        }
    };
    let input = guidance.as_ref().map(|g| g.as_input());
    let (clip, stats) = sample(&model, &sched, &sampler_cfg, Condition(cfg.sample_class), input.as_ref())?;

    tio::write_tensor(&dir.join("clip.mclt"), &clip)?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    pgm::write_clip_frames(&frames_dir, &clip)?;
    pgm::write_strip(&dir.join("strip.pgm"), &clip)?;
    println!(
        "sample: mode {} seed {} -> {} ({} model evals, {} guided steps)",
        cfg.mode.as_str(),
        cfg.seed,
        dir.display(),
        stats.model_evals,
        stats.guided_steps_run
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, clip_path: &Path, truth_path: &Path) -> Result<()> {
    let dir = run_dir(out, "eval", cfg)?;
    let clip = tio::read_tensor(clip_path)?;
    let truth = read_truth(truth_path)?;
    let score = motion_fidelity(&truth, &clip)?;
    let consistency = temporal_consistency(&clip)?;
    let line = format!(
        "eval: fidelity {:.4} mean_err {:.3} consistency {:.4} track {:?}",
        score.correlation, score.mean_abs_err, consistency, score.track
    );
    fs::write(dir.join("scores.txt"), format!("{line}\n")).map_err(|e| Error::io(&dir, e))?;
    println!("{line}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    data: &Path,
    axis: &str,
    grid: &str,
    refs: Option<&str>,
) -> Result<()> {
    let dir = run_dir(out, "ablate", cfg)?;
    let (model, _) = load_model(ckpt)?;
    let sched = cfg.noise_schedule()?;
    let ds = Dataset::load(data)?;
    let refs = resolve_refs(&ds, refs)?;
    let axis = AblationAxis::from_str(axis)?;
    let grid: Vec<String> = grid.split(',').map(|s| s.trim().to_string()).collect();
    let (steps, guided) = cfg.sample_schedule();
    let opts = SweepOptions {
        base: experiment_options(cfg),
        seeds: (0..cfg.sweep_seeds as u64).map(|i| cfg.seed + i).collect(),
        steps,
        guided_steps: guided,
    };
    let table = ablation_sweep(&model, &sched, &refs, axis, &grid, &opts)?;
    let tsv = table.to_tsv();
    fs::write(dir.join("sweep.tsv"), &tsv).map_err(|e| Error::io(&dir, e))?;
    print!("{tsv}");
    if table.partial {
        println!("warning: table is partial; at least one grid point failed");
    }
    Ok(())
}

fn resolve_refs(ds: &Dataset, refs: Option<&str>) -> Result<Vec<(VideoClip, MotionTruth)>> {
    let ids: Vec<String> = match refs {
        Some(csv) => csv.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            // default: the first pan clip with correlatable variance
            let item = ds
                .items
                .iter()
                .find(|i| {
                    read_truth(&i.truth_path)
                        .map(|t| {
                            let d: Vec<(i32, i32)> = t.disp;
                            d.iter().any(|&x| x != (0, 0))
                                && d[1..].iter().any(|&x| x.0 != x.1)
                                && i.kind == mcl_core::synth::MotionKind::Pan
                        })
                        .unwrap_or(false)
                })
                .ok_or_else(|| Error::Config("dataset has no usable pan reference".into()))?;
            vec![item.id.clone()]
        }
    };
    ids.iter()
        .map(|id| {
            let item = ds
                .find(id)
                .ok_or_else(|| Error::Config(format!("clip {id:?} not in dataset")))?;
            Ok((ds.load_clip(item)?, read_truth(&item.truth_path)?))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_demo(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    data: Option<&Path>,
    id: Option<&str>,
    clip: Option<&Path>,
    truth: Option<&Path>,
) -> Result<()> {
    let dir = run_dir(out, "demo", cfg)?;
    let (model, _) = load_model(ckpt)?;
    let sched = cfg.noise_schedule()?;
    let reference = load_reference(cfg, data, id, clip, truth)?;
    let result = demo(&model, &sched, &reference, cfg.seed, &experiment_options(cfg), &dir)?;
    for strip in &result.strips {
        println!("strip: {}", strip.display());
    }
    println!("{}", result.summary);
    Ok(())
}
