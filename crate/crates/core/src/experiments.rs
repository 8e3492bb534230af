//! End-to-end experiment drivers: guided-vs-unguided comparisons, ablation
//! sweeps and the side-by-side demo.
//!
//! Generation always runs under the null condition so that any motion in
//! the output is attributable to the guidance alone; the reference motion
//! enters only through the extracted representation. Runs are deterministic
//! per seed and fan out across worker threads.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{
    sample, GuidanceInput, GuidanceMode, SamplerConfig, CAMERA_SCHEDULE, DEFAULT_CFG_SCALE,
    DEFAULT_LAMBDA, OBJECT_SCHEDULE,
};
use crate::error::{Error, Result};
use crate::guidance::{
    extract_representation, extract_trajectory, ExtractOptions, ExtractionMode,
    MotionRepresentation, DEFAULT_BLOCK, DEFAULT_K, DEFAULT_T_ALPHA,
};
use crate::metrics::{motion_fidelity, temporal_consistency, MotionScore};
use crate::pgm;
use crate::schedule::NoiseSchedule;
use crate::synth::{MotionKind, MotionTruth, VideoClip};

/// Denoise/guidance step preset for a motion kind: object motion gets the
/// long schedule, everything else the camera schedule.
pub fn schedule_for(kind: MotionKind) -> (usize, usize) {
    match kind {
        MotionKind::Translate => OBJECT_SCHEDULE,
        _ => CAMERA_SCHEDULE,
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub k: usize,
    pub t_alpha: usize,
    pub block: String,
    pub lambda: f32,
    pub cfg_scale: f32,
    pub extract_seed: u64,
    pub threads: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            k: DEFAULT_K,
            t_alpha: DEFAULT_T_ALPHA,
            block: DEFAULT_BLOCK.to_string(),
            lambda: DEFAULT_LAMBDA,
            cfg_scale: DEFAULT_CFG_SCALE,
            extract_seed: 9000,
            threads: 0,
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn sampler(steps: (usize, usize), mode: GuidanceMode, seed: u64, opts: &ExperimentOptions) -> SamplerConfig {
    let mut cfg = SamplerConfig::new(steps.0, steps.1, mode, seed);
    cfg.lambda = opts.lambda;
    cfg.cfg_scale = opts.cfg_scale;
    cfg
}

// ── Guided vs unguided comparison ────────────────────────────────────

/// Scores of the three arms for one (reference, seed) run.
#[derive(Clone, Debug)]
pub struct ComparisonRun {
    pub clip_id: String,
    pub seed: u64,
    pub unguided: MotionScore,
    pub plain: MotionScore,
    pub primary: MotionScore,
}

impl ComparisonRun {
    /// The expected ordering: primary >= plain > unguided on correlation.
    pub fn ordering_holds(&self) -> bool {
        self.primary.correlation >= self.plain.correlation
            && self.plain.correlation > self.unguided.correlation
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonSummary {
    pub runs: Vec<ComparisonRun>,
    pub mean_unguided: f32,
    pub mean_plain: f32,
    pub mean_primary: f32,
    pub ordering_violations: usize,
}

/// Runs the unguided / plain-guided / primary-guided comparison over the
/// given references and seeds. All arms of a run share the sampler seed.
pub fn guided_comparison(
    model: &Denoiser,
    sched: &NoiseSchedule,
    refs: &[(VideoClip, MotionTruth)],
    seeds: &[u64],
    opts: &ExperimentOptions,
) -> Result<ComparisonSummary> {
    let pool = pool(opts.threads)?;
    // one extraction per reference, shared across seeds
    let reps: Vec<(MotionRepresentation, MotionRepresentation)> = pool.install(|| {
        refs.par_iter()
            .enumerate()
            .map(|(i, (clip, _))| {
                let base = ExtractOptions {
                    k: opts.k,
                    t_alpha: opts.t_alpha,
                    block: opts.block.clone(),
                    seed: opts.extract_seed + i as u64,
                    ..Default::default()
                };
                let primary = extract_representation(model, sched, clip, &base)?;
                let plain = extract_representation(
                    model,
                    sched,
                    clip,
                    &ExtractOptions { plain: true, ..base },
                )?;
                Ok((plain, primary))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let tasks: Vec<(usize, u64)> = (0..refs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<ComparisonRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed)| {
                let (clip, truth) = &refs[i];
                let steps = schedule_for(truth.kind);
                let (plain_rep, primary_rep) = &reps[i];

                let (off, _) =
                    sample(model, sched, &sampler(steps, GuidanceMode::Off, seed, opts), Condition::NULL, None)?;
                let (plain, _) = sample(
                    model,
                    sched,
                    &sampler(steps, GuidanceMode::Plain, seed, opts),
                    Condition::NULL,
                    Some(&GuidanceInput::Single(plain_rep)),
                )?;
                let (primary, _) = sample(
                    model,
                    sched,
                    &sampler(steps, GuidanceMode::Primary, seed, opts),
                    Condition::NULL,
                    Some(&GuidanceInput::Single(primary_rep)),
                )?;
                Ok(ComparisonRun {
                    clip_id: clip.id.clone(),
                    seed,
                    unguided: motion_fidelity(truth, &off)?,
                    plain: motion_fidelity(truth, &plain)?,
                    primary: motion_fidelity(truth, &primary)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let n = runs.len().max(1) as f32;
    let mean = |f: &dyn Fn(&ComparisonRun) -> f32| runs.iter().map(|r| f(r)).sum::<f32>() / n;
    Ok(ComparisonSummary {
        mean_unguided: mean(&|r| r.unguided.correlation),
        mean_plain: mean(&|r| r.plain.correlation),
        mean_primary: mean(&|r| r.primary.correlation),
        ordering_violations: runs.iter().filter(|r| !r.ordering_holds()).count(),
        runs,
    })
}

// ── Ablation sweeps ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    K,
    TAlpha,
    Block,
    Mode,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::K => "k",
            AblationAxis::TAlpha => "t-alpha",
            AblationAxis::Block => "block",
            AblationAxis::Mode => "mode",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(AblationAxis::K),
            "t-alpha" | "t_alpha" => Ok(AblationAxis::TAlpha),
            "block" => Ok(AblationAxis::Block),
            "mode" => Ok(AblationAxis::Mode),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    pub fidelity: f32,
    pub mean_err: f32,
    pub consistency: f32,
    pub wall_ms: u128,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    /// True when at least one row failed and the table is incomplete.
    pub partial: bool,
}

impl SweepTable {
    /// Tab-separated rendering with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tfidelity\tmean_err\tconsistency\twall_ms\tstatus\n", self.axis);
        for r in &self.rows {
            match &r.error {
                None => out.push_str(&format!(
                    "{}\t{:.4}\t{:.3}\t{:.4}\t{}\tok\n",
                    r.label, r.fidelity, r.mean_err, r.consistency, r.wall_ms
                )),
                Some(e) => out.push_str(&format!("{}\tnan\tnan\tnan\t{}\terror: {}\n", r.label, r.wall_ms, e)),
            }
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub base: ExperimentOptions,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub guided_steps: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            base: ExperimentOptions::default(),
            seeds: vec![0, 1],
            steps: CAMERA_SCHEDULE.0,
            guided_steps: CAMERA_SCHEDULE.1,
        }
    }
}

/// Runs one sweep along `axis`, scoring each grid point by mean motion
/// fidelity, displacement error and temporal consistency over all
/// (reference, seed) runs. Per-run failures flag the table as partial.
pub fn ablation_sweep(
    model: &Denoiser,
    sched: &NoiseSchedule,
    refs: &[(VideoClip, MotionTruth)],
    axis: AblationAxis,
    grid: &[String],
    opts: &SweepOptions,
) -> Result<SweepTable> {
    if refs.is_empty() || opts.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one reference and one seed".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for value in grid {
        let started = Instant::now();
        let row = match sweep_point(model, sched, refs, axis, value, opts) {
            Ok((fidelity, mean_err, consistency)) => SweepRow {
                label: value.clone(),
                fidelity,
                mean_err,
                consistency,
                wall_ms: started.elapsed().as_millis(),
                error: None,
            },
            Err(e) => SweepRow {
                label: value.clone(),
                fidelity: f32::NAN,
                mean_err: f32::NAN,
                consistency: f32::NAN,
                wall_ms: started.elapsed().as_millis(),
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let partial = rows.iter().any(|r| r.error.is_some());
    Ok(SweepTable { axis: axis.as_str().to_string(), rows, partial })
}

fn sweep_point(
    model: &Denoiser,
    sched: &NoiseSchedule,
    refs: &[(VideoClip, MotionTruth)],
    axis: AblationAxis,
    value: &str,
    opts: &SweepOptions,
) -> Result<(f32, f32, f32)> {
    let mut point = opts.base.clone();
    let mut mode = GuidanceMode::Primary;
    let mut extraction = ExtractionMode::SingleStep;
    match axis {
        AblationAxis::K => {
            point.k = value
                .parse()
                .map_err(|_| Error::Config(format!("bad k value {value:?}")))?;
        }
        AblationAxis::TAlpha => {
            point.t_alpha = value
                .parse()
                .map_err(|_| Error::Config(format!("bad t-alpha value {value:?}")))?;
        }
        AblationAxis::Block => {
            point.block = value.to_string();
        }
        AblationAxis::Mode => match value {
            "off" => mode = GuidanceMode::Off,
            "plain" => mode = GuidanceMode::Plain,
            "primary" => mode = GuidanceMode::Primary,
            "inversion_1" => mode = GuidanceMode::Inversion1,
            "inversion_2" => extraction = ExtractionMode::Inversion { steps: opts.steps },
            _ => return Err(Error::Config(format!("unknown mode {value:?}"))),
        },
    }

    let pool = pool(point.threads)?;
    let tasks: Vec<(usize, u64)> = (0..refs.len())
        .flat_map(|i| opts.seeds.iter().map(move |&s| (i, s)))
        .collect();

    // guidance sources per reference
    enum Source {
        None,
        Rep(MotionRepresentation),
        Traj(crate::guidance::GuidanceTrajectory),
    }
    let sources: Vec<Source> = pool.install(|| {
        refs.par_iter()
            .enumerate()
            .map(|(i, (clip, _))| {
                let ex = ExtractOptions {
                    k: point.k,
                    t_alpha: point.t_alpha,
                    block: point.block.clone(),
                    seed: point.extract_seed + i as u64,
                    plain: mode == GuidanceMode::Plain,
                    extraction,
                    ..Default::default()
                };
                Ok(match mode {
                    GuidanceMode::Off => Source::None,
                    GuidanceMode::Inversion1 => Source::Traj(extract_trajectory(
                        model,
                        sched,
                        clip,
                        opts.steps,
                        opts.guided_steps,
                        point.k,
                        &point.block,
                        Condition::NULL,
                    )?),
                    _ => Source::Rep(extract_representation(model, sched, clip, &ex)?),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let scores: Vec<(f32, f32, f32)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed)| {
                let (_, truth) = &refs[i];
                let cfg = sampler((opts.steps, opts.guided_steps), mode, seed, &point);
                let input = match &sources[i] {
                    Source::None => None,
                    Source::Rep(rep) => Some(GuidanceInput::Single(rep)),
                    Source::Traj(traj) => Some(GuidanceInput::Trajectory(traj)),
                };
                let (clip, _) = sample(model, sched, &cfg, Condition::NULL, input.as_ref())?;
                let score = motion_fidelity(truth, &clip)?;
                let consistency = temporal_consistency(&clip)?;
                Ok((score.correlation, score.mean_abs_err, consistency))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let n = scores.len() as f32;
    Ok((
        scores.iter().map(|s| s.0).sum::<f32>() / n,
        scores.iter().map(|s| s.1).sum::<f32>() / n,
        scores.iter().map(|s| s.2).sum::<f32>() / n,
    ))
}

// ── Demo strips ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DemoResult {
    pub strips: Vec<PathBuf>,
    pub unguided: MotionScore,
    pub plain: MotionScore,
    pub primary: MotionScore,
    pub summary: String,
}

/// Renders reference / unguided / plain / primary frame strips side by side
/// and reports their fidelity scores.
pub fn demo(
    model: &Denoiser,
    sched: &NoiseSchedule,
    reference: &(VideoClip, MotionTruth),
    seed: u64,
    opts: &ExperimentOptions,
    out_dir: &Path,
) -> Result<DemoResult> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (clip, truth) = reference;
    let steps = schedule_for(truth.kind);
    let base = ExtractOptions {
        k: opts.k,
        t_alpha: opts.t_alpha,
        block: opts.block.clone(),
        seed: opts.extract_seed,
        ..Default::default()
    };
    let primary_rep = extract_representation(model, sched, clip, &base)?;
    let plain_rep =
        extract_representation(model, sched, clip, &ExtractOptions { plain: true, ..base })?;
    let (off, _) = sample(model, sched, &sampler(steps, GuidanceMode::Off, seed, opts), Condition::NULL, None)?;
    let (plain, _) = sample(
        model,
        sched,
        &sampler(steps, GuidanceMode::Plain, seed, opts),
        Condition::NULL,
        Some(&GuidanceInput::Single(&plain_rep)),
    )?;
    let (primary, _) = sample(
        model,
        sched,
        &sampler(steps, GuidanceMode::Primary, seed, opts),
        Condition::NULL,
        Some(&GuidanceInput::Single(&primary_rep)),
    )?;

    let unguided_score = motion_fidelity(truth, &off)?;
    let plain_score = motion_fidelity(truth, &plain)?;
    let primary_score = motion_fidelity(truth, &primary)?;

    let mut strips = Vec::new();
    for (name, tensor) in [
        ("reference", &clip.data),
        ("unguided", &off),
        ("plain", &plain),
        ("primary", &primary),
    ] {
        let path = out_dir.join(format!("strip_{name}.pgm"));
        pgm::write_strip(&path, tensor)?;
        strips.push(path);
    }
    let line = format!(
        "demo {}: fidelity unguided={:.3} plain={:.3} primary={:.3}",
        clip.id, unguided_score.correlation, plain_score.correlation, primary_score.correlation
    );
    Ok(DemoResult {
        strips,
        unguided: unguided_score,
        plain: plain_score,
        primary: primary_score,
        summary: line,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_labels_round_trip() {
        for axis in [AblationAxis::K, AblationAxis::TAlpha, AblationAxis::Block, AblationAxis::Mode] {
            assert_eq!(AblationAxis::from_str(axis.as_str()).unwrap(), axis);
        }
        assert!(AblationAxis::from_str("nope").is_err());
    }

    #[test]
    fn schedule_presets_follow_motion_kind() {
        assert_eq!(schedule_for(MotionKind::Pan), (100, 50));
        assert_eq!(schedule_for(MotionKind::Rotate), (100, 50));
        assert_eq!(schedule_for(MotionKind::Translate), (300, 180));
    }

    #[test]
    fn tsv_rendering_includes_header_and_error_rows() {
        let table = SweepTable {
            axis: "k".into(),
            rows: vec![
                SweepRow {
                    label: "1".into(),
                    fidelity: 0.5,
                    mean_err: 1.0,
                    consistency: 0.9,
                    wall_ms: 12,
                    error: None,
                },
                SweepRow {
                    label: "8".into(),
                    fidelity: f32::NAN,
                    mean_err: f32::NAN,
                    consistency: f32::NAN,
                    wall_ms: 3,
                    error: Some("boom".into()),
                },
            ],
            partial: true,
        };
        let tsv = table.to_tsv();
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "k\tfidelity\tmean_err\tconsistency\twall_ms\tstatus");
        assert!(tsv.contains("1\t0.5000"));
        assert!(tsv.contains("error: boom"));
    }
}
