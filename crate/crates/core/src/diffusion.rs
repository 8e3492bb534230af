//! Forward noising, deterministic DDIM stepping and inversion, and the
//! guided sampler combining classifier-free guidance with a motion-energy
//! gradient.
//!
//! Per step the sampler predicts noise for the condition and the null token,
//! amplifies their difference by the guidance weight, and, inside the early
//! guided window, backpropagates the motion energy from the recorded
//! attention block to the current latent and subtracts the scaled gradient
//! from the prediction before the DDIM update. With guidance off (or weight
//! zero) no tape is ever constructed.

use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceTrajectory, MotionRepresentation};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_CFG_SCALE: f32 = 7.5;
pub const DEFAULT_LAMBDA: f32 = 2000.0;
/// (total steps, guided steps) preset for global camera motion.
pub const CAMERA_SCHEDULE: (usize, usize) = (100, 50);
/// (total steps, guided steps) preset for local object motion.
pub const OBJECT_SCHEDULE: (usize, usize) = (300, 180);

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(sched: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Shape {
            op: "add_noise",
            detail: format!("signal dims {:?} vs noise dims {:?}", z0.dims(), eps.dims()),
        });
    }
    let ab = sched.alpha_bar(t);
    z0.scale(ab.sqrt())?.add(&eps.scale((1.0 - ab).sqrt())?)
}

/// Deterministic DDIM update from `t` to `t_prev` (eta = 0): predict the
/// clean signal from `eps_hat`, then re-noise it to `t_prev` with the same
/// `eps_hat`.
pub fn ddim_step(
    sched: &NoiseSchedule,
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let z0_hat = z_t.sub(&eps_hat.scale((1.0 - ab_t).sqrt())?)?.scale(1.0 / ab_t.sqrt())?;
    z0_hat.scale(ab_p.sqrt())?.add(&eps_hat.scale((1.0 - ab_p).sqrt())?)
}

/// One point of a DDIM inversion trajectory.
pub struct InversionStep {
    pub t: usize,
    pub z: Tensor,
    /// Attention map of the requested block at the model evaluation that
    /// produced this latent (absent at t = 0 and when not requested).
    pub record: Option<crate::denoiser::AttentionRecord>,
}

/// Deterministic reverse-of-sampler trajectory from a clean clip up to the
/// top of an `steps`-point inference grid. Entry `k` holds the latent at
/// grid step `t_k`, ascending from `t = 0`.
pub fn ddim_invert(
    model: &Denoiser,
    sched: &NoiseSchedule,
    z0: &Tensor,
    cond: Condition,
    steps: usize,
    record_block: Option<&str>,
) -> Result<Vec<InversionStep>> {
    let mut grid = sched.inference_grid(steps)?;
    grid.reverse(); // ascending, starts at 0
    let mut out = Vec::with_capacity(grid.len());
    out.push(InversionStep { t: 0, z: z0.clone(), record: None });
    let mut z = z0.clone();
    let record_storage;
    let record: &[&str] = match record_block {
        Some(b) => {
            record_storage = [b];
            &record_storage
        }
        None => &[],
    };
    for w in grid.windows(2) {
        let (t_lo, t_hi) = (w[0], w[1]);
        let (eps_hat, mut records) = model.predict_noise(&z, cond, t_hi, record)?;
        let ab_lo = sched.alpha_bar(t_lo);
        let ab_hi = sched.alpha_bar(t_hi);
        let z0_hat = z.sub(&eps_hat.scale((1.0 - ab_lo).sqrt())?)?.scale(1.0 / ab_lo.sqrt())?;
        z = z0_hat.scale(ab_hi.sqrt())?.add(&eps_hat.scale((1.0 - ab_hi).sqrt())?)?;
        out.push(InversionStep { t: t_hi, z: z.clone(), record: records.pop() });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    Off,
    Plain,
    Primary,
    Inversion1,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::Off => "off",
            GuidanceMode::Plain => "plain",
            GuidanceMode::Primary => "primary",
            GuidanceMode::Inversion1 => "inversion_1",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(GuidanceMode::Off),
            "plain" => Ok(GuidanceMode::Plain),
            "primary" => Ok(GuidanceMode::Primary),
            "inversion_1" => Ok(GuidanceMode::Inversion1),
            _ => Err(Error::Config(format!("unknown guidance mode {s:?}"))),
        }
    }
}

/// Motion guidance source matching the sampler mode.
pub enum GuidanceInput<'a> {
    Single(&'a MotionRepresentation),
    Trajectory(&'a GuidanceTrajectory),
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guided_steps: usize,
    pub cfg_scale: f32,
    pub lambda: f32,
    pub mode: GuidanceMode,
    pub seed: u64,
    /// Optional per-guided-step multiplier on lambda (constant when absent).
    pub lambda_per_step: Option<Vec<f32>>,
}

impl SamplerConfig {
    pub fn new(steps: usize, guided_steps: usize, mode: GuidanceMode, seed: u64) -> Self {
        SamplerConfig {
            steps,
            guided_steps,
            cfg_scale: DEFAULT_CFG_SCALE,
            lambda: DEFAULT_LAMBDA,
            mode,
            seed,
            lambda_per_step: None,
        }
    }

    pub fn camera(mode: GuidanceMode, seed: u64) -> Self {
        Self::new(CAMERA_SCHEDULE.0, CAMERA_SCHEDULE.1, mode, seed)
    }

    pub fn object(mode: GuidanceMode, seed: u64) -> Self {
        Self::new(OBJECT_SCHEDULE.0, OBJECT_SCHEDULE.1, mode, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.guided_steps > self.steps {
            return Err(Error::Config(format!(
                "guided steps {} exceed total steps {}",
                self.guided_steps, self.steps
            )));
        }
        if self.cfg_scale < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("guidance weights must be non-negative".into()));
        }
        if let Some(m) = &self.lambda_per_step {
            if m.len() != self.guided_steps {
                return Err(Error::Config(format!(
                    "lambda_per_step has {} entries for {} guided steps",
                    m.len(),
                    self.guided_steps
                )));
            }
        }
        Ok(())
    }
}

/// Bookkeeping returned with every sample; used to verify the guidance-off
/// path stays tape-free.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub tapes_built: usize,
    pub guided_steps_run: usize,
    pub model_evals: usize,
}

/// Draws the seeded initial latent used by [`sample`].
pub fn initial_latent(model: &Denoiser, seed: u64) -> Tensor {
    let c = model.config();
    rng::randn(
        &[c.frames, c.channels, c.input_size, c.input_size],
        &mut rng::stream(seed, "sample-init"),
    )
}

/// Runs guided DDIM sampling and returns the clip tensor `(f, ch, h, w)`.
pub fn sample(
    model: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: Condition,
    guidance: Option<&GuidanceInput>,
) -> Result<(Tensor, SampleStats)> {
    cfg.validate()?;
    let guided_mode = cfg.mode != GuidanceMode::Off;
    let source = match (guided_mode, guidance) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} requires a motion representation",
                cfg.mode.as_str()
            )))
        }
        (true, Some(g)) => {
            validate_guidance(model, cfg.mode, g)?;
            Some(g)
        }
    };

    let grid = sched.inference_grid(cfg.steps)?;
    let mut z = initial_latent(model, cfg.seed);
    let mut stats = SampleStats::default();

    for i in 0..cfg.steps {
        let (t, t_prev) = (grid[i], grid[i + 1]);
        let multiplier = match &cfg.lambda_per_step {
            Some(m) if i < cfg.guided_steps => m[i],
            _ => 1.0,
        };
        let lambda_t = cfg.lambda * multiplier;
        let guide_now = guided_mode && i < cfg.guided_steps && lambda_t > 0.0;

        let mut eps_cond;
        let mut grad = None;
        if guide_now {
            let g = source.expect("validated above");
            let block = guidance_block(g);
            let tape = Tape::begin()?;
            stats.tapes_built += 1;
            let zw = tape.watch(z.clone());
            let (eps, recs) = model.predict_noise(&zw, cond, t, &[block])?;
            stats.model_evals += 1;
            let energy = match g {
                GuidanceInput::Single(rep) => rep.energy(&recs[0])?,
                GuidanceInput::Trajectory(traj) => traj.energy_at(t, &recs[0])?,
            };
            let mut grads = tape.backward(&energy).map_err(|e| Error::Numeric {
                context: format!("guidance gradient at step index {i} (t={t})"),
                detail: e.to_string(),
            })?;
            grad = Some(grads.take_or_zeros(&zw));
            eps_cond = eps.detach();
            stats.guided_steps_run += 1;
        } else {
            let (eps, _) = model.predict_noise(&z, cond, t, &[])?;
            stats.model_evals += 1;
            eps_cond = eps;
        }

        // classifier-free guidance; the null branch is skipped when it would
        // reproduce the conditional branch exactly
        if cfg.cfg_scale != 0.0 && cond != Condition::NULL {
            let (eps_null, _) = model.predict_noise(&z, Condition::NULL, t, &[])?;
            stats.model_evals += 1;
            let diff = eps_cond.sub(&eps_null)?;
            eps_cond = eps_cond.add(&diff.scale(cfg.cfg_scale)?)?;
        }

        if let Some(gz) = grad {
            let ab = sched.alpha_bar(t);
            let step_scale = lambda_t * (1.0 - ab).sqrt();
            eps_cond = eps_cond.sub(&gz.scale(step_scale)?).map_err(|e| Error::Numeric {
                context: format!("guidance update at step index {i} (t={t})"),
                detail: e.to_string(),
            })?;
        }

        z = ddim_step(sched, &z, &eps_cond, t, t_prev)?;
    }
    Ok((z, stats))
}

fn guidance_block<'a>(g: &'a GuidanceInput) -> &'a str {
    match g {
        GuidanceInput::Single(rep) => &rep.block,
        GuidanceInput::Trajectory(traj) => &traj.block,
    }
}

fn validate_guidance(model: &Denoiser, mode: GuidanceMode, g: &GuidanceInput) -> Result<()> {
    let (block, frames, res) = match g {
        GuidanceInput::Single(rep) => (&rep.block, rep.frames, rep.resolution),
        GuidanceInput::Trajectory(traj) => (&traj.block, traj.frames, traj.resolution),
    };
    let model_res = model.config().block_resolution(block)?;
    if frames != model.config().frames || res != model_res {
        return Err(Error::Shape {
            op: "sample",
            detail: format!(
                "representation for block {block} is {frames} frames at {res}x{res}, \
                 model expects {} frames at {model_res}x{model_res}",
                model.config().frames
            ),
        });
    }
    match (mode, g) {
        (GuidanceMode::Plain, GuidanceInput::Single(rep)) if rep.is_plain() => Ok(()),
        (GuidanceMode::Plain, GuidanceInput::Single(_)) => Err(Error::Config(
            "plain mode needs a plain (dense) representation".into(),
        )),
        (GuidanceMode::Primary, GuidanceInput::Single(_)) => Ok(()),
        (GuidanceMode::Inversion1, GuidanceInput::Trajectory(_)) => Ok(()),
        (m, _) => Err(Error::Config(format!(
            "guidance input does not match mode {}",
            m.as_str()
        ))),
    }
}
