//! Denoiser training: per-sample gradient tapes fanned out across worker
//! threads, reduced in slot order so the loss curve is identical for any
//! thread count, then an Adam update.
//!
//! Every draw (clip index, step, noise, condition dropout) derives from the
//! run seed plus the step and batch slot, never from shared RNG state.

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::add_noise;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of replacing the condition with the null token.
    pub p_uncond: f32,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1600, batch: 4, lr: 2e-3, p_uncond: 0.1, seed: 0, threads: 0 }
    }
}

/// One training example held in memory.
#[derive(Clone)]
pub struct TrainItem {
    pub clip: Tensor,
    pub class: u32,
}

/// One planned draw of a batch slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleDraw {
    pub index: usize,
    pub t: usize,
    pub cond: u32,
}

/// Deterministic plan for one step's batch; condition dropout to the null
/// token happens here.
pub fn batch_plan(
    data: &[TrainItem],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    step: usize,
) -> Vec<SampleDraw> {
    (0..cfg.batch)
        .map(|slot| {
            let mut r = rng::stream(cfg.seed, &format!("train.{step}.{slot}.draw"));
            let index = r.gen_range(0..data.len());
            let t = r.gen_range(1..=sched.total_steps());
            let cond = if r.gen::<f32>() < cfg.p_uncond { 0 } else { data[index].class };
            SampleDraw { index, t, cond }
        })
        .collect()
}

pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    /// Moving averages of the loss with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f32> {
        if self.losses.len() < window || window == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() - window + 1);
        let mut acc: f64 = self.losses[..window].iter().map(|&v| v as f64).sum();
        out.push((acc / window as f64) as f32);
        for i in window..self.losses.len() {
            acc += self.losses[i] as f64 - self.losses[i - window] as f64;
            out.push((acc / window as f64) as f32);
        }
        out
    }

    /// Fractional drop from the first moving average to the lowest one.
    pub fn drop_fraction(&self, window: usize) -> f32 {
        let ma = self.moving_average(window);
        match (ma.first(), ma.iter().copied().reduce(f32::min)) {
            (Some(&first), Some(min)) if first > 0.0 => (first - min) / first,
            _ => 0.0,
        }
    }
}

struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(model: &Denoiser, lr: f32) -> Self {
        let m = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let v = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    fn apply(&mut self, model: &mut Denoiser, grads: &[Vec<f32>]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, g) in grads.iter().enumerate() {
            let mut data = model.params()[idx].data().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            let dims = model.params()[idx].dims().to_vec();
            model.set_param(idx, Tensor::new(dims, data)?)?;
        }
        Ok(())
    }
}

/// Trains the model in place, reporting the per-step mean loss. `progress`
/// is called after every step.
pub fn train(
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    data: &[TrainItem],
    cfg: &TrainConfig,
    progress: impl Fn(usize, f32),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    let model_dims = [
        model.config().frames,
        model.config().channels,
        model.config().input_size,
        model.config().input_size,
    ];
    for (i, item) in data.iter().enumerate() {
        if item.clip.dims() != model_dims {
            return Err(Error::Shape {
                op: "train",
                detail: format!("clip {i} dims {:?} vs model dims {model_dims:?}", item.clip.dims()),
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut adam = Adam::new(model, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let plan = batch_plan(data, sched, cfg, step);
        let results: Vec<(f32, Vec<Option<Vec<f32>>>)> = pool.install(|| {
            plan.par_iter()
                .enumerate()
                .map(|(slot, draw)| {
                    sample_grad(model, sched, &data[draw.index], draw, cfg.seed, step, slot)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // reduce in slot order for thread-count-independent results
        let nparams = model.params().len();
        let mut grads: Vec<Vec<f32>> =
            model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss_acc = 0.0f64;
        for (loss, gvecs) in &results {
            loss_acc += *loss as f64;
            for idx in 0..nparams {
                if let Some(g) = &gvecs[idx] {
                    let acc = &mut grads[idx];
                    for i in 0..g.len() {
                        acc[i] += g[i];
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        let loss = (loss_acc / cfg.batch as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: format!("training step {step}"),
                detail: format!("batch losses {:?}", results.iter().map(|r| r.0).collect::<Vec<_>>()),
            });
        }
        adam.apply(model, &grads)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainReport { losses })
}

fn sample_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    item: &TrainItem,
    draw: &SampleDraw,
    seed: u64,
    step: usize,
    slot: usize,
) -> Result<(f32, Vec<Option<Vec<f32>>>)> {
    let mut r = rng::stream(seed, &format!("train.{step}.{slot}.eps"));
    let eps = rng::randn(item.clip.dims(), &mut r);
    let z_t = add_noise(sched, &item.clip, draw.t, &eps)?;
    let tape = Tape::begin()?;
    let bound = model.watch_params(&tape);
    let (pred, _) = model
        .forward(&bound, &z_t, Condition(draw.cond), draw.t, &[])
        .map_err(|e| wrap_step(e, step, slot))?;
    let loss = pred.mse(&eps)?;
    let loss_value = loss.item()?;
    let mut grads = tape.backward(&loss).map_err(|e| wrap_step(e, step, slot))?;
    let gvecs = bound
        .iter()
        .map(|b| grads.take(b).map(|t| t.data().to_vec()))
        .collect();
    Ok((loss_value, gvecs))
}

fn wrap_step(e: Error, step: usize, slot: usize) -> Error {
    Error::Numeric {
        context: format!("training step {step}, batch slot {slot}"),
        detail: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::synth::{gen_clip, random_params, MotionKind, SynthConfig, KINDS};

    fn tiny_data() -> Vec<TrainItem> {
        let cfg = SynthConfig { frames: 4, size: 8, channels: 1 };
        let mut out = Vec::new();
        for kind in KINDS {
            for seed in 0..2 {
                let mut r = crate::rng::stream(seed, "params");
                let mut p = random_params(&cfg, kind, &mut r);
                if kind == MotionKind::Translate {
                    // keep the object inside an 8px frame
                    p.object_size = 4;
                    p.speed = (1, 0);
                    p.start = (0, 2);
                }
                let (clip, _) = gen_clip(&cfg, kind, &p, seed).unwrap();
                out.push(TrainItem { clip: clip.data, class: clip.class });
            }
        }
        out
    }

    #[test]
    fn zero_p_uncond_never_emits_null_token() {
        let data = tiny_data();
        let sched = NoiseSchedule::default_linear();
        let cfg = TrainConfig { p_uncond: 0.0, batch: 8, ..Default::default() };
        for step in 0..50 {
            for draw in batch_plan(&data, &sched, &cfg, step) {
                assert_ne!(draw.cond, 0);
            }
        }
        let always = TrainConfig { p_uncond: 1.0, batch: 8, ..Default::default() };
        for draw in batch_plan(&data, &sched, &always, 0) {
            assert_eq!(draw.cond, 0);
        }
    }

    #[test]
    fn training_is_reproducible_across_thread_counts() {
        let data = tiny_data();
        let sched = NoiseSchedule::default_linear();
        let run = |threads: usize| {
            let mut model = Denoiser::init(DenoiserConfig::tiny(), 7).unwrap();
            let cfg = TrainConfig { steps: 4, batch: 4, threads, seed: 3, ..Default::default() };
            train(&mut model, &sched, &data, &cfg, |_, _| {}).unwrap().losses
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "same-seed loss curves differ"
        );
        let c = run(4);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "thread count changed the loss curve"
        );
    }

    #[test]
    fn short_training_reduces_loss_on_tiny_setup() {
        let data = tiny_data();
        let sched = NoiseSchedule::default_linear();
        let mut model = Denoiser::init(DenoiserConfig::tiny(), 1).unwrap();
        let cfg = TrainConfig { steps: 60, batch: 4, seed: 5, ..Default::default() };
        let report = train(&mut model, &sched, &data, &cfg, |_, _| {}).unwrap();
        let head: f32 = report.losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = report.losses[50..].iter().sum::<f32>() / 10.0;
        assert!(tail < head, "loss did not move: head {head}, tail {tail}");
    }

    #[test]
    fn moving_average_drop_math() {
        let losses: Vec<f32> = (0..10).map(|i| 1.0 - i as f32 * 0.05).collect();
        let report = TrainReport { losses };
        let ma = report.moving_average(5);
        assert_eq!(ma.len(), 6);
        assert!((ma[0] - 0.9).abs() < 1e-6);
        assert!(report.drop_fraction(5) > 0.2);
    }
}
