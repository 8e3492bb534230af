// Temporary diagnostic: finite-difference conditioning of the guidance
// energy on a briefly trained tiny model.

use mcl_core::denoiser::{Condition, Denoiser, DenoiserConfig};
use mcl_core::diffusion::add_noise;
use mcl_core::guidance::{extract_representation, ExtractOptions};
use mcl_core::schedule::NoiseSchedule;
use mcl_core::synth::{gen_clip, MotionKind, MotionParams, SynthConfig, KINDS};
use mcl_core::tensor::{Tape, Tensor};
use mcl_core::train::{train, TrainConfig, TrainItem};
use mcl_core::rng;

fn main() {
    let sched = NoiseSchedule::default_linear();
    let cfg = SynthConfig { frames: 4, size: 8, channels: 1 };
    let mut data = Vec::new();
    for kind in KINDS {
        for seed in 0..4 {
            let params = match kind {
                MotionKind::Translate => {
                    MotionParams { speed: (1, 0), object_size: 4, start: (0, 2), ..Default::default() }
                }
                _ => MotionParams { speed: (1, 0), ..Default::default() },
            };
            let (clip, _) = gen_clip(&cfg, kind, &params, seed).unwrap();
            data.push(TrainItem { clip: clip.data, class: clip.class });
        }
    }

    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    for model_seed in [0u64, 1, 2, 3] {
        let mut model = Denoiser::init(DenoiserConfig::tiny(), model_seed).unwrap();
        let tc = TrainConfig { steps, batch: 4, seed: model_seed, ..Default::default() };
        let report = train(&mut model, &sched, &data, &tc, |_, _| {}).unwrap();
        let (ref_clip, _) = gen_clip(
            &cfg,
            MotionKind::Pan,
            &MotionParams { speed: (1, 0), ..Default::default() },
            77,
        )
        .unwrap();
        let rep = extract_representation(&model, &sched, &ref_clip, &ExtractOptions::default())
            .unwrap();
        let mut sharp: Vec<f32> =
            rep.target.data().iter().copied().filter(|v| *v > 0.0).collect();
        sharp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p50 = sharp[sharp.len() / 2];

        for z_seed in [50u64, 51, 52] {
            let eps_noise = rng::randn(&[4, 1, 8, 8], &mut rng::stream(z_seed, "probe-eps"));
            let (other, _) = gen_clip(
                &cfg,
                MotionKind::Pan,
                &MotionParams { speed: (0, 1), ..Default::default() },
                z_seed,
            )
            .unwrap();
            let z = add_noise(&sched, &other.data, 400, &eps_noise).unwrap();

            let f = |zv: &Tensor| {
                let (_, recs) = model.predict_noise(zv, Condition::NULL, 400, &["up_block.1"])?;
                rep.energy(&recs[0])
            };

            // analytic
            let tape = Tape::begin().unwrap();
            let zw = tape.watch(z.clone());
            let y = f(&zw).unwrap();
            let mut grads = tape.backward(&y).unwrap();
            let analytic = grads.take_or_zeros(&zw);

            for eps in [3e-3f32, 1e-2, 2e-2] {
                let base = z.data().to_vec();
                let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
                let mut count_bad = 0;
                for i in 0..base.len() {
                    let mut plus = base.clone();
                    plus[i] += eps;
                    let mut minus = base.clone();
                    minus[i] -= eps;
                    let fp = f(&Tensor::new(z.dims().to_vec(), plus).unwrap()).unwrap().item().unwrap() as f64;
                    let fm = f(&Tensor::new(z.dims().to_vec(), minus).unwrap()).unwrap().item().unwrap() as f64;
                    let numeric = (fp - fm) / (2.0 * eps as f64);
                    let rel = (analytic.data()[i] as f64 - numeric).abs() / (numeric.abs() + 1e-8);
                    if rel > 1e-2 {
                        count_bad += 1;
                    }
                    if rel > worst.0 {
                        worst = (rel, i, analytic.data()[i] as f64, numeric);
                    }
                }
                println!(
                    "model {model_seed} (loss {:.3}, p50 {p50:.3}) z {z_seed} eps {eps}: max rel {:.2e} at coord {} (a {:.3e}, n {:.3e}); {} coords above 1e-2",
                    report.losses.last().unwrap(), worst.0, worst.1, worst.2, worst.3, count_bad
                );
            }
        }
    }
}
