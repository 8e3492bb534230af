// Temporary diagnostic harness (not part of the library).

use mcl_core::denoiser::{checkpoint, Condition};
use mcl_core::diffusion::{add_noise, ddim_step, GuidanceInput, GuidanceMode, SamplerConfig};
use mcl_core::guidance::{extract_representation, ExtractOptions};
use mcl_core::metrics::{estimate_displacements, temporal_consistency};
use mcl_core::schedule::NoiseSchedule;
use mcl_core::synth::Dataset;
use mcl_core::tensor::Tape;
use mcl_core::{rng, Tensor};

fn norm(t: &Tensor) -> f32 {
    t.data().iter().map(|v| (v * v) as f64).sum::<f64>().sqrt() as f32
}

fn max_abs(t: &Tensor) -> f32 {
    t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let data = &args[2];
    let clip_id = &args[3];
    let lambda: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2000.0);

    let (model, _, _) = checkpoint::load(std::path::Path::new(ckpt)).unwrap();
    let sched = NoiseSchedule::default_linear();
    let ds = Dataset::load(std::path::Path::new(data)).unwrap();
    let item = ds.find(clip_id).unwrap();
    let clip = ds.load_clip(item).unwrap();

    let rep =
        extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();
    println!("rep: block {} k {} res {}", rep.block, rep.k, rep.resolution);
    let tstats = |label: &str, t: &Tensor| {
        println!(
            "  {}: norm {:.4} max {:.4} mean {:.6}",
            label,
            norm(t),
            max_abs(t),
            t.data().iter().sum::<f32>() / t.len() as f32
        );
    };
    tstats("target", &rep.target);

    // reference attention sharpness: how big is the top-1 mass typically?
    let mut sharp: Vec<f32> = rep
        .target
        .data()
        .iter()
        .copied()
        .filter(|v| *v > 0.0)
        .collect();
    sharp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "  top1 quantiles: p10 {:.3} p50 {:.3} p90 {:.3}",
        sharp[sharp.len() / 10],
        sharp[sharp.len() / 2],
        sharp[sharp.len() * 9 / 10]
    );

    // guided sampling instrumentation
    let grid = sched.inference_grid(100).unwrap();
    let mut z = rng::randn(&[8, 1, 32, 32], &mut rng::stream(3, "sample-init"));
    for i in 0..100usize {
        let (t, t_prev) = (grid[i], grid[i + 1]);
        let guided = i < 50;
        let mut eps = if guided {
            let tape = Tape::begin().unwrap();
            let zw = tape.watch(z.clone());
            let (eps, recs) = model.predict_noise(&zw, Condition::NULL, t, &["up_block.1"]).unwrap();
            let g = rep.energy(&recs[0]).unwrap();
            let gval = g.item().unwrap();
            let mut grads = tape.backward(&g).unwrap();
            let gz = grads.take_or_zeros(&zw);
            let ab = sched.alpha_bar(t);
            let scale = lambda * (1.0 - ab).sqrt();
            if i % 10 == 0 {
                println!(
                    "step {i:3} t {t:4}: energy {gval:.6} |grad| {:.6} max|grad| {:.6} scaled-max {:.3} |eps| {:.1}",
                    norm(&gz), max_abs(&gz), scale * max_abs(&gz), norm(&eps)
                );
            }
            eps.detach().sub(&gz.scale(scale).unwrap()).unwrap()
        } else {
            model.predict_noise(&z, Condition::NULL, t, &[]).unwrap().0
        };
        if !guided && i % 25 == 0 {
            println!("step {i:3} t {t:4}: |eps| {:.1}", norm(&eps));
        }
        let _ = &mut eps;
        z = ddim_step(&sched, &z, &eps, t, t_prev).unwrap();
    }
    println!("sample done: range [{:.2}, {:.2}]", z.data().iter().fold(f32::INFINITY, |m, v| m.min(*v)), z.data().iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)));
    let est = estimate_displacements(&z).unwrap();
    println!("estimated track: {:?}", est.iter().map(|e| (e.dx, e.dy)).collect::<Vec<_>>());
    println!("consistency: {:.3}", temporal_consistency(&z).unwrap());

    // what does the reference's own attention look like vs the sample's?
    let eps_probe = rng::randn(&[8, 1, 32, 32], &mut rng::stream(9, "probe"));
    let z400 = add_noise(&sched, &clip.data, 400, &eps_probe).unwrap();
    let (_, recs) = model.predict_noise(&z400, Condition::NULL, 400, &["up_block.1"]).unwrap();
    let g_self = rep.energy(&recs[0]).unwrap().item().unwrap();
    println!("energy of reference re-noised (per-frame noise): {g_self:.6}");
}
