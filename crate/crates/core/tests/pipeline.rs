//! Cross-module integration: extraction feeding guided sampling, sampler
//! algebra, and gradient flow from the energy to the input latent. Runs on
//! miniature untrained models; statistical quality lives in the acceptance
//! suite.

use mcl_core::denoiser::{Condition, Denoiser, DenoiserConfig};
use mcl_core::diffusion::{
    sample, GuidanceInput, GuidanceMode, SamplerConfig,
};
use mcl_core::error::Error;
use mcl_core::guidance::{
    extract_representation, extract_trajectory, ExtractOptions, NoiseMode,
};
use mcl_core::schedule::NoiseSchedule;
use mcl_core::synth::{gen_clip, MotionKind, MotionParams, SynthConfig};
use mcl_core::tensor::{finite_diff_check, Tensor};

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn tiny_model(seed: u64) -> Denoiser {
    Denoiser::init(DenoiserConfig::tiny(), seed).unwrap()
}

fn tiny_clip(kind: MotionKind, seed: u64) -> (mcl_core::synth::VideoClip, mcl_core::synth::MotionTruth) {
    let cfg = SynthConfig { frames: 4, size: 8, channels: 1 };
    let params = match kind {
        MotionKind::Translate => {
            MotionParams { speed: (1, 0), object_size: 4, start: (0, 2), ..Default::default() }
        }
        _ => MotionParams { speed: (1, 0), ..Default::default() },
    };
    gen_clip(&cfg, kind, &params, seed).unwrap()
}

#[test]
fn lambda_zero_guided_sampling_is_bitwise_unguided() {
    let model = tiny_model(1);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 2);
    let rep = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();

    for seed in 0..8u64 {
        let mut off = SamplerConfig::new(12, 6, GuidanceMode::Off, seed);
        off.cfg_scale = 7.5;
        let (a, stats_off) = sample(&model, &sched, &off, Condition(3), None).unwrap();

        let mut guided = SamplerConfig::new(12, 6, GuidanceMode::Primary, seed);
        guided.cfg_scale = 7.5;
        guided.lambda = 0.0;
        let (b, stats_guided) =
            sample(&model, &sched, &guided, Condition(3), Some(&GuidanceInput::Single(&rep)))
                .unwrap();
        assert_eq!(bits(&a), bits(&b), "seed {seed}");
        assert_eq!(stats_off.tapes_built, 0);
        // the vanished term skips the tape entirely
        assert_eq!(stats_guided.tapes_built, 0);
    }
}

#[test]
fn guided_steps_build_exactly_that_many_tapes() {
    let model = tiny_model(3);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 4);
    let rep = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();

    let cfg = SamplerConfig::new(10, 4, GuidanceMode::Primary, 5);
    let (_, stats) =
        sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Single(&rep))).unwrap();
    assert_eq!(stats.tapes_built, 4);
    assert_eq!(stats.guided_steps_run, 4);
    // 10 conditional evals (null condition skips the CFG branch)
    assert_eq!(stats.model_evals, 10);

    let off = SamplerConfig::new(10, 4, GuidanceMode::Off, 5);
    let (_, stats_off) = sample(&model, &sched, &off, Condition::NULL, None).unwrap();
    assert_eq!(stats_off.tapes_built, 0);
    assert_eq!(stats_off.guided_steps_run, 0);
}

#[test]
fn guided_sampling_is_deterministic_per_seed() {
    let model = tiny_model(6);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Rotate, 7);
    let rep = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();
    let cfg = SamplerConfig::new(8, 4, GuidanceMode::Primary, 11);
    let run = || {
        let (z, _) =
            sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Single(&rep)))
                .unwrap();
        bits(&z)
    };
    assert_eq!(run(), run());
}

#[test]
fn plain_mode_requires_plain_representation_and_vice_versa() {
    let model = tiny_model(8);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 9);
    let topk = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();
    let cfg = SamplerConfig::new(6, 3, GuidanceMode::Plain, 0);
    match sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Single(&topk))) {
        Err(Error::Config(msg)) => assert!(msg.contains("plain"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let traj = extract_trajectory(&model, &sched, &clip, 6, 3, 1, "up_block.1", Condition::NULL)
        .unwrap();
    let cfg = SamplerConfig::new(6, 3, GuidanceMode::Primary, 0);
    assert!(sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Trajectory(&traj)))
        .is_err());
}

#[test]
fn representations_are_resolution_bound() {
    let model = tiny_model(10);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 11);
    // extracted for the deep 4x4 block, offered to a sampler guiding 8x8
    let opts = ExtractOptions { block: "up_block.0".into(), ..Default::default() };
    let deep = extract_representation(&model, &sched, &clip, &opts).unwrap();
    assert_eq!(deep.resolution, 4);
    let mut shallow = deep.clone();
    shallow.block = "up_block.1".into();
    let cfg = SamplerConfig::new(6, 3, GuidanceMode::Primary, 0);
    match sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Single(&shallow))) {
        Err(Error::Shape { .. }) => {}
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn inversion_trajectory_guidance_runs_end_to_end() {
    let model = tiny_model(12);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 13);
    let traj = extract_trajectory(&model, &sched, &clip, 8, 3, 1, "up_block.1", Condition::NULL)
        .unwrap();
    let cfg = SamplerConfig::new(8, 3, GuidanceMode::Inversion1, 21);
    let (z, stats) =
        sample(&model, &sched, &cfg, Condition::NULL, Some(&GuidanceInput::Trajectory(&traj)))
            .unwrap();
    assert_eq!(stats.guided_steps_run, 3);
    assert_eq!(z.dims(), &[4, 1, 8, 8]);
}

#[test]
fn per_step_lambda_multiplier_hook_is_honored() {
    let model = tiny_model(14);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 15);
    let rep = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();

    // all-zero multipliers neutralize guidance exactly
    let mut zeroed = SamplerConfig::new(8, 4, GuidanceMode::Primary, 2);
    zeroed.lambda_per_step = Some(vec![0.0; 4]);
    let (a, stats) =
        sample(&model, &sched, &zeroed, Condition::NULL, Some(&GuidanceInput::Single(&rep)))
            .unwrap();
    assert_eq!(stats.tapes_built, 0);
    let off = SamplerConfig::new(8, 4, GuidanceMode::Off, 2);
    let (b, _) = sample(&model, &sched, &off, Condition::NULL, None).unwrap();
    assert_eq!(bits(&a), bits(&b));

    // all-one multipliers reproduce the constant-lambda path bitwise
    let mut ones = SamplerConfig::new(8, 4, GuidanceMode::Primary, 2);
    ones.lambda_per_step = Some(vec![1.0; 4]);
    let (c, _) =
        sample(&model, &sched, &ones, Condition::NULL, Some(&GuidanceInput::Single(&rep)))
            .unwrap();
    let constant = SamplerConfig::new(8, 4, GuidanceMode::Primary, 2);
    let (d, _) =
        sample(&model, &sched, &constant, Condition::NULL, Some(&GuidanceInput::Single(&rep)))
            .unwrap();
    assert_eq!(bits(&c), bits(&d));
}

#[test]
fn guidance_energy_gradient_reaches_the_latent() {
    // gradient of the masked-attention energy w.r.t. z_t is nonzero and
    // passes a scaled finite-difference check on the tiny model
    let model = tiny_model(16);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Pan, 17);
    let rep = extract_representation(&model, &sched, &clip, &ExtractOptions::default()).unwrap();
    let z = mcl_core::rng::randn(&[4, 1, 8, 8], &mut mcl_core::rng::stream(18, "z"));

    let mut f = |zv: &Tensor| {
        let (_, recs) = model.predict_noise(zv, Condition::NULL, 400, &["up_block.1"])?;
        rep.energy(&recs[0])
    };
    let err = finite_diff_check(&mut f, &z, 1e-2).unwrap();
    assert!(err < 1e-2, "guidance gradient relative error {err}");
}

#[test]
fn shared_noise_mode_tiles_frames_and_per_frame_does_not() {
    let model = tiny_model(19);
    let sched = NoiseSchedule::default_linear();
    let (clip, _) = tiny_clip(MotionKind::Static, 20);
    let shared = extract_representation(
        &model,
        &sched,
        &clip,
        &ExtractOptions { noise: NoiseMode::FrameShared, ..Default::default() },
    )
    .unwrap();
    // static clip + shared noise: uniform rows, mask picks frame 0
    for row in shared.mask.data().chunks(4) {
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
    }
    let per_frame = extract_representation(
        &model,
        &sched,
        &clip,
        &ExtractOptions { noise: NoiseMode::PerFrame, ..Default::default() },
    )
    .unwrap();
    // independent noise breaks the tie; masks differ somewhere
    assert_ne!(bits(&shared.mask), bits(&per_frame.mask));
}
