use latentswap::denoiser::{ConditioningSet, Denoiser, DenoiserConfig};
use latentswap::masks::{feather, AnnealSchedule, BinaryMask, FeatherParams, SoftMask};
use latentswap::numerics::{SeededRng, Tensor};
use latentswap::scheduler::{NoiseSchedule, SamplerConfig};
use latentswap::swap::{
    multi_swap, record_source, swap_generate, BlendLog, SwapPlan, SwapSchedule, RECONSTRUCTION_TOLERANCE,
};

struct Fixture {
    den: Denoiser,
    sched: NoiseSchedule,
    z0: Tensor,
    cond: ConditioningSet,
    concept: Tensor,
}

fn fixture(seed: u64, h: usize, w: usize) -> Fixture {
    let den = Denoiser::new(DenoiserConfig {
        weight_seed: seed,
        ..DenoiserConfig::default()
    })
    .unwrap();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    Fixture {
        den,
        sched: NoiseSchedule::default(),
        z0: rng.uniform_tensor(vec![h, w, 3], -1.0, 1.0),
        cond: ConditioningSet::new(rng.normal_tensor(vec![4, 16], 1.0), vec![0.0; 16]).unwrap(),
        concept: rng.normal_tensor(vec![16], 1.0),
    }
}

fn box_mask(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BinaryMask {
    BinaryMask::from_fn(h, w, |i, j| rows.contains(&i) && cols.contains(&j)).unwrap()
}

#[test]
fn source_trace_is_complete_and_deterministic() {
    let f = fixture(1, 16, 16);
    let cfg = SamplerConfig::default();
    let a = record_source(&f.den, &f.sched, &cfg, &f.z0, &f.cond, RECONSTRUCTION_TOLERANCE).unwrap();
    assert_eq!(a.latents.len(), 51);
    a.check_complete(3).unwrap();
    assert!(a.reconstruction_error <= 1e-3);
    let b = record_source(&f.den, &f.sched, &cfg, &f.z0, &f.cond, RECONSTRUCTION_TOLERANCE).unwrap();
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.trace, b.trace);
    let err = record_source(&f.den, &f.sched, &cfg, &f.z0, &f.cond, 1e-12);
    assert!(matches!(err, Err(latentswap::Error::ReconstructionTolerance { .. })));
}

#[test]
fn zero_mask_reproduces_source() {
    let f = fixture(2, 16, 16);
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let mut plan = SwapPlan::with_concept(SoftMask::from(&BinaryMask::zeros(16, 16)), &f.cond, 2, &f.concept).unwrap();
    for schedule in [SwapSchedule::default(), SwapSchedule::full(50)] {
        plan.schedule = schedule;
        let out = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
        assert_eq!(&out.z0, trace.reconstruction());
        assert_eq!(out.latents, trace.latents);
        assert_eq!(out.log, BlendLog::default());
    }
}

#[test]
fn identity_concept_reproduces_source() {
    let f = fixture(3, 16, 16);
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let mask = feather(&box_mask(16, 16, 4..10, 3..9), FeatherParams::default()).unwrap();
    let same = f.cond.tokens().row(1).to_vec();
    let plan = SwapPlan::with_concept(mask, &f.cond, 1, &Tensor::new(vec![16], same).unwrap()).unwrap();
    let out = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    assert!(out.z0.max_abs_diff(trace.reconstruction()).unwrap() <= 1e-3);
}

#[test]
fn default_schedule_blend_steps() {
    let f = fixture(4, 16, 16);
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let mask = feather(&box_mask(16, 16, 4..10, 3..9), FeatherParams::default()).unwrap();
    let plan = SwapPlan::with_concept(mask, &f.cond, 2, &f.concept).unwrap();
    let out = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    assert_eq!(out.log.z, (1..=30).collect::<Vec<_>>());
    assert_eq!(out.log.cross_map, (1..=20).collect::<Vec<_>>());
    assert_eq!(out.log.self_map, (1..=25).collect::<Vec<_>>());
    assert_eq!(out.log.self_out, (1..=10).collect::<Vec<_>>());
    assert!(out.z0.max_abs_diff(trace.reconstruction()).unwrap() > 1e-3);
}

#[test]
fn hard_mask_background_matches_source_at_every_step() {
    let f = fixture(5, 16, 24);
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let bin = box_mask(16, 24, 5..12, 8..20);
    let mut plan = SwapPlan::with_concept(SoftMask::from(&bin), &f.cond, 2, &f.concept).unwrap();
    plan.schedule.z = 50;
    plan.sampler.anneal = AnnealSchedule::new(0);
    let out = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    for (zs, zt) in out.latents.iter().zip(&trace.latents) {
        for i in 0..16 {
            for j in 0..24 {
                if bin.get(i, j) {
                    continue;
                }
                for c in 0..3 {
                    let k = (i * 24 + j) * 3 + c;
                    assert!((zs.data()[k] - zt.data()[k]).abs() <= 1e-6);
                }
            }
        }
    }
    assert!(out.z0.max_abs_diff(trace.reconstruction()).unwrap() > 1e-3);
}

#[test]
fn shape_guidance_run_changes_output() {
    let f = fixture(6, 16, 16);
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let mask = SoftMask::from(&box_mask(16, 16, 4..12, 4..12));
    let mut plan = SwapPlan::with_concept(mask, &f.cond, 2, &f.concept).unwrap();
    let plain = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    plan.sampler.shape_weight = 1.0;
    let guided = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    assert!(guided.z0.max_abs_diff(&plain.z0).unwrap() > 0.0);
}

#[test]
fn plan_validation() {
    let f = fixture(7, 8, 8);
    let m = SoftMask::from(&BinaryMask::ones(8, 8));
    assert!(SwapPlan::with_concept(m.clone(), &f.cond, 4, &f.concept).is_err());
    let other = ConditioningSet::new(Tensor::zeros(vec![4, 16]), vec![0.0; 16]).unwrap();
    assert!(SwapPlan::new(m.clone(), f.cond.clone(), other, 1..2).is_err());
    let trace = record_source(&f.den, &f.sched, &SamplerConfig::default(), &f.z0, &f.cond, 1e-3).unwrap();
    let mut plan = SwapPlan::with_concept(m, &f.cond, 0, &f.concept).unwrap();
    plan.schedule.z = 51;
    assert!(swap_generate(&f.den, &f.sched, &trace, &plan).is_err());
    let mut plan = SwapPlan::with_concept(SoftMask::from(&BinaryMask::ones(4, 8)), &f.cond, 0, &f.concept).unwrap();
    plan.schedule = SwapSchedule::default();
    assert!(swap_generate(&f.den, &f.sched, &trace, &plan).is_err());
}

#[test]
fn multi_swap_trivial_cases() {
    let f = fixture(8, 16, 16);
    let out = multi_swap(&f.den, &f.sched, &f.z0, &[], 1e-3).unwrap();
    assert_eq!(out.z0, f.z0);
    assert!(out.stages.is_empty());
    let plan = SwapPlan::with_concept(SoftMask::from(&box_mask(16, 16, 2..8, 2..8)), &f.cond, 2, &f.concept).unwrap();
    let multi = multi_swap(&f.den, &f.sched, &f.z0, std::slice::from_ref(&plan), 1e-3).unwrap();
    let trace = record_source(&f.den, &f.sched, &plan.sampler, &f.z0, &f.cond, 1e-3).unwrap();
    let single = swap_generate(&f.den, &f.sched, &trace, &plan).unwrap();
    assert_eq!(multi.z0, single.z0);
}
