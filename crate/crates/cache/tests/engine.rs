use blockdance_cache::{
    build_schedule, build_schedule_from_actions, mac_report, schedule_mac_summary, BlockDanceExecutor,
    FeatureCacheStore, SchedulePolicy,
};
use blockdance_core::diffusion::{
    ddim_step, sample, sample_range, FullExecutor, NoiseSchedule, SampleOptions, SamplerPlan, StepKind,
};
use blockdance_core::dit::{BlockFeature, Conditioning, DitConfig, Model};
use blockdance_core::{RngStream, Tensor};

fn setup(cfg: &DitConfig, steps: usize) -> (Model, NoiseSchedule, SamplerPlan) {
    let model = Model::init(cfg).unwrap();
    let sched = NoiseSchedule::build(1000, Default::default()).unwrap();
    let plan = SamplerPlan::uniform(1000, steps, 0.0).unwrap();
    (model, sched, plan)
}

fn inputs(cfg: &DitConfig, seed: u64) -> (Vec<f64>, Tensor) {
    let ctx = RngStream::new(seed, 1).gaussian(&[cfg.cond_dim]).into_data();
    let z = RngStream::new(seed, 2).gaussian(&cfg.latent_shape());
    (ctx, z)
}

#[test]
fn two_phase_oracle_matches_executor_bitwise() {
    let cfg = DitConfig::toy();
    let (model, sched, plan) = setup(&cfg, 30);
    let cutoff = cfg.default_cutoff();
    let schedule = build_schedule(&SchedulePolicy::blockdance(&cfg, 30, 2)).unwrap();
    let (ctx, z_init) = inputs(&cfg, 11);

    let mut exec = BlockDanceExecutor::new(&model, schedule.clone(), cutoff).unwrap();
    let run = sample(&plan, &sched, &ctx, &mut exec, z_init.clone(), &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();

    // Explicit loop with a manual cache variable.
    let mut z = z_init;
    let mut cached: Option<Tensor> = None;
    for (k, &t) in plan.timesteps.iter().enumerate() {
        let cond = Conditioning::new(t, ctx.clone());
        let eps = match schedule.kinds()[k] {
            StepKind::Cache => {
                let out = model.forward_full(&z, &cond, &[cutoff]).unwrap();
                cached = Some(out.tapped[0].values.clone());
                out.eps
            }
            StepKind::Reuse => {
                let prepared = model.prepare(&cond).unwrap();
                let mut x = cached.clone().unwrap();
                for b in cutoff + 1..=cfg.depth {
                    x = model.run_single_block(b, &x, &prepared).unwrap().0;
                }
                model.head_from(&x, &prepared).unwrap().0
            }
            StepKind::Full => unreachable!(),
        };
        z = ddim_step(&z, &eps, t, plan.prev_timestep(k), &sched, 0.0, None).unwrap();
        assert!(z.bit_eq(&run.trajectory[k]), "step {k}");
    }
    assert!(z.bit_eq(&run.z0));
}

#[test]
fn reuse_steps_skip_exactly_the_shallow_blocks() {
    let cfg = DitConfig::toy();
    let (model, sched, plan) = setup(&cfg, 30);
    let cutoff = cfg.default_cutoff();
    let schedule = build_schedule(&SchedulePolicy::blockdance(&cfg, 30, 2)).unwrap();
    let (ctx, z_init) = inputs(&cfg, 4);
    let mut exec = BlockDanceExecutor::new(&model, schedule.clone(), cutoff).unwrap();
    let run = sample(&plan, &sched, &ctx, &mut exec, z_init, &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
    for rec in &run.trace.steps {
        let want = match rec.kind {
            StepKind::Reuse => cfg.depth - cutoff,
            _ => cfg.depth,
        };
        assert_eq!(rec.blocks_executed, want);
    }
    assert_eq!(run.trace.kinds(), schedule.kinds());
    // Each reuse read the most recent cache step.
    let sources = schedule.cache_sources();
    assert_eq!(exec.reuse_sources().len(), schedule.reuse_steps());
    for &(k, src) in exec.reuse_sources() {
        assert_eq!(src, sources[k]);
    }
}

#[test]
fn group_size_one_is_the_plain_sampler() {
    let cfg = DitConfig::toy();
    let (model, sched, plan) = setup(&cfg, 30);
    let schedule = build_schedule(&SchedulePolicy::blockdance(&cfg, 30, 1)).unwrap();
    for seed in 0..3 {
        let (ctx, z_init) = inputs(&cfg, seed);
        let base = sample(&plan, &sched, &ctx, &mut FullExecutor::new(&model), z_init.clone(), &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
        let mut exec = BlockDanceExecutor::new(&model, schedule.clone(), cfg.default_cutoff()).unwrap();
        let bd = sample(&plan, &sched, &ctx, &mut exec, z_init, &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
        assert!(base.z0.bit_eq(&bd.z0));
        for (a, b) in base.trajectory.iter().zip(&bd.trajectory) {
            assert!(a.bit_eq(b));
        }
    }
}

#[test]
fn closed_form_equals_counter_on_shallow_model() {
    let cfg = DitConfig { depth: 4, ..DitConfig::toy() };
    let (model, sched, plan) = setup(&cfg, 30);
    let (ctx, z_init) = inputs(&cfg, 8);
    let mut totals = Vec::new();
    for n in 1..=4 {
        let schedule = build_schedule(&SchedulePolicy::blockdance(&cfg, 30, n)).unwrap();
        let cutoff = cfg.default_cutoff();
        let mut exec = BlockDanceExecutor::new(&model, schedule.clone(), cutoff).unwrap();
        let run = sample(&plan, &sched, &ctx, &mut exec, z_init.clone(), &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
        let report = mac_report(&run.trace, &cfg).unwrap();
        assert_eq!(report.total_macs, report.instrumented_macs);
        assert_eq!(report, schedule_mac_summary(&schedule, &cfg, cutoff));
        totals.push(report.total_macs);
    }
    assert!(totals.windows(2).all(|w| w[1] <= w[0]), "{totals:?}");
}

#[test]
fn resumed_run_with_preloaded_store_matches_whole_run() {
    let cfg = DitConfig::toy();
    let (model, sched, plan) = setup(&cfg, 10);
    let cutoff = cfg.default_cutoff();
    let (ctx, z_init) = inputs(&cfg, 21);
    let actions = [false, true, false, false, true, false];
    let schedule = build_schedule_from_actions(&actions, 4).unwrap();
    let mut whole_exec = BlockDanceExecutor::new(&model, schedule.clone(), cutoff).unwrap();
    let whole = sample(&plan, &sched, &ctx, &mut whole_exec, z_init.clone(), &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();

    let mut full = FullExecutor::with_taps(&model, vec![cutoff]);
    let head = sample_range(&plan, &sched, &ctx, &mut full, z_init, 0..4, &mut RngStream::new(0, 0), SampleOptions::default())
        .unwrap();
    let (last_step, feature): &(usize, BlockFeature) = head.features.last().unwrap();
    let store = FeatureCacheStore::with_entry(feature.clone(), *last_step);
    let mut tail_exec = BlockDanceExecutor::with_store(&model, schedule, cutoff, store).unwrap();
    let tail = sample_range(&plan, &sched, &ctx, &mut tail_exec, head.z0.clone(), 4..10, &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
    assert!(tail.z0.bit_eq(&whole.z0));
    assert_eq!(tail.trace.steps, whole.trace.steps[4..]);
}
