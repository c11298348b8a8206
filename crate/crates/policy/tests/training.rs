use blockdance_cache::build_schedule_from_actions;
use blockdance_cache::BlockDanceExecutor;
use blockdance_core::diffusion::{sample, NoiseSchedule, SampleOptions, SamplerPlan, StepKind};
use blockdance_core::dit::{DitConfig, Model};
use blockdance_core::RngStream;
use blockdance_policy::{
    build_instances, greedy_decisions, mean_decision, rollout, AdamConfig, DecisionNet, PolicyTrainer,
    QualityOracle, RewardConfig, RolloutSetup, TrainConfig,
};

struct Fixture {
    model: Model,
    sched: NoiseSchedule,
    plan: SamplerPlan,
}

impl Fixture {
    fn new(steps: usize) -> Self {
        let cfg = DitConfig::toy();
        Self {
            model: Model::init(&cfg).unwrap(),
            sched: NoiseSchedule::build(1000, Default::default()).unwrap(),
            plan: SamplerPlan::uniform(1000, steps, 0.0).unwrap(),
        }
    }

    fn setup(&self, rho_steps: usize) -> RolloutSetup<'_> {
        RolloutSetup {
            model: &self.model,
            sched: &self.sched,
            plan: &self.plan,
            rho_steps,
            cutoff: self.model.config().default_cutoff(),
        }
    }
}

fn fast_config(epochs: usize, reward: RewardConfig) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        reward,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn rollout_from_prefix_state_matches_whole_run_and_counts_forwards() {
    let fx = Fixture::new(10);
    let setup = fx.setup(4);
    let inst = build_instances(&setup, 2, 9).unwrap();
    let cfg = fx.model.config();
    for u in [vec![true; 6], vec![false; 6], vec![true, false, false, true, false, true], vec![false, true, true, false, true, false]] {
        let out = rollout(&setup, &inst[0], &u).unwrap();
        let cached = u.iter().filter(|&&a| a).count();
        let kinds = out.trace.kinds();
        assert_eq!(kinds.iter().filter(|k| **k == StepKind::Cache).count(), cached);
        assert_eq!(kinds.iter().filter(|k| **k == StepKind::Reuse).count(), 6 - cached);
        for rec in &out.trace.steps {
            let want = if rec.kind == StepKind::Reuse { cfg.depth - setup.cutoff } else { cfg.depth };
            assert_eq!(rec.blocks_executed, want);
        }

        // Same schedule over the whole run from the initial latent: rho + Σu
        // full forwards, and the same output bit for bit.
        let schedule = build_schedule_from_actions(&u, 4).unwrap();
        let mut exec = BlockDanceExecutor::new(&fx.model, schedule, setup.cutoff).unwrap();
        let ctx = RngStream::new(9, 0x10_0000).gaussian(&[cfg.cond_dim]).into_data();
        let z = RngStream::new(9, 0x20_0000).gaussian(&cfg.latent_shape());
        let whole = sample(&fx.plan, &fx.sched, &ctx, &mut exec, z, &mut RngStream::new(0, 0), SampleOptions::default()).unwrap();
        let full = whole.trace.steps.iter().filter(|r| r.blocks_executed == cfg.depth).count();
        assert_eq!(full, 4 + cached);
        assert_eq!(whole.trace.steps.len() - full, 6 - cached);
        assert!(whole.z0.bit_eq(&out.z0));
    }
    assert!(rollout(&setup, &inst[0], &vec![true; 6]).unwrap().z0.bit_eq(&inst[0].z0_reference));
    assert!(rollout(&setup, &inst[0], &[true; 5]).unwrap_err().is_config());
}

#[test]
fn zero_lambda_training_drives_cache_count_down() {
    let fx = Fixture::new(10);
    let setup = fx.setup(4);
    let inst = build_instances(&setup, 8, 1).unwrap();
    let net = DecisionNet::init(&setup.net_config(0)).unwrap();
    let (_, before) = mean_decision(&net, &inst).unwrap();
    assert_eq!(before, 3.0);
    let reward = RewardConfig { lambda: 0.0, ..Default::default() };
    let mut trainer = PolicyTrainer::new(setup, &inst, net, fast_config(150, reward)).unwrap();
    let hist = trainer.train(|_, _| Ok(())).unwrap().to_vec();
    assert!(hist.iter().all(|h| h.mean_quality.is_none()));
    let (_, after) = mean_decision(trainer.net(), &inst).unwrap();
    assert!(after < 0.5 * before, "{after}");
    assert!(hist.last().unwrap().mean_reward > hist[0].mean_reward);
}

#[test]
fn exact_match_training_prefers_all_cache() {
    let fx = Fixture::new(8);
    let setup = fx.setup(3);
    let inst = build_instances(&setup, 8, 2).unwrap();
    let held_out = build_instances(&setup, 8, 77).unwrap();
    let net = DecisionNet::init(&setup.net_config(0)).unwrap();
    let reward = RewardConfig { lambda: 10.0, oracle: QualityOracle::ExactMatch };
    let mut trainer = PolicyTrainer::new(setup, &inst, net, fast_config(150, reward)).unwrap();
    trainer.train(|_, _| Ok(())).unwrap();
    let greedy = greedy_decisions(trainer.net(), &held_out).unwrap();
    let all_cache = greedy.iter().filter(|u| u.iter().all(|&a| a)).count();
    assert!(all_cache * 10 >= held_out.len() * 9, "{all_cache}/{}", held_out.len());
}

#[test]
fn resumed_training_is_bit_identical() {
    let fx = Fixture::new(8);
    let setup = fx.setup(4);
    let inst = build_instances(&setup, 6, 4).unwrap();
    let cfg = fast_config(6, RewardConfig::default());
    let net = DecisionNet::init(&setup.net_config(1)).unwrap();

    let mut straight = PolicyTrainer::new(setup, &inst, net.clone(), cfg.clone()).unwrap();
    straight.train(|_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("policy.bin");
    let mut first = PolicyTrainer::new(setup, &inst, net, TrainConfig { epochs: 3, ..cfg.clone() }).unwrap();
    first.train(|t, _| t.save_checkpoint(&ckpt)).unwrap();
    let mut resumed = PolicyTrainer::resume(setup, &inst, cfg.clone(), &ckpt).unwrap();
    assert_eq!(resumed.epoch(), 3);
    resumed.train(|_, _| Ok(())).unwrap();

    assert_eq!(resumed.net().params(), straight.net().params());
    assert_eq!(resumed.history(), straight.history());
    let other = TrainConfig { batch_size: 2, ..cfg };
    assert!(PolicyTrainer::resume(setup, &inst, other, &ckpt).is_err());
}

#[test]
fn invalid_training_setups_are_rejected() {
    let fx = Fixture::new(8);
    let setup = fx.setup(4);
    let inst = build_instances(&setup, 2, 4).unwrap();
    let net = DecisionNet::init(&setup.net_config(1)).unwrap();
    assert!(PolicyTrainer::new(setup, &[], net.clone(), TrainConfig::default()).is_err());
    let wrong = DecisionNet::init(&fx.setup(3).net_config(1)).unwrap();
    assert!(PolicyTrainer::new(setup, &inst, wrong, TrainConfig::default()).is_err());
    let neg = TrainConfig { reward: RewardConfig { lambda: -1.0, ..Default::default() }, ..Default::default() };
    assert!(PolicyTrainer::new(setup, &inst, net, neg).err().unwrap().is_config());
    assert!(build_instances(&fx.setup(0), 1, 0).is_err());
    assert!(build_instances(&fx.setup(8), 1, 0).is_err());
}

#[test]
fn proxy_reward_improves_over_training() {
    let fx = Fixture::new(8);
    let setup = fx.setup(3);
    let inst = build_instances(&setup, 8, 5).unwrap();
    let net = DecisionNet::init(&setup.net_config(2)).unwrap();
    let mut trainer = PolicyTrainer::new(setup, &inst, net, fast_config(100, RewardConfig::default())).unwrap();
    let hist = trainer.train(|_, _| Ok(())).unwrap();
    let window = |h: &[blockdance_policy::EpochStats]| h.iter().map(|s| s.mean_reward).sum::<f64>() / h.len() as f64;
    let (first, last) = (window(&hist[..10]), window(&hist[90..]));
    assert!(last >= first, "{first} -> {last}");
    assert!(hist.iter().all(|h| h.mean_quality.is_some_and(|q| (0.0..=1.0).contains(&q))));
}
