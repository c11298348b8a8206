//! Policy-gradient training of the decision network.
//!
//! Each training instance is one conditioning vector with the latent and
//! cache-store state reached after the full-compute prefix, plus the
//! full-compute output from that point on. A rollout resumes from the prefix
//! state under the sampled schedule, so only the decided steps are re-run.
//! Rollouts continue with the instance's own noise stream, which makes the
//! output a pure function of `(instance, actions)`; results are memoized on
//! that key.

use std::collections::HashMap;
use std::path::Path;

use blockdance_cache::{build_schedule_from_actions, BlockDanceExecutor, FeatureCacheStore, StepSchedule};
use blockdance_core::diffusion::{
    sample_range, FullExecutor, NoiseSchedule, SampleOptions, SampleOutput, SamplerPlan, StepKind,
};
use blockdance_core::dit::{BlockFeature, Model};
use blockdance_core::{dump, Error, Result, RngStream, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::net::{DecisionNet, DecisionNetConfig};
use crate::policy::{compute_reward, reinforce_grad, sample_actions, PolicySample, RewardConfig};

const CONTEXT_STREAM: u64 = 0x10_0000;
const LATENT_STREAM: u64 = 0x20_0000;
const PREFIX_NOISE_STREAM: u64 = 0x30_0000;
const TAIL_NOISE_STREAM: u64 = 0x40_0000;
const ACTION_STREAM: u64 = 0x50_0000_0000;
const SHUFFLE_STREAM: u64 = 0x60_0000;

/// Sampler and cache settings shared by every rollout.
#[derive(Clone, Copy)]
pub struct RolloutSetup<'a> {
    pub model: &'a Model,
    pub sched: &'a NoiseSchedule,
    pub plan: &'a SamplerPlan,
    pub rho_steps: usize,
    pub cutoff: usize,
}

impl RolloutSetup<'_> {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate(self.sched.steps_train())?;
        let s = self.plan.steps();
        if self.rho_steps == 0 || self.rho_steps >= s {
            return Err(Error::Config(format!("rho_steps {} must be in 1..{s}", self.rho_steps)));
        }
        if self.cutoff == 0 || self.cutoff >= self.model.depth() {
            return Err(Error::Config(format!("cutoff {} outside 1..{}", self.cutoff, self.model.depth())));
        }
        Ok(())
    }

    pub fn actions(&self) -> usize {
        self.plan.steps() - self.rho_steps
    }

    /// Decision network shaped for this setup.
    pub fn net_config(&self, seed: u64) -> DecisionNetConfig {
        let cfg = self.model.config();
        DecisionNetConfig::standard(cfg.tokens, cfg.in_dim(), cfg.cond_dim, self.actions(), seed)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub context: Vec<f64>,
    /// Latent after the prefix.
    pub z_rho: Tensor,
    /// Cutoff-block output of the last prefix step.
    pub prefix_feature: BlockFeature,
    pub source_step: usize,
    /// Full-compute output continuing from `z_rho`.
    pub z0_reference: Tensor,
    /// Noise for the steps after the prefix (unused when eta is 0).
    pub tail_noise: RngStream,
}

/// Builds `count` instances from seeded contexts and initial latents.
pub fn build_instances(setup: &RolloutSetup<'_>, count: usize, seed: u64) -> Result<Vec<TrainingInstance>> {
    setup.validate()?;
    let cfg = setup.model.config();
    (0..count as u64)
        .map(|i| {
            let context = RngStream::new(seed, CONTEXT_STREAM + i).gaussian(&[cfg.cond_dim]).into_data();
            let z_init = RngStream::new(seed, LATENT_STREAM + i).gaussian(&cfg.latent_shape());
            let mut exec = FullExecutor::with_taps(setup.model, vec![setup.cutoff]);
            let mut noise = RngStream::new(seed, PREFIX_NOISE_STREAM + i);
            let head = sample_range(
                setup.plan,
                setup.sched,
                &context,
                &mut exec,
                z_init,
                0..setup.rho_steps,
                &mut noise,
                SampleOptions::default(),
            )?;
            let (source_step, prefix_feature) = head
                .features
                .into_iter()
                .last()
                .ok_or_else(|| Error::Completeness("prefix produced no cutoff feature".into()))?;
            let tail_noise = RngStream::new(seed, TAIL_NOISE_STREAM + i);
            let reference = sample_range(
                setup.plan,
                setup.sched,
                &context,
                &mut FullExecutor::new(setup.model),
                head.z0.clone(),
                setup.rho_steps..setup.plan.steps(),
                &mut tail_noise.clone(),
                SampleOptions::default(),
            )?;
            Ok(TrainingInstance {
                context,
                z_rho: head.z0,
                prefix_feature,
                source_step,
                z0_reference: reference.z0,
                tail_noise,
            })
        })
        .collect()
}

/// Runs the decided steps of one instance under `actions` (`true` = cache).
pub fn rollout(setup: &RolloutSetup<'_>, inst: &TrainingInstance, actions: &[bool]) -> Result<SampleOutput> {
    if actions.len() != setup.actions() {
        return Err(Error::Config(format!("{} actions for {} decided steps", actions.len(), setup.actions())));
    }
    rollout_schedule(setup, inst, build_schedule_from_actions(actions, setup.rho_steps)?)
}

/// Runs steps `rho_steps..s` of `schedule` from the instance's prefix state.
/// The schedule must cover all `s` steps and cache on every prefix step.
pub fn rollout_schedule(setup: &RolloutSetup<'_>, inst: &TrainingInstance, schedule: StepSchedule) -> Result<SampleOutput> {
    if schedule.len() != setup.plan.steps() {
        return Err(Error::Config(format!("schedule has {} steps, plan has {}", schedule.len(), setup.plan.steps())));
    }
    if schedule.kinds()[..setup.rho_steps].iter().any(|&k| k != StepKind::Cache) {
        return Err(Error::Config(format!("schedule does not cache on the first {} steps", setup.rho_steps)));
    }
    let store = FeatureCacheStore::with_entry(inst.prefix_feature.clone(), inst.source_step);
    let mut exec = BlockDanceExecutor::with_store(setup.model, schedule, setup.cutoff, store)?;
    sample_range(
        setup.plan,
        setup.sched,
        &inst.context,
        &mut exec,
        inst.z_rho.clone(),
        setup.rho_steps..setup.plan.steps(),
        &mut inst.tail_noise.clone(),
        SampleOptions::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub reward: RewardConfig,
    /// Subtract a moving average of past batch rewards.
    pub baseline: bool,
    pub baseline_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            reward: RewardConfig::default(),
            baseline: true,
            baseline_decay: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline_decay {} outside [0, 1)", self.baseline_decay)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// Means over every rollout of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_compute: f64,
    /// `None` when `lambda == 0`: the quality term is then not scored.
    pub mean_quality: Option<f64>,
    /// Mean number of cache actions per rollout.
    pub mean_cached: f64,
    /// Mean cache probability over all decided steps.
    pub mean_prob: f64,
}

/// Mean cache probability and mean expected cache count of `net` over `instances`.
pub fn mean_decision(net: &DecisionNet, instances: &[TrainingInstance]) -> Result<(f64, f64)> {
    let mut total = 0.0;
    for inst in instances {
        total += net.decide(&inst.z_rho, &inst.context)?.iter().sum::<f64>();
    }
    let a = net.config().actions as f64;
    let n = instances.len().max(1) as f64;
    Ok((total / (n * a), total / n))
}

pub struct PolicyTrainer<'a> {
    setup: RolloutSetup<'a>,
    instances: &'a [TrainingInstance],
    cfg: TrainConfig,
    net: DecisionNet,
    opt: Adam,
    baseline: Option<f64>,
    epoch: usize,
    history: Vec<EpochStats>,
    quality_memo: HashMap<(usize, Vec<bool>), f64>,
}

impl<'a> PolicyTrainer<'a> {
    pub fn new(
        setup: RolloutSetup<'a>,
        instances: &'a [TrainingInstance],
        net: DecisionNet,
        cfg: TrainConfig,
    ) -> Result<Self> {
        setup.validate()?;
        cfg.validate()?;
        if instances.is_empty() {
            return Err(Error::Config("policy training needs at least one instance".into()));
        }
        if net.config().actions != setup.actions() {
            return Err(Error::Config(format!(
                "network emits {} decisions, schedule has {}",
                net.config().actions,
                setup.actions()
            )));
        }
        let opt = Adam::new(cfg.adam, net.num_params());
        Ok(Self {
            setup,
            instances,
            cfg,
            net,
            opt,
            baseline: None,
            epoch: 0,
            history: Vec::new(),
            quality_memo: HashMap::new(),
        })
    }

    pub fn net(&self) -> &DecisionNet {
        &self.net
    }

    pub fn into_net(self) -> DecisionNet {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// Trains until `cfg.epochs` epochs are done, calling `on_epoch` after each.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Self, &EpochStats) -> Result<()>) -> Result<&[EpochStats]> {
        while self.epoch < self.cfg.epochs {
            let stats = self.run_epoch()?;
            on_epoch(self, &stats)?;
        }
        Ok(&self.history)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let n = self.instances.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = RngStream::new(self.cfg.seed, SHUFFLE_STREAM + self.epoch as u64);
        for i in (1..n).rev() {
            let j = (shuffle.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let (mut sum_r, mut sum_c, mut sum_q, mut sum_u, mut sum_m) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let first = self.epoch * n + b * self.cfg.batch_size;
            let stats = self.run_batch(chunk, first as u64)?;
            sum_r += stats[0];
            sum_c += stats[1];
            sum_q += stats[2];
            sum_u += stats[3];
            sum_m += stats[4];
        }
        let nf = n as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_reward: sum_r / nf,
            mean_compute: sum_c / nf,
            mean_quality: (self.cfg.reward.lambda > 0.0).then_some(sum_q / nf),
            mean_cached: sum_u / nf,
            mean_prob: sum_m / (nf * self.setup.actions() as f64),
        };
        log::info!(
            "epoch {} R={:.4} C={:.4} cached={:.3}",
            stats.epoch,
            stats.mean_reward,
            stats.mean_compute,
            stats.mean_cached
        );
        self.epoch += 1;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Returns batch sums of `[R, C, Q, Σu, Σm]`.
    fn run_batch(&mut self, items: &[usize], first_rollout: u64) -> Result<[f64; 5]> {
        let mut decided = Vec::with_capacity(items.len());
        let mut sum_m = 0.0;
        for (k, &i) in items.iter().enumerate() {
            let inst = &self.instances[i];
            let m = self.net.decide(&inst.z_rho, &inst.context)?;
            sum_m += m.iter().sum::<f64>();
            let mut rng = RngStream::new(self.cfg.seed, ACTION_STREAM + first_rollout + k as u64);
            decided.push((i, sample_actions(&m, &mut rng)));
        }

        let reward_cfg = self.cfg.reward;
        if reward_cfg.lambda > 0.0 {
            let mut missing: Vec<(usize, Vec<bool>)> = Vec::new();
            for key in &decided {
                if !self.quality_memo.contains_key(key) && !missing.contains(key) {
                    missing.push(key.clone());
                }
            }
            let setup = self.setup;
            let instances = self.instances;
            let scored: Vec<Result<f64>> = missing
                .par_iter()
                .map(|(i, u)| {
                    let inst = &instances[*i];
                    let out = rollout(&setup, inst, u)?;
                    reward_cfg.oracle.score(&out.z0, &inst.z0_reference)
                })
                .collect();
            for (key, q) in missing.into_iter().zip(scored) {
                self.quality_memo.insert(key, q?);
            }
        }

        let mut sums = [0.0, 0.0, 0.0, 0.0, sum_m];
        let mut batch = Vec::with_capacity(decided.len());
        for (i, u) in &decided {
            let q = if reward_cfg.lambda > 0.0 { self.quality_memo[&(*i, u.clone())] } else { 0.0 };
            let r = compute_reward(u, q, &reward_cfg);
            sums[0] += r.total;
            sums[1] += r.compute;
            sums[2] += r.quality;
            sums[3] += u.iter().filter(|&&a| a).count() as f64;
            let inst = &self.instances[*i];
            batch.push(PolicySample {
                z_rho: &inst.z_rho,
                context: &inst.context,
                actions: u.clone(),
                reward: r.total,
            });
        }
        let b = if self.cfg.baseline { self.baseline.unwrap_or(0.0) } else { 0.0 };
        let grad = reinforce_grad(&self.net, &batch, b)?;
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.opt.step(self.net.params_mut(), &descent);
        if let Some(bad) = self.net.params().iter().position(|p| !p.is_finite()) {
            let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            return Err(Error::Training(format!(
                "parameter {bad} diverged in epoch {} (max |grad| {gmax:e}, baseline {b})",
                self.epoch
            )));
        }
        let mean_r = sums[0] / decided.len() as f64;
        let d = self.cfg.baseline_decay;
        self.baseline = Some(match self.baseline {
            None => mean_r,
            Some(prev) => d * prev + (1.0 - d) * mean_r,
        });
        Ok(sums)
    }

    /// Writes network weights, optimizer moments and progress.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut named = self.net.named_tensors()?;
        let n = self.net.num_params();
        named.push(("adam.m".into(), Tensor::new(vec![n], self.opt.m.clone())?));
        named.push(("adam.v".into(), Tensor::new(vec![n], self.opt.v.clone())?));
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(k, t)| (k.clone(), t)).collect();
        let meta = serde_json::json!({
            "net": self.net.config(),
            "train": self.cfg,
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "baseline": self.baseline,
            "history": self.history,
        });
        dump::write_checkpoint(path, &refs, meta)?;
        Ok(())
    }

    /// Restores a trainer saved by [`save_checkpoint`](Self::save_checkpoint).
    /// `cfg` may raise `epochs`; every other setting must match the checkpoint.
    pub fn resume(
        setup: RolloutSetup<'a>,
        instances: &'a [TrainingInstance],
        cfg: TrainConfig,
        path: &Path,
    ) -> Result<Self> {
        let (manifest, mut tensors) = dump::read_checkpoint(path)?;
        let meta = &manifest.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let parse = |e: serde_json::Error| Error::Format(format!("policy checkpoint: {e}"));
        let net_cfg: DecisionNetConfig = serde_json::from_value(field("net")?).map_err(parse)?;
        let saved: TrainConfig = serde_json::from_value(field("train")?).map_err(parse)?;
        if (TrainConfig { epochs: cfg.epochs, ..saved }) != cfg {
            return Err(Error::Config("resume settings differ from the checkpoint".into()));
        }
        if tensors.len() < 2 {
            return Err(Error::Format("checkpoint lacks optimizer state".into()));
        }
        let v = tensors.pop().expect("len checked").1.into_data();
        let m = tensors.pop().expect("len checked").1.into_data();
        let net = DecisionNet::from_named(&net_cfg, &tensors)?;
        if m.len() != net.num_params() || v.len() != net.num_params() {
            return Err(Error::Format("optimizer state does not match the network".into()));
        }
        let mut trainer = Self::new(setup, instances, net, cfg)?;
        trainer.opt.m = m;
        trainer.opt.v = v;
        trainer.opt.t = serde_json::from_value(field("adam_t")?).map_err(parse)?;
        trainer.epoch = serde_json::from_value(field("epoch")?).map_err(parse)?;
        trainer.baseline = serde_json::from_value(field("baseline")?).map_err(parse)?;
        trainer.history = serde_json::from_value(field("history")?).map_err(parse)?;
        Ok(trainer)
    }
}

/// Greedy decisions of `net` for every instance.
pub fn greedy_decisions(net: &DecisionNet, instances: &[TrainingInstance]) -> Result<Vec<Vec<bool>>> {
    instances
        .iter()
        .map(|inst| Ok(crate::policy::greedy_actions(&net.decide(&inst.z_rho, &inst.context)?)))
        .collect()
}
