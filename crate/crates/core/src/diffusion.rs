//! Noise schedules, forward noising, DDIM updates and the sampling loop.
//!
//! The sampler does not call the model directly. Each step asks a
//! [`StepExecutor`] for ε, which lets the cache engine swap full forwards
//! for partial ones without touching the update rule.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dit::{BlockFeature, Conditioning, Model};
use crate::rng::RngStream;
use crate::{Error, Result, Tensor};

/// β family used to build a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BetaSchedule {
    Linear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine ᾱ curve with offset `s`, β capped at 0.999.
    Cosine { s: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps_train: usize, kind: BetaSchedule) -> Result<Self> {
        match kind {
            BetaSchedule::Linear { beta_start, beta_end } => {
                make_linear_schedule(steps_train, beta_start, beta_end)
            }
            BetaSchedule::Cosine { s } => make_cosine_schedule(steps_train, s),
        }
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { betas, alpha_bar }
    }

    pub fn steps_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Index(format!("timestep {t} outside 0..{}", self.alpha_bar.len()))
        })
    }

    /// ᾱ of the step after `t`; `None` is the clean end point with ᾱ = 1.
    fn alpha_bar_prev(&self, t_prev: Option<usize>) -> Result<f64> {
        t_prev.map_or(Ok(1.0), |t| self.alpha_bar(t))
    }
}

/// β linearly interpolated from `beta_start` to `beta_end`.
pub fn make_linear_schedule(steps_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps_train == 0 {
        return Err(Error::Config("steps_train must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps_train == 1 {
        vec![beta_start]
    } else {
        let span = (steps_train - 1) as f64;
        (0..steps_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    Ok(NoiseSchedule::from_betas(betas))
}

pub fn make_cosine_schedule(steps_train: usize, s: f64) -> Result<NoiseSchedule> {
    if steps_train == 0 || !(s > 0.0) {
        return Err(Error::Config(format!("bad cosine schedule ({steps_train} steps, s={s})")));
    }
    let f = |t: f64| ((t / steps_train as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let betas = (0..steps_train)
        .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-12, 0.999))
        .collect();
    Ok(NoiseSchedule::from_betas(betas))
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·ε` for a given ε.
pub fn forward_diffuse_with(z0: &Tensor, t: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension("noise shape differs from z0".into()));
    }
    Ok(Tensor::new(
        z0.shape().to_vec(),
        z0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect(),
    )?)
}

/// Samples `q(z_t | z0)`, drawing ε from `rng`.
pub fn forward_diffuse(z0: &Tensor, t: usize, sched: &NoiseSchedule, rng: &mut RngStream) -> Result<Tensor> {
    let eps = rng.gaussian(z0.shape());
    forward_diffuse_with(z0, t, sched, &eps)
}

/// One-shot clean estimate `(z_t - sqrt(1-ᾱ_t)·ε) / sqrt(ᾱ_t)`.
pub fn predict_x0(z_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Singularity(format!("alpha_bar({t}) is zero")));
    }
    if z_t.shape() != eps.shape() {
        return Err(Error::Dimension("eps shape differs from z_t".into()));
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::new(
        z_t.shape().to_vec(),
        z_t.data().iter().zip(eps.data()).map(|(z, e)| (z - sb * e) / sa).collect(),
    )?)
}

/// DDIM noise scale σ_t for the move `t -> t_prev`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: Option<usize>, eta: f64) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_prev(t_prev)?;
    Ok(eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt())
}

/// One DDIM update from `t` to `t_prev` (`None` targets the clean sample).
///
/// Draws from `rng` only when σ_t > 0; with `eta == 0` no randomness is consumed.
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut RngStream>,
) -> Result<Tensor> {
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::Config(format!("t_prev {p} must be below t {t}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    let ab_prev = sched.alpha_bar_prev(t_prev)?;
    let x0 = predict_x0(z_t, eps, t, sched)?;
    let sigma = ddim_sigma(sched, t, t_prev, eta)?;
    let mut dir_var = 1.0 - ab_prev - sigma * sigma;
    if dir_var < 0.0 {
        if dir_var > -1e-12 {
            dir_var = 0.0;
        } else {
            return Err(Error::Config(format!(
                "1 - alpha_bar_prev - sigma^2 = {dir_var} < 0 at t={t}"
            )));
        }
    }
    let (a, b) = (ab_prev.sqrt(), dir_var.sqrt());
    let mut out: Vec<f64> = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    if sigma > 0.0 {
        let rng = rng.ok_or_else(|| Error::Config("eta > 0 requires a random stream".into()))?;
        for v in out.iter_mut() {
            *v += sigma * rng.standard_normal();
        }
    }
    Tensor::new(z_t.shape().to_vec(), out)
}

/// Inference timesteps and the stochasticity of the DDIM updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    /// Strictly decreasing train timesteps, one per inference step.
    pub timesteps: Vec<usize>,
    pub eta: f64,
}

impl SamplerPlan {
    /// Uniform stride `round(j * steps_train / s)` for `j = 0..s`, descending.
    pub fn uniform(steps_train: usize, s: usize, eta: f64) -> Result<Self> {
        if s == 0 || s > steps_train {
            return Err(Error::Config(format!(
                "inference steps {s} must be in 1..={steps_train}"
            )));
        }
        let timesteps = (0..s)
            .rev()
            .map(|j| ((j * steps_train) as f64 / s as f64).round() as usize)
            .collect();
        let plan = Self { timesteps, eta };
        plan.validate(steps_train)?;
        Ok(plan)
    }

    pub fn validate(&self, steps_train: usize) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::Config("empty sampler plan".into()));
        }
        if self.timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("timesteps must strictly decrease".into()));
        }
        if self.timesteps[0] >= steps_train {
            return Err(Error::Config(format!(
                "timestep {} outside schedule of {steps_train}",
                self.timesteps[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Train timestep after inference step `k`, `None` after the last.
    pub fn prev_timestep(&self, k: usize) -> Option<usize> {
        self.timesteps.get(k + 1).copied()
    }
}

/// How a step obtained its ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Plain full forward, no caching.
    Full,
    /// Full forward that refreshes the feature cache.
    Cache,
    /// Partial forward resumed from the cached feature.
    Reuse,
}

impl StepKind {
    pub fn symbol(self) -> char {
        match self {
            StepKind::Full => 'F',
            StepKind::Cache => 'C',
            StepKind::Reuse => 'R',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step_index: usize,
    pub train_timestep: usize,
    pub kind: StepKind,
    pub blocks_executed: usize,
    pub macs: u64,
    pub wall_nanos: u64,
}

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunTrace {
    pub version: u32,
    /// Compact schedule string when the run followed a cache schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    pub steps: Vec<StepRecord>,
}

impl Default for RunTrace {
    fn default() -> Self {
        Self {
            version: TRACE_VERSION,
            schedule: None,
            steps: Vec::new(),
        }
    }
}

impl RunTrace {
    pub fn total_macs(&self) -> u64 {
        self.steps.iter().map(|s| s.macs).sum()
    }

    pub fn kinds(&self) -> Vec<StepKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// Parses and checks a trace: known version, consecutive step indices
    /// (a resumed run may start past 0),
    /// strictly decreasing timesteps.
    pub fn from_json(text: &str) -> Result<Self> {
        let trace: RunTrace =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("trace JSON: {e}")))?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            return Err(Error::Format(format!("unsupported trace version {}", self.version)));
        }
        let first = self.steps.first().map_or(0, |s| s.step_index);
        for (k, s) in self.steps.iter().enumerate() {
            if s.step_index != first + k {
                return Err(Error::Format(format!("record {k} has step_index {}", s.step_index)));
            }
        }
        if self
            .steps
            .windows(2)
            .any(|w| w[0].train_timestep <= w[1].train_timestep)
        {
            return Err(Error::Format("train timesteps must strictly decrease".into()));
        }
        Ok(())
    }
}

/// What an executor returns for one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub eps: Tensor,
    pub kind: StepKind,
    pub blocks_executed: usize,
    pub macs: u64,
    pub tapped: Vec<BlockFeature>,
}

/// Produces ε for each sampling step.
pub trait StepExecutor {
    fn predict(&mut self, step_index: usize, z_t: &Tensor, cond: &Conditioning) -> Result<StepOutput>;
}

/// Always runs the full model.
pub struct FullExecutor<'m> {
    model: &'m Model,
    taps: Vec<usize>,
}

impl<'m> FullExecutor<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, taps: Vec::new() }
    }

    pub fn with_taps(model: &'m Model, taps: Vec<usize>) -> Self {
        Self { model, taps }
    }
}

impl StepExecutor for FullExecutor<'_> {
    fn predict(&mut self, _step: usize, z_t: &Tensor, cond: &Conditioning) -> Result<StepOutput> {
        let out = self.model.forward_full(z_t, cond, &self.taps)?;
        Ok(StepOutput {
            eps: out.eps,
            kind: StepKind::Full,
            blocks_executed: out.blocks_evaluated,
            macs: out.macs,
            tapped: out.tapped,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    /// Fill `wall_nanos` in the trace. Off by default so traces are reproducible.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z0: Tensor,
    pub trace: RunTrace,
    /// Latent after each executed step.
    pub trajectory: Vec<Tensor>,
    /// Clean estimate at each executed step.
    pub x0_predictions: Vec<Tensor>,
    /// `(step_index, feature)` for every tapped block output.
    pub features: Vec<(usize, BlockFeature)>,
}

/// Runs the whole plan from `z_init` (the latent at the first timestep).
pub fn sample<E: StepExecutor + ?Sized>(
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    context: &[f64],
    executor: &mut E,
    z_init: Tensor,
    rng: &mut RngStream,
    opts: SampleOptions,
) -> Result<SampleOutput> {
    sample_range(plan, sched, context, executor, z_init, 0..plan.steps(), rng, opts)
}

/// Runs steps `range` of the plan; `z_start` is the latent at
/// `plan.timesteps[range.start]`. The returned `z0` is the latent after the
/// last step of the range, so a prefix run followed by a run of the rest
/// reproduces the whole run.
#[allow(clippy::too_many_arguments)]
pub fn sample_range<E: StepExecutor + ?Sized>(
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    context: &[f64],
    executor: &mut E,
    z_start: Tensor,
    range: Range<usize>,
    rng: &mut RngStream,
    opts: SampleOptions,
) -> Result<SampleOutput> {
    plan.validate(sched.steps_train())?;
    if range.start > range.end || range.end > plan.steps() {
        return Err(Error::Config(format!("step range {range:?} outside 0..{}", plan.steps())));
    }
    let mut z = z_start;
    let mut trace = RunTrace::default();
    let mut trajectory = Vec::with_capacity(range.len());
    let mut x0_predictions = Vec::with_capacity(range.len());
    let mut features = Vec::new();
    for k in range {
        let t = plan.timesteps[k];
        let cond = Conditioning::new(t, context.to_vec());
        let wrap = |e: Error| Error::Step {
            step: k,
            timestep: t,
            source: Box::new(e),
        };
        let clock = opts.record_wall_time.then(Instant::now);
        let out = executor.predict(k, &z, &cond).map_err(wrap)?;
        x0_predictions.push(predict_x0(&z, &out.eps, t, sched).map_err(wrap)?);
        z = ddim_step(&z, &out.eps, t, plan.prev_timestep(k), sched, plan.eta, Some(rng)).map_err(wrap)?;
        let wall_nanos = clock.map_or(0, |c| c.elapsed().as_nanos() as u64);
        trace.steps.push(StepRecord {
            step_index: k,
            train_timestep: t,
            kind: out.kind,
            blocks_executed: out.blocks_executed,
            macs: out.macs,
            wall_nanos,
        });
        features.extend(out.tapped.into_iter().map(|f| (k, f)));
        trajectory.push(z.clone());
    }
    Ok(SampleOutput {
        z0: z,
        trace,
        trajectory,
        x0_predictions,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DitConfig;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::build(1000, BetaSchedule::default()).unwrap()
    }

    #[test]
    fn linear_schedule_single_step() {
        let s = make_linear_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.7]);
    }

    #[test]
    fn linear_schedule_rejects_bad_bounds() {
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_matches_product_oracle() {
        let s = default_schedule();
        for t in 0..1000 {
            let mut prod = 1.0;
            for i in 0..=t {
                let beta = 1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0;
                prod *= 1.0 - beta;
            }
            assert!((s.alpha_bars()[t] - prod).abs() <= 1e-14, "t={t}");
        }
        assert!((s.alpha_bars()[0] - (1.0 - s.betas()[0])).abs() <= 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = make_cosine_schedule(1000, 0.008).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn forward_diffuse_fixed_noise_is_affine() {
        let s = default_schedule();
        let z0 = RngStream::new(1, 0).gaussian(&[4, 3]);
        let eps = RngStream::new(1, 1).gaussian(&[4, 3]);
        let zt = forward_diffuse_with(&z0, 400, &s, &eps).unwrap();
        let ab = s.alpha_bars()[400];
        for k in 0..12 {
            let want = ab.sqrt() * z0.data()[k] + (1.0 - ab).sqrt() * eps.data()[k];
            assert_eq!(zt.data()[k], want);
        }
        // t = 0 with beta_0 = 1e-4 barely perturbs z0.
        let z_small = forward_diffuse_with(&z0, 0, &s, &eps).unwrap();
        for k in 0..12 {
            let bound = 1e-4f64.sqrt() * eps.data()[k].abs() + (1.0 - (1.0 - 1e-4f64).sqrt()) * z0.data()[k].abs();
            assert!((z_small.data()[k] - z0.data()[k]).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn forward_diffuse_variance() {
        let s = default_schedule();
        let t = 300;
        let z0 = RngStream::new(5, 0).gaussian(&[10_000]);
        let zt = forward_diffuse(&z0, t, &s, &mut RngStream::new(5, 1)).unwrap();
        let ab = s.alpha_bars()[t];
        let resid: Vec<f64> = zt.data().iter().zip(z0.data()).map(|(a, b)| a - ab.sqrt() * b).collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!((var / (1.0 - ab) - 1.0).abs() <= 0.03, "var {var} vs {}", 1.0 - ab);
    }

    #[test]
    fn predict_x0_cases() {
        let s = default_schedule();
        let z0 = RngStream::new(2, 0).gaussian(&[3, 3]);
        let eps = RngStream::new(2, 1).gaussian(&[3, 3]);
        for t in [0, 10, 500, 999] {
            let zt = forward_diffuse_with(&z0, t, &s, &eps).unwrap();
            let x0 = predict_x0(&zt, &eps, t, &s).unwrap();
            assert!(x0.max_abs_diff(&z0).unwrap() <= 1e-10);
            let zero = predict_x0(&zt, &Tensor::zeros(&[3, 3]), t, &s).unwrap();
            let ab = s.alpha_bars()[t];
            for k in 0..9 {
                assert_eq!(zero.data()[k], zt.data()[k] / ab.sqrt());
                let want = (zt.data()[k] - (1.0 - ab).sqrt() * eps.data()[k]) / ab.sqrt();
                assert!((x0.data()[k] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ddim_zero_eps_closed_form() {
        let s = default_schedule();
        let z = RngStream::new(3, 0).gaussian(&[2, 2]);
        let out = ddim_step(&z, &Tensor::zeros(&[2, 2]), 600, Some(500), &s, 0.0, None).unwrap();
        let ratio = (s.alpha_bars()[500] / s.alpha_bars()[600]).sqrt();
        for k in 0..4 {
            assert!((out.data()[k] - ratio * z.data()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddim_is_deterministic_and_draws_nothing_at_eta_zero() {
        let s = default_schedule();
        let z = RngStream::new(4, 0).gaussian(&[2, 3]);
        let e = RngStream::new(4, 1).gaussian(&[2, 3]);
        let mut rng = RngStream::new(9, 9);
        let before = rng.counter();
        let a = ddim_step(&z, &e, 700, Some(650), &s, 0.0, Some(&mut rng)).unwrap();
        let b = ddim_step(&z, &e, 700, Some(650), &s, 0.0, Some(&mut rng)).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(rng.counter(), before);
        let noisy = ddim_step(&z, &e, 700, Some(650), &s, 1.0, Some(&mut rng)).unwrap();
        assert!(rng.counter() > before);
        assert!(!noisy.bit_eq(&a));
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let s = default_schedule();
        let z = Tensor::zeros(&[1, 1]);
        assert!(ddim_step(&z, &z, 10, Some(10), &s, 0.0, None).is_err());
    }

    // Scalar recursion for eps(z, t) = c·z: each step scales z by
    // sqrt(ab_prev/ab)·(1 - sqrt(1-ab)·c) + sqrt(1-ab_prev)·c.
    fn linear_predictor_oracle(plan: &SamplerPlan, s: &NoiseSchedule, c: f64, z: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut z = z;
        for k in 0..plan.steps() {
            let ab = s.alpha_bars()[plan.timesteps[k]];
            let ab_prev = plan.prev_timestep(k).map_or(1.0, |p| s.alpha_bars()[p]);
            let factor = (ab_prev / ab).sqrt() * (1.0 - (1.0 - ab).sqrt() * c) + (1.0 - ab_prev).sqrt() * c;
            z *= factor;
            out.push(z);
        }
        out
    }

    #[test]
    fn ddim_linear_predictor_trajectory() {
        let s = default_schedule();
        let plan = SamplerPlan::uniform(1000, 30, 0.0).unwrap();
        let c = 0.8;
        let z0 = RngStream::new(6, 0).gaussian(&[5]);
        let mut z = z0.clone();
        for k in 0..plan.steps() {
            let eps = z.scale(c);
            z = ddim_step(&z, &eps, plan.timesteps[k], plan.prev_timestep(k), &s, 0.0, None).unwrap();
            for (j, &v) in z.data().iter().enumerate() {
                let want = linear_predictor_oracle(&plan, &s, c, z0.data()[j])[k];
                assert!((v - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn uniform_plan_layout() {
        let plan = SamplerPlan::uniform(1000, 30, 0.0).unwrap();
        assert_eq!(plan.steps(), 30);
        assert_eq!(plan.timesteps[0], 967);
        assert_eq!(plan.timesteps[1], 933);
        assert_eq!(*plan.timesteps.last().unwrap(), 0);
        assert_eq!(plan.prev_timestep(29), None);
        assert!(SamplerPlan::uniform(10, 11, 0.0).is_err());
        assert!(SamplerPlan::uniform(10, 10, 0.0).is_ok());
    }

    #[test]
    fn sampler_matches_manual_loop_and_keeps_books() {
        let cfg = DitConfig { depth: 3, width: 16, tokens: 4, heads: 2, cond_dim: 8, patch: 2, channels: 1, mlp_ratio: 2, seed: 1 };
        let model = Model::init(&cfg).unwrap();
        let s = default_schedule();
        let plan = SamplerPlan::uniform(1000, 6, 0.0).unwrap();
        let ctx = RngStream::new(1, 5).gaussian(&[8]).into_data();
        let z_init = RngStream::new(1, 6).gaussian(&cfg.latent_shape());
        let mut exec = FullExecutor::new(&model);
        let mut rng = RngStream::new(0, 0);
        let run = sample(&plan, &s, &ctx, &mut exec, z_init.clone(), &mut rng, SampleOptions::default()).unwrap();

        let mut z = z_init;
        for k in 0..plan.steps() {
            let t = plan.timesteps[k];
            let eps = model.forward_full(&z, &Conditioning::new(t, ctx.clone()), &[]).unwrap().eps;
            z = ddim_step(&z, &eps, t, plan.prev_timestep(k), &s, 0.0, None).unwrap();
            assert!(z.bit_eq(&run.trajectory[k]));
        }
        assert!(z.bit_eq(&run.z0));
        assert_eq!(run.trace.steps.len(), 6);
        assert_eq!(run.trace.total_macs(), 6 * crate::dit::mac_count(&cfg, 3));
        assert!(run.trace.steps.iter().all(|r| r.kind == StepKind::Full && r.wall_nanos == 0));
        let back = RunTrace::from_json(&run.trace.to_json()).unwrap();
        assert_eq!(back, run.trace);
    }

    #[test]
    fn executor_errors_carry_step_context() {
        struct Failing;
        impl StepExecutor for Failing {
            fn predict(&mut self, _: usize, _: &Tensor, _: &Conditioning) -> Result<StepOutput> {
                Err(Error::Schedule("boom".into()))
            }
        }
        let s = default_schedule();
        let plan = SamplerPlan::uniform(1000, 3, 0.0).unwrap();
        let err = sample(&plan, &s, &[0.0; 2], &mut Failing, Tensor::zeros(&[1, 1]), &mut RngStream::new(0, 0), SampleOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Step { step: 0, timestep: 667, .. }), "{err}");
    }

    #[test]
    fn trace_validation_rejects_gaps() {
        let mut t = RunTrace::default();
        let rec = |i, t| StepRecord { step_index: i, train_timestep: t, kind: StepKind::Full, blocks_executed: 1, macs: 1, wall_nanos: 0 };
        t.steps.push(rec(1, 9));
        assert!(RunTrace::from_json(&t.to_json()).is_ok());
        t.steps.push(rec(3, 5));
        assert!(RunTrace::from_json(&t.to_json()).is_err());
        assert!(RunTrace::from_json("{\"version\":1,\"steps\":[],\"extra\":0}").is_err());
    }
}
