//! The five subcommands. Each takes a resolved [`Context`] and returns the
//! files it wrote plus a short text summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use blockdance_cache::{
    build_schedule, build_schedule_from_actions, deepcache_style_schedule, mac_report, schedule_mac_summary,
    BlockDanceExecutor, StepSchedule,
};
use blockdance_core::diffusion::{sample, FullExecutor, NoiseSchedule, RunTrace, SampleOptions, SampleOutput, SamplerPlan};
use blockdance_core::dit::{DitConfig, Model};
use blockdance_core::{dump, Error, Result, RngStream, Tensor};
use blockdance_policy::{
    build_instances, greedy_decisions, quality_proxy, rollout_schedule, AdamConfig, DecisionNet,
    PolicyTrainer, RewardConfig, RolloutSetup, TrainConfig, TrainingInstance,
};
use blockdance_profiler::csv::{format_f64, matrix_rows, write_csv};
use blockdance_profiler::{
    cosine_matrix, l2_surface, latent_to_image, pca_project, record_features, ssim, ssim_adjacent, FeatureLog,
};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, parse_actions, RunConfig, ScheduleKind};

const CONTEXT_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const HELD_OUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Conditioning vector and initial latent for a run seed.
pub fn seed_inputs(cfg: &DitConfig, seed: u64) -> (Vec<f64>, Tensor) {
    let context = RngStream::new(seed, CONTEXT_STREAM).gaussian(&[cfg.cond_dim]).into_data();
    let z = RngStream::new(seed, LATENT_STREAM).gaussian(&cfg.latent_shape());
    (context, z)
}

/// Sampler noise for a run seed (unused when eta is 0).
pub fn noise_stream(seed: u64) -> RngStream {
    RngStream::new(seed, NOISE_STREAM)
}

/// Everything a command needs, built once from the configuration.
pub struct Context {
    pub cfg: RunConfig,
    pub dit: DitConfig,
    pub model: Model,
    pub sched: NoiseSchedule,
    pub plan: SamplerPlan,
    pub cutoff: usize,
    pub hash: String,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl Context {
    /// Validates `cfg`, inlines an actions file (so its contents enter the
    /// hash) and builds the model and sampler.
    pub fn new(mut cfg: RunConfig, base_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        if cfg.schedule.kind == ScheduleKind::Actions {
            let actions = cfg.schedule.load_actions(base_dir)?;
            cfg.schedule.actions = Some(actions.iter().map(|&a| if a { 'C' } else { 'R' }).collect());
            cfg.schedule.actions_file = None;
        }
        let dit = cfg.model.resolve()?;
        let model = Model::init(&dit)?;
        let sched = NoiseSchedule::build(cfg.sampler.train_steps, cfg.sampler.beta)?;
        let plan = SamplerPlan::uniform(cfg.sampler.train_steps, cfg.sampler.steps, cfg.sampler.eta)?;
        let cutoff = cfg.schedule.cutoff.unwrap_or_else(|| dit.default_cutoff());
        let hash = cfg.short_hash();
        Ok(Self { cfg, dit, model, sched, plan, cutoff, hash })
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.cfg.out.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn stem(&self, command: &str) -> String {
        format!("{command}-{}", self.hash)
    }

    fn rho_steps(&self) -> usize {
        self.cfg.schedule.policy(&self.dit, self.plan.steps(), 1).prefix_steps()
    }

    /// Schedule of the configured kind; `None` for the unmodified sampler.
    pub fn schedule(&self, group_size: usize) -> Result<Option<StepSchedule>> {
        let s = self.plan.steps();
        Ok(match self.cfg.schedule.kind {
            ScheduleKind::Full => None,
            ScheduleKind::Blockdance => Some(build_schedule(&self.cfg.schedule.policy(&self.dit, s, group_size))?),
            ScheduleKind::Deepcache => Some(deepcache_style_schedule(s, group_size, self.cutoff)?),
            ScheduleKind::Actions => {
                let text = self.cfg.schedule.actions.as_deref().unwrap_or_default();
                let actions = parse_actions(text)?;
                let rho = self.rho_steps();
                if rho + actions.len() != s {
                    return Err(Error::Config(format!(
                        "{} actions after a {rho}-step prefix do not cover {s} steps",
                        actions.len()
                    )));
                }
                Some(build_schedule_from_actions(&actions, rho)?)
            }
        })
    }

    fn run(&self, seed: u64, schedule: Option<&StepSchedule>, taps: Vec<usize>) -> Result<SampleOutput> {
        let (context, z) = seed_inputs(&self.dit, seed);
        let mut rng = noise_stream(seed);
        let opts = SampleOptions::default();
        let mut out = match schedule {
            None => {
                let mut exec = FullExecutor::with_taps(&self.model, taps);
                sample(&self.plan, &self.sched, &context, &mut exec, z, &mut rng, opts)?
            }
            Some(s) => {
                let mut exec = BlockDanceExecutor::new(&self.model, s.clone(), self.cutoff)?;
                sample(&self.plan, &self.sched, &context, &mut exec, z, &mut rng, opts)?
            }
        };
        out.trace.schedule = schedule.map(|s| s.to_string());
        Ok(out)
    }

    fn image(&self, latent: &Tensor) -> Result<Tensor> {
        latent_to_image(latent, self.dit.patch, self.dit.channels)
    }

    fn write_config(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}.config.json"));
        let mut canon = self.cfg.clone();
        canon.out = PathBuf::new();
        canon.threads = None;
        write_json(&path, &canon)?;
        Ok(path)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn generate(ctx: &Context) -> Result<Outcome> {
    let dir = ctx.out_dir()?;
    let stem = ctx.stem("generate");
    let schedule = ctx.schedule(ctx.cfg.schedule.group_size)?;
    let taps = if ctx.cfg.report.feature_log {
        if schedule.is_some() {
            return Err(Error::Config("report.feature_log needs schedule.kind = \"full\"".into()));
        }
        (1..=ctx.dit.depth).collect()
    } else {
        Vec::new()
    };
    let run = ctx.run(ctx.cfg.seed, schedule.as_ref(), taps)?;
    let mut artifacts = vec![ctx.write_config(&dir, &stem)?];

    let z0 = dir.join(format!("{stem}.z0.bin"));
    dump::write_tensor(&z0, &run.z0)?;
    artifacts.push(z0);
    let trace = dir.join(format!("{stem}.trace.json"));
    fs::write(&trace, run.trace.to_json() + "\n").map_err(|e| Error::io(&trace, e))?;
    artifacts.push(trace);
    if ctx.cfg.report.trajectory {
        let path = dir.join(format!("{stem}.trajectory.bin"));
        dump::write_tensor(&path, &stack(&run.trajectory)?)?;
        artifacts.push(path);
    }
    if ctx.cfg.report.feature_log {
        let log = FeatureLog::from_run(ctx.dit.depth, &run)?;
        let (bin, json) = log.write(&dir, &format!("{stem}.features"))?;
        artifacts.extend([bin, json]);
    }

    let macs = mac_report(&run.trace, &ctx.dit)?;
    let summary = format!(
        "schedule {}\ntotal_macs {}\nsaved_fraction {:.4}\n",
        run.trace.schedule.as_deref().unwrap_or("full"),
        macs.total_macs,
        macs.saved_fraction
    );
    Ok(Outcome { artifacts, summary })
}

fn stack(tensors: &[Tensor]) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| Error::Config("nothing to stack".into()))?;
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Key of a cached baseline: model, seed, sampler and noise schedule.
fn baseline_key(ctx: &Context, seed: u64) -> String {
    let key = serde_json::json!({
        "model": ctx.dit,
        "weights": ctx.model.checksum(),
        "seed": seed,
        "plan": ctx.plan,
        "train_steps": ctx.cfg.sampler.train_steps,
        "beta": ctx.cfg.sampler.beta,
    });
    hex(&Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
}

/// Full-compute output for `seed`, read from `<out>/baselines` when present.
pub fn baseline_z0(ctx: &Context, seed: u64) -> Result<Tensor> {
    let dir = ctx.out_dir()?.join("baselines");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}.z0.bin", baseline_key(ctx, seed)));
    if path.exists() {
        return dump::read_tensor(&path);
    }
    let z0 = ctx.run(seed, None, Vec::new())?.z0;
    dump::write_tensor(&path, &z0)?;
    Ok(z0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub group_size: usize,
    pub seed: u64,
    pub schedule: String,
    pub total_macs: u64,
    pub baseline_macs: u64,
    pub saved_fraction: f64,
    pub ssim: f64,
    pub wall_nanos: u64,
}

pub fn bench_rows(ctx: &Context) -> Result<Vec<BenchRow>> {
    let seeds = ctx.cfg.bench.seeds.clone().unwrap_or_else(|| vec![ctx.cfg.seed]);
    let baselines = seeds
        .iter()
        .map(|&s| ctx.image(&baseline_z0(ctx, s)?))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = ctx
        .cfg
        .bench
        .group_sizes
        .iter()
        .flat_map(|&n| (0..seeds.len()).map(move |i| (n, i)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(n, i)| {
            let schedule = ctx
                .schedule(n)?
                .ok_or_else(|| Error::Config("bench needs a cached schedule kind".into()))?;
            let clock = Instant::now();
            let run = ctx.run(seeds[i], Some(&schedule), Vec::new())?;
            let wall_nanos = clock.elapsed().as_nanos() as u64;
            let macs = mac_report(&run.trace, &ctx.dit)?;
            Ok(BenchRow {
                group_size: n,
                seed: seeds[i],
                schedule: schedule.to_string(),
                total_macs: macs.total_macs,
                baseline_macs: macs.baseline_macs,
                saved_fraction: macs.saved_fraction,
                ssim: ssim(&baselines[i], &ctx.image(&run.z0)?)?,
                wall_nanos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.group_size, r.seed));
    Ok(rows)
}

pub fn bench(ctx: &Context) -> Result<Outcome> {
    if ctx.cfg.schedule.kind == ScheduleKind::Full || ctx.cfg.schedule.kind == ScheduleKind::Actions {
        return Err(Error::Config("bench sweeps N; use schedule.kind = \"blockdance\" or \"deepcache\"".into()));
    }
    let rows = bench_rows(ctx)?;
    let dir = ctx.out_dir()?;
    let stem = ctx.stem("bench");
    let wall = ctx.cfg.report.wall_time;
    let mut cols = vec!["n", "seed", "schedule", "total_macs", "baseline_macs", "saved_fraction", "ssim"];
    if wall {
        cols.push("wall_ms");
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.group_size.to_string(),
                r.seed.to_string(),
                r.schedule.clone(),
                r.total_macs.to_string(),
                r.baseline_macs.to_string(),
                format_f64(r.saved_fraction),
                format_f64(r.ssim),
            ];
            if wall {
                row.push(format_f64(r.wall_nanos as f64 / 1e6));
            }
            row
        })
        .collect();
    let csv = dir.join(format!("{stem}.csv"));
    write_csv(&csv, &header(&cols), &table)?;
    let summary = rows
        .iter()
        .map(|r| format!("N={} seed={} saved={:.4} ssim={:.4}\n", r.group_size, r.seed, r.saved_fraction, r.ssim))
        .collect();
    Ok(Outcome { artifacts: vec![ctx.write_config(&dir, &stem)?, csv], summary })
}

/// Writes the analysis tables for `log`; `x0` (clean estimates per step)
/// adds the adjacent-step SSIM table.
pub fn write_analysis(ctx: &Context, log: &FeatureLog, x0: Option<&[Tensor]>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let surf = l2_surface(log)?;
    let mut cols = vec!["step".to_string()];
    cols.extend((1..=log.depth()).map(|b| format!("block_{b}")));
    let labels: Vec<String> = surf.steps.iter().map(|s| s.to_string()).collect();
    let path = dir.join(format!("{stem}.l2.csv"));
    write_csv(&path, &cols, &matrix_rows(&labels, &surf.values)?)?;
    files.push(path);

    let focus = ctx.cfg.profile.focus_block.unwrap_or(ctx.cutoff);
    let cos = cosine_matrix(log, focus)?;
    let mut cols = vec!["step".to_string()];
    cols.extend(cos.steps.iter().map(|s| format!("step_{s}")));
    let labels: Vec<String> = cos.steps.iter().map(|s| s.to_string()).collect();
    let path = dir.join(format!("{stem}.cosine-block{focus}.csv"));
    write_csv(&path, &cols, &matrix_rows(&labels, &cos.values)?)?;
    files.push(path);

    let steps = log.steps();
    let pca_steps = ctx.cfg.profile.pca_steps.clone().unwrap_or_else(|| {
        let mut v = vec![steps[0], steps[steps.len() / 2], steps[steps.len() - 1]];
        v.dedup();
        v
    });
    let mut summary = Vec::new();
    for &step in &pca_steps {
        let feat = log.require(step, focus)?;
        let k = ctx.cfg.profile.pca_components.min(feat.values.shape()[0]).min(feat.values.shape()[1]);
        let proj = pca_project(&feat.values, k)?;
        let kept = proj.eigenvalues.len();
        let mut cols = vec!["token".to_string()];
        cols.extend((1..=kept).map(|c| format!("pc_{c}")));
        let labels: Vec<String> = (0..proj.projected.shape()[0]).map(|t| t.to_string()).collect();
        let path = dir.join(format!("{stem}.pca-block{focus}-step{step}.csv"));
        write_csv(&path, &cols, &matrix_rows(&labels, &proj.projected)?)?;
        files.push(path);
        for (c, ev) in proj.eigenvalues.iter().enumerate() {
            summary.push(vec![
                step.to_string(),
                (c + 1).to_string(),
                format_f64(*ev),
                format_f64(ev / proj.total_variance),
            ]);
        }
    }
    let path = dir.join(format!("{stem}.pca-block{focus}.csv"));
    write_csv(&path, &header(&["step", "component", "eigenvalue", "variance_fraction"]), &summary)?;
    files.push(path);

    if let Some(x0) = x0 {
        let images = x0.iter().map(|t| ctx.image(t)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<String>> = ssim_adjacent(&images)?
            .into_iter()
            .enumerate()
            .map(|(k, v)| vec![k.to_string(), (k + 1).to_string(), format_f64(v)])
            .collect();
        let path = dir.join(format!("{stem}.ssim.csv"));
        write_csv(&path, &header(&["step", "next_step", "ssim"]), &rows)?;
        files.push(path);
    }
    Ok(files)
}

/// `from_log` re-analyzes a feature log written earlier instead of sampling.
pub fn profile(ctx: &Context, from_log: Option<&Path>) -> Result<Outcome> {
    let dir = ctx.out_dir()?;
    let stem = ctx.stem("profile");
    let mut artifacts = Vec::new();
    let (log, x0) = match from_log {
        Some(path) => {
            let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let log_stem = name.strip_suffix(".bin").unwrap_or(name);
            (FeatureLog::read(parent, log_stem)?, None)
        }
        None => {
            artifacts.push(ctx.write_config(&dir, &stem)?);
            let (context, z) = seed_inputs(&ctx.dit, ctx.cfg.seed);
            let taps = (1..=ctx.dit.depth).collect();
            let (log, run) =
                record_features(&ctx.model, &ctx.plan, &ctx.sched, &context, z, taps, &mut noise_stream(ctx.cfg.seed))?;
            let (bin, json) = log.write(&dir, &format!("{stem}.features"))?;
            artifacts.extend([bin, json]);
            (log, Some(run.x0_predictions))
        }
    };
    artifacts.extend(write_analysis(ctx, &log, x0.as_deref(), &dir, &stem)?);
    let summary = format!("{} records, {} steps, depth {}\n", log.len(), log.steps().len(), log.depth());
    Ok(Outcome { artifacts, summary })
}

/// One point of the compute/quality comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub name: String,
    pub saved_fraction: f64,
    pub quality: f64,
    pub dominated: bool,
}

fn mark_dominated(points: &mut [ParetoPoint]) {
    let snapshot: Vec<(f64, f64)> = points.iter().map(|p| (p.saved_fraction, p.quality)).collect();
    for p in points.iter_mut() {
        p.dominated = snapshot.iter().any(|&(s, q)| {
            s >= p.saved_fraction && q >= p.quality && (s > p.saved_fraction || q > p.quality)
        });
    }
}

/// Mean saved fraction and quality of per-instance schedules on `instances`.
fn evaluate(
    ctx: &Context,
    setup: &RolloutSetup<'_>,
    instances: &[TrainingInstance],
    schedules: &[StepSchedule],
) -> Result<(f64, f64)> {
    let mut saved = 0.0;
    let mut quality = 0.0;
    for (inst, s) in instances.iter().zip(schedules) {
        saved += schedule_mac_summary(s, &ctx.dit, ctx.cutoff).saved_fraction;
        let out = rollout_schedule(setup, inst, s.clone())?;
        quality += quality_proxy(&out.z0, &inst.z0_reference)?;
    }
    let n = instances.len() as f64;
    Ok((saved / n, quality / n))
}

pub fn train_policy(ctx: &Context, resume: bool) -> Result<Outcome> {
    let dir = ctx.out_dir()?;
    let stem = ctx.stem("policy");
    let p = &ctx.cfg.policy;
    let setup = RolloutSetup {
        model: &ctx.model,
        sched: &ctx.sched,
        plan: &ctx.plan,
        rho_steps: ctx.rho_steps(),
        cutoff: ctx.cutoff,
    };
    let seed = ctx.cfg.seed;
    let instances = build_instances(&setup, p.instances, seed)?;
    let held_out = build_instances(&setup, p.held_out, seed ^ HELD_OUT_SALT)?;
    let tc = TrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        adam: AdamConfig { lr: p.lr, ..Default::default() },
        reward: RewardConfig { lambda: p.lambda, oracle: p.oracle },
        baseline: p.baseline,
        baseline_decay: p.baseline_decay,
        seed,
    };
    let ckpt = dir.join(format!("{stem}.ckpt.bin"));
    let mut trainer = if resume && ckpt.exists() {
        PolicyTrainer::resume(setup, &instances, tc, &ckpt)?
    } else {
        PolicyTrainer::new(setup, &instances, DecisionNet::init(&setup.net_config(seed))?, tc)?
    };
    trainer.train(|t, _| t.save_checkpoint(&ckpt))?;
    if trainer.epoch() == 0 {
        trainer.save_checkpoint(&ckpt)?;
    }

    let mut artifacts = vec![ctx.write_config(&dir, &stem)?, ckpt.clone(), dump::manifest_path(&ckpt)];
    let curve: Vec<Vec<String>> = trainer
        .history()
        .iter()
        .map(|h| {
            vec![
                h.epoch.to_string(),
                format_f64(h.mean_reward),
                format_f64(h.mean_compute),
                h.mean_quality.map(format_f64).unwrap_or_default(),
                format_f64(h.mean_cached),
                format_f64(h.mean_prob),
            ]
        })
        .collect();
    let path = dir.join(format!("{stem}.curve.csv"));
    write_csv(&path, &header(&["epoch", "mean_R", "mean_C", "mean_Q", "mean_cached", "mean_m"]), &curve)?;
    artifacts.push(path);

    let greedy = greedy_decisions(trainer.net(), &held_out)?;
    let schedules = greedy
        .iter()
        .map(|u| build_schedule_from_actions(u, setup.rho_steps))
        .collect::<Result<Vec<_>>>()?;
    let (saved, quality) = evaluate(ctx, &setup, &held_out, &schedules)?;
    let mut points = vec![ParetoPoint { name: "policy".into(), saved_fraction: saved, quality, dominated: false }];
    for &n in &ctx.cfg.bench.group_sizes {
        let s = build_schedule(&ctx.cfg.schedule.policy(&ctx.dit, ctx.plan.steps(), n))?;
        let all = vec![s; held_out.len()];
        let (saved, quality) = evaluate(ctx, &setup, &held_out, &all)?;
        points.push(ParetoPoint { name: format!("blockdance-{n}"), saved_fraction: saved, quality, dominated: false });
    }
    mark_dominated(&mut points);
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![p.name.clone(), format_f64(p.saved_fraction), format_f64(p.quality), p.dominated.to_string()])
        .collect();
    let path = dir.join(format!("{stem}.pareto.csv"));
    write_csv(&path, &header(&["schedule", "saved_fraction", "quality", "dominated"]), &rows)?;
    artifacts.push(path);

    let last = trainer.history().last();
    let summary = format!(
        "epochs {}\nfinal mean_R {}\npolicy saved {:.4} quality {:.4}{}\n",
        trainer.epoch(),
        last.map_or("-".into(), |h| format!("{:.4}", h.mean_reward)),
        points[0].saved_fraction,
        points[0].quality,
        if points[0].dominated { " (dominated)" } else { "" }
    );
    Ok(Outcome { artifacts, summary })
}

#[derive(Debug, Serialize)]
struct TraceReport {
    steps: usize,
    kinds: String,
    schedule: Option<String>,
    total_macs: u64,
    instrumented_macs: u64,
    baseline_macs: u64,
    saved_fraction: f64,
}

pub fn inspect_trace(ctx: &Context, path: &Path, json: bool) -> Result<Outcome> {
    let invalid = |e: Error| Error::Config(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| invalid(Error::io(path, e)))?;
    let trace = RunTrace::from_json(&text).map_err(invalid)?;
    let macs = mac_report(&trace, &ctx.dit).map_err(invalid)?;
    let report = TraceReport {
        steps: trace.steps.len(),
        kinds: trace.kinds().iter().map(|k| k.symbol()).collect(),
        schedule: trace.schedule.clone(),
        total_macs: macs.total_macs,
        instrumented_macs: macs.instrumented_macs,
        baseline_macs: macs.baseline_macs,
        saved_fraction: macs.saved_fraction,
    };
    let summary = if json {
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))? + "\n"
    } else {
        format!(
            "steps {}\nkinds {}\ntotal_macs {}\ninstrumented_macs {}\nbaseline_macs {}\nsaved_fraction {}\n",
            report.steps,
            report.kinds,
            report.total_macs,
            report.instrumented_macs,
            report.baseline_macs,
            format_f64(report.saved_fraction)
        )
    };
    Ok(Outcome { artifacts: Vec::new(), summary })
}
