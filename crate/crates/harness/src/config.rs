//! Run configuration: TOML on disk, environment and flag overrides, and the
//! hash that names every output file.

use std::path::{Path, PathBuf};

use blockdance_cache::schedule::{DEFAULT_RHO, DEFAULT_WINDOW_END};
use blockdance_cache::SchedulePolicy;
use blockdance_core::diffusion::BetaSchedule;
use blockdance_core::dit::DitConfig;
use blockdance_core::{Error, Result};
use blockdance_policy::QualityOracle;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub const ENV_SEED: &str = "BLOCKDANCE_SEED";
pub const ENV_OUT: &str = "BLOCKDANCE_OUT";
pub const ENV_THREADS: &str = "BLOCKDANCE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; unset uses one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: default_out(),
            threads: None,
            model: ModelSection::default(),
            sampler: SamplerSection::default(),
            schedule: ScheduleSection::default(),
            bench: BenchSection::default(),
            profile: ProfileSection::default(),
            policy: PolicySection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelProfile {
    #[default]
    Toy,
    Deep,
}

/// A named profile plus optional field overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub profile: ModelProfile,
    pub depth: Option<usize>,
    pub width: Option<usize>,
    pub tokens: Option<usize>,
    pub heads: Option<usize>,
    pub cond_dim: Option<usize>,
    pub patch: Option<usize>,
    pub channels: Option<usize>,
    pub mlp_ratio: Option<usize>,
    /// Weight-initialization seed (independent of the run seed).
    pub weights_seed: Option<u64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<DitConfig> {
        let mut cfg = match self.profile {
            ModelProfile::Toy => DitConfig::toy(),
            ModelProfile::Deep => DitConfig::deep(),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.depth, self.depth);
        set(&mut cfg.width, self.width);
        set(&mut cfg.tokens, self.tokens);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.cond_dim, self.cond_dim);
        set(&mut cfg.patch, self.patch);
        set(&mut cfg.channels, self.channels);
        set(&mut cfg.mlp_ratio, self.mlp_ratio);
        if let Some(s) = self.weights_seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default)]
    pub beta: BetaSchedule,
}

fn default_steps() -> usize {
    30
}

fn default_train_steps() -> usize {
    1000
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            eta: 0.0,
            train_steps: default_train_steps(),
            beta: BetaSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Unmodified sampler.
    Full,
    #[default]
    Blockdance,
    /// Interval reuse over the whole run.
    Deepcache,
    /// Explicit per-step decisions after the prefix.
    Actions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_window_end")]
    pub window_end: f64,
    /// 1-based cached block; unset uses the model's default.
    pub cutoff: Option<usize>,
    /// For `kind = "actions"`: one `C` (cache) or `R` (reuse) per step after the prefix.
    pub actions: Option<String>,
    /// Like `actions`, read from a file (the same letters, or a JSON array of booleans).
    pub actions_file: Option<PathBuf>,
}

fn default_group() -> usize {
    2
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_window_end() -> f64 {
    DEFAULT_WINDOW_END
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::default(),
            group_size: default_group(),
            rho: default_rho(),
            window_end: default_window_end(),
            cutoff: None,
            actions: None,
            actions_file: None,
        }
    }
}

impl ScheduleSection {
    pub fn policy(&self, model: &DitConfig, steps: usize, group_size: usize) -> SchedulePolicy {
        SchedulePolicy {
            steps,
            rho: self.rho,
            window_end: self.window_end,
            group_size,
            cutoff: self.cutoff.unwrap_or_else(|| model.default_cutoff()),
        }
    }

    /// Decisions for `kind = "actions"`, `true` = cache.
    pub fn load_actions(&self, base: &Path) -> Result<Vec<bool>> {
        let text = match (&self.actions, &self.actions_file) {
            (Some(a), None) => a.clone(),
            (None, Some(p)) => {
                let path = base.join(p);
                std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("actions file {}: {e}", path.display())))?
            }
            _ => {
                return Err(Error::Config(
                    "kind = \"actions\" needs exactly one of schedule.actions or schedule.actions_file".into(),
                ))
            }
        };
        parse_actions(&text)
    }
}

/// Accepts `CRRC...` (whitespace ignored) or a JSON array of booleans.
pub fn parse_actions(text: &str) -> Result<Vec<bool>> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| Error::Config(format!("actions array: {e}")));
    }
    t.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            'C' | 'c' => Ok(true),
            'R' | 'r' => Ok(false),
            other => Err(Error::Config(format!("action {other:?} is neither C nor R"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_group_sizes")]
    pub group_sizes: Vec<usize>,
    /// Unset runs the single run seed.
    pub seeds: Option<Vec<u64>>,
}

fn default_group_sizes() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            group_sizes: default_group_sizes(),
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    /// Block for the step×step cosine matrix and PCA; unset uses the cutoff.
    pub focus_block: Option<usize>,
    /// Steps to project; unset uses first, middle and last.
    pub pca_steps: Option<Vec<usize>>,
    #[serde(default = "default_pca_components")]
    pub pca_components: usize,
}

fn default_pca_components() -> usize {
    3
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            focus_block: None,
            pca_steps: None,
            pca_components: default_pca_components(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_oracle")]
    pub oracle: QualityOracle,
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default = "default_decay")]
    pub baseline_decay: f64,
}

fn default_instances() -> usize {
    16
}

fn default_held_out() -> usize {
    16
}

fn default_epochs() -> usize {
    100
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-5
}

fn default_lambda() -> f64 {
    2.0
}

fn default_oracle() -> QualityOracle {
    QualityOracle::Proxy
}

fn default_true() -> bool {
    true
}

fn default_decay() -> f64 {
    0.9
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            instances: default_instances(),
            held_out: default_held_out(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            lambda: default_lambda(),
            oracle: default_oracle(),
            baseline: true,
            baseline_decay: default_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// `generate`: also write the tapped features (full schedule only).
    #[serde(default)]
    pub feature_log: bool,
    /// `generate`: also write the latent after every step.
    #[serde(default)]
    pub trajectory: bool,
    /// `bench`: add a wall-clock column. Timings differ between runs.
    #[serde(default)]
    pub wall_time: bool,
}

/// Values that may come from flags or the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    /// Reads `BLOCKDANCE_SEED`, `BLOCKDANCE_OUT` and `BLOCKDANCE_THREADS`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let parse = |key: &str| -> Result<Option<u64>> {
            get(key)
                .map(|v| v.trim().parse::<u64>().map_err(|e| Error::Config(format!("{key}={v:?}: {e}"))))
                .transpose()
        };
        Ok(Self {
            seed: parse(ENV_SEED)?,
            out: get(ENV_OUT).map(PathBuf::from),
            threads: parse(ENV_THREADS)?.map(|t| t as usize),
        })
    }

    /// Fields set here win over `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        Overrides {
            seed: self.seed.or(lower.seed),
            out: self.out.or(lower.out),
            threads: self.threads.or(lower.threads),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.sampler.train_steps {
            return Err(Error::Config(format!(
                "sampler.steps {} must be in 1..={}",
                self.sampler.steps, self.sampler.train_steps
            )));
        }
        self.schedule
            .policy(&model, self.sampler.steps, self.schedule.group_size)
            .validate_for(model.depth)?;
        if self.bench.group_sizes.is_empty() || self.bench.group_sizes.contains(&0) {
            return Err(Error::Config("bench.group_sizes must be a nonempty list of N >= 1".into()));
        }
        if self.bench.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("bench.seeds must not be empty".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.profile.pca_components == 0 {
            return Err(Error::Config("profile.pca_components must be >= 1".into()));
        }
        if self.policy.instances == 0 || self.policy.held_out == 0 {
            return Err(Error::Config("policy.instances and policy.held_out must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every setting that affects results
    /// (everything except `out` and `threads`).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        canon.threads = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// First 12 hex digits of [`hash`](Self::hash).
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
