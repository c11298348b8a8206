//! Cache/reuse step schedules.
//!
//! # Compact form
//!
//! A schedule prints as three `|`-separated sections:
//!
//! ```text
//! CCCCCCCCCCCC|CR CR CR CR CR CR CR CR|CC
//! ```
//!
//! * prefix: zero or more `C`, the cache-only head of the run;
//! * window: zero or more space-separated groups, each `C` followed by
//!   zero or more `R`. The first group may instead be `R` repeated (one or
//!   more times), which happens when a decision vector starts with reuse
//!   steps that lean on the last prefix step;
//! * suffix: zero or more `C`, the trailing full-compute steps.
//!
//! Parsing rejects any other character, a schedule with no steps, and a
//! leading reuse with nothing cached before it.

use std::fmt;
use std::str::FromStr;

use blockdance_core::diffusion::StepKind;
use blockdance_core::dit::DitConfig;
use blockdance_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Static BlockDance-N schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePolicy {
    /// Inference steps `s`.
    pub steps: usize,
    /// Fraction of steps in the cache-only prefix.
    pub rho: f64,
    /// Fraction of the run at which the reuse window closes.
    pub window_end: f64,
    /// Group size `N`: one cache step then `N - 1` reuse steps.
    pub group_size: usize,
    /// 1-based block whose output is cached.
    pub cutoff: usize,
}

pub const DEFAULT_RHO: f64 = 0.40;
pub const DEFAULT_WINDOW_END: f64 = 0.95;
/// Prefix fraction for class-conditional DiT-style profiles.
pub const DIT_PROFILE_RHO: f64 = 0.25;

impl SchedulePolicy {
    /// Default window and cutoff for a model configuration.
    pub fn blockdance(cfg: &DitConfig, steps: usize, group_size: usize) -> Self {
        Self {
            steps,
            rho: DEFAULT_RHO,
            window_end: DEFAULT_WINDOW_END,
            group_size,
            cutoff: cfg.default_cutoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 <= self.rho && self.rho <= self.window_end && self.window_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= rho <= window_end <= 1, got rho={} window_end={}",
                self.rho, self.window_end
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size N must be >= 1".into()));
        }
        if self.cutoff == 0 {
            return Err(Error::Config("cutoff block is 1-based".into()));
        }
        Ok(())
    }

    /// Also checks `1 <= cutoff <= depth - 1`.
    pub fn validate_for(&self, depth: usize) -> Result<()> {
        self.validate()?;
        if self.cutoff >= depth {
            return Err(Error::Config(format!(
                "cutoff {} must be below depth {depth}",
                self.cutoff
            )));
        }
        Ok(())
    }

    pub fn prefix_steps(&self) -> usize {
        floor_steps(self.rho, self.steps)
    }

    pub fn window_end_step(&self) -> usize {
        floor_steps(self.window_end, self.steps)
    }
}

/// `⌊fraction · s⌋`, forgiving representation error just below an integer
/// (0.29 · 100 evaluates to 28.999…).
fn floor_steps(fraction: f64, steps: usize) -> usize {
    ((fraction * steps as f64) + 1e-9).floor().min(steps as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    kinds: Vec<StepKind>,
    prefix: usize,
    suffix: usize,
}

impl StepSchedule {
    /// Assembles a schedule and checks its invariants.
    pub fn from_parts(prefix: usize, window: &[StepKind], suffix: usize) -> Result<Self> {
        let mut kinds = vec![StepKind::Cache; prefix];
        kinds.extend_from_slice(window);
        kinds.extend(std::iter::repeat_n(StepKind::Cache, suffix));
        let s = Self { kinds, prefix, suffix };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        match self.kinds.first() {
            None => return Err(Error::Schedule("empty schedule".into())),
            Some(StepKind::Cache) => {}
            Some(k) => return Err(Error::Schedule(format!("first step is {k:?}, not Cache"))),
        }
        if self.kinds.contains(&StepKind::Full) {
            return Err(Error::Schedule("schedules hold only Cache and Reuse".into()));
        }
        Ok(())
    }

    pub fn kinds(&self) -> &[StepKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix
    }

    pub fn window(&self) -> &[StepKind] {
        &self.kinds[self.prefix..self.kinds.len() - self.suffix]
    }

    pub fn cache_steps(&self) -> usize {
        self.kinds.iter().filter(|&&k| k == StepKind::Cache).count()
    }

    pub fn reuse_steps(&self) -> usize {
        self.kinds.len() - self.cache_steps()
    }

    /// Index of the cache step each step draws from: itself for a cache
    /// step, the most recent earlier cache step for a reuse step.
    pub fn cache_sources(&self) -> Vec<usize> {
        let mut last = 0;
        self.kinds
            .iter()
            .enumerate()
            .map(|(k, &kind)| {
                if kind == StepKind::Cache {
                    last = k;
                }
                last
            })
            .collect()
    }

    /// Cache flags for the window, as a decision vector (`true` = Cache).
    pub fn window_actions(&self) -> Vec<bool> {
        self.window().iter().map(|&k| k == StepKind::Cache).collect()
    }
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cs = |n| "C".repeat(n);
        let mut groups: Vec<String> = Vec::new();
        for &k in self.window() {
            match (k, groups.last_mut()) {
                (StepKind::Reuse, Some(g)) => g.push('R'),
                (k, _) => groups.push(k.symbol().to_string()),
            }
        }
        write!(f, "{}|{}|{}", cs(self.prefix), groups.join(" "), cs(self.suffix))
    }
}

impl FromStr for StepSchedule {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::Schedule(format!("{why} in schedule {text:?}"));
        let parts: Vec<&str> = text.split('|').collect();
        let [prefix, window, suffix] = parts[..] else {
            return Err(bad("expected three '|'-separated sections"));
        };
        if !prefix.chars().all(|c| c == 'C') || !suffix.chars().all(|c| c == 'C') {
            return Err(bad("prefix and suffix hold only 'C'"));
        }
        let mut kinds = Vec::new();
        for (gi, group) in window.split(' ').filter(|g| !g.is_empty()).enumerate() {
            let well_formed = match group.as_bytes() {
                [b'C', rest @ ..] => rest.iter().all(|&c| c == b'R'),
                all if gi == 0 => all.iter().all(|&c| c == b'R'),
                _ => false,
            };
            if !well_formed {
                return Err(bad(&format!("malformed group {group:?}")));
            }
            kinds.extend(group.chars().map(|c| if c == 'C' { StepKind::Cache } else { StepKind::Reuse }));
        }
        if window.contains("  ") || window.starts_with(' ') || window.ends_with(' ') {
            return Err(bad("groups are separated by single spaces"));
        }
        StepSchedule::from_parts(prefix.len(), &kinds, suffix.len())
    }
}

/// Static BlockDance-N schedule.
///
/// Steps `[0, ⌊ρs⌋)` are Cache, steps from `⌊window_end·s⌋` on are Cache, and
/// the window between is cut left to right into groups of `N` whose first
/// step is Cache and the rest Reuse. A short final group keeps its Cache.
pub fn build_schedule(policy: &SchedulePolicy) -> Result<StepSchedule> {
    policy.validate()?;
    let prefix = policy.prefix_steps();
    let end = policy.window_end_step().max(prefix);
    let window: Vec<StepKind> = (0..end - prefix)
        .map(|j| {
            if j % policy.group_size == 0 {
                StepKind::Cache
            } else {
                StepKind::Reuse
            }
        })
        .collect();
    StepSchedule::from_parts(prefix, &window, policy.steps - end)
}

/// Schedule with `rho_steps` Cache steps followed by one step per action
/// (`true` = Cache, `false` = Reuse).
pub fn build_schedule_from_actions(actions: &[bool], rho_steps: usize) -> Result<StepSchedule> {
    if rho_steps == 0 {
        return Err(Error::Schedule("decision schedules need rho_steps >= 1".into()));
    }
    let window: Vec<StepKind> = actions
        .iter()
        .map(|&u| if u { StepKind::Cache } else { StepKind::Reuse })
        .collect();
    StepSchedule::from_parts(rho_steps, &window, 0)
}

/// Interval reuse over the whole run: no prefix, window to the end, groups of `N`.
pub fn deepcache_style_schedule(steps: usize, group_size: usize, cutoff: usize) -> Result<StepSchedule> {
    build_schedule(&SchedulePolicy {
        steps,
        rho: 0.0,
        window_end: 1.0,
        group_size,
        cutoff,
    })
}
