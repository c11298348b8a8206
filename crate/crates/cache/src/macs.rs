//! Closed-form MAC accounting for schedules and traces.

use blockdance_core::diffusion::{RunTrace, StepKind};
use blockdance_core::dit::{DitConfig, MacBreakdown};
use blockdance_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::engine::FeatureCacheStore;
use crate::schedule::StepSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacSummary {
    pub steps: usize,
    pub cache_steps: usize,
    pub reuse_steps: usize,
    pub full_steps: usize,
    /// Closed-form MACs of the run.
    pub total_macs: u64,
    /// MACs counted by the kernels, as recorded in the trace.
    pub instrumented_macs: u64,
    /// Closed-form MACs of the same number of full forwards.
    pub baseline_macs: u64,
    /// `1 - total / baseline`.
    pub saved_fraction: f64,
    /// Size of the feature cache entry (0 when nothing was cached).
    pub cache_bytes: usize,
}

/// Closed-form cost of one step of `kind` that evaluated `blocks` blocks.
pub fn step_macs(br: &MacBreakdown, kind: StepKind, blocks: usize) -> u64 {
    match kind {
        StepKind::Full | StepKind::Cache => br.total(blocks),
        StepKind::Reuse => br.resumed(blocks),
    }
}

/// Recomputes the cost of `trace` from its step kinds and block counts.
pub fn mac_report(trace: &RunTrace, cfg: &DitConfig) -> Result<MacSummary> {
    let br = MacBreakdown::new(cfg);
    let mut total = 0u64;
    let (mut cache, mut reuse, mut full) = (0, 0, 0);
    for rec in &trace.steps {
        let expect_blocks = match rec.kind {
            StepKind::Full | StepKind::Cache => Some(cfg.depth),
            StepKind::Reuse => None,
        };
        if expect_blocks.is_some_and(|b| b != rec.blocks_executed) || rec.blocks_executed > cfg.depth {
            return Err(Error::Format(format!(
                "step {} ({:?}) executed {} of {} blocks",
                rec.step_index, rec.kind, rec.blocks_executed, cfg.depth
            )));
        }
        match rec.kind {
            StepKind::Full => full += 1,
            StepKind::Cache => cache += 1,
            StepKind::Reuse => reuse += 1,
        }
        total += step_macs(&br, rec.kind, rec.blocks_executed);
    }
    let steps = trace.steps.len();
    Ok(summary(cfg, steps, cache, reuse, full, total, trace.total_macs()))
}

/// Cost of running `schedule` with the cache at block `cutoff`, without running it.
pub fn schedule_mac_summary(schedule: &StepSchedule, cfg: &DitConfig, cutoff: usize) -> MacSummary {
    let br = MacBreakdown::new(cfg);
    let total = schedule
        .kinds()
        .iter()
        .map(|&k| match k {
            StepKind::Reuse => step_macs(&br, k, cfg.depth - cutoff),
            _ => step_macs(&br, k, cfg.depth),
        })
        .sum();
    summary(cfg, schedule.len(), schedule.cache_steps(), schedule.reuse_steps(), 0, total, total)
}

fn summary(
    cfg: &DitConfig,
    steps: usize,
    cache: usize,
    reuse: usize,
    full: usize,
    total: u64,
    instrumented: u64,
) -> MacSummary {
    let baseline = steps as u64 * MacBreakdown::new(cfg).total(cfg.depth);
    MacSummary {
        steps,
        cache_steps: cache,
        reuse_steps: reuse,
        full_steps: full,
        total_macs: total,
        instrumented_macs: instrumented,
        baseline_macs: baseline,
        saved_fraction: if baseline == 0 { 0.0 } else { 1.0 - total as f64 / baseline as f64 },
        cache_bytes: if cache > 0 { FeatureCacheStore::entry_bytes(cfg) } else { 0 },
    }
}
