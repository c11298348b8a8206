//! Feature store and the executor that runs a schedule.

use blockdance_core::diffusion::{StepExecutor, StepKind, StepOutput};
use blockdance_core::dit::{BlockFeature, Conditioning, DitConfig, Model};
use blockdance_core::{Error, Result, Tensor};

use crate::schedule::StepSchedule;

/// Single-slot store holding the cutoff block's output from the latest cache step.
#[derive(Debug, Clone, Default)]
pub struct FeatureCacheStore {
    entry: Option<BlockFeature>,
    source_step: Option<usize>,
}

impl FeatureCacheStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store preloaded with an entry, e.g. the last prefix cache of a run
    /// that is resumed mid-way.
    pub fn with_entry(feature: BlockFeature, source_step: usize) -> Self {
        Self {
            entry: Some(feature),
            source_step: Some(source_step),
        }
    }

    pub fn entry(&self) -> Option<&BlockFeature> {
        self.entry.as_ref()
    }

    /// Step index of the cache step that filled the slot.
    pub fn source_step(&self) -> Option<usize> {
        self.source_step
    }

    /// Replaces the entry; the previous one is dropped.
    pub fn update(&mut self, feature: BlockFeature, step: usize) {
        self.entry = Some(feature);
        self.source_step = Some(step);
    }

    pub fn clear(&mut self) {
        self.entry = None;
        self.source_step = None;
    }

    /// Bytes held by the live entry.
    pub fn bytes(&self) -> usize {
        self.entry.as_ref().map_or(0, |e| e.values.len() * std::mem::size_of::<f64>())
    }

    /// Size of one entry for `cfg`: `T · d · 8`.
    pub fn entry_bytes(cfg: &DitConfig) -> usize {
        cfg.tokens * cfg.width * std::mem::size_of::<f64>()
    }
}

/// Runs one step of kind `kind`, updating `store` on cache steps.
///
/// Cache steps run the full model and keep block `cutoff`'s output. Reuse
/// steps resume from the stored feature under `cond` (the current step's
/// conditioning) and leave the store alone. Full steps bypass the store.
pub fn execute_step(
    kind: StepKind,
    model: &Model,
    z_t: &Tensor,
    cond: &Conditioning,
    cutoff: usize,
    store: &mut FeatureCacheStore,
    step_index: usize,
) -> Result<StepOutput> {
    let out = match kind {
        StepKind::Full => model.forward_full(z_t, cond, &[])?,
        StepKind::Cache => {
            let mut out = model.forward_full(z_t, cond, &[cutoff])?;
            let feature = out
                .tapped
                .pop()
                .ok_or_else(|| Error::Index(format!("block {cutoff} was not tapped")))?;
            store.update(feature, step_index);
            out
        }
        StepKind::Reuse => {
            let entry = store.entry().ok_or_else(|| {
                Error::Schedule(format!("reuse at step {step_index} with an empty feature cache"))
            })?;
            model.forward_from_block(entry, cond)?
        }
    };
    Ok(StepOutput {
        eps: out.eps,
        kind,
        blocks_executed: out.blocks_evaluated,
        macs: out.macs,
        tapped: Vec::new(),
    })
}

/// [`StepExecutor`] that follows a [`StepSchedule`].
pub struct BlockDanceExecutor<'m> {
    model: &'m Model,
    schedule: StepSchedule,
    cutoff: usize,
    store: FeatureCacheStore,
    reuse_sources: Vec<(usize, usize)>,
}

impl<'m> BlockDanceExecutor<'m> {
    pub fn new(model: &'m Model, schedule: StepSchedule, cutoff: usize) -> Result<Self> {
        Self::with_store(model, schedule, cutoff, FeatureCacheStore::new())
    }

    pub fn with_store(
        model: &'m Model,
        schedule: StepSchedule,
        cutoff: usize,
        store: FeatureCacheStore,
    ) -> Result<Self> {
        if cutoff == 0 || cutoff >= model.depth() {
            return Err(Error::Config(format!(
                "cutoff {cutoff} outside 1..={}",
                model.depth() - 1
            )));
        }
        if let Some(e) = store.entry() {
            if e.block_index != cutoff {
                return Err(Error::Config(format!(
                    "preloaded feature is from block {}, cutoff is {cutoff}",
                    e.block_index
                )));
            }
        }
        Ok(Self {
            model,
            schedule,
            cutoff,
            store,
            reuse_sources: Vec::new(),
        })
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &FeatureCacheStore {
        &self.store
    }

    /// `(reuse step, cache step it read from)` for every reuse step run so far.
    pub fn reuse_sources(&self) -> &[(usize, usize)] {
        &self.reuse_sources
    }
}

impl StepExecutor for BlockDanceExecutor<'_> {
    fn predict(&mut self, step_index: usize, z_t: &Tensor, cond: &Conditioning) -> Result<StepOutput> {
        let kind = *self.schedule.kinds().get(step_index).ok_or_else(|| {
            Error::Schedule(format!(
                "step {step_index} beyond schedule of {} steps",
                self.schedule.len()
            ))
        })?;
        if kind == StepKind::Reuse {
            if let Some(src) = self.store.source_step() {
                self.reuse_sources.push((step_index, src));
            }
        }
        execute_step(kind, self.model, z_t, cond, self.cutoff, &mut self.store, step_index)
    }
}
