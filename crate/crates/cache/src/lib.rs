//! Cache/reuse scheduling for block-feature caching.
//!
//! A schedule assigns each inference step a kind: a cache step runs the full
//! model and stores the output of the cutoff block, a reuse step feeds that
//! stored feature into the next block and skips the blocks before it. The
//! static BlockDance-N schedule keeps a cache-only prefix, then groups of `N`
//! steps (one cache, `N - 1` reuse) up to the end of the reuse window, then
//! cache steps to the end.

pub mod engine;
pub mod macs;
pub mod schedule;

pub use engine::{execute_step, BlockDanceExecutor, FeatureCacheStore};
pub use macs::{mac_report, schedule_mac_summary, MacSummary};
pub use schedule::{
    build_schedule, build_schedule_from_actions, deepcache_style_schedule, SchedulePolicy, StepSchedule,
};
