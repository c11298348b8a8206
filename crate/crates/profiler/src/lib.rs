//! Redundancy analysis of block features across denoising steps.
//!
//! A [`FeatureLog`] holds tapped block outputs of a sampling run. From it the
//! profiler computes adjacent-step L2 distances per block, step×step cosine
//! similarity for one block, SSIM between predicted clean images and PCA
//! projections of token features. Every analysis is a pure function of its
//! inputs.

pub mod analysis;
pub mod csv;
pub mod log;
pub mod pca;

use blockdance_core::diffusion::{sample, FullExecutor, NoiseSchedule, SampleOptions, SampleOutput, SamplerPlan};
use blockdance_core::dit::Model;
use blockdance_core::{Error, Result, RngStream, Tensor};

pub use analysis::{
    cosine, cosine_matrix, l2_surface, latent_to_image, observed_range, ssim, ssim_adjacent, ssim_with,
    SimilaritySurface, SsimParams, StepSimilarityMatrix,
};
pub use log::FeatureLog;
pub use pca::{pca_project, PcaProjection};

/// Runs the unmodified sampler with `taps` and keeps every tapped output.
pub fn record_features(
    model: &Model,
    plan: &SamplerPlan,
    sched: &NoiseSchedule,
    context: &[f64],
    z_init: Tensor,
    taps: Vec<usize>,
    rng: &mut RngStream,
) -> Result<(FeatureLog, SampleOutput)> {
    if taps.is_empty() {
        return Err(Error::Config("record_features needs at least one tap".into()));
    }
    let mut exec = FullExecutor::with_taps(model, taps);
    let run = sample(plan, sched, context, &mut exec, z_init, rng, SampleOptions::default())?;
    let log = FeatureLog::from_run(model.depth(), &run)?;
    Ok((log, run))
}
