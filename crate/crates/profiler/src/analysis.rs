//! Distances and similarities over feature logs.

use blockdance_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::log::FeatureLog;

/// Adjacent-step L2 distances, one row per step pair, one column per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySurface {
    /// Step index of the first step of each row's pair.
    pub steps: Vec<usize>,
    /// `[steps - 1, L]`.
    pub values: Tensor,
}

/// Cosine similarity between every pair of steps for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSimilarityMatrix {
    pub block_index: usize,
    pub steps: Vec<usize>,
    /// `[s, s]`, symmetric with unit diagonal.
    pub values: Tensor,
}

fn contiguous_steps(log: &FeatureLog) -> Result<Vec<usize>> {
    let steps = log.steps();
    if steps.is_empty() {
        return Err(Error::Completeness("empty feature log".into()));
    }
    if steps.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Completeness(format!("steps are not contiguous: {steps:?}")));
    }
    Ok(steps)
}

/// `values[r][b-1] = ‖F(step r, block b) − F(step r+1, block b)‖` (Frobenius).
pub fn l2_surface(log: &FeatureLog) -> Result<SimilaritySurface> {
    let steps = contiguous_steps(log)?;
    let depth = log.depth();
    let rows = steps.len().saturating_sub(1);
    let mut values = Vec::with_capacity(rows * depth);
    for w in steps.windows(2) {
        for b in 1..=depth {
            let a = log.require(w[0], b)?;
            let c = log.require(w[1], b)?;
            let sq: f64 = a
                .values
                .data()
                .iter()
                .zip(c.values.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            values.push(sq.sqrt());
        }
    }
    // A single-step log still has to hold every block.
    if rows == 0 {
        for b in 1..=depth {
            log.require(steps[0], b)?;
        }
    }
    Ok(SimilaritySurface {
        steps: steps[..rows].to_vec(),
        values: Tensor::new(vec![rows, depth], values)?,
    })
}

/// Cosine of the angle between two flattened vectors; a zero vector has
/// similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Step×step cosine similarity of block `block_index`'s flattened output.
pub fn cosine_matrix(log: &FeatureLog, block_index: usize) -> Result<StepSimilarityMatrix> {
    let steps = log.steps();
    let feats = steps
        .iter()
        .map(|&s| log.require(s, block_index).map(|f| f.values.data()))
        .collect::<Result<Vec<_>>>()?;
    let n = steps.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = cosine(feats[i], feats[j]);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(StepSimilarityMatrix {
        block_index,
        steps,
        values: Tensor::new(vec![n, n], values)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Fixed dynamic range; `None` uses max − min over both images.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

/// Dynamic range used when none is fixed: max − min over both images, or 1
/// when the pair is constant.
pub fn observed_range(a: &Tensor, b: &Tensor) -> f64 {
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let r = hi - lo;
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// SSIM with default parameters: 8×8 uniform windows at stride 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean SSIM over all windows, averaged over channels. Images are `[H, W]`
/// or `[H, W, C]`; window statistics are population moments.
pub fn ssim_with(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("SSIM shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, ch) = match *a.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Dimension(format!("SSIM needs a 2-D or 3-D image, got {:?}", a.shape()))),
    };
    if p.window == 0 || h < p.window || w < p.window || ch == 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} smaller than the {0}×{0} SSIM window",
            p.window
        )));
    }
    let range = p.data_range.unwrap_or_else(|| observed_range(a, b));
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);
    let n = (p.window * p.window) as f64;
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for i0 in 0..=h - p.window {
            for j0 in 0..=w - p.window {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + p.window {
                    for j in j0..j0 + p.window {
                        let k = (i * w + j) * ch + c;
                        sx += x[k];
                        sy += y[k];
                        sxx += x[k] * x[k];
                        syy += y[k] * y[k];
                        sxy += x[k] * y[k];
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / ((h - p.window + 1) * (w - p.window + 1)) as f64;
    }
    Ok(total / ch as f64)
}

/// Rearranges a `[T, p·p·C]` token latent into a `[√T·p, √T·p, C]` image.
pub fn latent_to_image(latent: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (t, k) = latent.dims2()?;
    let grid = (t as f64).sqrt().round() as usize;
    if grid * grid != t || k != patch * patch * channels {
        return Err(Error::Dimension(format!(
            "latent {:?} is not a square grid of {patch}×{patch}×{channels} patches",
            latent.shape()
        )));
    }
    let side = grid * patch;
    let mut img = vec![0.0; side * side * channels];
    for tok in 0..t {
        let (gr, gc) = (tok / grid, tok % grid);
        for py in 0..patch {
            for px in 0..patch {
                for c in 0..channels {
                    let src = tok * k + (py * patch + px) * channels + c;
                    let dst = ((gr * patch + py) * side + gc * patch + px) * channels + c;
                    img[dst] = latent.data()[src];
                }
            }
        }
    }
    let shape = if channels == 1 { vec![side, side] } else { vec![side, side, channels] };
    Tensor::new(shape, img)
}

/// SSIM between consecutive predicted clean images.
pub fn ssim_adjacent(images: &[Tensor]) -> Result<Vec<f64>> {
    images.windows(2).map(|w| ssim(&w[0], &w[1])).collect()
}
