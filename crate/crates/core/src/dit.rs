//! A small DiT-style ε-predictor.
//!
//! Tokens are `patch × patch × channels` latent patches embedded linearly to
//! width `d`. Each block is pre-norm multi-head self-attention plus a GELU MLP,
//! both modulated (shift, scale, gate) by a linear map of the SiLU'd
//! conditioning vector. The final layer is a modulated layernorm and a linear
//! projection back to patch space.
//!
//! Blocks are numbered from 1. A tapped feature is the residual-stream output
//! of its block, so resuming at block `i + 1` from the tap of block `i`
//! reproduces the full forward exactly when the conditioning matches.

use serde::{Deserialize, Serialize};

use crate::dump;
use crate::rng::RngStream;
use crate::tensor::{normalize_row, softmax_in_place, LAYERNORM_EPS};
use crate::{Error, Result, Tensor};

/// Random stream used for weight initialization.
pub const WEIGHT_STREAM: u64 = 0x5745_4947;

/// Init gain of the output projection relative to the skip readout.
pub const HEAD_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    /// Number of stacked blocks.
    pub depth: usize,
    /// Residual-stream width.
    pub width: usize,
    /// Sequence length; must be a perfect square (a 2D patch grid).
    pub tokens: usize,
    pub heads: usize,
    pub cond_dim: usize,
    /// Patch side in latent pixels.
    pub patch: usize,
    /// Latent channels per pixel.
    pub channels: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl DitConfig {
    /// Default desk-scale profile.
    pub fn toy() -> Self {
        Self {
            depth: 8,
            width: 64,
            tokens: 16,
            heads: 4,
            cond_dim: 64,
            patch: 4,
            channels: 1,
            mlp_ratio: 4,
            seed: 0,
        }
    }

    /// Same block geometry as [`DitConfig::toy`] but 28 blocks deep, matching
    /// the depth of the large text-to-image DiTs.
    pub fn deep() -> Self {
        Self {
            depth: 28,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return fail(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.tokens == 0 {
            return fail("tokens must be >= 1".into());
        }
        let side = self.grid_side();
        if side * side != self.tokens {
            return fail(format!("tokens {} is not a square grid", self.tokens));
        }
        if self.cond_dim < 2 || self.cond_dim % 2 != 0 {
            return fail(format!("cond_dim must be even and >= 2, got {}", self.cond_dim));
        }
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("patch, channels and mlp_ratio must be >= 1".into());
        }
        if self.in_dim() > self.width {
            return fail(format!("token size {} exceeds width {}", self.in_dim(), self.width));
        }
        Ok(())
    }

    /// Values per token in latent space.
    pub fn in_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid_side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Shape of a latent `z_t`: `[tokens, in_dim]`.
    pub fn latent_shape(&self) -> [usize; 2] {
        [self.tokens, self.in_dim()]
    }

    /// Default cache cutoff: block 20 of 28 scaled to this depth.
    pub fn default_cutoff(&self) -> usize {
        let scaled = (self.depth as f64 * 20.0 / 28.0).round() as usize;
        scaled.clamp(1, self.depth - 1)
    }
}

/// Sinusoidal embedding of an integer timestep with base 10000, cosines first.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub timestep: usize,
    pub timestep_embedding: Vec<f64>,
    /// Stand-in for a class or text embedding.
    pub context: Vec<f64>,
}

impl Conditioning {
    pub fn new(timestep: usize, context: Vec<f64>) -> Self {
        Self {
            timestep,
            timestep_embedding: timestep_embedding(timestep, context.len()),
            context,
        }
    }

    /// Same context at a different timestep.
    pub fn at(&self, timestep: usize) -> Self {
        Self::new(timestep, self.context.clone())
    }
}

/// Output of one block at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeature {
    /// 1-based block number.
    pub block_index: usize,
    pub timestep: usize,
    /// `[tokens, width]`.
    pub values: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub tapped: Vec<BlockFeature>,
    /// Blocks evaluated by this call.
    pub blocks_evaluated: usize,
    /// Multiply-accumulates executed by this call.
    pub macs: u64,
}

/// Conditioning vector after the timestep MLP and SiLU, shared by all blocks.
#[derive(Debug, Clone)]
pub struct PreparedConditioning {
    pub timestep: usize,
    silu: Vec<f64>,
    /// Multiply-accumulates spent preparing it.
    pub macs: u64,
}

/// Closed-form MAC costs of the model.
///
/// A full forward pays every term. A forward resumed from a stored block
/// output skips the token embedding as well as the blocks before the resume
/// point; the conditioning MLP and the head always run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    /// Patch embedding of the latent tokens.
    pub token_embedding: u64,
    /// Timestep MLP.
    pub conditioning: u64,
    pub per_block: u64,
    /// Final modulation, output projection and skip readout.
    pub head: u64,
}

impl MacBreakdown {
    pub fn new(cfg: &DitConfig) -> Self {
        let t = cfg.tokens as u64;
        let d = cfg.width as u64;
        let c = cfg.cond_dim as u64;
        let i = cfg.in_dim() as u64;
        let h = cfg.mlp_hidden() as u64;
        let attention = t * d * 3 * d + 2 * t * t * d + t * d * d;
        let mlp = 2 * t * d * h;
        let modulation = c * 6 * d;
        Self {
            token_embedding: t * i * d,
            conditioning: 2 * c * c,
            per_block: attention + mlp + modulation,
            head: c * 2 * d + 2 * t * d * i,
        }
    }

    /// Embedding plus head: the cost of a full pass with no blocks.
    pub fn fixed(&self) -> u64 {
        self.token_embedding + self.conditioning + self.head
    }

    /// Cost of a full pass executing `blocks_executed` blocks.
    pub fn total(&self, blocks_executed: usize) -> u64 {
        self.fixed() + self.per_block * blocks_executed as u64
    }

    /// Cost of a pass resumed from a stored feature, executing `blocks_executed` blocks.
    pub fn resumed(&self, blocks_executed: usize) -> u64 {
        self.total(blocks_executed) - self.token_embedding
    }
}

/// MACs of one full forward pass that executes `blocks_executed` blocks.
pub fn mac_count(cfg: &DitConfig, blocks_executed: usize) -> u64 {
    MacBreakdown::new(cfg).total(blocks_executed)
}

/// MACs of a forward pass resumed from a stored block output.
pub fn resumed_mac_count(cfg: &DitConfig, blocks_executed: usize) -> u64 {
    MacBreakdown::new(cfg).resumed(blocks_executed)
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn init(rng: &mut RngStream, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self {
            w: rng.gaussian(&[fan_in, fan_out]).scale(std),
            b: rng.gaussian(&[fan_out]).scale(0.02),
        }
    }

    fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x[rows × in] · w + b`, counting one MAC per multiply executed.
    fn apply(&self, x: &[f64], rows: usize, macs: &mut u64) -> Vec<f64> {
        let fan_in = self.w.shape()[0];
        let fan_out = self.fan_out();
        let w = self.w.data();
        let b = self.b.data();
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &x[r * fan_in..(r + 1) * fan_in];
            let acc = &mut out[r * fan_out..(r + 1) * fan_out];
            // Row-major sweep; each output still sums over p in ascending order.
            for (p, &xv) in xr.iter().enumerate() {
                let wr = &w[p * fan_out..(p + 1) * fan_out];
                for (a, &wv) in acc.iter_mut().zip(wr) {
                    *a += xv * wv;
                }
            }
            for (a, &bv) in acc.iter_mut().zip(b) {
                *a += bv;
            }
            *macs += (fan_in * fan_out) as u64;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: DitConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
    /// `[width, in_dim]` readout of the last residual stream, added to the head.
    skip: Tensor,
}

/// `rows × cols` matrix with orthonormal rows (`rows <= cols`), by modified
/// Gram–Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let mut m = rng.gaussian(&[rows, cols]).into_data();
    for r in 0..rows {
        for q in 0..r {
            let dot: f64 = (0..cols).map(|j| m[r * cols + j] * m[q * cols + j]).sum();
            for j in 0..cols {
                m[r * cols + j] -= dot * m[q * cols + j];
            }
        }
        let norm = (0..cols).map(|j| m[r * cols + j].powi(2)).sum::<f64>().sqrt();
        for j in 0..cols {
            m[r * cols + j] /= norm;
        }
    }
    Tensor::new(vec![rows, cols], m).expect("length matches shape")
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Layernorm without affine, then `x * (1 + scale) + shift`.
fn modulated_norm(x: &[f64], rows: usize, width: usize, shift: &[f64], scale: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let dst = &mut out[r * width..(r + 1) * width];
        normalize_row(&x[r * width..(r + 1) * width], LAYERNORM_EPS, dst);
        for j in 0..width {
            dst[j] = dst[j] * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

impl Model {
    pub fn init(cfg: &DitConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.seed, WEIGHT_STREAM);
        let (d, c, i) = (cfg.width, cfg.cond_dim, cfg.in_dim());
        // Semi-orthogonal patch embedding with its pseudo-inverse as the skip
        // readout: with all blocks silent the model predicts ε ≈ z_t, which
        // is the right scale for a unit-variance prior at high noise.
        let embed_gain = (d as f64 / i as f64).sqrt();
        let mut patch_embed = Linear::init(&mut rng, i, d, 1.0);
        patch_embed.w = orthonormal_rows(&mut rng, i, d).scale(embed_gain);
        let skip = patch_embed.w.transpose()?.scale(1.0 / (embed_gain * embed_gain));
        let pos_embed = rng.gaussian(&[cfg.tokens, d]).scale(0.1);
        let time_fc1 = Linear::init(&mut rng, c, c, 1.0);
        let time_fc2 = Linear::init(&mut rng, c, c, 1.0);
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                modulation: Linear::init(&mut rng, c, 6 * d, 0.5),
                qkv: Linear::init(&mut rng, d, 3 * d, 1.0),
                proj: Linear::init(&mut rng, d, d, 1.0),
                fc1: Linear::init(&mut rng, d, cfg.mlp_hidden(), 1.0),
                fc2: Linear::init(&mut rng, cfg.mlp_hidden(), d, 1.0),
            })
            .collect();
        let final_modulation = Linear::init(&mut rng, c, 2 * d, 0.5);
        let head = Linear::init(&mut rng, d, i, HEAD_GAIN);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            time_fc1,
            time_fc2,
            blocks,
            final_modulation,
            head,
            skip,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn lin<'a>(name: &str, t: &'a Linear, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{name}.weight"), &t.w));
            out.push((format!("{name}.bias"), &t.b));
        }
        let mut out = Vec::new();
        lin("patch_embed", &self.patch_embed, &mut out);
        out.push(("pos_embed".into(), &self.pos_embed));
        lin("time_embed.fc1", &self.time_fc1, &mut out);
        lin("time_embed.fc2", &self.time_fc2, &mut out);
        for (k, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{}", k + 1);
            lin(&format!("{p}.modulation"), &b.modulation, &mut out);
            lin(&format!("{p}.attn.qkv"), &b.qkv, &mut out);
            lin(&format!("{p}.attn.proj"), &b.proj, &mut out);
            lin(&format!("{p}.mlp.fc1"), &b.fc1, &mut out);
            lin(&format!("{p}.mlp.fc2"), &b.fc2, &mut out);
        }
        lin("final.modulation", &self.final_modulation, &mut out);
        lin("final.head", &self.head, &mut out);
        out.push(("final.skip.weight".into(), &self.skip));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn lin<'a>(name: &str, t: &'a mut Linear, out: &mut Vec<(String, &'a mut Tensor)>) {
            out.push((format!("{name}.weight"), &mut t.w));
            out.push((format!("{name}.bias"), &mut t.b));
        }
        let mut out = Vec::new();
        lin("patch_embed", &mut self.patch_embed, &mut out);
        out.push(("pos_embed".into(), &mut self.pos_embed));
        lin("time_embed.fc1", &mut self.time_fc1, &mut out);
        lin("time_embed.fc2", &mut self.time_fc2, &mut out);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{}", k + 1);
            lin(&format!("{p}.modulation"), &mut b.modulation, &mut out);
            lin(&format!("{p}.attn.qkv"), &mut b.qkv, &mut out);
            lin(&format!("{p}.attn.proj"), &mut b.proj, &mut out);
            lin(&format!("{p}.mlp.fc1"), &mut b.fc1, &mut out);
            lin(&format!("{p}.mlp.fc2"), &mut b.fc2, &mut out);
        }
        lin("final.modulation", &mut self.final_modulation, &mut out);
        lin("final.head", &mut self.head, &mut out);
        out.push(("final.skip.weight".into(), &mut self.skip));
        out
    }

    /// FNV-1a over the bit patterns of every weight, in [`Model::named_tensors`] order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        dump::write_checkpoint(path, &self.named_tensors(), serde_json::json!({ "model": meta }))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (manifest, tensors) = dump::read_checkpoint(path)?;
        let cfg: DitConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let mut model = Self::init(&cfg)?;
        let mut slots = model.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.iter_mut().zip(tensors) {
            if *name != got_name || slot.shape() != t.shape() {
                return Err(Error::Format(format!("checkpoint tensor {got_name} does not fit {name}")));
            }
            **slot = t;
        }
        Ok(model)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape() != self.cfg.latent_shape() {
            return Err(Error::Dimension(format!(
                "latent shape {:?}, model expects {:?}",
                z.shape(),
                self.cfg.latent_shape()
            )));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &Conditioning) -> Result<()> {
        if cond.context.len() != self.cfg.cond_dim || cond.timestep_embedding.len() != self.cfg.cond_dim {
            return Err(Error::Dimension(format!(
                "conditioning width {}, model expects {}",
                cond.context.len(),
                self.cfg.cond_dim
            )));
        }
        Ok(())
    }

    /// Runs the timestep MLP, adds the context and applies SiLU.
    pub fn prepare(&self, cond: &Conditioning) -> Result<PreparedConditioning> {
        self.check_cond(cond)?;
        let mut macs = 0;
        let h: Vec<f64> = self
            .time_fc1
            .apply(&cond.timestep_embedding, 1, &mut macs)
            .into_iter()
            .map(silu)
            .collect();
        let temb = self.time_fc2.apply(&h, 1, &mut macs);
        let silu_c = temb
            .iter()
            .zip(&cond.context)
            .map(|(a, b)| silu(a + b))
            .collect();
        Ok(PreparedConditioning {
            timestep: cond.timestep,
            silu: silu_c,
            macs,
        })
    }

    /// Patch embedding plus positional embedding: `[tokens, in_dim] -> [tokens, width]`.
    pub fn embed_tokens(&self, z: &Tensor, macs: &mut u64) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut x = self.patch_embed.apply(z.data(), self.cfg.tokens, macs);
        for (v, p) in x.iter_mut().zip(self.pos_embed.data()) {
            *v += p;
        }
        Tensor::new(vec![self.cfg.tokens, self.cfg.width], x)
    }

    /// Applies block `block_index` (1-based) to `x`, returning its output and MACs spent.
    pub fn run_single_block(
        &self,
        block_index: usize,
        x: &Tensor,
        cond: &PreparedConditioning,
    ) -> Result<(Tensor, u64)> {
        if block_index == 0 || block_index > self.cfg.depth {
            return Err(Error::Index(format!(
                "block {block_index} outside 1..={}",
                self.cfg.depth
            )));
        }
        let (t, d) = (self.cfg.tokens, self.cfg.width);
        if x.shape() != [t, d] {
            return Err(Error::Dimension(format!("block input shape {:?}", x.shape())));
        }
        let mut macs = 0;
        let out = self.block_forward(&self.blocks[block_index - 1], x.data(), &cond.silu, &mut macs);
        Ok((Tensor::new(vec![t, d], out)?, macs))
    }

    fn block_forward(&self, b: &Block, x: &[f64], c: &[f64], macs: &mut u64) -> Vec<f64> {
        let (t, d) = (self.cfg.tokens, self.cfg.width);
        let m = b.modulation.apply(c, 1, macs);
        let (shift1, scale1, gate1) = (&m[0..d], &m[d..2 * d], &m[2 * d..3 * d]);
        let (shift2, scale2, gate2) = (&m[3 * d..4 * d], &m[4 * d..5 * d], &m[5 * d..6 * d]);

        let h = modulated_norm(x, t, d, shift1, scale1);
        let attn = self.attention(b, &h, macs);
        let mut x1 = x.to_vec();
        for r in 0..t {
            for j in 0..d {
                x1[r * d + j] += gate1[j] * attn[r * d + j];
            }
        }

        let h2 = modulated_norm(&x1, t, d, shift2, scale2);
        let hidden: Vec<f64> = b.fc1.apply(&h2, t, macs).into_iter().map(gelu).collect();
        let mlp = b.fc2.apply(&hidden, t, macs);
        for r in 0..t {
            for j in 0..d {
                x1[r * d + j] += gate2[j] * mlp[r * d + j];
            }
        }
        x1
    }

    fn attention(&self, b: &Block, h: &[f64], macs: &mut u64) -> Vec<f64> {
        let (t, d) = (self.cfg.tokens, self.cfg.width);
        let dh = self.cfg.head_dim();
        let qkv = b.qkv.apply(h, t, macs);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for head in 0..self.cfg.heads {
            let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
            for i in 0..t {
                let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + dh];
                    let mut acc = 0.0;
                    for p in 0..dh {
                        acc += q[p] * k[p];
                    }
                    *macs += dh as u64;
                    *s = acc * scale;
                }
                softmax_in_place(&mut scores);
                for p in 0..dh {
                    let mut acc = 0.0;
                    for (j, &a) in scores.iter().enumerate() {
                        acc += a * qkv[j * 3 * d + vo + p];
                    }
                    *macs += t as u64;
                    merged[i * d + head * dh + p] = acc;
                }
            }
        }
        b.proj.apply(&merged, t, macs)
    }

    fn output_head(&self, x: &[f64], c: &[f64], macs: &mut u64) -> Result<Tensor> {
        let (t, d) = (self.cfg.tokens, self.cfg.width);
        let m = self.final_modulation.apply(c, 1, macs);
        let h = modulated_norm(x, t, d, &m[0..d], &m[d..2 * d]);
        let mut eps = self.head.apply(&h, t, macs);
        let i = self.cfg.in_dim();
        let w = self.skip.data();
        for r in 0..t {
            for j in 0..i {
                let mut acc = 0.0;
                for p in 0..d {
                    acc += x[r * d + p] * w[p * i + j];
                }
                *macs += d as u64;
                eps[r * i + j] += acc;
            }
        }
        Tensor::new(vec![t, i], eps)
    }

    fn check_taps(&self, taps: &[usize]) -> Result<()> {
        match taps.iter().find(|&&b| b == 0 || b > self.cfg.depth) {
            Some(b) => Err(Error::Index(format!("tap {b} outside 1..={}", self.cfg.depth))),
            None => Ok(()),
        }
    }

    /// Runs blocks `first..=depth` on `x` and the output head.
    fn run_from(
        &self,
        first: usize,
        x: Vec<f64>,
        cond: &PreparedConditioning,
        taps: &[usize],
        mut macs: u64,
    ) -> Result<ForwardOutput> {
        let (t, d) = (self.cfg.tokens, self.cfg.width);
        let mut x = x;
        let mut tapped = Vec::new();
        let mut evaluated = 0;
        for idx in first..=self.cfg.depth {
            x = self.block_forward(&self.blocks[idx - 1], &x, &cond.silu, &mut macs);
            evaluated += 1;
            if taps.contains(&idx) {
                tapped.push(BlockFeature {
                    block_index: idx,
                    timestep: cond.timestep,
                    values: Tensor::new(vec![t, d], x.clone())?,
                });
            }
        }
        let eps = self.output_head(&x, &cond.silu, &mut macs)?;
        Ok(ForwardOutput {
            eps,
            tapped,
            blocks_evaluated: evaluated,
            macs,
        })
    }

    /// Full ε-prediction, returning the outputs of the blocks listed in `taps`.
    pub fn forward_full(&self, z: &Tensor, cond: &Conditioning, taps: &[usize]) -> Result<ForwardOutput> {
        self.check_taps(taps)?;
        let prepared = self.prepare(cond)?;
        let mut macs = prepared.macs;
        let x = self.embed_tokens(z, &mut macs)?;
        self.run_from(1, x.into_data(), &prepared, taps, macs)
    }

    /// ε-prediction that starts from a stored block output, evaluating only the
    /// blocks after `cached.block_index` under the conditioning `cond`.
    pub fn forward_from_block(&self, cached: &BlockFeature, cond: &Conditioning) -> Result<ForwardOutput> {
        self.forward_from_block_tapped(cached, cond, &[])
    }

    pub fn forward_from_block_tapped(
        &self,
        cached: &BlockFeature,
        cond: &Conditioning,
        taps: &[usize],
    ) -> Result<ForwardOutput> {
        let i = cached.block_index;
        if i == 0 || i >= self.cfg.depth {
            return Err(Error::Index(format!(
                "cannot resume after block {i}; resumable blocks are 1..={}",
                self.cfg.depth - 1
            )));
        }
        if cached.values.shape() != [self.cfg.tokens, self.cfg.width] {
            return Err(Error::Dimension(format!(
                "cached feature shape {:?}",
                cached.values.shape()
            )));
        }
        self.check_taps(taps)?;
        let prepared = self.prepare(cond)?;
        let macs = prepared.macs;
        self.run_from(i + 1, cached.values.data().to_vec(), &prepared, taps, macs)
    }

    /// Output head alone, for manual partial pipelines.
    pub fn head_from(&self, x: &Tensor, cond: &PreparedConditioning) -> Result<(Tensor, u64)> {
        let mut macs = 0;
        let eps = self.output_head(x.data(), &cond.silu, &mut macs)?;
        Ok((eps, macs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DitConfig {
        DitConfig {
            depth: 4,
            width: 32,
            tokens: 16,
            heads: 4,
            cond_dim: 16,
            patch: 2,
            channels: 1,
            mlp_ratio: 4,
            seed: 11,
        }
    }

    fn inputs(cfg: &DitConfig, seed: u64, t: usize) -> (Tensor, Conditioning) {
        let mut rng = RngStream::new(seed, 1);
        let z = rng.gaussian(&cfg.latent_shape());
        let ctx = rng.gaussian(&[cfg.cond_dim]).into_data();
        (z, Conditioning::new(t, ctx))
    }

    #[test]
    fn config_validation() {
        assert!(DitConfig::toy().validate().is_ok());
        assert!(DitConfig { depth: 1, ..small() }.validate().is_err());
        assert!(DitConfig { heads: 5, ..small() }.validate().is_err());
        assert!(DitConfig { tokens: 15, ..small() }.validate().is_err());
        assert!(DitConfig { patch: 8, ..small() }.validate().is_err());
        assert!(matches!(Model::init(&DitConfig { width: 30, ..small() }), Err(Error::Config(_))));
    }

    #[test]
    fn default_cutoff_scales_from_28() {
        assert_eq!(DitConfig::deep().default_cutoff(), 20);
        assert_eq!(DitConfig::toy().default_cutoff(), 6);
        assert_eq!(DitConfig { depth: 2, ..small() }.default_cutoff(), 1);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(&small()).unwrap();
        let b = Model::init(&small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = Model::init(&DitConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn skip_readout_inverts_patch_embedding() {
        let m = Model::init(&small()).unwrap();
        let prod = m.patch_embed.w.matmul(&m.skip).unwrap();
        assert!(prod.max_abs_diff(&Tensor::identity(small().in_dim())).unwrap() <= 1e-12);
    }

    #[test]
    fn tensor_count_by_enumeration() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let per_block = ["modulation", "attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"].len() * 2;
        let fixed = ["patch_embed", "time_embed.fc1", "time_embed.fc2", "final.modulation", "final.head"]
            .len()
            * 2
            + ["pos_embed", "final.skip.weight"].len();
        assert_eq!(model.named_tensors().len(), cfg.depth * per_block + fixed);
    }

    #[test]
    fn minimal_depth_runs() {
        let cfg = DitConfig { depth: 2, ..small() };
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 0, 10);
        let out = model.forward_full(&z, &c, &[]).unwrap();
        assert_eq!(out.eps.shape(), z.shape());
        assert!(out.eps.is_finite());
    }

    #[test]
    fn taps_do_not_interfere() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 1, 500);
        let plain = model.forward_full(&z, &c, &[]).unwrap();
        let all: Vec<usize> = (1..=cfg.depth).collect();
        let tapped = model.forward_full(&z, &c, &all).unwrap();
        assert!(plain.eps.bit_eq(&tapped.eps));
        assert_eq!(tapped.tapped.len(), cfg.depth);
        assert!(tapped.tapped.iter().all(|f| f.values.shape() == [cfg.tokens, cfg.width]));
        assert!(matches!(model.forward_full(&z, &c, &[0]), Err(Error::Index(_))));
        assert!(matches!(model.forward_full(&z, &c, &[5]), Err(Error::Index(_))));
    }

    #[test]
    fn full_forward_is_block_composition() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 2, 321);
        let full = model.forward_full(&z, &c, &[]).unwrap();
        let prepared = model.prepare(&c).unwrap();
        let mut macs = 0;
        let mut x = model.embed_tokens(&z, &mut macs).unwrap();
        for b in 1..=cfg.depth {
            x = model.run_single_block(b, &x, &prepared).unwrap().0;
        }
        let (eps, _) = model.head_from(&x, &prepared).unwrap();
        assert!(eps.max_abs_diff(&full.eps).unwrap() <= 1e-12);
    }

    #[test]
    fn resume_matches_full_at_same_step() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 3, 77);
        for i in 1..cfg.depth {
            let full = model.forward_full(&z, &c, &[i]).unwrap();
            let resumed = model.forward_from_block(&full.tapped[0], &c).unwrap();
            assert!(resumed.eps.bit_eq(&full.eps));
            assert_eq!(resumed.blocks_evaluated, cfg.depth - i);
        }
        let last = model.forward_full(&z, &c, &[cfg.depth]).unwrap();
        assert!(matches!(model.forward_from_block(&last.tapped[0], &c), Err(Error::Index(_))));
    }

    #[test]
    fn resume_uses_current_conditioning() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 4, 600);
        let cached = model.forward_full(&z, &c, &[2]).unwrap().tapped.remove(0);
        let next = c.at(560);
        let resumed = model.forward_from_block(&cached, &next).unwrap();
        let prepared = model.prepare(&next).unwrap();
        let mut x = cached.values.clone();
        for b in 3..=cfg.depth {
            x = model.run_single_block(b, &x, &prepared).unwrap().0;
        }
        let (eps, _) = model.head_from(&x, &prepared).unwrap();
        assert!(eps.max_abs_diff(&resumed.eps).unwrap() <= 1e-12);
        let stale = model.forward_from_block(&cached, &c).unwrap();
        assert!(!stale.eps.bit_eq(&resumed.eps));
    }

    #[test]
    fn mac_formula_matches_instrumented_counter() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let (z, c) = inputs(&cfg, 5, 10);
        let full = model.forward_full(&z, &c, &[1]).unwrap();
        assert_eq!(full.macs, mac_count(&cfg, cfg.depth));
        let partial = model.forward_from_block(&full.tapped[0], &c).unwrap();
        assert_eq!(partial.macs, resumed_mac_count(&cfg, cfg.depth - 1));
        let br = MacBreakdown::new(&cfg);
        assert_eq!(mac_count(&cfg, 0), br.token_embedding + br.conditioning + br.head);
        assert_eq!(mac_count(&cfg, cfg.depth) - mac_count(&cfg, cfg.depth - 1), br.per_block);
    }

    #[test]
    fn timestep_embedding_is_pure_and_sensitive() {
        assert_eq!(timestep_embedding(5, 8), timestep_embedding(5, 8));
        assert_ne!(timestep_embedding(5, 8), timestep_embedding(6, 8));
        let e0 = timestep_embedding(0, 6);
        assert_eq!(e0, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dit.bin");
        let model = Model::init(&small()).unwrap();
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.config(), model.config());
    }
}
