//! Decision network: pooled latent tokens plus context, three pre-norm
//! transformer blocks and an MLP head emitting one logit per decision step.
//!
//! Parameters live in one flat vector with a named layout so the optimizer,
//! checkpoints and finite-difference checks can treat them uniformly. The
//! reverse pass is written out by hand for this fixed architecture.

use std::path::Path;

use blockdance_core::{dump, Error, Result, RngStream, Tensor};
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const NET_STREAM: u64 = 0x504f_4c49;
/// The input embedding starts small next to the positional rows, so the
/// untrained network sees mostly shared structure and learns input
/// dependence gradually.
pub const EMBED_GAIN: f64 = 0.1;
pub const POS_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionNetConfig {
    /// Latent tokens `T`.
    pub tokens: usize,
    /// Values per latent token.
    pub in_dim: usize,
    pub cond_dim: usize,
    /// Output logits, one per step after the prefix (`s - rho_steps`).
    pub actions: usize,
    /// Tokens are mean-pooled into this many groups of consecutive tokens.
    pub pool_groups: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl DecisionNetConfig {
    /// Three blocks, width 32, four pooled groups.
    pub fn standard(tokens: usize, in_dim: usize, cond_dim: usize, actions: usize, seed: u64) -> Self {
        Self {
            tokens,
            in_dim,
            cond_dim,
            actions,
            pool_groups: 4.min(tokens).max(1),
            hidden: 32,
            mlp_hidden: 64,
            blocks: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.actions == 0 {
            return fail("decision network needs at least one action".into());
        }
        if self.pool_groups == 0 || self.tokens % self.pool_groups != 0 {
            return fail(format!("{} tokens do not split into {} groups", self.tokens, self.pool_groups));
        }
        if self.hidden == 0 || self.mlp_hidden == 0 || self.in_dim + self.cond_dim == 0 {
            return fail("decision network widths must be positive".into());
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.in_dim + self.cond_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    off: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    bo: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w: Slot,
    embed_b: Slot,
    pos: Slot,
    blocks: Vec<BlockSlots>,
    head_w1: Slot,
    head_b1: Slot,
    head_w2: Slot,
    head_b2: Slot,
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Layout {
    fn new(cfg: &DecisionNetConfig) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            specs.push(ParamSpec { name, shape, offset: total });
            let slot = Slot { off: total, len };
            total += len;
            slot
        };
        let (h, f) = (cfg.hidden, cfg.mlp_hidden);
        let embed_w = add("embed.weight".into(), vec![cfg.input_width(), h]);
        let embed_b = add("embed.bias".into(), vec![h]);
        let pos = add("pos".into(), vec![cfg.pool_groups, h]);
        let blocks = (1..=cfg.blocks)
            .map(|k| {
                let p = format!("blocks.{k}");
                BlockSlots {
                    wq: add(format!("{p}.attn.q"), vec![h, h]),
                    wk: add(format!("{p}.attn.k"), vec![h, h]),
                    wv: add(format!("{p}.attn.v"), vec![h, h]),
                    wo: add(format!("{p}.attn.out.weight"), vec![h, h]),
                    bo: add(format!("{p}.attn.out.bias"), vec![h]),
                    w1: add(format!("{p}.mlp.fc1.weight"), vec![h, f]),
                    b1: add(format!("{p}.mlp.fc1.bias"), vec![f]),
                    w2: add(format!("{p}.mlp.fc2.weight"), vec![f, h]),
                    b2: add(format!("{p}.mlp.fc2.bias"), vec![h]),
                }
            })
            .collect();
        let head_w1 = add("head.fc1.weight".into(), vec![h, h]);
        let head_b1 = add("head.fc1.bias".into(), vec![h]);
        let head_w2 = add("head.fc2.weight".into(), vec![h, cfg.actions]);
        let head_b2 = add("head.fc2.bias".into(), vec![cfg.actions]);
        Self {
            embed_w,
            embed_b,
            pos,
            blocks,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            specs,
            total,
        }
    }
}

/// `a[n×k] · b[k×m]`.
fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `acc[n×m] += a[k×n]ᵀ · b[k×m]`.
fn mm_tn_acc(acc: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        for i in 0..n {
            let av = a[p * n + i];
            for (o, &bv) in acc[i * m..(i + 1) * m].iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// `a[n×k] · b[m×k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

fn add_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums_acc(acc: &mut [f64], x: &[f64]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layernorm(x: &[f64], width: usize) -> LnCache {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / width);
    for (src, dst) in x.chunks_exact(width).zip(xhat.chunks_exact_mut(width)) {
        let mean = src.iter().sum::<f64>() / width as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    LnCache { xhat, inv_std }
}

/// `dx = inv_std · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))`, added into `dx`.
fn layernorm_back_acc(dx: &mut [f64], dy: &[f64], cache: &LnCache, width: usize) {
    let rows = dx.chunks_exact_mut(width).zip(dy.chunks_exact(width)).zip(cache.xhat.chunks_exact(width));
    for ((dxr, dyr), xh) in rows.zip(&cache.inv_std).map(|(((a, b), c), d)| ((a, b), (c, d))) {
        let (xh, &is) = xh;
        let mean_dy = dyr.iter().sum::<f64>() / width as f64;
        let mean_dyx = dyr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        for j in 0..width {
            dxr[j] += is * (dyr[j] - mean_dy - xh[j] * mean_dyx);
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    act: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`DecisionNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    head_act: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionNet {
    cfg: DecisionNetConfig,
    params: Vec<f64>,
}

impl DecisionNet {
    /// Random init with a zero output layer, so every probability starts at 0.5.
    pub fn init(cfg: &DecisionNetConfig) -> Result<Self> {
        Self::init_with(cfg, true)
    }

    /// `zero_head == false` also randomizes the output layer.
    pub fn init_with(cfg: &DecisionNetConfig, zero_head: bool) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut rng = RngStream::new(cfg.seed, NET_STREAM);
        let mut params = vec![0.0; layout.total];
        for spec in &layout.specs {
            let len: usize = spec.shape.iter().product();
            let dst = &mut params[spec.offset..spec.offset + len];
            let std = if spec.name == "pos" {
                POS_STD
            } else if spec.name == "embed.weight" {
                EMBED_GAIN / (spec.shape[0] as f64).sqrt()
            } else if spec.shape.len() == 2 {
                let gain = if spec.name.ends_with("out.weight") || spec.name.ends_with("fc2.weight") { 0.5 } else { 1.0 };
                gain / (spec.shape[0] as f64).sqrt()
            } else {
                0.0
            };
            let is_head_out = spec.name.starts_with("head.fc2");
            if is_head_out && zero_head {
                continue;
            }
            let std = if is_head_out && spec.shape.len() == 1 { 0.1 } else { std };
            for v in dst.iter_mut() {
                *v = std * rng.standard_normal();
            }
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn config(&self) -> &DecisionNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        Layout::new(&self.cfg).specs
    }

    /// Pools `z_rho` (`[T, in_dim]`) into groups and appends the context to
    /// each pooled row: `[pool_groups, in_dim + cond_dim]`.
    pub fn input_rows(&self, z_rho: &Tensor, context: &[f64]) -> Result<Vec<f64>> {
        let c = &self.cfg;
        if z_rho.shape() != [c.tokens, c.in_dim] || context.len() != c.cond_dim {
            return Err(Error::Config(format!(
                "decision input {:?} + context {} does not match [{}, {}] + {}",
                z_rho.shape(),
                context.len(),
                c.tokens,
                c.in_dim,
                c.cond_dim
            )));
        }
        let per = c.tokens / c.pool_groups;
        let mut out = Vec::with_capacity(c.pool_groups * c.input_width());
        for g in 0..c.pool_groups {
            for j in 0..c.in_dim {
                let s: f64 = (g * per..(g + 1) * per).map(|t| z_rho.data()[t * c.in_dim + j]).sum();
                out.push(s / per as f64);
            }
            out.extend_from_slice(context);
        }
        Ok(out)
    }

    pub fn forward(&self, z_rho: &Tensor, context: &[f64]) -> Result<ForwardCache> {
        let input = self.input_rows(z_rho, context)?;
        Ok(self.forward_rows(input))
    }

    fn forward_rows(&self, input: Vec<f64>) -> ForwardCache {
        let c = &self.cfg;
        let l = Layout::new(c);
        let p = &self.params;
        let (n, h, f) = (c.pool_groups, c.hidden, c.mlp_hidden);
        let mut x = mm(&input, l.embed_w.of(p), n, c.input_width(), h);
        add_rows(&mut x, l.embed_b.of(p));
        for (v, q) in x.iter_mut().zip(l.pos.of(p)) {
            *v += q;
        }
        let scale = 1.0 / (h as f64).sqrt();
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let ln1 = layernorm(&x, h);
            let q = mm(&ln1.xhat, b.wq.of(p), n, h, h);
            let k = mm(&ln1.xhat, b.wk.of(p), n, h, h);
            let v = mm(&ln1.xhat, b.wv.of(p), n, h, h);
            let mut attn = mm_nt(&q, &k, n, h, n);
            for row in attn.chunks_exact_mut(n) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s * scale));
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * scale - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            let o = mm(&attn, &v, n, n, h);
            let mut proj = mm(&o, b.wo.of(p), n, h, h);
            add_rows(&mut proj, b.bo.of(p));
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let ln2 = layernorm(&x, h);
            let mut act = mm(&ln2.xhat, b.w1.of(p), n, h, f);
            add_rows(&mut act, b.b1.of(p));
            act.iter_mut().for_each(|a| *a = a.tanh());
            let mut out = mm(&act, b.w2.of(p), n, f, h);
            add_rows(&mut out, b.b2.of(p));
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
            blocks.push(BlockCache { ln1, q, k, v, attn, o, ln2, act });
        }
        let mut pooled = vec![0.0; h];
        col_sums_acc(&mut pooled, &x);
        pooled.iter_mut().for_each(|v| *v /= n as f64);
        let mut head_act = mm(&pooled, l.head_w1.of(p), 1, h, h);
        add_rows(&mut head_act, l.head_b1.of(p));
        head_act.iter_mut().for_each(|a| *a = a.tanh());
        let mut logits = mm(&head_act, l.head_w2.of(p), 1, h, c.actions);
        add_rows(&mut logits, l.head_b2.of(p));
        ForwardCache { input, blocks, pooled, head_act, logits }
    }

    pub fn logits(&self, z_rho: &Tensor, context: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(z_rho, context)?.logits)
    }

    /// Cache probabilities `m = sigmoid(logits)`.
    pub fn decide(&self, z_rho: &Tensor, context: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(z_rho, context)?.into_iter().map(crate::policy::sigmoid).collect())
    }

    /// Gradient of `Σ_j dlogits[j] · logits[j]` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_acc(cache, dlogits, &mut grad);
        grad
    }

    /// Like [`backward`](Self::backward) but adds into `grad`.
    pub fn backward_acc(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.cfg;
        let l = Layout::new(c);
        let p = &self.params;
        let (n, h, f, a) = (c.pool_groups, c.hidden, c.mlp_hidden, c.actions);
        assert_eq!(dlogits.len(), a, "dlogits length");

        col_sums_acc(l.head_b2.of_mut(grad), dlogits);
        mm_tn_acc(l.head_w2.of_mut(grad), &cache.head_act, dlogits, 1, h, a);
        let dact = mm_nt(dlogits, l.head_w2.of(p), 1, a, h);
        let dpre: Vec<f64> = dact.iter().zip(&cache.head_act).map(|(d, y)| d * (1.0 - y * y)).collect();
        col_sums_acc(l.head_b1.of_mut(grad), &dpre);
        mm_tn_acc(l.head_w1.of_mut(grad), &cache.pooled, &dpre, 1, h, h);
        let dpooled = mm_nt(&dpre, l.head_w1.of(p), 1, h, h);

        let mut dx: Vec<f64> = (0..n * h).map(|k| dpooled[k % h] / n as f64).collect();
        let scale = 1.0 / (h as f64).sqrt();
        for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            // MLP sub-block; the residual passes dx through unchanged.
            col_sums_acc(b.b2.of_mut(grad), &dx);
            mm_tn_acc(b.w2.of_mut(grad), &bc.act, &dx, n, f, h);
            let dact = mm_nt(&dx, b.w2.of(p), n, h, f);
            let dpre: Vec<f64> = dact.iter().zip(&bc.act).map(|(d, y)| d * (1.0 - y * y)).collect();
            col_sums_acc(b.b1.of_mut(grad), &dpre);
            mm_tn_acc(b.w1.of_mut(grad), &bc.ln2.xhat, &dpre, n, h, f);
            let dln2 = mm_nt(&dpre, b.w1.of(p), n, f, h);
            layernorm_back_acc(&mut dx, &dln2, &bc.ln2, h);

            // Attention sub-block.
            col_sums_acc(b.bo.of_mut(grad), &dx);
            mm_tn_acc(b.wo.of_mut(grad), &bc.o, &dx, n, h, h);
            let d_o = mm_nt(&dx, b.wo.of(p), n, h, h);
            let dattn = mm_nt(&d_o, &bc.v, n, h, n);
            let mut dv = vec![0.0; n * h];
            mm_tn_acc(&mut dv, &bc.attn, &d_o, n, n, h);
            let mut ds = vec![0.0; n * n];
            for i in 0..n {
                let row = &bc.attn[i * n..(i + 1) * n];
                let drow = &dattn[i * n..(i + 1) * n];
                let dot: f64 = row.iter().zip(drow).map(|(x, y)| x * y).sum();
                for j in 0..n {
                    ds[i * n + j] = row[j] * (drow[j] - dot) * scale;
                }
            }
            let dq = mm(&ds, &bc.k, n, n, h);
            let mut dk = vec![0.0; n * h];
            mm_tn_acc(&mut dk, &ds, &bc.q, n, n, h);
            mm_tn_acc(b.wq.of_mut(grad), &bc.ln1.xhat, &dq, n, h, h);
            mm_tn_acc(b.wk.of_mut(grad), &bc.ln1.xhat, &dk, n, h, h);
            mm_tn_acc(b.wv.of_mut(grad), &bc.ln1.xhat, &dv, n, h, h);
            let mut dln1 = mm_nt(&dq, b.wq.of(p), n, h, h);
            for (w, d) in [(b.wk, &dk), (b.wv, &dv)] {
                for (o, v) in dln1.iter_mut().zip(mm_nt(d, w.of(p), n, h, h)) {
                    *o += v;
                }
            }
            layernorm_back_acc(&mut dx, &dln1, &bc.ln1, h);
        }
        for (g, d) in l.pos.of_mut(grad).iter_mut().zip(&dx) {
            *g += d;
        }
        col_sums_acc(l.embed_b.of_mut(grad), &dx);
        mm_tn_acc(l.embed_w.of_mut(grad), &cache.input, &dx, n, c.input_width(), h);
    }

    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.param_specs()
            .into_iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let t = Tensor::new(s.shape.clone(), self.params[s.offset..s.offset + len].to_vec())?;
                Ok((s.name, t))
            })
            .collect()
    }

    /// Rebuilds a network from named tensors in layout order.
    pub fn from_named(cfg: &DecisionNetConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Format(format!(
                "{} tensors for a network with {}",
                tensors.len(),
                layout.specs.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.total);
        for (spec, (name, t)) in layout.specs.iter().zip(tensors) {
            if *name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} {:?} does not fit {}", t.shape(), spec.name)));
            }
            params.extend_from_slice(t.data());
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let named = self.named_tensors()?;
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::json!({ "net": self.cfg, "extra": extra });
        dump::write_checkpoint(path, &refs, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (manifest, tensors) = dump::read_checkpoint(path)?;
        let cfg: DecisionNetConfig = serde_json::from_value(manifest.meta["net"].clone())
            .map_err(|e| Error::Format(format!("policy checkpoint config: {e}")))?;
        let net = Self::from_named(&cfg, &tensors)?;
        Ok((net, manifest.meta["extra"].clone()))
    }
}
