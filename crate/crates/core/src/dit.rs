//! Encoder-decoder diffusion transformer over pseudo-spatial projections of
//! joint-space vectors.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, FreezeMask};
use crate::block::{self, BlockCache, BlockCtx, BlockParams};
use crate::error::{config, input, Error, Result};
use crate::nn::{self, join, Linear, Parameters};
use crate::rng::{self, domain};
use crate::world::TextCondition;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub d_vl: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub d_text: usize,
    pub mlp_ratio: usize,
    /// Length of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Unit-norm embeddings are multiplied by this before diffusion, giving
    /// roughly unit variance per coordinate. Queries are scaled the same way.
    #[serde(default = "unit_scale")]
    pub data_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            d_vl: 64,
            channels: 4,
            height: 8,
            width: 8,
            patch: 2,
            hidden: 64,
            heads: 4,
            depth: 2,
            d_text: 32,
            mlp_ratio: 4,
            freq_dim: 64,
            data_scale: 8.0,
        }
    }
}

impl DitConfig {
    pub fn full_scale() -> Self {
        DitConfig {
            d_vl: 1536,
            channels: 4,
            height: 32,
            width: 32,
            patch: 2,
            hidden: 1152,
            heads: 16,
            depth: 14,
            d_text: 1536,
            mlp_ratio: 4,
            freq_dim: 256,
            data_scale: (1536f64).sqrt(),
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn map_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn ffn_width(&self) -> usize {
        self.mlp_ratio * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_vl,
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.hidden,
            self.heads,
            self.depth,
            self.d_text,
            self.mlp_ratio,
            self.freq_dim,
        ];
        if positive.contains(&0) {
            return config("denoiser dimensions must be positive");
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return config("height and width must be divisible by the patch size");
        }
        if self.hidden % self.heads != 0 {
            return config("hidden width must be divisible by the head count");
        }
        if self.hidden % 4 != 0 {
            return config("hidden width must be divisible by 4 for 2-D position features");
        }
        if self.freq_dim % 2 != 0 {
            return config("timestep feature length must be even");
        }
        if !(self.data_scale.is_finite() && self.data_scale > 0.0) {
            return config("data_scale must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count of the backbone.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        Linear::count(self.d_vl, self.map_len())
            + Linear::count(self.patch_dim(), d)
            + Linear::count(self.freq_dim, d)
            + Linear::count(d, d)
            + Linear::count(self.d_text, d)
            + 2 * self.depth * BlockParams::count(d, self.ffn_width())
            + Linear::count(d, self.patch_dim())
            + Linear::count(self.map_len(), self.d_vl)
    }

    pub fn adapter_param_count(&self) -> usize {
        AdapterParams::count(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams {
    pub projector: Linear,
    pub patch_embed: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub text_proj: Linear,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<BlockParams>,
    pub unpatch: Linear,
    pub head: Linear,
}

impl DitParams {
    pub fn init(cfg: &DitConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, domain::INIT, 0);
        let d = cfg.hidden;
        let std = INIT_STD;
        DitParams {
            projector: Linear::init(cfg.d_vl, cfg.map_len(), std, &mut r),
            patch_embed: Linear::init(cfg.patch_dim(), d, std, &mut r),
            time_in: Linear::init(cfg.freq_dim, d, std, &mut r),
            time_out: Linear::init(d, d, std, &mut r),
            text_proj: Linear::init(cfg.d_text, d, std, &mut r),
            encoder: (0..cfg.depth).map(|_| BlockParams::init(d, cfg.ffn_width(), std, &mut r)).collect(),
            decoder: (0..cfg.depth).map(|_| BlockParams::init(d, cfg.ffn_width(), std, &mut r)).collect(),
            unpatch: Linear::init(d, cfg.patch_dim(), std, &mut r),
            head: Linear::init(cfg.map_len(), cfg.d_vl, std, &mut r),
        }
    }
}

impl Parameters for DitParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        self.projector.visit(&join(p, "projector"), f);
        self.patch_embed.visit(&join(p, "patch_embed"), f);
        self.time_in.visit(&join(p, "time_in"), f);
        self.time_out.visit(&join(p, "time_out"), f);
        self.text_proj.visit(&join(p, "text_proj"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(p, &format!("encoder.{i}")), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(p, &format!("decoder.{i}")), f);
        }
        self.unpatch.visit(&join(p, "unpatch"), f);
        self.head.visit(&join(p, "head"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        self.projector.visit_mut(&join(p, "projector"), f);
        self.patch_embed.visit_mut(&join(p, "patch_embed"), f);
        self.time_in.visit_mut(&join(p, "time_in"), f);
        self.time_out.visit_mut(&join(p, "time_out"), f);
        self.text_proj.visit_mut(&join(p, "text_proj"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("encoder.{i}")), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("decoder.{i}")), f);
        }
        self.unpatch.visit_mut(&join(p, "unpatch"), f);
        self.head.visit_mut(&join(p, "head"), f);
    }
}

/// Backbone plus optional adapter; also the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: DitParams,
    pub adapter: Option<AdapterParams>,
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        self.backbone.visit(&join(p, "backbone"), f);
        if let Some(a) = &self.adapter {
            a.visit(&join(p, "adapter"), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        self.backbone.visit_mut(&join(p, "backbone"), f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&join(p, "adapter"), f);
        }
    }
}

/// Per-sample control input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Control<'a> {
    /// Plain encoder skips; the adapter is bypassed.
    Absent,
    /// Adapter runs on a zero query (the dropped-condition branch).
    Null,
    Query(&'a [f64]),
}

pub struct Batch<'a> {
    /// `B × d_VL` noisy inputs.
    pub z: Array2<f64>,
    pub timesteps: Vec<usize>,
    pub texts: Vec<Option<&'a TextCondition>>,
    pub controls: Vec<Control<'a>>,
    pub delta: f64,
}

impl<'a> Batch<'a> {
    /// Unconditioned batch (no text, no control, δ = 1).
    pub fn plain(z: Array2<f64>, timesteps: Vec<usize>) -> Self {
        let b = z.nrows();
        Batch {
            z,
            timesteps,
            texts: vec![None; b],
            controls: vec![Control::Absent; b],
            delta: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Sinusoidal timestep features `[cos(n·ω_i) | sin(n·ω_i)]`.
pub fn timestep_features(n: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let w = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (n as f64 * w).cos();
        out[half + i] = (n as f64 * w).sin();
    }
    out
}

/// Fixed 2-D sine-cosine table, `M × D`.
pub fn position_table(cfg: &DitConfig) -> Array2<f64> {
    let gh = cfg.height / cfg.patch;
    let gw = cfg.width / cfg.patch;
    let d = cfg.hidden;
    let quarter = d / 4;
    let mut table = Array2::zeros((gh * gw, d));
    for y in 0..gh {
        for x in 0..gw {
            let t = y * gw + x;
            for i in 0..quarter {
                let w = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                table[[t, i]] = (y as f64 * w).sin();
                table[[t, quarter + i]] = (y as f64 * w).cos();
                table[[t, 2 * quarter + i]] = (x as f64 * w).sin();
                table[[t, 3 * quarter + i]] = (x as f64 * w).cos();
            }
        }
    }
    table
}

/// `index[t·P + k]` is the flat map position feeding component `k` of token `t`.
fn patch_index(cfg: &DitConfig) -> Vec<usize> {
    let (p, c, h, w) = (cfg.patch, cfg.channels, cfg.height, cfg.width);
    let gw = w / p;
    let mut idx = Vec::with_capacity(cfg.map_len());
    for t in 0..cfg.tokens() {
        let (gy, gx) = (t / gw, t % gw);
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    idx.push(ch * h * w + (gy * p + dy) * w + gx * p + dx);
                }
            }
        }
    }
    idx
}

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

struct ControlCache {
    zq: Array2<f64>,
    active: Vec<bool>,
    blocks: Vec<BlockCache>,
    outs: Vec<Array2<f64>>,
}

/// Activations saved by [`Denoiser::forward`] for [`Denoiser::backward`].
pub struct ForwardCache {
    version: u64,
    z: Array2<f64>,
    feats: Array2<f64>,
    t1: Array2<f64>,
    st: Array2<f64>,
    tau: Array2<f64>,
    silu_tau: Array2<f64>,
    text_raw: Vec<Option<Array2<f64>>>,
    text: Vec<Option<Array2<f64>>>,
    patches: Array2<f64>,
    enc: Vec<BlockCache>,
    control: Option<ControlCache>,
    dec: Vec<BlockCache>,
    dec_out: Array2<f64>,
    map: Array2<f64>,
    delta: f64,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DitConfig,
    params: ModelParams,
    pos: Array2<f64>,
    index: Vec<usize>,
    version: u64,
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {what}")))
    }
}

impl Denoiser {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = DitParams::init(&config, seed);
        Self::from_params(config, backbone, None)
    }

    pub fn from_params(config: DitConfig, backbone: DitParams, adapter: Option<AdapterParams>) -> Result<Self> {
        config.validate()?;
        let expect = DitParams::init(&config, 0);
        let mut shapes_ok = true;
        let mut theirs = Vec::new();
        backbone.visit("", &mut |_, _, s| theirs.push(s.to_vec()));
        let mut i = 0;
        expect.visit("", &mut |_, _, s| {
            shapes_ok &= theirs.get(i).is_some_and(|t| t == s);
            i += 1;
        });
        if !shapes_ok || theirs.len() != i {
            return crate::error::config("backbone tensors do not match the denoiser config");
        }
        if let Some(a) = &adapter {
            a.check(&config)?;
        }
        Ok(Denoiser {
            pos: position_table(&config),
            index: patch_index(&config),
            config,
            params: ModelParams { backbone, adapter },
            version: next_version(),
        })
    }

    /// Same configuration with replacement parameters of identical shapes.
    pub fn with_params(&self, params: ModelParams) -> Self {
        Denoiser {
            config: self.config.clone(),
            params,
            pos: self.pos.clone(),
            index: self.index.clone(),
            version: next_version(),
        }
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.version = next_version();
        &mut self.params
    }

    pub fn backbone(&self) -> &DitParams {
        &self.params.backbone
    }

    pub fn adapter(&self) -> Option<&AdapterParams> {
        self.params.adapter.as_ref()
    }

    pub fn has_adapter(&self) -> bool {
        self.params.adapter.is_some()
    }

    /// A fresh adapter for this backbone (encoder copy, zero linears).
    pub fn new_adapter(&self) -> AdapterParams {
        AdapterParams::from_backbone(&self.config, &self.params.backbone)
    }

    pub fn attach(&mut self, adapter: AdapterParams) -> Result<()> {
        adapter.check(&self.config)?;
        self.params_mut().adapter = Some(adapter);
        Ok(())
    }

    pub fn detach(&mut self) -> Option<AdapterParams> {
        self.params_mut().adapter.take()
    }

    pub fn time_embed(&self, n: usize) -> Array1<f64> {
        let p = &self.params.backbone;
        let f = timestep_features(n, self.config.freq_dim).insert_axis(Axis(0));
        let st = p.time_in.forward(&f.view()).mapv(nn::silu);
        p.time_out.forward(&st.view()).row(0).to_owned()
    }

    fn patchify(&self, h: &Array2<f64>) -> Array2<f64> {
        let (m, pd) = (self.config.tokens(), self.config.patch_dim());
        let mut out = Array2::zeros((h.nrows() * m, pd));
        for (b, row) in h.rows().into_iter().enumerate() {
            for t in 0..m {
                let mut dst = out.row_mut(b * m + t);
                for k in 0..pd {
                    dst[k] = row[self.index[t * pd + k]];
                }
            }
        }
        out
    }

    fn unpatchify(&self, x: &Array2<f64>) -> Array2<f64> {
        let (m, pd) = (self.config.tokens(), self.config.patch_dim());
        let batch = x.nrows() / m;
        let mut out = Array2::zeros((batch, self.config.map_len()));
        for b in 0..batch {
            let mut dst = out.row_mut(b);
            for t in 0..m {
                let src = x.row(b * m + t);
                for k in 0..pd {
                    dst[self.index[t * pd + k]] = src[k];
                }
            }
        }
        out
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return input("empty batch");
        }
        if batch.z.ncols() != self.config.d_vl {
            return config(format!("input width {} != d_VL {}", batch.z.ncols(), self.config.d_vl));
        }
        if batch.timesteps.len() != b || batch.texts.len() != b || batch.controls.len() != b {
            return config("batch fields have different lengths");
        }
        if batch.timesteps.contains(&0) {
            return input("timestep 0 is not a noise level");
        }
        for t in batch.texts.iter().flatten() {
            if t.token_embs.ncols() != self.config.d_text || t.token_embs.nrows() == 0 {
                return config("text condition width does not match D_text");
            }
        }
        for c in &batch.controls {
            if let Control::Query(q) = c {
                if q.len() != self.config.d_vl {
                    return config("control query width does not match d_VL");
                }
                if !self.has_adapter() {
                    return config("control query given but no adapter is attached");
                }
            }
        }
        if !batch.delta.is_finite() {
            return config("delta must be finite");
        }
        Ok(())
    }

    /// Predicted noise for every row of the batch.
    pub fn denoise(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.forward(batch).map(|(eps, _)| eps)
    }

    pub fn forward(&self, batch: &Batch) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let p = &self.params.backbone;
        let bsz = batch.len();
        let m = cfg.tokens();

        let mut feats = Array2::zeros((bsz, cfg.freq_dim));
        for (mut row, &n) in feats.rows_mut().into_iter().zip(&batch.timesteps) {
            row.assign(&timestep_features(n, cfg.freq_dim));
        }
        let t1 = p.time_in.forward(&feats.view());
        let st = t1.mapv(nn::silu);
        let tau = p.time_out.forward(&st.view());
        let silu_tau = tau.mapv(nn::silu);

        let text_raw: Vec<Option<Array2<f64>>> = batch.texts.iter().map(|t| t.map(|t| t.token_embs.clone())).collect();
        let text: Vec<Option<Array2<f64>>> = text_raw
            .iter()
            .map(|t| t.as_ref().map(|t| p.text_proj.forward(&t.view())))
            .collect();

        let h = p.projector.forward(&batch.z.view());
        let patches = self.patchify(&h);
        let mut x = p.patch_embed.forward(&patches.view());
        for b in 0..bsz {
            let mut rows = x.slice_mut(s![b * m..(b + 1) * m, ..]);
            rows += &self.pos;
        }
        let x0 = x.clone();

        let ctx = BlockCtx {
            tokens: m,
            heads: cfg.heads,
            silu_tau: &silu_tau,
            text: &text,
        };

        let mut enc = Vec::with_capacity(cfg.depth);
        let mut ys = Vec::with_capacity(cfg.depth);
        for (l, bp) in p.encoder.iter().enumerate() {
            let (y, c) = block::forward(bp, &x, &ctx);
            check_finite(&y, &format!("encoder block {l}"))?;
            enc.push(c);
            ys.push(y.clone());
            x = y;
        }

        let active: Vec<bool> = batch
            .controls
            .iter()
            .map(|c| !matches!(c, Control::Absent))
            .collect();
        let control = match &self.params.adapter {
            Some(ad) if active.iter().any(|&a| a) => {
                let mut zq = Array2::zeros((bsz, cfg.d_vl));
                for (b, c) in batch.controls.iter().enumerate() {
                    if let Control::Query(q) = c {
                        let scaled = ndarray::ArrayView1::from(*q).mapv(|v| v * cfg.data_scale);
                        zq.row_mut(b).assign(&scaled);
                    }
                }
                let z1 = ad.z1.forward(&zq.view());
                let mut hc = x0.clone();
                for b in 0..bsz {
                    let mut rows = hc.slice_mut(s![b * m..(b + 1) * m, ..]);
                    rows += &z1.row(b);
                }
                let mut blocks = Vec::with_capacity(cfg.depth);
                let mut outs = Vec::with_capacity(cfg.depth);
                for l in 0..cfg.depth {
                    let (co, c) = block::forward(&ad.blocks[l], &hc, &ctx);
                    check_finite(&co, &format!("control block {l}"))?;
                    let mut inj = ad.z2[l].forward(&co.view());
                    for (b, &a) in active.iter().enumerate() {
                        if !a {
                            inj.slice_mut(s![b * m..(b + 1) * m, ..]).fill(0.0);
                        }
                    }
                    ys[l] += &inj;
                    hc = ys[l].clone();
                    blocks.push(c);
                    outs.push(co);
                }
                Some(ControlCache {
                    zq,
                    active,
                    blocks,
                    outs,
                })
            }
            _ => None,
        };

        let mut dec = Vec::with_capacity(cfg.depth);
        for (j, bp) in p.decoder.iter().enumerate() {
            let skip = &ys[cfg.depth - 1 - j];
            let inp = &x + &(skip * batch.delta);
            let (y, c) = block::forward(bp, &inp, &ctx);
            check_finite(&y, &format!("decoder block {j}"))?;
            dec.push(c);
            x = y;
        }

        let up = p.unpatch.forward(&x.view());
        let map = self.unpatchify(&up);
        let eps = p.head.forward(&map.view());
        check_finite(&eps, "output head")?;

        let cache = ForwardCache {
            version: self.version,
            z: batch.z.clone(),
            feats,
            t1,
            st,
            tau,
            silu_tau,
            text_raw,
            text,
            patches,
            enc,
            control,
            dec,
            dec_out: x,
            map,
            delta: batch.delta,
        };
        Ok((eps, cache))
    }

    /// Gradients of `<g_out, eps>` with respect to every tensor; tensors
    /// outside `mask` get exact zeros.
    pub fn backward(&self, cache: &ForwardCache, g_out: &Array2<f64>, mask: FreezeMask) -> Result<ModelParams> {
        if cache.version != self.version {
            return Err(Error::Usage("forward cache is stale: parameters changed since the forward pass".into()));
        }
        if g_out.dim() != (cache.z.nrows(), self.config.d_vl) {
            return config("upstream gradient shape does not match the forward batch");
        }
        let cfg = &self.config;
        let p = &self.params.backbone;
        let m = cfg.tokens();
        let bsz = cache.z.nrows();
        let depth = cfg.depth;
        let mut grads = self.params.zeros_like();
        let train_bb = mask.backbone;
        let train_ad = mask.adapter && self.params.adapter.is_some();

        let ctx = BlockCtx {
            tokens: m,
            heads: cfg.heads,
            silu_tau: &cache.silu_tau,
            text: &cache.text,
        };
        let mut g_st = Array2::zeros(cache.silu_tau.raw_dim());
        let mut g_text: Vec<Option<Array2<f64>>> = cache.text.iter().map(|t| t.as_ref().map(|t| Array2::zeros(t.raw_dim()))).collect();
        let absorb = |g_st: &mut Array2<f64>, g_text: &mut Vec<Option<Array2<f64>>>, ig: &block::BlockInputGrads| {
            *g_st += &ig.silu_tau;
            for (acc, g) in g_text.iter_mut().zip(&ig.text) {
                if let (Some(acc), Some(g)) = (acc.as_mut(), g.as_ref()) {
                    *acc += g;
                }
            }
        };

        let gb = &mut grads.backbone;
        let g_map = p.head.backward(&cache.map.view(), &g_out.view(), train_bb.then_some(&mut gb.head));
        let g_up = self.patchify(&g_map);
        let mut g_x = p.unpatch.backward(&cache.dec_out.view(), &g_up.view(), train_bb.then_some(&mut gb.unpatch));

        // decoder; g_ys[l] collects the gradient reaching skip l
        let mut g_ys: Vec<Array2<f64>> = (0..depth).map(|_| Array2::zeros(g_x.raw_dim())).collect();
        for j in (0..depth).rev() {
            let ig = block::backward(&p.decoder[j], &cache.dec[j], &g_x, &ctx, train_bb.then_some(&mut gb.decoder[j]));
            absorb(&mut g_st, &mut g_text, &ig);
            g_ys[depth - 1 - j].scaled_add(cache.delta, &ig.x);
            g_x = ig.x;
        }
        // the decoder stream starts from the plain last encoder output
        let g_top = g_x;

        let mut g_x0_ctrl = None;
        if let (Some(cc), Some(ad)) = (&cache.control, &self.params.adapter) {
            let ga = grads.adapter.as_mut().expect("gradient mirrors the model");
            let mut g_next: Option<Array2<f64>> = None;
            for l in (0..depth).rev() {
                let mut g_yc = g_ys[l].clone();
                if let Some(gn) = g_next.take() {
                    g_yc += &gn;
                }
                // yc_l = y_l + Z2(F_c(hc)); the backbone term passes through unchanged
                g_ys[l] = g_yc.clone();
                let mut g_inj = g_yc;
                for (b, &a) in cc.active.iter().enumerate() {
                    if !a {
                        g_inj.slice_mut(s![b * m..(b + 1) * m, ..]).fill(0.0);
                    }
                }
                let g_co = ad.z2[l].backward(&cc.outs[l].view(), &g_inj.view(), train_ad.then_some(&mut ga.z2[l]));
                let ig = block::backward(&ad.blocks[l], &cc.blocks[l], &g_co, &ctx, train_ad.then_some(&mut ga.blocks[l]));
                absorb(&mut g_st, &mut g_text, &ig);
                g_next = Some(ig.x);
            }
            let g_hc0 = g_next.expect("depth is positive");
            if train_ad {
                let mut g_z1 = Array2::zeros((bsz, cfg.hidden));
                for b in 0..bsz {
                    g_z1.row_mut(b).assign(&g_hc0.slice(s![b * m..(b + 1) * m, ..]).sum_axis(Axis(0)));
                }
                ad.z1.accumulate(&cc.zq.view(), &g_z1.view(), &mut ga.z1);
            }
            g_x0_ctrl = Some(g_hc0);
        }

        if !train_bb {
            return Ok(grads);
        }

        let gb = &mut grads.backbone;
        let mut g_x = &g_ys[depth - 1] + &g_top;
        for l in (0..depth).rev() {
            let ig = block::backward(&p.encoder[l], &cache.enc[l], &g_x, &ctx, Some(&mut gb.encoder[l]));
            absorb(&mut g_st, &mut g_text, &ig);
            g_x = ig.x;
            if l > 0 {
                g_x += &g_ys[l - 1];
            }
        }
        if let Some(g) = g_x0_ctrl {
            g_x += &g;
        }

        let g_patches = p.patch_embed.backward(&cache.patches.view(), &g_x.view(), Some(&mut gb.patch_embed));
        let g_h = self.unpatchify(&g_patches);
        p.projector.accumulate(&cache.z.view(), &g_h.view(), &mut gb.projector);

        let mut g_tau = g_st;
        g_tau.zip_mut_with(&cache.tau, |g, &t| *g *= nn::silu_grad(t));
        let mut g_t1 = p.time_out.backward(&cache.st.view(), &g_tau.view(), Some(&mut gb.time_out));
        g_t1.zip_mut_with(&cache.t1, |g, &t| *g *= nn::silu_grad(t));
        p.time_in.accumulate(&cache.feats.view(), &g_t1.view(), &mut gb.time_in);

        for (raw, g) in cache.text_raw.iter().zip(&g_text) {
            if let (Some(raw), Some(g)) = (raw, g) {
                p.text_proj.accumulate(&raw.view(), &g.view(), &mut gb.text_proj);
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{World, WorldConfig};

    fn setup() -> (World, Denoiser) {
        let world = World::new(WorldConfig::default()).unwrap();
        let model = Denoiser::new(DitConfig::default(), 3).unwrap();
        (world, model)
    }

    fn random_z(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, 99, 0);
        Array2::from_shape_simple_fn((b, d), || rng::normal(&mut r))
    }

    /// Makes every zero-initialized tensor nonzero so paths are exercised.
    pub(crate) fn perturb(model: &mut Denoiser, seed: u64, std: f64) {
        let mut r = rng::stream(seed, 98, 0);
        model.params_mut().visit_mut("", &mut |_, d, _| {
            for v in d.iter_mut() {
                *v += std * rng::normal(&mut r);
            }
        });
    }

    #[test]
    fn patchify_roundtrip() {
        let (_, model) = setup();
        let h = random_z(3, model.config.map_len(), 1);
        assert_eq!(model.unpatchify(&model.patchify(&h)), h);
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [
            DitConfig::default(),
            DitConfig {
                hidden: 32,
                heads: 2,
                depth: 3,
                ..DitConfig::default()
            },
            DitConfig {
                channels: 2,
                height: 4,
                width: 4,
                hidden: 16,
                depth: 1,
                mlp_ratio: 2,
                freq_dim: 8,
                ..DitConfig::default()
            },
        ] {
            let model = Denoiser::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.backbone().param_count(), cfg.param_count());
            let d = cfg.hidden;
            assert_eq!(BlockParams::count(d, 4 * d), 22 * d * d + 22 * d);
            assert_eq!(model.new_adapter().param_count(), cfg.adapter_param_count());
        }
    }

    #[test]
    fn fresh_model_ignores_text() {
        let (world, model) = setup();
        let z = random_z(1, 64, 5);
        let base = model.denoise(&Batch::plain(z.clone(), vec![17])).unwrap();
        for i in 0..10u32 {
            let text = world.encode_tokens(&[i % 48, 50, (i * 7) % 48]).unwrap();
            let mut b = Batch::plain(z.clone(), vec![17]);
            b.texts = vec![Some(&text)];
            assert_eq!(model.denoise(&b).unwrap(), base);
        }
    }

    #[test]
    fn timestep_embeddings_are_distinct() {
        let (_, model) = setup();
        let taus: Vec<Array1<f64>> = (1..=100).map(|n| model.time_embed(n)).collect();
        for i in 0..taus.len() {
            let f = timestep_features(i + 1, 64);
            assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
            for j in i + 1..taus.len() {
                assert_ne!(taus[i], taus[j], "n={} and n={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn large_inputs_stay_finite() {
        let (world, mut model) = setup();
        perturb(&mut model, 1, 0.05);
        let text = world.encode_tokens(&[1, 2, 3]).unwrap();
        let mut z = random_z(2, 64, 2);
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row *= 1e3 / n;
        }
        let mut b = Batch::plain(z, vec![1, 100]);
        b.texts = vec![Some(&text), None];
        let eps = model.denoise(&b).unwrap();
        assert!(eps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_adapter_is_identity() {
        let (world, mut model) = setup();
        perturb(&mut model, 4, 0.05);
        let text = world.encode_tokens(&[3, 9, 20]).unwrap();
        let q: Vec<f64> = random_z(1, 64, 8).row(0).to_vec();
        let z = random_z(3, 64, 6);
        let mut b = Batch::plain(z.clone(), vec![5, 50, 90]);
        b.texts = vec![Some(&text), None, Some(&text)];
        let before = model.denoise(&b).unwrap();
        model.attach(model.new_adapter()).unwrap();
        b.controls = vec![Control::Query(&q), Control::Null, Control::Absent];
        assert_eq!(model.denoise(&b).unwrap(), before);
        model.detach();
        b.controls = vec![Control::Absent; 3];
        assert_eq!(model.denoise(&b).unwrap(), before);
    }

    #[test]
    fn adapter_weights_reach_output_unless_delta_zero() {
        let (_, mut model) = setup();
        perturb(&mut model, 4, 0.05);
        model.attach(model.new_adapter()).unwrap();
        let q: Vec<f64> = random_z(1, 64, 8).row(0).to_vec();
        let z = random_z(1, 64, 6);
        let mut b = Batch::plain(z, vec![40]);
        b.controls = vec![Control::Query(&q)];
        let base = model.denoise(&b).unwrap();
        {
            let ad = model.params_mut().adapter.as_mut().unwrap();
            ad.z2[0].w[[0, 0]] += 1e-2;
            ad.z1.w[[0, 0]] += 1e-2;
        }
        let changed = model.denoise(&b).unwrap();
        assert!((&changed - &base).iter().any(|v| v.abs() > 0.0));
        b.delta = 0.0;
        let a = model.denoise(&b).unwrap();
        model.params_mut().adapter.as_mut().unwrap().fill(0.3);
        assert_eq!(model.denoise(&b).unwrap(), a);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (_, mut model) = setup();
        let b = Batch::plain(random_z(1, 64, 1), vec![3]);
        let (eps, cache) = model.forward(&b).unwrap();
        model.params_mut();
        let err = model.backward(&cache, &eps, FreezeMask::ALL).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (world, mut model) = setup();
        perturb(&mut model, 2, 0.05);
        model.attach(model.new_adapter()).unwrap();
        let text = world.encode_tokens(&[1, 2]).unwrap();
        let q = vec![0.1; 64];
        let mut b = Batch::plain(random_z(2, 64, 1), vec![3, 70]);
        b.texts = vec![Some(&text), None];
        b.controls = vec![Control::Query(&q), Control::Null];
        let (eps, cache) = model.forward(&b).unwrap();
        let g = model.backward(&cache, &Array2::zeros(eps.raw_dim()), FreezeMask::ALL).unwrap();
        g.visit("", &mut |n, d, _| assert!(d.iter().all(|&v| v == 0.0), "{n}"));
    }

    #[test]
    fn frozen_backbone_gets_zero_gradient() {
        let (world, mut model) = setup();
        perturb(&mut model, 2, 0.05);
        let mut ad = model.new_adapter();
        ad.z1.w.fill(0.01);
        ad.z2.iter_mut().for_each(|z| z.w.fill(0.01));
        model.attach(ad).unwrap();
        let text = world.encode_tokens(&[1, 2]).unwrap();
        let q = vec![0.1; 64];
        let mut b = Batch::plain(random_z(2, 64, 1), vec![3, 70]);
        b.texts = vec![Some(&text), Some(&text)];
        b.controls = vec![Control::Query(&q), Control::Query(&q)];
        let (eps, cache) = model.forward(&b).unwrap();
        let g = model.backward(&cache, &eps, FreezeMask::freeze_backbone()).unwrap();
        g.backbone.visit("", &mut |n, d, _| assert!(d.iter().all(|&v| v == 0.0), "{n}"));
        let mut nonzero = 0.0;
        g.adapter.unwrap().visit("", &mut |_, d, _| nonzero += d.iter().map(|v| v.abs()).sum::<f64>());
        assert!(nonzero > 0.0);
    }

    #[test]
    fn shape_errors() {
        let (_, model) = setup();
        assert!(matches!(
            model.denoise(&Batch::plain(random_z(1, 10, 1), vec![1])),
            Err(Error::Config(_))
        ));
        let q = vec![0.0; 64];
        let mut b = Batch::plain(random_z(1, 64, 1), vec![1]);
        b.controls = vec![Control::Query(&q)];
        assert!(matches!(model.denoise(&b), Err(Error::Config(_))));
        let bad = DitConfig {
            height: 7,
            ..DitConfig::default()
        };
        assert!(Denoiser::new(bad, 0).is_err());
    }
}
