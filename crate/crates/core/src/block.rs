//! Transformer block: AdaLN-modulated self-attention, text cross-attention
//! and feed-forward sub-layers, each added back through a per-channel gate.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::nn::{self, join, Linear, NormCache, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ada_sa: Linear,
    pub ada_ca: Linear,
    pub ada_ff: Linear,
    pub gate_sa: Array1<f64>,
    pub gate_ca: Array1<f64>,
    pub gate_ff: Array1<f64>,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub cross_q: Linear,
    pub cross_kv: Linear,
    pub cross_out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl BlockParams {
    pub fn init(d: usize, hidden: usize, std: f64, rng: &mut impl Rng) -> Self {
        BlockParams {
            ada_sa: Linear::zeros(d, 2 * d),
            ada_ca: Linear::zeros(d, 2 * d),
            ada_ff: Linear::zeros(d, 2 * d),
            gate_sa: Array1::zeros(d),
            gate_ca: Array1::zeros(d),
            gate_ff: Array1::zeros(d),
            qkv: Linear::init(d, 3 * d, std, rng),
            attn_out: Linear::init(d, d, std, rng),
            cross_q: Linear::init(d, d, std, rng),
            cross_kv: Linear::init(d, 2 * d, std, rng),
            cross_out: Linear::init(d, d, std, rng),
            ff_in: Linear::init(d, hidden, std, rng),
            ff_out: Linear::init(hidden, d, std, rng),
        }
    }

    /// `14D² + 18D + 2D·h + h` for width `D` and FFN width `h`.
    pub fn count(d: usize, hidden: usize) -> usize {
        3 * Linear::count(d, 2 * d)
            + 3 * d
            + Linear::count(d, 3 * d)
            + 3 * Linear::count(d, d)
            + Linear::count(d, 2 * d)
            + Linear::count(d, hidden)
            + Linear::count(hidden, d)
    }

    pub fn width(&self) -> usize {
        self.gate_sa.len()
    }
}

impl Parameters for BlockParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        self.ada_sa.visit(&join(p, "ada_sa"), f);
        self.ada_ca.visit(&join(p, "ada_ca"), f);
        self.ada_ff.visit(&join(p, "ada_ff"), f);
        self.gate_sa.visit(&join(p, "gate_sa"), f);
        self.gate_ca.visit(&join(p, "gate_ca"), f);
        self.gate_ff.visit(&join(p, "gate_ff"), f);
        self.qkv.visit(&join(p, "qkv"), f);
        self.attn_out.visit(&join(p, "attn_out"), f);
        self.cross_q.visit(&join(p, "cross_q"), f);
        self.cross_kv.visit(&join(p, "cross_kv"), f);
        self.cross_out.visit(&join(p, "cross_out"), f);
        self.ff_in.visit(&join(p, "ff_in"), f);
        self.ff_out.visit(&join(p, "ff_out"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        self.ada_sa.visit_mut(&join(p, "ada_sa"), f);
        self.ada_ca.visit_mut(&join(p, "ada_ca"), f);
        self.ada_ff.visit_mut(&join(p, "ada_ff"), f);
        self.gate_sa.visit_mut(&join(p, "gate_sa"), f);
        self.gate_ca.visit_mut(&join(p, "gate_ca"), f);
        self.gate_ff.visit_mut(&join(p, "gate_ff"), f);
        self.qkv.visit_mut(&join(p, "qkv"), f);
        self.attn_out.visit_mut(&join(p, "attn_out"), f);
        self.cross_q.visit_mut(&join(p, "cross_q"), f);
        self.cross_kv.visit_mut(&join(p, "cross_kv"), f);
        self.cross_out.visit_mut(&join(p, "cross_out"), f);
        self.ff_in.visit_mut(&join(p, "ff_in"), f);
        self.ff_out.visit_mut(&join(p, "ff_out"), f);
    }
}

/// Per-call inputs shared by every block of one forward pass.
pub struct BlockCtx<'a> {
    pub tokens: usize,
    pub heads: usize,
    /// `B × D`, the activated time embedding.
    pub silu_tau: &'a Array2<f64>,
    /// Projected text tokens per sample (`K × D`), `None` when absent.
    pub text: &'a [Option<Array2<f64>>],
}

struct Sub {
    norm: NormCache,
    modv: Array2<f64>,
    a: Array2<f64>,
}

pub struct BlockCache {
    sa: Sub,
    qkv: Array2<f64>,
    sa_probs: Vec<Vec<Array2<f64>>>,
    o_sa: Array2<f64>,
    u_sa: Array2<f64>,
    ca: Sub,
    q_ca: Array2<f64>,
    kv_ca: Vec<Option<Array2<f64>>>,
    ca_probs: Vec<Option<Vec<Array2<f64>>>>,
    o_ca: Array2<f64>,
    u_ca: Array2<f64>,
    ff: Sub,
    h_ff: Array2<f64>,
    g_ff: Array2<f64>,
    u_ff: Array2<f64>,
}

/// Gradients flowing out of a block besides its input.
pub struct BlockInputGrads {
    pub x: Array2<f64>,
    pub silu_tau: Array2<f64>,
    pub text: Vec<Option<Array2<f64>>>,
}

fn sub_forward(ada: &Linear, x: &Array2<f64>, ctx: &BlockCtx) -> Sub {
    let modv = ada.forward(&ctx.silu_tau.view());
    let norm = nn::layer_norm(x);
    let a = nn::modulate(&norm.xhat, &modv, ctx.tokens);
    Sub { norm, modv, a }
}

/// Returns `(g_x, g_silu_tau)` for one modulated-norm sub-layer input.
fn sub_backward(
    ada: &Linear,
    sub: &Sub,
    g_a: &Array2<f64>,
    ctx: &BlockCtx,
    grad: Option<&mut Linear>,
) -> (Array2<f64>, Array2<f64>) {
    let (g_xhat, g_mod) = nn::modulate_backward(g_a, &sub.norm.xhat, &sub.modv, ctx.tokens);
    let g_st = ada.backward(&ctx.silu_tau.view(), &g_mod.view(), grad);
    (nn::layer_norm_backward(&g_xhat, &sub.norm), g_st)
}

fn gated(u: &Array2<f64>, gate: &Array1<f64>) -> Array2<f64> {
    u * gate
}

fn gate_grad(g: &Array2<f64>, u: &Array2<f64>) -> Array1<f64> {
    (g * u).sum_axis(Axis(0))
}

pub fn forward(p: &BlockParams, x: &Array2<f64>, ctx: &BlockCtx) -> (Array2<f64>, BlockCache) {
    let d = p.width();
    let m = ctx.tokens;
    let batch = x.nrows() / m;

    let sa = sub_forward(&p.ada_sa, x, ctx);
    let qkv = p.qkv.forward(&sa.a.view());
    let mut o_sa = Array2::zeros((x.nrows(), d));
    let mut sa_probs = Vec::with_capacity(batch);
    for b in 0..batch {
        let r = b * m..(b + 1) * m;
        let (o, probs) = nn::attention(
            &qkv.slice(s![r.clone(), ..d]),
            &qkv.slice(s![r.clone(), d..2 * d]),
            &qkv.slice(s![r.clone(), 2 * d..]),
            ctx.heads,
        );
        o_sa.slice_mut(s![r, ..]).assign(&o);
        sa_probs.push(probs);
    }
    let u_sa = p.attn_out.forward(&o_sa.view());
    let x1 = x + &gated(&u_sa, &p.gate_sa);

    let ca = sub_forward(&p.ada_ca, &x1, ctx);
    let q_ca = p.cross_q.forward(&ca.a.view());
    let mut o_ca = Array2::zeros((x.nrows(), d));
    let mut kv_ca = Vec::with_capacity(batch);
    let mut ca_probs = Vec::with_capacity(batch);
    for b in 0..batch {
        let r = b * m..(b + 1) * m;
        match &ctx.text[b] {
            Some(t) => {
                let kv = p.cross_kv.forward(&t.view());
                let (o, probs) = nn::attention(
                    &q_ca.slice(s![r.clone(), ..]),
                    &kv.slice(s![.., ..d]),
                    &kv.slice(s![.., d..]),
                    ctx.heads,
                );
                o_ca.slice_mut(s![r, ..]).assign(&o);
                kv_ca.push(Some(kv));
                ca_probs.push(Some(probs));
            }
            None => {
                kv_ca.push(None);
                ca_probs.push(None);
            }
        }
    }
    let mut u_ca = p.cross_out.forward(&o_ca.view());
    for b in 0..batch {
        if ctx.text[b].is_none() {
            u_ca.slice_mut(s![b * m..(b + 1) * m, ..]).fill(0.0);
        }
    }
    let x2 = &x1 + &gated(&u_ca, &p.gate_ca);

    let ff = sub_forward(&p.ada_ff, &x2, ctx);
    let h_ff = p.ff_in.forward(&ff.a.view());
    let g_ff = h_ff.mapv(nn::gelu);
    let u_ff = p.ff_out.forward(&g_ff.view());
    let x3 = &x2 + &gated(&u_ff, &p.gate_ff);

    let cache = BlockCache {
        sa,
        qkv,
        sa_probs,
        o_sa,
        u_sa,
        ca,
        q_ca,
        kv_ca,
        ca_probs,
        o_ca,
        u_ca,
        ff,
        h_ff,
        g_ff,
        u_ff,
    };
    (x3, cache)
}

/// Backpropagates `gy` through one block. Parameter gradients are
/// accumulated into `grad` when given.
pub fn backward(
    p: &BlockParams,
    c: &BlockCache,
    gy: &Array2<f64>,
    ctx: &BlockCtx,
    mut grad: Option<&mut BlockParams>,
) -> BlockInputGrads {
    let d = p.width();
    let m = ctx.tokens;
    let batch = gy.nrows() / m;

    // feed-forward
    let mut g_x2 = gy.clone();
    if let Some(g) = grad.as_deref_mut() {
        g.gate_ff += &gate_grad(gy, &c.u_ff);
    }
    let g_u = gated(gy, &p.gate_ff);
    let g_gl = p.ff_out.backward(&c.g_ff.view(), &g_u.view(), grad.as_deref_mut().map(|g| &mut g.ff_out));
    let mut g_h = g_gl;
    g_h.zip_mut_with(&c.h_ff, |g, &h| *g *= nn::gelu_grad(h));
    let g_a = p.ff_in.backward(&c.ff.a.view(), &g_h.view(), grad.as_deref_mut().map(|g| &mut g.ff_in));
    let (g_in, mut g_st) = sub_backward(&p.ada_ff, &c.ff, &g_a, ctx, grad.as_deref_mut().map(|g| &mut g.ada_ff));
    g_x2 += &g_in;

    // cross-attention
    let mut g_x1 = g_x2.clone();
    if let Some(g) = grad.as_deref_mut() {
        g.gate_ca += &gate_grad(&g_x2, &c.u_ca);
    }
    let mut g_u = gated(&g_x2, &p.gate_ca);
    for b in 0..batch {
        if ctx.text[b].is_none() {
            g_u.slice_mut(s![b * m..(b + 1) * m, ..]).fill(0.0);
        }
    }
    let g_o = p.cross_out.backward(&c.o_ca.view(), &g_u.view(), grad.as_deref_mut().map(|g| &mut g.cross_out));
    let mut g_q = Array2::zeros(c.q_ca.raw_dim());
    let mut g_text = Vec::with_capacity(batch);
    for b in 0..batch {
        let (Some(t), Some(kv), Some(probs)) = (&ctx.text[b], &c.kv_ca[b], &c.ca_probs[b]) else {
            g_text.push(None);
            continue;
        };
        let r = b * m..(b + 1) * m;
        let (gq, gk, gv) = nn::attention_backward(
            &g_o.slice(s![r.clone(), ..]),
            &c.q_ca.slice(s![r.clone(), ..]),
            &kv.slice(s![.., ..d]),
            &kv.slice(s![.., d..]),
            probs,
        );
        g_q.slice_mut(s![r, ..]).assign(&gq);
        let mut g_kv = Array2::zeros(kv.raw_dim());
        g_kv.slice_mut(s![.., ..d]).assign(&gk);
        g_kv.slice_mut(s![.., d..]).assign(&gv);
        let g_t = p.cross_kv.backward(&t.view(), &g_kv.view(), grad.as_deref_mut().map(|g| &mut g.cross_kv));
        g_text.push(Some(g_t));
    }
    let g_a = p.cross_q.backward(&c.ca.a.view(), &g_q.view(), grad.as_deref_mut().map(|g| &mut g.cross_q));
    let (g_in, g_st_ca) = sub_backward(&p.ada_ca, &c.ca, &g_a, ctx, grad.as_deref_mut().map(|g| &mut g.ada_ca));
    g_x1 += &g_in;
    g_st += &g_st_ca;

    // self-attention
    let mut g_x = g_x1.clone();
    if let Some(g) = grad.as_deref_mut() {
        g.gate_sa += &gate_grad(&g_x1, &c.u_sa);
    }
    let g_u = gated(&g_x1, &p.gate_sa);
    let g_o = p.attn_out.backward(&c.o_sa.view(), &g_u.view(), grad.as_deref_mut().map(|g| &mut g.attn_out));
    let mut g_qkv = Array2::zeros(c.qkv.raw_dim());
    for b in 0..batch {
        let r = b * m..(b + 1) * m;
        let (gq, gk, gv) = nn::attention_backward(
            &g_o.slice(s![r.clone(), ..]),
            &c.qkv.slice(s![r.clone(), ..d]),
            &c.qkv.slice(s![r.clone(), d..2 * d]),
            &c.qkv.slice(s![r.clone(), 2 * d..]),
            &c.sa_probs[b],
        );
        g_qkv.slice_mut(s![r.clone(), ..d]).assign(&gq);
        g_qkv.slice_mut(s![r.clone(), d..2 * d]).assign(&gk);
        g_qkv.slice_mut(s![r, 2 * d..]).assign(&gv);
    }
    let g_a = p.qkv.backward(&c.sa.a.view(), &g_qkv.view(), grad.as_deref_mut().map(|g| &mut g.qkv));
    let (g_in, g_st_sa) = sub_backward(&p.ada_sa, &c.sa, &g_a, ctx, grad.as_deref_mut().map(|g| &mut g.ada_sa));
    g_x += &g_in;
    g_st += &g_st_sa;

    BlockInputGrads {
        x: g_x,
        silu_tau: g_st,
        text: g_text,
    }
}
