//! Dense layers with hand-written backward passes.
//!
//! Activations are row-major `tokens × features` matrices. A batch of `B`
//! samples with `M` tokens each is stored as `B·M` consecutive rows, sample
//! `b` owning rows `b·M .. (b+1)·M`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::rng;

pub const LN_EPS: f64 = 1e-6;

/// Visitor over named parameter tensors in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, d, _| n += d.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, d, _| d.fill(value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(prefix, &mut |n, _, _| names.push(n.to_string()));
        names
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, d, _| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

impl Parameters for Array1<f64> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        f(prefix, self.as_slice().expect("standard layout"), self.shape());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        let shape = self.shape().to_vec();
        f(prefix, self.as_slice_mut().expect("standard layout"), &shape);
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// Truncated-normal weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng::trunc_normal(rng, std)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient.
    pub fn backward(&self, x: &ArrayView2<f64>, gy: &ArrayView2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            self.accumulate(x, gy, g);
        }
        gy.dot(&self.w.t())
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &ArrayView2<f64>, gy: &ArrayView2<f64>, g: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), gy, 1.0, &mut g.w);
        g.b += &gy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        f(&join(prefix, "w"), self.w.as_slice().expect("standard layout"), self.w.shape());
        self.b.visit(&join(prefix, "b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        let shape = self.w.shape().to_vec();
        f(&join(prefix, "w"), slice2_mut(&mut self.w), &shape);
        self.b.visit_mut(&join(prefix, "b"), f);
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer norm without affine parameters.
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>) -> NormCache {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    NormCache { xhat, rstd }
}

pub fn layer_norm_backward(g: &Array2<f64>, cache: &NormCache) -> Array2<f64> {
    let d = g.ncols() as f64;
    let mut gx = g.clone();
    for ((mut gr, xr), &r) in gx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = gr.sum() / d;
        let mean_gx = gr.dot(&xr) / d;
        gr.zip_mut_with(&xr, |gv, &xv| *gv = r * (*gv - mean_g - xv * mean_gx));
    }
    gx
}

/// `a = xhat ⊙ (1 + scale_b) + shift_b`, where `modv` row `b` is `[scale | shift]`.
pub fn modulate(xhat: &Array2<f64>, modv: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let d = xhat.ncols();
    let mut a = xhat.clone();
    for (b, m) in modv.rows().into_iter().enumerate() {
        let scale = m.slice(s![..d]);
        let shift = m.slice(s![d..]);
        let mut rows = a.slice_mut(s![b * tokens..(b + 1) * tokens, ..]);
        for mut row in rows.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&scale)
                .and(&shift)
                .for_each(|v, &sc, &sh| *v = *v * (1.0 + sc) + sh);
        }
    }
    a
}

/// Returns `(g_xhat, g_modv)`.
pub fn modulate_backward(
    ga: &Array2<f64>,
    xhat: &Array2<f64>,
    modv: &Array2<f64>,
    tokens: usize,
) -> (Array2<f64>, Array2<f64>) {
    let d = xhat.ncols();
    let mut gx = ga.clone();
    let mut gm = Array2::zeros(modv.raw_dim());
    for (b, m) in modv.rows().into_iter().enumerate() {
        let rows = b * tokens..(b + 1) * tokens;
        let ga_b = ga.slice(s![rows.clone(), ..]);
        let xh_b = xhat.slice(s![rows.clone(), ..]);
        let g_scale = (&ga_b * &xh_b).sum_axis(Axis(0));
        let g_shift = ga_b.sum_axis(Axis(0));
        gm.slice_mut(s![b, ..d]).assign(&g_scale);
        gm.slice_mut(s![b, d..]).assign(&g_shift);
        let scale = m.slice(s![..d]);
        let mut gx_b = gx.slice_mut(s![rows, ..]);
        for mut row in gx_b.rows_mut() {
            row.zip_mut_with(&scale, |g, &sc| *g *= 1.0 + sc);
        }
    }
    (gx, gm)
}

/// Multi-head scaled dot-product attention for one sample. Softmax uses
/// max subtraction. Returns the output and per-head probability matrices.
pub fn attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        for mut row in sc.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    (out, probs)
}

/// Returns `(g_q, g_k, g_v)`.
pub fn attention_backward(
    g_out: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let heads = probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Array2::zeros(q.raw_dim());
    let mut gk = Array2::zeros(k.raw_dim());
    let mut gv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let go = g_out.slice(cols);
        gv.slice_mut(cols).assign(&p.t().dot(&go));
        let gp = go.dot(&v.slice(cols).t());
        let mut gs = &gp * p;
        for (mut row, pr) in gs.rows_mut().into_iter().zip(p.rows()) {
            let dotp = row.sum();
            row.zip_mut_with(&pr, |g, &pv| *g -= pv * dotp);
        }
        gs *= scale;
        gq.slice_mut(cols).assign(&gs.dot(&k.slice(cols)));
        gk.slice_mut(cols).assign(&gs.t().dot(&q.slice(cols)));
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((fd(gelu, x) - gelu_grad(x)).abs() < 1e-8);
            assert!((fd(silu, x) - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let q = Array2::from_elem((2, 4), 1e3);
        let k = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 1e2);
        let v = Array2::ones((3, 4));
        let (out, probs) = attention(&q.view(), &k.view(), &v.view(), 2);
        assert!(out.iter().all(|x| x.is_finite()));
        for p in probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 + 1.0) * (j as f64).sin());
        let c = layer_norm(&x);
        for row in c.xhat.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.dot(&row) / 8.0 - 1.0).abs() < 1e-4);
        }
    }
}
