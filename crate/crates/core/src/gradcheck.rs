//! Directional finite-difference gradient checks.

use crate::error::Result;
use crate::nn::Parameters;
use crate::rng::{self, domain};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Random directions over all checked tensors at once.
    pub directions: usize,
    /// Extra directions confined to each single tensor.
    pub per_tensor: usize,
    pub step: f64,
    pub seed: u64,
    /// Relative errors use `max(|a|, |b|, floor)` as denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            directions: 20,
            per_tensor: 2,
            step: 1e-5,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error seen per tensor (tensor-confined directions).
    pub per_tensor: Vec<(String, f64)>,
    pub global: Vec<f64>,
}

fn flatten<P: Parameters>(p: &P, names: &mut Vec<(String, usize, usize)>) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |n, d, _| {
        names.push((n.to_string(), out.len(), d.len()));
        out.extend_from_slice(d);
    });
    out
}

fn unflatten<P: Parameters>(p: &mut P, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut("", &mut |_, d, _| {
        d.copy_from_slice(&flat[off..off + d.len()]);
        off += d.len();
    });
}

/// Compares `<grad, v>` against `(L(θ+hv) − L(θ−hv)) / 2h` for random unit
/// directions `v`. Tensors rejected by `include` are never perturbed.
pub fn grad_check<P: Parameters + Clone>(
    params: &P,
    grad: &P,
    include: &dyn Fn(&str) -> bool,
    loss: &mut dyn FnMut(&P) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut names = Vec::new();
    let theta = flatten(params, &mut names);
    let g = flatten(grad, &mut Vec::new());
    let mut r = rng::stream(opts.seed, domain::GRADCHECK, 0);
    let mut work = params.clone();

    let mut check = |support: &[(usize, usize)], r: &mut rng::StreamRng| -> Result<f64> {
        let mut v = vec![0.0; theta.len()];
        for &(off, len) in support {
            for x in &mut v[off..off + len] {
                *x = rng::normal(r);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&v).map(|(t, d)| t + sign * opts.step * d).collect() };
        unflatten(&mut work, &shifted(1.0));
        let lp = loss(&work)?;
        unflatten(&mut work, &shifted(-1.0));
        let lm = loss(&work)?;
        let numeric = (lp - lm) / (2.0 * opts.step);
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        Ok((analytic - numeric).abs() / denom)
    };

    let checked: Vec<&(String, usize, usize)> = names.iter().filter(|(n, _, _)| include(n)).collect();
    let mut per_tensor = Vec::new();
    for (name, off, len) in &checked {
        let mut worst: f64 = 0.0;
        for _ in 0..opts.per_tensor {
            worst = worst.max(check(&[(*off, *len)], &mut r)?);
        }
        per_tensor.push((name.clone(), worst));
    }
    let all: Vec<(usize, usize)> = checked.iter().map(|(_, o, l)| (*o, *l)).collect();
    let mut global = Vec::new();
    for _ in 0..opts.directions {
        global.push(check(&all, &mut r)?);
    }
    let max_rel_error = per_tensor
        .iter()
        .map(|(_, e)| *e)
        .chain(global.iter().copied())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::{array, Array2};

    fn quadratic(l: &Linear, x: &Array2<f64>, y: &Array2<f64>) -> (f64, Linear) {
        let out = l.forward(&x.view());
        let diff = &out - y;
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        let mut g = Linear::zeros(l.fan_in(), l.fan_out());
        l.accumulate(&x.view(), &diff.view(), &mut g);
        (loss, g)
    }

    #[test]
    fn linear_quadratic_is_exact() {
        let mut r = rng::stream(1, 0, 0);
        let l = Linear::init(3, 2, 0.5, &mut r);
        let x = array![[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]];
        let y = array![[0.2, 0.4], [-1.0, 0.0]];
        let (_, g) = quadratic(&l, &x, &y);
        let rep = grad_check(&l, &g, &|_| true, &mut |p| Ok(quadratic(p, &x, &y).0), &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut r = rng::stream(1, 0, 0);
        let l = Linear::init(3, 2, 0.5, &mut r);
        let x = array![[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]];
        let y = array![[0.2, 0.4], [-1.0, 0.0]];
        let (_, mut g) = quadratic(&l, &x, &y);
        g.w *= 2.0;
        let rep = grad_check(&l, &g, &|_| true, &mut |p| Ok(quadratic(p, &x, &y).0), &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error > 1e-1);
    }
}
