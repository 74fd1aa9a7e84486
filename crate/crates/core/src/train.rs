//! Noise-prediction training for both stages: losses with condition
//! dropout, AdamW with global-norm clipping, and the training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::FreezeMask;
use crate::blob;
use crate::dit::{Batch, Control, Denoiser, ModelParams};
use crate::error::{config, input, Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::nn::Parameters;
use crate::rng::{self, domain};
use crate::schedule::DiffusionSchedule;
use crate::world::{PairRecord, TextCondition, TripletRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub lr_schedule: LrSchedule,
    pub p_cfg: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: 1,
            batch_size: 128,
            lr: 3e-3,
            weight_decay: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            grad_clip: 0.01,
            warmup_steps: 50,
            lr_schedule: LrSchedule::Cosine,
            p_cfg: 0.1,
            epochs: 10,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 2e-2,
            eps: 1e-8,
            warmup_steps: 0,
            lr_schedule: LrSchedule::Constant,
            epochs: 4,
            ..TrainConfig::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return config(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(0.0..1.0).contains(&self.p_cfg) {
            return config("p_cfg must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return config("grad_clip must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return config("batch_size and epochs must be positive");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return config("lr and weight_decay must be non-negative, eps positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return config("adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(examples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Learning rate at 1-based optimizer step `step` of `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    let decay = match cfg.lr_schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let t = (step.saturating_sub(cfg.warmup_steps) as f64 / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    };
    cfg.lr * warm * decay
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            grad_clip: c.grad_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// AdamW with decoupled weight decay. Moments exist only for tensors that
/// were trainable when stepped.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub state: BTreeMap<String, Moments>,
    pub step: u64,
}

/// Global ℓ2 norm over the tensors accepted by `trainable`.
pub fn global_norm<P: Parameters>(grads: &P, trainable: &dyn Fn(&str) -> bool) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |n, d, _| {
        if trainable(n) {
            sq += d.iter().map(|x| x * x).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Factor that brings `norm` down to `clip`; 1 below the threshold.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<P: Parameters>(
        &mut self,
        params: &mut P,
        grads: &P,
        trainable: &dyn Fn(&str) -> bool,
        hp: &AdamHyper,
        lr: f64,
    ) -> Result<StepStats> {
        let mut g_slices: Vec<(String, &[f64])> = Vec::new();
        grads.visit("", &mut |n, d, _| g_slices.push((n.to_string(), d)));
        if let Some((n, _)) = g_slices
            .iter()
            .find(|(n, d)| trainable(n) && d.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!("non-finite gradient in `{n}`; step aborted")));
        }
        let grad_norm = global_norm(grads, trainable);
        let scale = clip_factor(grad_norm, hp.grad_clip);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let decay = 1.0 - lr * hp.weight_decay;
        let mut i = 0;
        let state = &mut self.state;
        params.visit_mut("", &mut |n, p, _| {
            let (gn, g) = &g_slices[i];
            i += 1;
            debug_assert_eq!(gn, n);
            if !trainable(n) {
                return;
            }
            let mo = state.entry(n.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            for (((pv, &gv), m), v) in p.iter_mut().zip(g.iter()).zip(mo.m.iter_mut()).zip(mo.v.iter_mut()) {
                let gv = gv * scale;
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * gv;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * gv * gv;
                *pv *= decay;
                *pv -= lr * (*m / bc1) / ((*v / bc2).sqrt() + hp.eps);
            }
        });
        Ok(StepStats {
            grad_norm,
            clipped_norm: grad_norm * scale,
            lr,
        })
    }
}

/// One training example, independent of stage.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub z0: &'a [f64],
    pub text: Option<&'a TextCondition>,
    pub query: Option<&'a [f64]>,
}

impl<'a> From<&'a PairRecord> for Example<'a> {
    fn from(p: &'a PairRecord) -> Self {
        Example {
            z0: p.z0.as_slice(),
            text: Some(&p.cond),
            query: None,
        }
    }
}

impl<'a> From<&'a TripletRecord> for Example<'a> {
    fn from(t: &'a TripletRecord) -> Self {
        Example {
            z0: t.z_target.as_slice(),
            text: Some(&t.c_delta),
            query: Some(t.z_ref_delta.as_slice()),
        }
    }
}

/// Per-sample randomness of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub n: usize,
    pub eps: Vec<f64>,
    pub dropped: bool,
}

/// Timestep, noise and dropout for sample `i` of step `step` come from their
/// own stream, so batching never changes them.
pub fn draw_noise(
    schedule: &DiffusionSchedule,
    dim: usize,
    batch: usize,
    seed: u64,
    step: u64,
    p_cfg: f64,
) -> Vec<Draw> {
    (0..batch)
        .map(|i| {
            let mut r = rng::stream(rng::combine(seed, step), domain::TRAIN_SAMPLE, i as u64);
            let n = r.random_range(1..=schedule.steps());
            let eps = rng::normal_vec(&mut r, dim);
            let dropped = r.random::<f64>() < p_cfg;
            Draw { n, eps, dropped }
        })
        .collect()
}

/// Mean over the batch of `‖eps − ε_θ(z_n, n, c)‖²`, where `z_n` noises the
/// scaled target `data_scale · z_0`. Dropped samples lose their text and,
/// when they carry a query, run the adapter on the null query. Gradients are
/// returned when `mask` is given.
pub fn diffusion_loss(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    examples: &[Example],
    draws: &[Draw],
    mask: Option<FreezeMask>,
) -> Result<(f64, Option<ModelParams>)> {
    if examples.is_empty() {
        return input("empty training batch");
    }
    if examples.len() != draws.len() {
        return config("one draw per example is required");
    }
    let d = model.config().d_vl;
    let scale = model.config().data_scale;
    let bsz = examples.len();
    let mut z = Array2::zeros((bsz, d));
    for (i, (ex, dr)) in examples.iter().zip(draws).enumerate() {
        if ex.z0.len() != d {
            return config("example width does not match d_VL");
        }
        let z0: Vec<f64> = ex.z0.iter().map(|v| v * scale).collect();
        let zn = schedule.forward_noise(&z0, dr.n, &dr.eps)?;
        z.row_mut(i).assign(&ndarray::ArrayView1::from(&zn));
    }
    let batch = Batch {
        z,
        timesteps: draws.iter().map(|d| d.n).collect(),
        texts: examples
            .iter()
            .zip(draws)
            .map(|(e, d)| if d.dropped { None } else { e.text })
            .collect(),
        controls: examples
            .iter()
            .zip(draws)
            .map(|(e, d)| match (e.query, d.dropped) {
                (None, _) => Control::Absent,
                (Some(_), true) => Control::Null,
                (Some(q), false) => Control::Query(q),
            })
            .collect(),
        delta: 1.0,
    };
    let (eps_hat, cache) = model.forward(&batch)?;
    let (loss, g_out) = noise_loss(eps_hat, draws)?;
    let grads = match mask {
        Some(mask) => Some(model.backward(&cache, &g_out, mask)?),
        None => None,
    };
    Ok((loss, grads))
}

/// Batch-mean squared error against the drawn noise and its gradient with
/// respect to the prediction.
pub fn noise_loss(eps_hat: Array2<f64>, draws: &[Draw]) -> Result<(f64, Array2<f64>)> {
    let bsz = draws.len();
    let mut diff = eps_hat;
    let mut loss = 0.0;
    for (i, dr) in draws.iter().enumerate() {
        let mut row = diff.row_mut(i);
        row -= &ndarray::ArrayView1::from(&dr.eps);
        let l = row.dot(&row);
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at sample {i} (n = {})", dr.n)));
        }
        loss += l;
    }
    diff *= 2.0 / bsz as f64;
    Ok((loss / bsz as f64, diff))
}

pub fn stage1_loss(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    pairs: &[&PairRecord],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, ModelParams)> {
    let examples: Vec<Example> = pairs.iter().map(|p| Example::from(*p)).collect();
    let draws = draw_noise(schedule, model.config().d_vl, examples.len(), cfg.seed, step, cfg.p_cfg);
    let (l, g) = diffusion_loss(model, schedule, &examples, &draws, Some(FreezeMask { backbone: true, adapter: false }))?;
    Ok((l, g.expect("gradients requested")))
}

pub fn stage2_loss(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    triplets: &[&TripletRecord],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, ModelParams)> {
    if !model.has_adapter() {
        return Err(Error::Usage("stage-2 loss needs an attached adapter".into()));
    }
    let examples: Vec<Example> = triplets.iter().map(|t| Example::from(*t)).collect();
    let draws = draw_noise(schedule, model.config().d_vl, examples.len(), cfg.seed, step, cfg.p_cfg);
    let (l, g) = diffusion_loss(model, schedule, &examples, &draws, Some(FreezeMask::freeze_backbone()))?;
    Ok((l, g.expect("gradients requested")))
}

/// Finite-difference check of [`diffusion_loss`] gradients on the tensors
/// selected by `mask`.
pub fn check_gradients(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    examples: &[Example],
    draws: &[Draw],
    mask: FreezeMask,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = diffusion_loss(model, schedule, examples, draws, Some(mask))?;
    let grads = grads.expect("gradients requested");
    let mut loss = |p: &ModelParams| -> Result<f64> {
        let m = model.with_params(p.clone());
        Ok(diffusion_loss(&m, schedule, examples, draws, None)?.0)
    };
    grad_check(model.params(), &grads, &|n| mask.trainable(n), &mut loss, opts)
}

/// Adds `std · N(0, 1)` to every parameter. A fresh model has zero gates and
/// regressors, which makes most gradients vanish; checks run on a jittered copy.
pub fn jitter(model: &mut Denoiser, std: f64, seed: u64) {
    let mut r = rng::stream(seed, domain::GRADCHECK, 1);
    model
        .params_mut()
        .visit_mut("", &mut |_, d, _| d.iter_mut().for_each(|v| *v += std * rng::normal(&mut r)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub optimizer: AdamW,
}

pub enum TrainData<'a> {
    Pairs(&'a [PairRecord]),
    Triplets(&'a [TripletRecord]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Pairs(p) => p.len(),
            TrainData::Triplets(t) => t.len(),
        }
    }

    fn example(&self, i: usize) -> Example<'_> {
        match self {
            TrainData::Pairs(p) => Example::from(&p[i]),
            TrainData::Triplets(t) => Example::from(&t[i]),
        }
    }
}

/// Epoch order: a seeded Fisher-Yates shuffle.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, domain::TRAIN_SHUFFLE, epoch as u64);
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Rounds every trainable tensor to f32 precision so the in-memory model
/// matches what a checkpoint stores.
pub fn round_to_storage(model: &mut Denoiser, mask: FreezeMask) {
    model.params_mut().visit_mut("", &mut |n, d, _| {
        if mask.trainable(n) {
            blob::round_f32(d);
        }
    });
}

/// Runs the configured number of optimizer steps. Stage 1 trains the
/// backbone (no adapter may be attached); stage 2 trains only the adapter.
pub fn train(
    model: &mut Denoiser,
    schedule: &DiffusionSchedule,
    data: TrainData,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&TrainLog),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mask = match (cfg.stage, &data) {
        (1, TrainData::Pairs(_)) => {
            if model.has_adapter() {
                return Err(Error::Usage("stage 1 trains the bare backbone; detach the adapter".into()));
            }
            FreezeMask {
                backbone: true,
                adapter: false,
            }
        }
        (2, TrainData::Triplets(_)) => {
            if !model.has_adapter() {
                return Err(Error::Usage("stage 2 needs an attached adapter".into()));
            }
            FreezeMask::freeze_backbone()
        }
        _ => return config("stage 1 trains on pairs, stage 2 on triplets"),
    };
    let n = data.len();
    if n == 0 {
        return input("training corpus is empty");
    }
    let total = cfg.total_steps(n);
    let hp = AdamHyper::from(cfg);
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(total);
    let start = Instant::now();
    let d = model.config().d_vl;
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            step += 1;
            let examples: Vec<Example> = chunk.iter().map(|&i| data.example(i)).collect();
            let draws = draw_noise(schedule, d, examples.len(), cfg.seed, step as u64, cfg.p_cfg);
            let (loss, grads) = diffusion_loss(model, schedule, &examples, &draws, Some(mask))?;
            let grads = grads.expect("gradients requested");
            let lr = lr_at(cfg, step, total);
            let stats = opt.step(model.params_mut(), &grads, &|name| mask.trainable(name), &hp, lr)?;
            losses.push(loss);
            on_step(&TrainLog {
                step,
                epoch,
                loss,
                lr,
                grad_norm: stats.grad_norm,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    round_to_storage(model, mask);
    Ok(TrainSummary {
        steps: step,
        losses,
        optimizer: opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DitConfig;
    use crate::schedule::ScheduleSpec;
    use crate::world::{World, WorldConfig};
    use ndarray::{array, Array1};

    fn hp(wd: f64) -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            grad_clip: 1e9,
        }
    }

    #[test]
    fn zero_grad_without_decay_keeps_params() {
        let mut p: Array1<f64> = array![1.0, -2.0, 3.0];
        let g = Array1::zeros(3);
        let before = p.clone();
        let mut opt = AdamW::new();
        for _ in 0..5 {
            opt.step(&mut p, &g, &|_| true, &hp(0.0), 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_is_multiplicative() {
        let mut p: Array1<f64> = array![1.0, -2.0];
        let g = Array1::zeros(2);
        let mut opt = AdamW::new();
        let (lr, wd) = (0.1, 0.5);
        let mut expect = p.clone();
        for _ in 0..3 {
            opt.step(&mut p, &g, &|_| true, &hp(wd), lr).unwrap();
            expect *= 1.0 - lr * wd;
            assert_eq!(p, expect);
        }
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let g: Array1<f64> = array![0.6, 0.8];
        let norm = global_norm(&g, &|_| true);
        assert!((norm - 1.0).abs() < 1e-15);
        let f = clip_factor(norm, 0.01);
        let clipped = &g * f;
        assert!((clipped.dot(&clipped).sqrt() - 0.01).abs() < 1e-9);
        assert_eq!(clip_factor(0.005, 0.01), 1.0);
    }

    #[test]
    fn single_scalar_update_matches_hand_computation() {
        let mut p: Array1<f64> = array![0.5];
        let g: Array1<f64> = array![0.2];
        let mut opt = AdamW::new();
        opt.state.insert(
            String::new(),
            Moments {
                m: vec![0.1],
                v: vec![0.04],
            },
        );
        opt.step = 1;
        let h = AdamHyper {
            weight_decay: 0.1,
            ..hp(0.0)
        };
        opt.step(&mut p, &g, &|_| true, &h, 0.01).unwrap();
        // t = 2: m = 0.9·0.1 + 0.1·0.2 = 0.11, v = 0.999·0.04 + 0.001·0.04 = 0.04
        let m_hat: f64 = 0.11 / (1.0 - 0.81);
        let v_hat: f64 = 0.04 / (1.0 - 0.998001);
        let expect = 0.5 * (1.0 - 0.001) - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p: Array1<f64> = array![1.0];
        let g: Array1<f64> = array![f64::NAN];
        let mut opt = AdamW::new();
        assert!(matches!(
            opt.step(&mut p, &g, &|_| true, &hp(0.1), 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p[0], 1.0);
        assert!(opt.state.is_empty());
    }

    #[test]
    fn frozen_tensors_get_no_moments() {
        let mut p: Array1<f64> = array![1.0];
        let g: Array1<f64> = array![1.0];
        let mut opt = AdamW::new();
        opt.step(&mut p, &g, &|_| false, &hp(0.1), 0.1).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(opt.state.is_empty());
    }

    #[test]
    fn learning_rate_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..TrainConfig::stage1()
        };
        assert!((lr_at(&cfg, 5, 100) - 0.5).abs() < 1e-15);
        assert!((lr_at(&cfg, 10, 100) - 1.0).abs() < 1e-15);
        assert!(lr_at(&cfg, 100, 100).abs() < 1e-15);
        let c2 = TrainConfig {
            lr: 1.0,
            ..TrainConfig::stage2()
        };
        assert_eq!(lr_at(&c2, 1, 100), 1.0);
        assert_eq!(lr_at(&c2, 100, 100), 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                p_cfg: 1.0,
                ..TrainConfig::stage1()
            },
            TrainConfig {
                grad_clip: 0.0,
                ..TrainConfig::stage1()
            },
            TrainConfig {
                stage: 3,
                ..TrainConfig::stage1()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn full_dropout_ignores_text() {
        let world = World::new(WorldConfig::default()).unwrap();
        let pairs = world.gen_pair_corpus(8, 1).unwrap();
        let sched = ScheduleSpec::default().build().unwrap();
        let mut model = Denoiser::new(DitConfig::default(), 1).unwrap();
        model.params_mut().visit_mut("", &mut |_, d, _| d.iter_mut().for_each(|v| *v += 0.01));
        let cfg = TrainConfig {
            p_cfg: 0.999_999_999,
            ..TrainConfig::stage1()
        };
        let refs: Vec<&PairRecord> = pairs.iter().collect();
        let (base, _) = stage1_loss(&model, &sched, &refs, &cfg, 3).unwrap();
        let other = world.gen_pair_corpus(8, 2).unwrap();
        for k in 0..10 {
            let mut swapped = pairs.clone();
            for (i, p) in swapped.iter_mut().enumerate() {
                p.cond = other[(i + k) % 8].cond.clone();
            }
            let refs: Vec<&PairRecord> = swapped.iter().collect();
            assert_eq!(stage1_loss(&model, &sched, &refs, &cfg, 3).unwrap().0, base);
        }
    }

    #[test]
    fn exact_noise_prediction_gives_zero_loss() {
        let sched = ScheduleSpec::default().build().unwrap();
        let draws = draw_noise(&sched, 4, 3, 1, 1, 0.0);
        let eps = Array2::from_shape_fn((3, 4), |(i, j)| draws[i].eps[j]);
        let (l, g) = noise_loss(eps, &draws).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let mut nan = Array2::zeros((3, 4));
        nan[[1, 2]] = f64::NAN;
        assert!(matches!(noise_loss(nan, &draws), Err(Error::Numeric(_))));
    }

    fn perturbed_composed_model(seed: u64) -> Denoiser {
        let mut model = Denoiser::new(DitConfig::default(), seed).unwrap();
        model.attach(model.new_adapter()).unwrap();
        jitter(&mut model, 0.2, seed);
        model
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let world = World::new(WorldConfig::default()).unwrap();
        let trips = world.gen_triplets(4, 5).unwrap();
        let sched = ScheduleSpec::default().build().unwrap();
        let model = perturbed_composed_model(11);
        let mut examples: Vec<Example> = trips.iter().map(Example::from).collect();
        examples[1].query = None;
        let mut draws = draw_noise(&sched, 64, 4, 2, 1, 0.0);
        draws[2].dropped = true;
        let opts = GradCheckOptions::default();
        let rep = check_gradients(&model, &sched, &examples, &draws, FreezeMask::ALL, &opts).unwrap();
        let worst = rep.per_tensor.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!(rep.max_rel_error < 1e-4, "max {} worst tensor {:?}", rep.max_rel_error, worst);
        assert_eq!(rep.per_tensor.len(), model.params().tensor_names("").len());
    }

    #[test]
    fn corrupted_denoiser_gradient_is_caught() {
        let world = World::new(WorldConfig::default()).unwrap();
        let trips = world.gen_triplets(2, 5).unwrap();
        let sched = ScheduleSpec::default().build().unwrap();
        let model = perturbed_composed_model(12);
        let examples: Vec<Example> = trips.iter().map(Example::from).collect();
        let draws = draw_noise(&sched, 64, 2, 2, 1, 0.0);
        let (_, g) = diffusion_loss(&model, &sched, &examples, &draws, Some(FreezeMask::ALL)).unwrap();
        let mut g = g.unwrap();
        g.backbone.decoder[1].ff_out.w *= 2.0;
        let mut loss = |p: &ModelParams| Ok(diffusion_loss(&model.with_params(p.clone()), &sched, &examples, &draws, None)?.0);
        let opts = GradCheckOptions {
            directions: 0,
            ..GradCheckOptions::default()
        };
        let rep = grad_check(model.params(), &g, &|n| n.starts_with("backbone.decoder.1.ff_out"), &mut loss, &opts).unwrap();
        assert!(rep.max_rel_error > 1e-1, "{}", rep.max_rel_error);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(100, 3, 1);
        assert_ne!(o, (0..100).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..100).collect::<Vec<_>>());
        assert_eq!(epoch_order(100, 3, 1), epoch_order(100, 3, 1));
    }
}
