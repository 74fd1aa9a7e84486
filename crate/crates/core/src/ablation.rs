//! Retrieval variants over a benchmark and sensitivity sweeps.
//!
//! * A ranks the gallery by the fused query embedding directly.
//! * B samples from the text-conditioned prior (no query control).
//! * C samples with the adapter and the text condition.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dit::Denoiser;
use crate::error::{Error, Result};
use crate::retrieval::{self, MetricReport, Truth};
use crate::sampler::{self, Conditions, SampleConfig};
use crate::schedule::DiffusionSchedule;
use crate::world::{Benchmark, TextCondition, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "(A) query-only",
            Variant::B => "(B) text prior",
            Variant::C => "(C) full",
        }
    }
}

/// Text used to condition sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// The inferred target description.
    #[default]
    Description,
    /// The raw edit instruction.
    Edit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantOptions {
    pub sample: SampleConfig,
    pub text: TextSource,
    /// Queries sampled per batch.
    pub chunk: usize,
}

impl Default for VariantOptions {
    fn default() -> Self {
        VariantOptions {
            sample: SampleConfig::default(),
            text: TextSource::Description,
            chunk: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub embeddings: Vec<Vec<f64>>,
    pub report: MetricReport,
}

pub fn query_texts(world: &World, bench: &Benchmark, source: TextSource) -> Result<Vec<TextCondition>> {
    bench
        .queries
        .iter()
        .map(|q| match source {
            TextSource::Description => world.encode_text(&q.description),
            TextSource::Edit => world.encode_tokens(&q.edit.tokens),
        })
        .collect()
}

/// Ranks `embeddings` (one per benchmark query) and scores them.
pub fn score(bench: &Benchmark, embeddings: &[Vec<f64>]) -> Result<MetricReport> {
    let results = retrieval::rank_all(embeddings, &bench.gallery, None)?;
    let targets: Vec<u64> = bench.queries.iter().map(|q| q.target.id).collect();
    let subsets: Vec<Vec<u64>> = bench.queries.iter().map(|q| q.subset.clone()).collect();
    let multi: Vec<Vec<u64>> = bench.queries.iter().map(|q| q.targets.clone()).collect();
    retrieval::evaluate(
        &results,
        &Truth {
            targets: &targets,
            subsets: &subsets,
            multi_targets: &multi,
        },
        &bench.gallery,
    )
}

/// Produces the retrieval embedding of every query under `variant`.
pub fn variant_embeddings(
    variant: Variant,
    model: Option<&Denoiser>,
    schedule: &DiffusionSchedule,
    world: &World,
    bench: &Benchmark,
    opts: &VariantOptions,
) -> Result<Vec<Vec<f64>>> {
    if variant == Variant::A {
        return Ok(bench.queries.iter().map(|q| q.z_query.0.clone()).collect());
    }
    let model = model.ok_or_else(|| Error::Usage(format!("variant {variant:?} needs a stage-1 checkpoint")))?;
    if variant == Variant::C && !model.has_adapter() {
        return Err(Error::Usage("variant C needs a stage-2 adapter".into()));
    }
    let texts = query_texts(world, bench, opts.text)?;
    let conds: Vec<Conditions> = bench
        .queries
        .iter()
        .zip(&texts)
        .enumerate()
        .map(|(i, (q, t))| Conditions {
            id: i as u64,
            text: Some(t),
            query: (variant == Variant::C).then_some(q.z_query.as_slice()),
        })
        .collect();
    let hyps = sampler::sample_chunked(model, schedule, &conds, &opts.sample, opts.chunk)?;
    Ok(hyps.into_iter().map(|h| h.ensemble).collect())
}

pub fn run_variant(
    variant: Variant,
    model: Option<&Denoiser>,
    schedule: &DiffusionSchedule,
    world: &World,
    bench: &Benchmark,
    opts: &VariantOptions,
) -> Result<VariantRun> {
    let embeddings = variant_embeddings(variant, model, schedule, world, bench, opts)?;
    let report = score(bench, &embeddings)?;
    Ok(VariantRun {
        variant,
        embeddings,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub guidance: Vec<f64>,
    pub delta: Vec<f64>,
    pub steps: Vec<usize>,
    /// Recall cutoff reported in the CSV.
    pub recall_k: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            guidance: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            delta: vec![0.5, 1.0, 1.5],
            steps: vec![6, 10, 14, 18, 22],
            recall_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub guidance: f64,
    pub delta: f64,
    pub steps: usize,
    pub recall: f64,
}

/// Variant C over the `(γ, δ)` grid at the base step count, then over the
/// step grid at the base `(γ, δ)`.
pub fn sweep(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    world: &World,
    bench: &Benchmark,
    base: &VariantOptions,
    grid: &SweepGrid,
) -> Result<(Vec<SweepPoint>, Vec<SweepPoint>)> {
    let run = |g: f64, d: f64, s: usize| -> Result<SweepPoint> {
        let mut opts = base.clone();
        opts.sample.guidance = g;
        opts.sample.delta = d;
        opts.sample.steps = s;
        let rep = run_variant(Variant::C, Some(model), schedule, world, bench, &opts)?.report;
        let recall = *rep
            .recall
            .get(&grid.recall_k)
            .ok_or_else(|| Error::Config(format!("recall@{} is not a reported cutoff", grid.recall_k)))?;
        Ok(SweepPoint {
            guidance: g,
            delta: d,
            steps: s,
            recall,
        })
    };
    let mut gd = Vec::new();
    for &g in &grid.guidance {
        for &d in &grid.delta {
            gd.push(run(g, d, base.sample.steps)?);
        }
    }
    let mut st = Vec::new();
    for &s in &grid.steps {
        st.push(run(base.sample.guidance, base.sample.delta, s)?);
    }
    Ok((gd, st))
}

pub fn sweep_csv(points: &[SweepPoint], recall_k: usize) -> String {
    let mut out = format!("guidance,delta,steps,recall_at_{recall_k}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{:.6}", p.guidance, p.delta, p.steps, p.recall);
    }
    out
}
