//! Command-line entry point.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{self, SweepGrid, TextSource, Variant, VariantOptions};
use crate::adapter::FreezeMask;
use crate::blob::{self, TOOL_VERSION};
use crate::checkpoint::{self, CheckpointHeader};
use crate::dit::{Denoiser, DitConfig};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::retrieval::{self, MetricReport, QueryResult};
use crate::sampler::{self, Conditions, Method, TraceStep};
use crate::schedule::ScheduleSpec;
use crate::store::{self, EmbeddingsHeader};
use crate::train::{self, Example, TrainConfig, TrainData, TrainLog};
use crate::world::{Benchmark, BenchmarkConfig, World, WorldConfig};

#[derive(Parser, Debug)]
#[command(name = "jointdiff", version, about = "Conditional diffusion prior for composed retrieval")]
pub struct Cli {
    /// Worker threads for ranking (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the world config, training corpora and benchmarks.
    GenWorld(GenWorldArgs),
    /// Stage 1: train the text-conditioned prior.
    Pretrain(PretrainArgs),
    /// Stage 2: train the control adapter on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Sample target embeddings for every benchmark query.
    Sample(SampleArgs),
    /// Rank the gallery for a set of query embeddings.
    Retrieve(RetrieveArgs),
    /// Score retrieval results against benchmark truth.
    Eval(EvalArgs),
    /// Compare variants A, B and C over one or more benchmarks.
    Ablate(AblateArgs),
    /// Guidance/control-strength and step-count sensitivity grids.
    Sweep(SweepArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Print the header of any artifact.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// World config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long, default_value_t = 20_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub pair_seed: u64,
    #[arg(long, default_value_t = 12_800)]
    pub triplets: usize,
    #[arg(long, default_value_t = 2)]
    pub triplet_seed: u64,
    /// Benchmark config JSON.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    #[arg(long = "bench-seed", default_values_t = vec![1, 2, 3, 4, 5])]
    pub bench_seeds: Vec<u64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub gallery: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p_cfg: Option<f64>,
    /// JSON-lines metrics log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Denoiser config JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Schedule config JSON.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    A,
    B,
    C,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::A => Variant::A,
            VariantArg::B => Variant::B,
            VariantArg::C => Variant::C,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ancestral,
    Solver2m,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextArg {
    Description,
    Edit,
}

#[derive(Args, Debug, Clone)]
pub struct SampleOverrides {
    /// Sampling config JSON (fields of the variant options); flags override it.
    #[arg(long = "sample-config")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub hypotheses: Option<usize>,
    #[arg(long)]
    pub sample_seed: Option<u64>,
    /// Ancestral steps without injected noise.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub text: Option<TextArg>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::C)]
    pub variant: VariantArg,
    #[command(flatten)]
    pub sample: SampleOverrides,
    /// JSON-lines trace of the first hypothesis (step, n, norms).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Keep the top `k` ids per query (all when omitted).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    /// Output of `retrieve` (full rankings).
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub results: Option<PathBuf>,
    /// Query embeddings to rank and score directly.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "bench", required = true)]
    pub benches: Vec<PathBuf>,
    #[command(flatten)]
    pub sample: SampleOverrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub bench: PathBuf,
    #[command(flatten)]
    pub sample: SampleOverrides,
    /// Grid JSON (guidance, delta, steps, recall_k).
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check this backbone instead of a fresh model.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Attach a fresh adapter so its tensors are checked too.
    #[arg(long)]
    pub with_adapter: bool,
    /// Parameter jitter before checking; defaults to 0.2 for fresh models, 0 otherwise.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub directions: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Plain JSON artifacts carry the same identification as bundles.
#[derive(Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub body: T,
}

fn write_json<T: Serialize>(path: &Path, kind: &str, seed: u64, hash: String, body: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let env = Envelope {
        kind: kind.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash: hash,
        seed,
        body,
    };
    fs::write(path, serde_json::to_vec_pretty(&env)?)?;
    Ok(())
}

fn read_value(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::Usage(format!("cannot read `{}`: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("`{}` is not valid JSON: {e}", path.display())))
}

/// Reads a config from a plain JSON object or from an [`Envelope`] body.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut v = read_value(path)?;
    if v_has_envelope(&v) {
        v = v["body"].take();
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))
}

fn v_has_envelope(v: &Value) -> bool {
    v.get("tool_version").is_some() && v.get("kind").is_some()
}

fn load_world(path: &Path) -> Result<World> {
    World::new(read_config::<WorldConfig>(path)?)
}

fn train_config(base: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => read_config::<TrainConfig>(p)?,
        None => base.clone(),
    };
    cfg.stage = base.stage;
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.p_cfg {
        cfg.p_cfg = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn variant_options(o: &SampleOverrides) -> Result<VariantOptions> {
    let mut opts = match &o.config {
        Some(p) => read_config::<VariantOptions>(p)?,
        None => VariantOptions::default(),
    };
    let s = &mut opts.sample;
    if let Some(m) = o.method {
        s.method = match m {
            MethodArg::Ancestral => Method::Ancestral,
            MethodArg::Solver2m => Method::Solver2m,
        };
    }
    if let Some(v) = o.steps {
        s.steps = v;
    }
    if let Some(v) = o.guidance {
        s.guidance = v;
    }
    if let Some(v) = o.delta {
        s.delta = v;
    }
    if let Some(v) = o.hypotheses {
        s.hypotheses = v;
    }
    if let Some(v) = o.sample_seed {
        s.seed = v;
    }
    if o.deterministic {
        s.deterministic = true;
    }
    if let Some(t) = o.text {
        opts.text = match t {
            TextArg::Description => TextSource::Description,
            TextArg::Edit => TextSource::Edit,
        };
    }
    Ok(opts)
}

struct LoadedModel {
    model: Option<Denoiser>,
    header: Option<CheckpointHeader>,
}

fn load_model(a: &ModelArgs) -> Result<LoadedModel> {
    let Some(bb) = &a.backbone else {
        if a.adapter.is_some() {
            return Err(Error::Usage("--adapter needs --backbone".into()));
        }
        return Ok(LoadedModel {
            model: None,
            header: None,
        });
    };
    let (mut model, header) = checkpoint::load_backbone(bb)?;
    if let Some(ad) = &a.adapter {
        checkpoint::load_adapter(ad, &mut model)?;
    }
    Ok(LoadedModel {
        model: Some(model),
        header: Some(header),
    })
}

struct JsonLines(Option<fs::File>);

impl JsonLines {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(JsonLines(match path {
            Some(p) => Some(fs::File::create(p)?),
            None => None,
        }))
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        if let Some(f) = &mut self.0 {
            serde_json::to_writer(&mut *f, v)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn run_training(
    model: &mut Denoiser,
    schedule: &crate::schedule::DiffusionSchedule,
    data: TrainData,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<train::TrainSummary> {
    let mut lines = JsonLines::open(log)?;
    let mut err = None;
    let summary = train::train(model, schedule, data, cfg, &mut |l: &TrainLog| {
        if l.step % 50 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", l.step, l.loss, l.lr);
        }
        if err.is_none() {
            if let Err(e) = lines.write(l) {
                err = Some(e);
            }
        }
    })?;
    err.map_or(Ok(summary), Err)
}

fn gen_world(a: &GenWorldArgs) -> Result<()> {
    let mut wc = match &a.world {
        Some(p) => read_config::<WorldConfig>(p)?,
        None => WorldConfig::default(),
    };
    if let Some(s) = a.world_seed {
        wc.seed = s;
    }
    let world = World::new(wc.clone())?;
    let mut bc = match &a.bench {
        Some(p) => read_config::<BenchmarkConfig>(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(q) = a.queries {
        bc.n_queries = q;
    }
    if let Some(g) = a.gallery {
        bc.gallery_size = g;
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("world.json"), "world", wc.seed, blob::config_hash(&wc), &wc)?;
    let pairs = world.gen_pair_corpus(a.pairs, a.pair_seed)?;
    store::save_pairs(&a.out.join("pairs.json"), &world, a.pair_seed, &pairs)?;
    let trips = world.gen_triplets(a.triplets, a.triplet_seed)?;
    store::save_triplets(&a.out.join("triplets.json"), &world, a.triplet_seed, &trips)?;
    for &s in &a.bench_seeds {
        let bench = world.gen_benchmark(&bc, s)?;
        store::save_benchmark(&a.out.join(format!("bench-{s}.json")), &world, &bench)?;
    }
    println!(
        "world {} | {} pairs | {} triplets | {} benchmarks in {}",
        blob::config_hash(&wc),
        pairs.len(),
        trips.len(),
        a.bench_seeds.len(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let dit = match &a.model {
        Some(p) => read_config::<DitConfig>(p)?,
        None => DitConfig::default(),
    };
    if dit.d_vl != world.config().d_vl || dit.d_text != world.config().d_text {
        return Err(Error::Config("denoiser widths do not match the world".into()));
    }
    let spec = match &a.schedule {
        Some(p) => read_config::<ScheduleSpec>(p)?,
        None => ScheduleSpec::default(),
    };
    let schedule = spec.build()?;
    let cfg = train_config(TrainConfig::stage1(), &a.train)?;
    let pairs = store::load_pairs(&a.pairs, &world)?;
    let mut model = Denoiser::new(dit.clone(), a.init_seed)?;
    let summary = run_training(&mut model, &schedule, TrainData::Pairs(&pairs), &cfg, a.train.log.as_deref())?;
    let header = CheckpointHeader {
        dit,
        schedule: spec,
        stage: 1,
        step: summary.steps,
        seed: cfg.seed,
        train: Some(cfg),
        backbone_hash: None,
    };
    checkpoint::save_backbone(&a.out, &model, &header)?;
    println!(
        "stage 1: {} steps, final loss {:.4}, backbone {}",
        summary.steps,
        summary.losses.last().copied().unwrap_or(f64::NAN),
        checkpoint::backbone_hash(model.backbone())
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let (mut model, bh) = checkpoint::load_backbone(&a.backbone)?;
    let schedule = bh.schedule.build()?;
    let cfg = train_config(TrainConfig::stage2(), &a.train)?;
    let trips = store::load_triplets(&a.triplets, &world)?;
    let before = checkpoint::backbone_hash(model.backbone());
    model.attach(model.new_adapter())?;
    let summary = run_training(&mut model, &schedule, TrainData::Triplets(&trips), &cfg, a.train.log.as_deref())?;
    if checkpoint::backbone_hash(model.backbone()) != before {
        return Err(Error::Numeric("backbone changed during stage 2".into()));
    }
    let header = CheckpointHeader {
        stage: 2,
        step: summary.steps,
        seed: cfg.seed,
        train: Some(cfg),
        ..bh
    };
    checkpoint::save_adapter(&a.out, &model, &header)?;
    println!(
        "stage 2: {} steps, final loss {:.4}",
        summary.steps,
        summary.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_trace(path: &Path, trace: &[TraceStep]) -> Result<()> {
    let mut lines = JsonLines::open(Some(path))?;
    for t in trace {
        lines.write(&t.line())?;
    }
    Ok(())
}

fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let world = load_world(&a.model.world)?;
    let bench = store::load_benchmark(&a.bench, &world)?;
    let loaded = load_model(&a.model)?;
    let opts = variant_options(&a.sample)?;
    let variant = Variant::from(a.variant);
    let schedule = match &loaded.header {
        Some(h) => h.schedule.build()?,
        None => ScheduleSpec::default().build()?,
    };
    let rows = ablation::variant_embeddings(variant, loaded.model.as_ref(), &schedule, &world, &bench, &opts)?;
    if let (Some(path), Some(model)) = (&a.trace, loaded.model.as_ref()) {
        let texts = ablation::query_texts(&world, &bench, opts.text)?;
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
        let mut trace = Vec::new();
        sampler::sample(model, &schedule, &conds, &opts.sample, 0, Some(&mut trace))?;
        write_trace(path, &trace)?;
    }
    let header = EmbeddingsHeader {
        benchmark: store::benchmark_hash(&world, &bench),
        queries: rows.len(),
        source: serde_json::json!({ "variant": variant, "options": opts }),
    };
    store::save_embeddings(&a.out, opts.sample.seed, &header, &rows)?;
    println!("{} embeddings written to {}", rows.len(), a.out.display());
    Ok(())
}

fn embeddings_for(world: &World, bench: &Benchmark, path: &Path) -> Result<Vec<Vec<f64>>> {
    let (h, rows) = store::load_embeddings(path)?;
    if h.benchmark != store::benchmark_hash(world, bench) {
        return Err(Error::Usage("embeddings belong to a different benchmark".into()));
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct Rankings {
    benchmark: String,
    results: Vec<QueryResult>,
}

fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let bench = store::load_benchmark(&a.bench, &world)?;
    let rows = embeddings_for(&world, &bench, &a.embeddings)?;
    let results = retrieval::rank_all(&rows, &bench.gallery, a.k)?;
    let body = Rankings {
        benchmark: store::benchmark_hash(&world, &bench),
        results,
    };
    write_json(&a.out, "rankings", bench.seed, blob::config_hash(&(&body.benchmark, a.k)), &body)?;
    println!("ranked {} queries", rows.len());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let bench = store::load_benchmark(&a.bench, &world)?;
    let report = match (&a.results, &a.embeddings) {
        (Some(p), _) => {
            let env: Envelope<Rankings> = serde_json::from_value(read_value(p)?)
                .map_err(|e| Error::Input(format!("`{}` is not a rankings file: {e}", p.display())))?;
            if env.body.benchmark != store::benchmark_hash(&world, &bench) {
                return Err(Error::Usage("rankings belong to a different benchmark".into()));
            }
            evaluate_rankings(&bench, &env.body.results)?
        }
        (None, Some(p)) => ablation::score(&bench, &embeddings_for(&world, &bench, p)?)?,
        (None, None) => return Err(Error::Usage("give --results or --embeddings".into())),
    };
    print!("{}", retrieval::format_table(&[("run".to_string(), &report)]));
    if let Some(out) = &a.out {
        write_json(out, "metrics", bench.seed, store::benchmark_hash(&world, &bench), &report)?;
    }
    Ok(())
}

fn evaluate_rankings(bench: &Benchmark, results: &[QueryResult]) -> Result<MetricReport> {
    let targets: Vec<u64> = bench.queries.iter().map(|q| q.target.id).collect();
    let subsets: Vec<Vec<u64>> = bench.queries.iter().map(|q| q.subset.clone()).collect();
    let multi: Vec<Vec<u64>> = bench.queries.iter().map(|q| q.targets.clone()).collect();
    retrieval::evaluate(
        results,
        &retrieval::Truth {
            targets: &targets,
            subsets: &subsets,
            multi_targets: &multi,
        },
        &bench.gallery,
    )
}

/// Per-benchmark reports and their means for each variant.
#[derive(Serialize, Deserialize)]
pub struct AblationReport {
    pub benchmarks: Vec<String>,
    pub variants: Vec<VariantSummary>,
}

#[derive(Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub label: String,
    pub reports: Vec<MetricReport>,
    pub mean_recall: std::collections::BTreeMap<usize, f64>,
}

pub fn mean_recall(reports: &[MetricReport]) -> std::collections::BTreeMap<usize, f64> {
    let mut out = std::collections::BTreeMap::new();
    for r in reports {
        for (k, v) in &r.recall {
            *out.entry(*k).or_insert(0.0) += v / reports.len() as f64;
        }
    }
    out
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let world = load_world(&a.model.world)?;
    let loaded = load_model(&a.model)?;
    let model = loaded
        .model
        .as_ref()
        .ok_or_else(|| Error::Usage("ablate needs --backbone and --adapter".into()))?;
    let schedule = loaded.header.as_ref().expect("header with model").schedule.build()?;
    let opts = variant_options(&a.sample)?;
    let benches = a
        .benches
        .iter()
        .map(|p| store::load_benchmark(p, &world))
        .collect::<Result<Vec<_>>>()?;
    let mut variants = Vec::new();
    for v in Variant::ALL {
        let mut reports = Vec::new();
        for b in &benches {
            reports.push(ablation::run_variant(v, Some(model), &schedule, &world, b, &opts)?.report);
        }
        variants.push(VariantSummary {
            variant: v,
            label: v.label().to_string(),
            mean_recall: mean_recall(&reports),
            reports,
        });
    }
    for s in &variants {
        let line: Vec<String> = s.mean_recall.iter().map(|(k, r)| format!("R@{k} {:.2}", 100.0 * r)).collect();
        println!("{:<18} {}", s.label, line.join("  "));
    }
    if let Some(out) = &a.out {
        let report = AblationReport {
            benchmarks: benches.iter().map(|b| store::benchmark_hash(&world, b)).collect(),
            variants,
        };
        let hash = blob::config_hash(&(&report.benchmarks, &opts));
        write_json(out, "ablation", opts.sample.seed, hash, &report)?;
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let world = load_world(&a.model.world)?;
    let loaded = load_model(&a.model)?;
    let model = loaded
        .model
        .as_ref()
        .ok_or_else(|| Error::Usage("sweep needs --backbone and --adapter".into()))?;
    let schedule = loaded.header.as_ref().expect("header with model").schedule.build()?;
    let bench = store::load_benchmark(&a.bench, &world)?;
    let opts = variant_options(&a.sample)?;
    let grid = match &a.grid {
        Some(p) => read_config::<SweepGrid>(p)?,
        None => SweepGrid::default(),
    };
    let (gd, st) = ablation::sweep(model, &schedule, &world, &bench, &opts, &grid)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("guidance_delta.csv"), ablation::sweep_csv(&gd, grid.recall_k))?;
    fs::write(a.out_dir.join("steps.csv"), ablation::sweep_csv(&st, grid.recall_k))?;
    write_json(
        &a.out_dir.join("sweep.json"),
        "sweep",
        opts.sample.seed,
        blob::config_hash(&(&grid, &opts)),
        &serde_json::json!({ "grid": grid, "options": opts, "guidance_delta": gd, "steps": st }),
    )?;
    println!("{} grid points written to {}", gd.len() + st.len(), a.out_dir.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let fresh = a.backbone.is_none();
    let (mut model, world_cfg) = match &a.backbone {
        Some(p) => {
            let (mut m, _) = checkpoint::load_backbone(p)?;
            if let Some(ad) = &a.adapter {
                checkpoint::load_adapter(ad, &mut m)?;
            }
            let wc = WorldConfig {
                d_vl: m.config().d_vl,
                d_text: m.config().d_text,
                ..WorldConfig::default()
            };
            (m, wc)
        }
        None => (Denoiser::new(DitConfig::default(), a.seed)?, WorldConfig::default()),
    };
    if a.with_adapter && !model.has_adapter() {
        model.attach(model.new_adapter())?;
    }
    let jitter = a.jitter.unwrap_or(if fresh { 0.2 } else { 0.0 });
    if jitter > 0.0 {
        train::jitter(&mut model, jitter, a.seed);
    }
    let world = World::new(world_cfg)?;
    let trips = world.gen_triplets(a.batch.max(1), a.seed)?;
    let schedule = ScheduleSpec::default().build()?;
    let examples: Vec<Example> = trips
        .iter()
        .map(|t| {
            let mut e = Example::from(t);
            if !model.has_adapter() {
                e.query = None;
            }
            e
        })
        .collect();
    let draws = train::draw_noise(&schedule, model.config().d_vl, examples.len(), a.seed, 1, 0.0);
    let opts = GradCheckOptions {
        directions: a.directions,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let rep = train::check_gradients(&model, &schedule, &examples, &draws, FreezeMask::ALL, &opts)?;
    let worst = rep
        .per_tensor
        .iter()
        .fold(("", 0.0f64), |w, (n, e)| if *e > w.1 { (n.as_str(), *e) } else { w });
    println!(
        "max relative error {:.3e} over {} tensors and {} directions (worst tensor {} {:.3e})",
        rep.max_rel_error,
        rep.per_tensor.len(),
        rep.global.len(),
        worst.0,
        worst.1
    );
    if !(rep.max_rel_error < a.threshold) {
        return Err(Error::Numeric(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            rep.max_rel_error, a.threshold
        )));
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let v = read_value(&a.path)?;
    let out = if v.get("format").and_then(Value::as_str) == Some(blob::FORMAT) {
        let m = blob::read_manifest(&a.path)?;
        serde_json::json!({
            "kind": m.kind,
            "tool_version": m.tool_version,
            "config_hash": m.config_hash,
            "seed": m.seed,
            "tensors": m.tensors.len(),
            "header": summarize(&m.header),
        })
    } else if v_has_envelope(&v) {
        serde_json::json!({
            "kind": v["kind"],
            "tool_version": v["tool_version"],
            "config_hash": v["config_hash"],
            "seed": v["seed"],
        })
    } else {
        return Err(Error::Input(format!("`{}` is not a jointdiff artifact", a.path.display())));
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Drops bulky record arrays from a header for display.
fn summarize(h: &Value) -> Value {
    match h {
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| match v {
                    Value::Array(a) if a.len() > 16 => (k.clone(), Value::String(format!("[{} entries]", a.len()))),
                    _ => (k.clone(), v.clone()),
                })
                .collect(),
        ),
        other => other.clone(),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure threads: {e}")))?;
    }
    match &cli.command {
        Command::GenWorld(a) => gen_world(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
