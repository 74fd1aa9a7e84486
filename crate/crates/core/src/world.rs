//! Deterministic synthetic world.
//!
//! Scenes are tuples of categorical attributes. Fixed seeded linear maps
//! stand in for the frozen multimodal encoder (scene + text → joint-space
//! embedding) and for the frozen text encoder (tokens → per-token condition
//! vectors). Everything here is a pure function of `(WorldConfig, seed)`.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::retrieval::GalleryIndex;
use crate::rng::{self, domain, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_attrs: usize,
    pub num_values: usize,
    pub d_vl: usize,
    pub d_text: usize,
    /// Weight of the bag-of-words text term in fused embeddings.
    pub kappa: f64,
    /// Probability that an unchanged attribute is mentioned in a target description.
    pub rho: f64,
    /// Fraction of short captions in the pair corpus.
    pub short_caption_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_attrs: 6,
            num_values: 8,
            d_vl: 64,
            d_text: 32,
            kappa: 0.2,
            rho: 0.5,
            short_caption_fraction: 5.0 / 33.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_attrs < 2 {
            return config("world needs at least 2 attributes (attribute 0 is never edited)");
        }
        if self.num_values < 2 || self.num_values > u32::MAX as usize {
            return config("world needs at least 2 values per attribute");
        }
        if self.d_vl == 0 || self.d_text == 0 {
            return config("embedding widths must be positive");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return config("kappa must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return config("rho must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.short_caption_fraction) {
            return config("short_caption_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Photo = 0,
    Change = 1,
    To = 2,
    With = 3,
}

const NUM_SPECIALS: usize = 4;

/// Token layout: value tokens `a*V + v`, then one name token per attribute,
/// then the special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub num_attrs: usize,
    pub num_values: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.num_attrs * self.num_values + self.num_attrs + NUM_SPECIALS
    }

    pub fn value_token(&self, attr: usize, value: u32) -> u32 {
        (attr * self.num_values + value as usize) as u32
    }

    pub fn attr_token(&self, attr: usize) -> u32 {
        (self.num_attrs * self.num_values + attr) as u32
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.num_attrs * self.num_values + self.num_attrs + s as usize) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u64,
    pub attrs: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub attr_index: usize,
    pub new_value: u32,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Caption,
    Edit,
    TargetDescription,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpec {
    pub kind: TextKind,
    pub tokens: Vec<u32>,
}

/// A joint-space vector. Oracle outputs are unit norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.0, &other.0)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Per-token condition vectors from the frozen text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    /// `K_tokens × D_text`.
    pub token_embs: Array2<f64>,
    pub pooled: Array1<f64>,
}

impl TextCondition {
    pub fn num_tokens(&self) -> usize {
        self.token_embs.nrows()
    }
}

pub fn apply_edit(attrs: &[u32], edit: &EditSpec) -> Vec<u32> {
    let mut out = attrs.to_vec();
    out[edit.attr_index] = edit.new_value;
    out
}

#[derive(Clone, Debug)]
pub struct PairRecord {
    pub scene: SceneSpec,
    pub caption: TextSpec,
    pub z0: Embedding,
    pub cond: TextCondition,
}

#[derive(Clone, Debug)]
pub struct TripletRecord {
    pub reference: SceneSpec,
    pub edit: EditSpec,
    pub target: SceneSpec,
    pub target_caption: TextSpec,
    pub z_ref_delta: Embedding,
    pub z_target: Embedding,
    pub c_delta: TextCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_queries: usize,
    pub gallery_size: usize,
    pub subset_size: usize,
    /// Reference scenes with one other attribute changed.
    pub ref_neighbors: usize,
    /// Scenes consistent with the target description but not the target.
    pub text_distractors: usize,
    /// Extra valid targets for multi-target metrics.
    pub alt_targets: usize,
    /// Unchanged attributes left free in the multi-target match pattern.
    pub free_attrs: usize,
    pub include_reference: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_queries: 200,
            gallery_size: 20_000,
            subset_size: 6,
            ref_neighbors: 16,
            text_distractors: 48,
            alt_targets: 2,
            free_attrs: 1,
            include_reference: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkQuery {
    pub reference: SceneSpec,
    pub edit: EditSpec,
    pub target: SceneSpec,
    /// Surrogate for the description an instruction-following model would write.
    pub description: TextSpec,
    pub z_query: Embedding,
    /// Attributes fixed by the multi-target match pattern.
    pub pattern: Vec<usize>,
    /// Every gallery id matching the target on `pattern` (includes the target).
    pub targets: Vec<u64>,
    /// Candidate subset for subset recall (includes the target).
    pub subset: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub queries: Vec<BenchmarkQuery>,
    pub gallery_scenes: Vec<SceneSpec>,
    pub gallery: GalleryIndex,
}

pub struct World {
    config: WorldConfig,
    vocab: Vocab,
    /// `d_VL × (A·V)`, unit columns.
    p_sem: Array2<f64>,
    /// `d_VL × vocab`, unit columns.
    p_txt: Array2<f64>,
    /// `vocab × D_text`, unit rows; special tokens share a row.
    e_tok: Array2<f64>,
}

fn gaussian_unit_columns(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng::normal(rng));
    for mut col in m.columns_mut() {
        let n = col.dot(&col).sqrt();
        col /= n;
    }
    m
}

impl World {
    pub fn new(config: WorldConfig) -> Result<World> {
        config.validate()?;
        let vocab = Vocab {
            num_attrs: config.num_attrs,
            num_values: config.num_values,
        };
        let av = config.num_attrs * config.num_values;
        let p_sem = gaussian_unit_columns(
            config.d_vl,
            av,
            &mut rng::stream(config.seed, domain::WORLD_SEM, 0),
        );
        let p_txt = gaussian_unit_columns(
            config.d_vl,
            vocab.size(),
            &mut rng::stream(config.seed, domain::WORLD_TXT, 0),
        );
        let e_tok = gaussian_unit_columns(
            config.d_text,
            vocab.size(),
            &mut rng::stream(config.seed, domain::WORLD_TOK, 0),
        )
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
        // Function words carry no scene content; they share one row.
        let mut e_tok = e_tok;
        let photo = e_tok.row(vocab.special(Special::Photo) as usize).to_owned();
        for s in [Special::Change, Special::To, Special::With] {
            e_tok.row_mut(vocab.special(s) as usize).assign(&photo);
        }
        Ok(World {
            config,
            vocab,
            p_sem,
            p_txt,
            e_tok,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn p_sem(&self) -> &Array2<f64> {
        &self.p_sem
    }

    pub fn p_txt(&self) -> &Array2<f64> {
        &self.p_txt
    }

    pub fn e_tok(&self) -> &Array2<f64> {
        &self.e_tok
    }

    /// Stable id: a pure function of the attributes and the world seed.
    pub fn scene_id(&self, attrs: &[u32]) -> u64 {
        attrs
            .iter()
            .fold(rng::mix64(self.config.seed ^ 0x5CE_4E1D), |h, &a| {
                rng::combine(h, a as u64)
            })
    }

    pub fn scene(&self, attrs: Vec<u32>) -> Result<SceneSpec> {
        self.check_attrs(&attrs)?;
        Ok(SceneSpec {
            id: self.scene_id(&attrs),
            attrs,
        })
    }

    fn check_attrs(&self, attrs: &[u32]) -> Result<()> {
        if attrs.len() != self.config.num_attrs {
            return config(format!(
                "scene has {} attributes, world has {}",
                attrs.len(),
                self.config.num_attrs
            ));
        }
        if let Some(v) = attrs.iter().find(|&&v| v as usize >= self.config.num_values) {
            return config(format!(
                "attribute value {v} out of range (V = {})",
                self.config.num_values
            ));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let size = self.vocab.size();
        match tokens.iter().find(|&&t| t as usize >= size) {
            Some(t) => config(format!("token {t} outside the world vocabulary of {size}")),
            None => Ok(()),
        }
    }

    fn semantic(&self, attrs: &[u32]) -> Vec<f64> {
        let mut v = vec![0.0; self.config.d_vl];
        for (a, &val) in attrs.iter().enumerate() {
            let col = self.p_sem.column(a * self.config.num_values + val as usize);
            v.iter_mut().zip(col.iter()).for_each(|(x, c)| *x += c);
        }
        v
    }

    /// Adds `κ · P_txt · bow(tokens)` with `bow` the normalized token counts.
    fn add_text_term(&self, v: &mut [f64], tokens: &[u32]) {
        if tokens.is_empty() {
            return;
        }
        let w = self.config.kappa / tokens.len() as f64;
        for &t in tokens {
            let col = self.p_txt.column(t as usize);
            v.iter_mut().zip(col.iter()).for_each(|(x, c)| *x += w * c);
        }
    }

    pub fn oracle_image(&self, scene: &SceneSpec) -> Result<Embedding> {
        self.check_attrs(&scene.attrs)?;
        Ok(Embedding(normalize(self.semantic(&scene.attrs))))
    }

    pub fn oracle_fused(&self, scene: &SceneSpec, text: &TextSpec) -> Result<Embedding> {
        self.check_attrs(&scene.attrs)?;
        self.check_tokens(&text.tokens)?;
        let mut v = self.semantic(&scene.attrs);
        self.add_text_term(&mut v, &text.tokens);
        Ok(Embedding(normalize(v)))
    }

    pub fn oracle_query(&self, reference: &SceneSpec, edit: &EditSpec) -> Result<Embedding> {
        self.check_attrs(&reference.attrs)?;
        self.check_edit(edit)?;
        let mut v = self.semantic(&reference.attrs);
        self.add_text_term(&mut v, &edit.tokens);
        Ok(Embedding(normalize(v)))
    }

    fn check_edit(&self, edit: &EditSpec) -> Result<()> {
        if edit.attr_index >= self.config.num_attrs
            || edit.new_value as usize >= self.config.num_values
        {
            return config("edit refers to an attribute or value outside the world");
        }
        self.check_tokens(&edit.tokens)
    }

    pub fn encode_text(&self, text: &TextSpec) -> Result<TextCondition> {
        self.encode_tokens(&text.tokens)
    }

    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<TextCondition> {
        if tokens.is_empty() {
            return input("text condition needs at least one token");
        }
        let size = self.vocab.size();
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= size) {
            return input(format!("token {t} is out of vocabulary ({size})"));
        }
        let d = self.config.d_text;
        let mut token_embs = Array2::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            token_embs.row_mut(i).assign(&self.e_tok.row(t as usize));
        }
        let mean = token_embs.sum_axis(ndarray::Axis(0)) / tokens.len() as f64;
        let pooled = Array1::from(normalize(mean.to_vec()));
        Ok(TextCondition { token_embs, pooled })
    }

    /// Caption mentioning `attrs_to_mention` (in the given order).
    pub fn caption(&self, scene: &SceneSpec, attrs_to_mention: &[usize]) -> TextSpec {
        self.describe(TextKind::Caption, &scene.attrs, attrs_to_mention)
    }

    pub fn long_caption(&self, scene: &SceneSpec) -> TextSpec {
        let all: Vec<usize> = (0..self.config.num_attrs).collect();
        self.caption(scene, &all)
    }

    fn describe(&self, kind: TextKind, attrs: &[u32], mention: &[usize]) -> TextSpec {
        let mut tokens = Vec::with_capacity(1 + 2 * mention.len());
        tokens.push(self.vocab.special(Special::Photo));
        for &a in mention {
            tokens.push(self.vocab.attr_token(a));
            tokens.push(self.vocab.value_token(a, attrs[a]));
        }
        TextSpec { kind, tokens }
    }

    pub fn edit(&self, attr_index: usize, new_value: u32) -> EditSpec {
        let v = self.vocab;
        EditSpec {
            attr_index,
            new_value,
            tokens: vec![
                v.special(Special::Change),
                v.attr_token(attr_index),
                v.special(Special::To),
                v.value_token(attr_index, new_value),
            ],
        }
    }

    pub fn edit_text(&self, edit: &EditSpec) -> TextSpec {
        TextSpec {
            kind: TextKind::Edit,
            tokens: edit.tokens.clone(),
        }
    }

    fn random_attrs(&self, rng: &mut StreamRng) -> Vec<u32> {
        (0..self.config.num_attrs)
            .map(|_| rng.random_range(0..self.config.num_values as u32))
            .collect()
    }

    fn random_edit(&self, attrs: &[u32], rng: &mut StreamRng) -> EditSpec {
        // Attribute 0 is the shared concept and is never edited.
        let attr = rng.random_range(1..self.config.num_attrs);
        let shift = rng.random_range(1..self.config.num_values as u32);
        let new_value = (attrs[attr] + shift) % self.config.num_values as u32;
        self.edit(attr, new_value)
    }

    pub fn gen_pair_corpus(&self, n: usize, seed: u64) -> Result<Vec<PairRecord>> {
        (0..n).map(|i| self.pair_record(seed, i as u64)).collect()
    }

    fn pair_record(&self, seed: u64, index: u64) -> Result<PairRecord> {
        let mut rng = rng::stream(seed, domain::PAIRS, index);
        let scene = self.scene(self.random_attrs(&mut rng))?;
        let short = rng.random::<f64>() < self.config.short_caption_fraction;
        let caption = if short {
            let a = self.config.num_attrs;
            let count = rng.random_range(1..=(a / 2).max(1));
            let mut order: Vec<usize> = (0..a).collect();
            order.shuffle(&mut rng);
            order.truncate(count);
            order.sort_unstable();
            self.caption(&scene, &order)
        } else {
            self.long_caption(&scene)
        };
        let z0 = self.oracle_fused(&scene, &caption)?;
        let cond = self.encode_text(&caption)?;
        Ok(PairRecord {
            scene,
            caption,
            z0,
            cond,
        })
    }

    pub fn gen_triplets(&self, n: usize, seed: u64) -> Result<Vec<TripletRecord>> {
        (0..n).map(|i| self.triplet(seed, i as u64)).collect()
    }

    fn triplet(&self, seed: u64, index: u64) -> Result<TripletRecord> {
        let mut rng = rng::stream(seed, domain::TRIPLETS, index);
        let reference = self.scene(self.random_attrs(&mut rng))?;
        let edit = self.random_edit(&reference.attrs, &mut rng);
        let target = self.scene(apply_edit(&reference.attrs, &edit))?;
        let target_caption = self.long_caption(&target);
        Ok(TripletRecord {
            z_ref_delta: self.oracle_query(&reference, &edit)?,
            z_target: self.oracle_fused(&target, &target_caption)?,
            c_delta: self.encode_tokens(&edit.tokens)?,
            reference,
            edit,
            target,
            target_caption,
        })
    }

    /// Target description surrogate: the shared concept (attribute 0), the
    /// edited attribute's new value, and each other unchanged attribute with
    /// probability ρ.
    pub fn target_description(
        &self,
        target: &SceneSpec,
        edit: &EditSpec,
        rng: &mut StreamRng,
    ) -> (TextSpec, Vec<usize>) {
        let mut mention = vec![0, edit.attr_index];
        for a in 1..self.config.num_attrs {
            if a != edit.attr_index && rng.random::<f64>() < self.config.rho {
                mention.push(a);
            }
        }
        mention.sort_unstable();
        (
            self.describe(TextKind::TargetDescription, &target.attrs, &mention),
            mention,
        )
    }

    pub fn gen_benchmark(&self, cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
        if cfg.subset_size < 2 || cfg.gallery_size < cfg.subset_size {
            return config("benchmark needs gallery_size >= subset_size >= 2");
        }
        if cfg.n_queries == 0 {
            return config("benchmark needs at least one query");
        }
        let a = self.config.num_attrs;
        let v = self.config.num_values as u32;

        struct Draft {
            reference: SceneSpec,
            edit: EditSpec,
            target: SceneSpec,
            description: TextSpec,
            pattern: Vec<usize>,
            subset: Vec<u64>,
        }

        let mut gallery_scenes: Vec<SceneSpec> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut push = |s: &SceneSpec, gallery: &mut Vec<SceneSpec>| {
            if seen.insert(s.id) {
                gallery.push(s.clone());
            }
        };

        let mut drafts = Vec::with_capacity(cfg.n_queries);
        for q in 0..cfg.n_queries {
            let mut rng = rng::stream(seed, domain::BENCH_QUERY, q as u64);
            let reference = self.scene(self.random_attrs(&mut rng))?;
            let edit = self.random_edit(&reference.attrs, &mut rng);
            let target = self.scene(apply_edit(&reference.attrs, &edit))?;
            let (description, mentioned) = self.target_description(&target, &edit, &mut rng);
            let unmentioned: Vec<usize> = (1..a).filter(|x| !mentioned.contains(x)).collect();

            let mut free = unmentioned.clone();
            free.shuffle(&mut rng);
            free.truncate(cfg.free_attrs);
            let pattern: Vec<usize> = (0..a).filter(|x| !free.contains(x)).collect();

            let mut local: HashSet<u64> = HashSet::new();
            local.insert(target.id);
            local.insert(reference.id);

            let draw = |n: usize,
                            rng: &mut StreamRng,
                            local: &mut HashSet<u64>,
                            make: &dyn Fn(&mut StreamRng) -> Vec<u32>|
             -> Result<Vec<SceneSpec>> {
                let mut out = Vec::new();
                let mut tries = 0;
                while out.len() < n && tries < 64 * n.max(1) {
                    tries += 1;
                    let s = self.scene(make(rng))?;
                    if local.insert(s.id) {
                        out.push(s);
                    }
                }
                Ok(out)
            };

            let neighbors = draw(cfg.ref_neighbors, &mut rng, &mut local, &|rng| {
                let mut attrs = reference.attrs.clone();
                let j = rng.random_range(1..a);
                attrs[j] = (attrs[j] + rng.random_range(1..v)) % v;
                attrs
            })?;
            let text_distractors = if unmentioned.is_empty() {
                Vec::new()
            } else {
                draw(cfg.text_distractors, &mut rng, &mut local, &|rng| {
                    let mut attrs = target.attrs.clone();
                    for &j in &unmentioned {
                        attrs[j] = rng.random_range(0..v);
                    }
                    attrs
                })?
            };
            let alternates = if free.is_empty() {
                Vec::new()
            } else {
                draw(cfg.alt_targets, &mut rng, &mut local, &|rng| {
                    let mut attrs = target.attrs.clone();
                    for &j in &free {
                        attrs[j] = rng.random_range(0..v);
                    }
                    attrs
                })?
            };

            let mut pool: Vec<&SceneSpec> = neighbors.iter().chain(&text_distractors).collect();
            if cfg.include_reference {
                pool.push(&reference);
            }
            if pool.len() + 1 < cfg.subset_size {
                return config(format!(
                    "query {q}: only {} hard negatives for a subset of {}",
                    pool.len(),
                    cfg.subset_size
                ));
            }
            pool.shuffle(&mut rng);
            let mut subset: Vec<u64> = std::iter::once(target.id)
                .chain(pool.iter().take(cfg.subset_size - 1).map(|s| s.id))
                .collect();
            subset.sort_unstable();

            push(&target, &mut gallery_scenes);
            if cfg.include_reference {
                push(&reference, &mut gallery_scenes);
            }
            for s in neighbors.iter().chain(&text_distractors).chain(&alternates) {
                push(s, &mut gallery_scenes);
            }
            drafts.push(Draft {
                reference,
                edit,
                target,
                description,
                pattern,
                subset,
            });
        }

        if gallery_scenes.len() > cfg.gallery_size {
            return config(format!(
                "benchmark needs {} curated gallery items but gallery_size is {}",
                gallery_scenes.len(),
                cfg.gallery_size
            ));
        }
        let mut fill_rng = rng::stream(seed, domain::BENCH_FILL, 0);
        let universe = (self.config.num_values as f64).powi(a as i32);
        if (cfg.gallery_size as f64) > universe {
            return config("gallery_size exceeds the number of distinct scenes");
        }
        while gallery_scenes.len() < cfg.gallery_size {
            let s = self.scene(self.random_attrs(&mut fill_rng))?;
            push(&s, &mut gallery_scenes);
        }

        let ids: Vec<u64> = gallery_scenes.iter().map(|s| s.id).collect();
        let mut embs = Array2::zeros((ids.len(), self.config.d_vl));
        for (i, s) in gallery_scenes.iter().enumerate() {
            let e = self.oracle_image(s)?;
            embs.row_mut(i).assign(&ndarray::ArrayView1::from(e.as_slice()));
        }
        let gallery = GalleryIndex::new(ids, embs)?;

        let queries = drafts
            .into_iter()
            .map(|d| {
                let targets = gallery_scenes
                    .iter()
                    .filter(|s| matches_pattern(&s.attrs, &d.target.attrs, &d.pattern))
                    .map(|s| s.id)
                    .collect();
                Ok(BenchmarkQuery {
                    z_query: self.oracle_query(&d.reference, &d.edit)?,
                    reference: d.reference,
                    edit: d.edit,
                    target: d.target,
                    description: d.description,
                    pattern: d.pattern,
                    targets,
                    subset: d.subset,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Benchmark {
            config: cfg.clone(),
            seed,
            queries,
            gallery_scenes,
            gallery,
        })
    }
}

/// True when `attrs` agrees with `target` on every attribute in `pattern`.
pub fn matches_pattern(attrs: &[u32], target: &[u32], pattern: &[usize]) -> bool {
    pattern.iter().all(|&a| attrs[a] == target[a])
}
