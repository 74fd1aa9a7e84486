//! Persistence for generated corpora, benchmarks and sampled embeddings.
//!
//! Records go into the manifest header, embeddings into the blob. Text
//! conditions are not stored; they are re-encoded from tokens on load, so
//! every loader takes the world the data was generated from and checks its
//! config hash.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blob::{self, Tensor};
use crate::error::{Error, Result};
use crate::retrieval::GalleryIndex;
use crate::world::{
    normalize, Benchmark, BenchmarkConfig, BenchmarkQuery, EditSpec, Embedding, PairRecord, SceneSpec, TextSpec,
    TripletRecord, World, WorldConfig,
};

pub const PAIRS_KIND: &str = "pairs";
pub const TRIPLETS_KIND: &str = "triplets";
pub const BENCHMARK_KIND: &str = "benchmark";
pub const EMBEDDINGS_KIND: &str = "embeddings";

#[derive(Serialize, Deserialize)]
struct PairRow {
    scene: SceneSpec,
    caption: TextSpec,
}

#[derive(Serialize, Deserialize)]
struct PairsHeader {
    world: WorldConfig,
    seed: u64,
    records: Vec<PairRow>,
}

#[derive(Serialize, Deserialize)]
struct TripletRow {
    reference: SceneSpec,
    edit: EditSpec,
    target: SceneSpec,
    target_caption: TextSpec,
}

#[derive(Serialize, Deserialize)]
struct TripletsHeader {
    world: WorldConfig,
    seed: u64,
    records: Vec<TripletRow>,
}

#[derive(Serialize, Deserialize)]
struct QueryRow {
    reference: SceneSpec,
    edit: EditSpec,
    target: SceneSpec,
    description: TextSpec,
    pattern: Vec<usize>,
    targets: Vec<u64>,
    subset: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkHeader {
    world: WorldConfig,
    config: BenchmarkConfig,
    seed: u64,
    queries: Vec<QueryRow>,
    gallery_scenes: Vec<SceneSpec>,
}

/// Sampled (or query) embeddings, one row per benchmark query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsHeader {
    /// Config hash of the benchmark the rows belong to.
    pub benchmark: String,
    pub queries: usize,
    /// Free-form description of how the rows were produced.
    pub source: serde_json::Value,
}

fn matrix(rows: impl ExactSizeIterator<Item = Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        out.extend(r);
    }
    out
}

fn rows_of(t: &Tensor, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if t.shape != [n, dim] {
        return Err(Error::Input(format!(
            "tensor `{}` has shape {:?}, expected [{n}, {dim}]",
            t.name, t.shape
        )));
    }
    Ok(t.data.chunks_exact(dim.max(1)).map(|c| c.to_vec()).collect())
}

fn check_world(stored: &WorldConfig, world: &World) -> Result<()> {
    if stored != world.config() {
        return Err(Error::Usage(format!(
            "artifact was generated from world {} but world {} was given",
            blob::config_hash(stored),
            blob::config_hash(world.config())
        )));
    }
    Ok(())
}

fn header<T: for<'de> Deserialize<'de>>(m: &blob::Manifest, kind: &str) -> Result<T> {
    if m.kind != kind {
        return Err(Error::Usage(format!("expected a {kind} artifact, found `{}`", m.kind)));
    }
    serde_json::from_value(m.header.clone()).map_err(|e| Error::Input(format!("malformed {kind} header: {e}")))
}

pub fn save_pairs(path: &Path, world: &World, seed: u64, pairs: &[PairRecord]) -> Result<()> {
    let d = world.config().d_vl;
    let h = PairsHeader {
        world: world.config().clone(),
        seed,
        records: pairs
            .iter()
            .map(|p| PairRow {
                scene: p.scene.clone(),
                caption: p.caption.clone(),
            })
            .collect(),
    };
    let z = matrix(pairs.iter().map(|p| p.z0.0.clone()), d);
    blob::write_bundle(
        path,
        PAIRS_KIND,
        seed,
        blob::config_hash(&(&h.world, seed, pairs.len())),
        serde_json::to_value(&h)?,
        &[Tensor::new("z0", vec![pairs.len(), d], z)],
    )?;
    Ok(())
}

pub fn load_pairs(path: &Path, world: &World) -> Result<Vec<PairRecord>> {
    let b = blob::read_bundle(path)?;
    let h: PairsHeader = header(&b.manifest, PAIRS_KIND)?;
    check_world(&h.world, world)?;
    let z = rows_of(b.tensor("z0")?, h.records.len(), world.config().d_vl)?;
    h.records
        .into_iter()
        .zip(z)
        .map(|(r, z0)| {
            Ok(PairRecord {
                cond: world.encode_text(&r.caption)?,
                scene: r.scene,
                caption: r.caption,
                z0: Embedding(z0),
            })
        })
        .collect()
}

pub fn save_triplets(path: &Path, world: &World, seed: u64, triplets: &[TripletRecord]) -> Result<()> {
    let d = world.config().d_vl;
    let h = TripletsHeader {
        world: world.config().clone(),
        seed,
        records: triplets
            .iter()
            .map(|t| TripletRow {
                reference: t.reference.clone(),
                edit: t.edit.clone(),
                target: t.target.clone(),
                target_caption: t.target_caption.clone(),
            })
            .collect(),
    };
    blob::write_bundle(
        path,
        TRIPLETS_KIND,
        seed,
        blob::config_hash(&(&h.world, seed, triplets.len())),
        serde_json::to_value(&h)?,
        &[
            Tensor::new(
                "z_ref_delta",
                vec![triplets.len(), d],
                matrix(triplets.iter().map(|t| t.z_ref_delta.0.clone()), d),
            ),
            Tensor::new(
                "z_target",
                vec![triplets.len(), d],
                matrix(triplets.iter().map(|t| t.z_target.0.clone()), d),
            ),
        ],
    )?;
    Ok(())
}

pub fn load_triplets(path: &Path, world: &World) -> Result<Vec<TripletRecord>> {
    let b = blob::read_bundle(path)?;
    let h: TripletsHeader = header(&b.manifest, TRIPLETS_KIND)?;
    check_world(&h.world, world)?;
    let n = h.records.len();
    let d = world.config().d_vl;
    let zq = rows_of(b.tensor("z_ref_delta")?, n, d)?;
    let zt = rows_of(b.tensor("z_target")?, n, d)?;
    h.records
        .into_iter()
        .zip(zq.into_iter().zip(zt))
        .map(|(r, (q, t))| {
            Ok(TripletRecord {
                c_delta: world.encode_tokens(&r.edit.tokens)?,
                reference: r.reference,
                edit: r.edit,
                target: r.target,
                target_caption: r.target_caption,
                z_ref_delta: Embedding(q),
                z_target: Embedding(t),
            })
        })
        .collect()
}

/// Config hash identifying a benchmark (world, benchmark config and seed).
pub fn benchmark_hash(world: &World, bench: &Benchmark) -> String {
    blob::config_hash(&(world.config(), &bench.config, bench.seed))
}

pub fn save_benchmark(path: &Path, world: &World, bench: &Benchmark) -> Result<()> {
    let d = world.config().d_vl;
    let h = BenchmarkHeader {
        world: world.config().clone(),
        config: bench.config.clone(),
        seed: bench.seed,
        queries: bench
            .queries
            .iter()
            .map(|q| QueryRow {
                reference: q.reference.clone(),
                edit: q.edit.clone(),
                target: q.target.clone(),
                description: q.description.clone(),
                pattern: q.pattern.clone(),
                targets: q.targets.clone(),
                subset: q.subset.clone(),
            })
            .collect(),
        gallery_scenes: bench.gallery_scenes.clone(),
    };
    let g = bench.gallery.embeddings();
    blob::write_bundle(
        path,
        BENCHMARK_KIND,
        bench.seed,
        benchmark_hash(world, bench),
        serde_json::to_value(&h)?,
        &[
            Tensor::new("gallery", vec![g.nrows(), d], g.iter().copied().collect()),
            Tensor::new(
                "z_query",
                vec![bench.queries.len(), d],
                matrix(bench.queries.iter().map(|q| q.z_query.0.clone()), d),
            ),
        ],
    )?;
    Ok(())
}

/// Loads a benchmark. Stored rows are f32, so they are re-normalized.
pub fn load_benchmark(path: &Path, world: &World) -> Result<Benchmark> {
    let b = blob::read_bundle(path)?;
    let h: BenchmarkHeader = header(&b.manifest, BENCHMARK_KIND)?;
    check_world(&h.world, world)?;
    let d = world.config().d_vl;
    let g = rows_of(b.tensor("gallery")?, h.gallery_scenes.len(), d)?;
    let zq = rows_of(b.tensor("z_query")?, h.queries.len(), d)?;
    let mut embs = Array2::zeros((g.len(), d));
    for (mut row, r) in embs.rows_mut().into_iter().zip(g) {
        row.assign(&ndarray::Array1::from(normalize(r)));
    }
    let gallery = GalleryIndex::new(h.gallery_scenes.iter().map(|s| s.id).collect(), embs)?;
    let queries = h
        .queries
        .into_iter()
        .zip(zq)
        .map(|(q, z)| BenchmarkQuery {
            reference: q.reference,
            edit: q.edit,
            target: q.target,
            description: q.description,
            z_query: Embedding(normalize(z)),
            pattern: q.pattern,
            targets: q.targets,
            subset: q.subset,
        })
        .collect();
    Ok(Benchmark {
        config: h.config,
        seed: h.seed,
        queries,
        gallery_scenes: h.gallery_scenes,
        gallery,
    })
}

pub fn save_embeddings(path: &Path, seed: u64, header: &EmbeddingsHeader, rows: &[Vec<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("embedding rows have different widths".into()));
    }
    blob::write_bundle(
        path,
        EMBEDDINGS_KIND,
        seed,
        blob::config_hash(header),
        serde_json::to_value(header)?,
        &[Tensor::new("embeddings", vec![rows.len(), d], matrix(rows.iter().cloned(), d))],
    )?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<(EmbeddingsHeader, Vec<Vec<f64>>)> {
    let b = blob::read_bundle(path)?;
    let h: EmbeddingsHeader = header(&b.manifest, EMBEDDINGS_KIND)?;
    let t = b.tensor("embeddings")?;
    let d = t.shape.get(1).copied().unwrap_or(0);
    let rows = rows_of(t, h.queries, d)?;
    Ok((h, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::new(WorldConfig::default()).unwrap();
        let pairs = world.gen_pair_corpus(20, 3).unwrap();
        let p = dir.path().join("pairs.json");
        save_pairs(&p, &world, 3, &pairs).unwrap();
        let back = load_pairs(&p, &world).unwrap();
        assert_eq!(back.len(), 20);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.cond.token_embs, b.cond.token_embs);
            let mut z = a.z0.0.clone();
            blob::round_f32(&mut z);
            assert_eq!(z, b.z0.0);
        }

        let trips = world.gen_triplets(10, 4).unwrap();
        let t = dir.path().join("trips.json");
        save_triplets(&t, &world, 4, &trips).unwrap();
        let back = load_triplets(&t, &world).unwrap();
        assert_eq!(back[3].edit, trips[3].edit);
        assert_eq!(back[3].c_delta.token_embs, trips[3].c_delta.token_embs);

        let other = World::new(WorldConfig {
            seed: 99,
            ..WorldConfig::default()
        })
        .unwrap();
        assert!(matches!(load_pairs(&p, &other), Err(Error::Usage(_))));
        assert!(matches!(load_triplets(&p, &world), Err(Error::Usage(_))));
    }

    #[test]
    fn benchmark_round_trip_keeps_truth() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::new(WorldConfig::default()).unwrap();
        let cfg = BenchmarkConfig {
            n_queries: 5,
            gallery_size: 500,
            ..BenchmarkConfig::default()
        };
        let bench = world.gen_benchmark(&cfg, 1).unwrap();
        let p = dir.path().join("bench.json");
        save_benchmark(&p, &world, &bench).unwrap();
        let back = load_benchmark(&p, &world).unwrap();
        assert_eq!(back.gallery.ids(), bench.gallery.ids());
        for (a, b) in bench.queries.iter().zip(&back.queries) {
            assert_eq!(a.targets, b.targets);
            assert_eq!(a.subset, b.subset);
            assert!(a.z_query.cosine(&b.z_query) > 1.0 - 1e-9);
        }
    }
}
