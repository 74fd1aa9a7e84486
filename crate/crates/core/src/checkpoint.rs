//! Backbone and adapter checkpoints on top of the bundle format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, Bundle, Manifest, Tensor};
use crate::dit::{DitConfig, DitParams, Denoiser};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::schedule::ScheduleSpec;
use crate::train::TrainConfig;

pub const BACKBONE_KIND: &str = "backbone";
pub const ADAPTER_KIND: &str = "adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dit: DitConfig,
    pub schedule: ScheduleSpec,
    pub stage: u8,
    /// Optimizer steps taken; with the seed this fixes every random stream.
    pub step: usize,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    /// Hash of the backbone an adapter was trained against.
    pub backbone_hash: Option<String>,
}

pub fn tensors<P: Parameters>(params: &P, prefix: &str) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(prefix, &mut |n, d, s| out.push(Tensor::new(n, s.to_vec(), d.to_vec())));
    out
}

fn fill<P: Parameters>(params: &mut P, prefix: &str, bundle: &Bundle) -> Result<()> {
    let expected = params.tensor_names(prefix);
    if expected.len() != bundle.tensors.len() {
        return Err(Error::Usage(format!(
            "checkpoint holds {} tensors, model expects {}",
            bundle.tensors.len(),
            expected.len()
        )));
    }
    let mut err = None;
    params.visit_mut(prefix, &mut |n, d, s| {
        if err.is_some() {
            return;
        }
        match bundle.tensor(n) {
            Ok(t) if t.shape == s => d.copy_from_slice(&t.data),
            Ok(t) => err = Some(Error::Usage(format!("tensor `{n}` has shape {:?}, expected {s:?}", t.shape))),
            Err(e) => err = Some(Error::Usage(e.to_string())),
        }
    });
    err.map_or(Ok(()), Err)
}

/// SHA-256 of the backbone tensors as stored (f32).
pub fn backbone_hash(params: &DitParams) -> String {
    let (bytes, _) = blob::encode_tensors(&tensors(params, "backbone"));
    blob::sha256_hex(&bytes)
}

fn header_of(manifest: &Manifest, kind: &str) -> Result<CheckpointHeader> {
    if manifest.kind != kind {
        return Err(Error::Usage(format!("expected a {kind} checkpoint, found `{}`", manifest.kind)));
    }
    serde_json::from_value(manifest.header.clone())
        .map_err(|e| Error::Usage(format!("malformed checkpoint header: {e}")))
}

pub fn save_backbone(path: &Path, model: &Denoiser, header: &CheckpointHeader) -> Result<Manifest> {
    let hash = blob::config_hash(header);
    blob::write_bundle(
        path,
        BACKBONE_KIND,
        header.seed,
        hash,
        serde_json::to_value(header)?,
        &tensors(model.backbone(), "backbone"),
    )
}

pub fn load_backbone(path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let bundle = blob::read_bundle(path)?;
    let header = header_of(&bundle.manifest, BACKBONE_KIND)?;
    let mut params = DitParams::init(&header.dit, 0);
    fill(&mut params, "backbone", &bundle)?;
    let model = Denoiser::from_params(header.dit.clone(), params, None)?;
    Ok((model, header))
}

/// Writes the attached adapter; the header records the backbone hash.
pub fn save_adapter(path: &Path, model: &Denoiser, header: &CheckpointHeader) -> Result<Manifest> {
    let adapter = model
        .adapter()
        .ok_or_else(|| Error::Usage("no adapter attached".into()))?;
    let header = CheckpointHeader {
        backbone_hash: Some(backbone_hash(model.backbone())),
        ..header.clone()
    };
    blob::write_bundle(
        path,
        ADAPTER_KIND,
        header.seed,
        blob::config_hash(&header),
        serde_json::to_value(&header)?,
        &tensors(adapter, "adapter"),
    )
}

/// Loads an adapter and attaches it, refusing a different backbone.
pub fn load_adapter(path: &Path, model: &mut Denoiser) -> Result<CheckpointHeader> {
    let bundle = blob::read_bundle(path)?;
    let header = header_of(&bundle.manifest, ADAPTER_KIND)?;
    if &header.dit != model.config() {
        return Err(Error::Config("adapter config does not match the backbone config".into()));
    }
    let hash = backbone_hash(model.backbone());
    if header.backbone_hash.as_deref() != Some(hash.as_str()) {
        return Err(Error::Usage("adapter was trained against a different backbone".into()));
    }
    let mut adapter = model.new_adapter();
    fill(&mut adapter, "adapter", &bundle)?;
    model.attach(adapter)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(cfg: &DitConfig) -> CheckpointHeader {
        CheckpointHeader {
            dit: cfg.clone(),
            schedule: ScheduleSpec::default(),
            stage: 1,
            step: 0,
            seed: 4,
            train: None,
            backbone_hash: None,
        }
    }

    #[test]
    fn backbone_and_adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DitConfig::default();
        let model = Denoiser::new(cfg.clone(), 4).unwrap();
        let mut ad = model.new_adapter();
        ad.z1.w.fill(0.25);
        let p = dir.path().join("bb.json");
        save_backbone(&p, &model, &header(&cfg)).unwrap();
        let (loaded, h) = load_backbone(&p).unwrap();
        let mut rounded = model.backbone().clone();
        rounded.visit_mut("", &mut |_, d, _| blob::round_f32(d));
        assert_eq!(loaded.backbone(), &rounded);
        assert_eq!(h, header(&cfg));

        let mut model = loaded;
        model.attach(ad).unwrap();
        let a = dir.path().join("ad.json");
        save_adapter(&a, &model, &header(&cfg)).unwrap();
        let mut fresh = load_backbone(&p).unwrap().0;
        load_adapter(&a, &mut fresh).unwrap();
        let mut expect = model.params().clone();
        expect.visit_mut("", &mut |_, d, _| blob::round_f32(d));
        assert_eq!(fresh.params(), &expect);

        let mut other = Denoiser::new(cfg, 5).unwrap();
        assert!(matches!(load_adapter(&a, &mut other), Err(Error::Usage(_))));
        assert!(matches!(load_backbone(&a), Err(Error::Usage(_))));
    }
}
