//! Query-conditioned control branch: trainable copies of the encoder blocks
//! plus zero-initialized input and output linears.

use serde::{Deserialize, Serialize};

use crate::block::BlockParams;
use crate::dit::{DitConfig, DitParams};
use crate::error::{config, Result};
use crate::nn::{join, Linear, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub blocks: Vec<BlockParams>,
    /// `d_VL → D`, broadcast-added to every token of the first control input.
    pub z1: Linear,
    /// One `D → D` output linear per control block.
    pub z2: Vec<Linear>,
}

impl AdapterParams {
    /// Copies the encoder blocks and zero-initializes `z1` / `z2`.
    pub fn from_backbone(cfg: &DitConfig, backbone: &DitParams) -> Self {
        AdapterParams {
            blocks: backbone.encoder.clone(),
            z1: Linear::zeros(cfg.d_vl, cfg.hidden),
            z2: (0..cfg.depth).map(|_| Linear::zeros(cfg.hidden, cfg.hidden)).collect(),
        }
    }

    /// Encoder copy + `Z1` + `L·Z2`.
    pub fn count(cfg: &DitConfig) -> usize {
        cfg.depth * BlockParams::count(cfg.hidden, cfg.ffn_width())
            + Linear::count(cfg.d_vl, cfg.hidden)
            + cfg.depth * Linear::count(cfg.hidden, cfg.hidden)
    }

    pub fn check(&self, cfg: &DitConfig) -> Result<()> {
        let ok = self.blocks.len() == cfg.depth
            && self.z2.len() == cfg.depth
            && self.z1.fan_in() == cfg.d_vl
            && self.z1.fan_out() == cfg.hidden
            && self.z2.iter().all(|z| z.fan_in() == cfg.hidden && z.fan_out() == cfg.hidden)
            && self
                .blocks
                .iter()
                .all(|b| b.width() == cfg.hidden && b.ff_in.fan_out() == cfg.ffn_width());
        if !ok {
            return config("adapter shapes do not match the denoiser config");
        }
        Ok(())
    }
}

impl Parameters for AdapterParams {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &'a [f64], &[usize])) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(p, &format!("blocks.{i}")), f);
        }
        self.z1.visit(&join(p, "z1"), f);
        for (i, z) in self.z2.iter().enumerate() {
            z.visit(&join(p, &format!("z2.{i}")), f);
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64], &[usize])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("blocks.{i}")), f);
        }
        self.z1.visit_mut(&join(p, "z1"), f);
        for (i, z) in self.z2.iter_mut().enumerate() {
            z.visit_mut(&join(p, &format!("z2.{i}")), f);
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub backbone: bool,
    pub adapter: bool,
}

impl FreezeMask {
    pub const ALL: FreezeMask = FreezeMask {
        backbone: true,
        adapter: true,
    };

    pub fn freeze_backbone() -> Self {
        FreezeMask {
            backbone: false,
            adapter: true,
        }
    }

    /// Decides by the tensor's top-level namespace.
    pub fn trainable(&self, name: &str) -> bool {
        if name.starts_with("adapter.") {
            self.adapter
        } else {
            self.backbone
        }
    }
}
