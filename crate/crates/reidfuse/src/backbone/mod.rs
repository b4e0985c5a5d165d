//! Feature extractors: the mid-level CNN and the windowed transformer, plus a
//! tagged wrapper the trainer and CLI dispatch over.

pub mod cnn_mid;
pub mod swin;

pub use cnn_mid::{CnnMidConfig, CnnMidNet, CnnMidOutput};
pub use swin::{
    patch_partition, patch_unpartition, PatchMerging, SwinNet, TokenGrid, WinTransformerConfig,
    WindowAttention,
};

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Branch;
use crate::error::Result;
use crate::nn::{ParamStore, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    CnnMid,
    Transformer,
}

impl BackboneKind {
    pub fn branch(&self) -> Branch {
        match self {
            BackboneKind::CnnMid => Branch::CnnMid,
            BackboneKind::Transformer => Branch::Transformer,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::CnnMid => "cnn_mid",
            BackboneKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<BackboneKind> {
        match s {
            "cnn_mid" => Some(BackboneKind::CnnMid),
            "transformer" => Some(BackboneKind::Transformer),
            _ => None,
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub enum Backbone {
    CnnMid(CnnMidNet),
    Transformer(SwinNet),
}

pub enum BackboneCache {
    CnnMid(cnn_mid::CnnMidCache),
    Transformer(swin::SwinCache),
}

impl Backbone {
    /// Builds a backbone with freshly initialized weights registered in
    /// `store` (initialization order is fixed, so a seeded RNG gives
    /// reproducible weights).
    pub fn build(
        kind: BackboneKind,
        cnn_cfg: &CnnMidConfig,
        swin_cfg: &WinTransformerConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Backbone> {
        let mut vb = VarBuilder::new(store, rng);
        Ok(match kind {
            BackboneKind::CnnMid => Backbone::CnnMid(CnnMidNet::new(cnn_cfg.clone(), &mut vb)?),
            BackboneKind::Transformer => {
                Backbone::Transformer(SwinNet::new(swin_cfg.clone(), &mut vb)?)
            }
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::CnnMid(_) => BackboneKind::CnnMid,
            Backbone::Transformer(_) => BackboneKind::Transformer,
        }
    }

    pub fn branch(&self) -> Branch {
        self.kind().branch()
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Backbone::CnnMid(net) => net.cfg.embed_dim(),
            Backbone::Transformer(net) => net.cfg.embed_out_dim(),
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self {
            Backbone::CnnMid(net) => net.cfg.input_size,
            Backbone::Transformer(net) => net.cfg.input_size,
        }
    }

    /// Cross-entropy weight of the identity head (CNN only; 0 disables it).
    pub fn ce_weight(&self) -> f32 {
        match self {
            Backbone::CnnMid(net) => net.cfg.ce_weight,
            Backbone::Transformer(_) => 0.0,
        }
    }

    /// Inference embedding for a batch.
    pub fn embed(&self, ps: &ParamStore, x: &Array4<f32>) -> Result<Array2<f32>> {
        match self {
            Backbone::CnnMid(net) => net.forward_embed(ps, x),
            Backbone::Transformer(net) => net.forward_embed(ps, x),
        }
    }

    /// Training forward; logits are produced by the CNN's identity head only.
    pub fn forward_t(
        &self,
        ps: &mut ParamStore,
        x: &Array4<f32>,
    ) -> Result<(Array2<f32>, Option<Array2<f32>>, BackboneCache)> {
        match self {
            Backbone::CnnMid(net) => {
                let (emb, logits, cache) = net.forward_t(ps, x)?;
                Ok((emb, Some(logits), BackboneCache::CnnMid(cache)))
            }
            Backbone::Transformer(net) => {
                let (emb, cache) = net.forward_t(ps, x)?;
                Ok((emb, None, BackboneCache::Transformer(cache)))
            }
        }
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &BackboneCache,
        dembedding: &Array2<f32>,
        dlogits: Option<&Array2<f32>>,
    ) {
        match (self, cache) {
            (Backbone::CnnMid(net), BackboneCache::CnnMid(c)) => {
                net.backward(ps, c, dembedding, dlogits)
            }
            (Backbone::Transformer(net), BackboneCache::Transformer(c)) => {
                net.backward(ps, c, dembedding)
            }
            _ => unreachable!("cache kind matches backbone kind"),
        }
    }
}
