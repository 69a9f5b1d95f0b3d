use rand::Rng;

use super::vision::PatchFeatures;
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Compressed visual features, `n_iq × d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures(pub Matrix);

/// Q-Former-style compressor: learnable image query tokens cross-attend to
/// patch features through frozen attention weights.
///
/// `F_v = LN(T + Attn(T, F_img))`; only `T` is trainable.
#[derive(Debug, Clone)]
pub struct Compressor {
    pub queries: ParamId,
    pub attn: Attention,
    pub ln: LayerNorm,
    d_enc: usize,
}

impl Compressor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let queries = store.add(
            "compressor.image_query_tokens",
            cfg.n_iq,
            cfg.d_v,
            Init::Normal(1.0),
            true,
            rng,
        )?;
        let attn = Attention::new(
            store,
            rng,
            "compressor.cross_attn",
            cfg.d_v,
            cfg.d_enc,
            cfg.d_v,
            cfg.compressor_heads,
            (1.0 / cfg.d_v.max(cfg.d_enc) as f64).sqrt() * 2.0,
            false,
        )?;
        let ln = LayerNorm::new(store, rng, "compressor.ln", cfg.d_v, false)?;
        Ok(Self {
            queries,
            attn,
            ln,
            d_enc: cfg.d_enc,
        })
    }

    pub fn forward(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let width = g.value(patches).cols();
        if width != self.d_enc {
            return Err(Error::Shape(format!(
                "compressor reads {}-wide patch features, got {width}",
                self.d_enc
            )));
        }
        let t = g.param(self.queries);
        let a = self.attn.forward(g, t, patches, false);
        let h = g.add(t, a);
        Ok(self.ln.forward(g, h))
    }

    /// `Q(F_img, T_img)`
    pub fn compress_features(&self, store: &ParamStore, patches: &PatchFeatures) -> Result<VisualFeatures> {
        let mut g = Graph::inference(store);
        let p = g.constant(patches.0.clone());
        let out = self.forward(&mut g, p)?;
        Ok(VisualFeatures(g.value(out).clone()))
    }
}
