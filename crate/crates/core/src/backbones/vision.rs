use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Per-image patch features, `n_patches × d_enc`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures(pub Matrix);

/// Frozen ViT-style encoder: random patch embedding, position embedding, one
/// self-attention block and a final layer norm.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    patch_embed: Linear,
    class_token: Option<ParamId>,
    pos: ParamId,
    block: Block,
    ln: LayerNorm,
    image_size: usize,
    patch_size: usize,
    d_enc: usize,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let patch_dim = cfg.patch_dim();
        let patch_embed = Linear::new(
            store,
            rng,
            "encoder.patch_embed",
            patch_dim,
            cfg.d_enc,
            (3.0 / patch_dim as f64).sqrt(),
            false,
        )?;
        let class_token = if cfg.class_token {
            Some(store.add("encoder.class_token", 1, cfg.d_enc, Init::Normal(1.0), false, rng)?)
        } else {
            None
        };
        let pos = store.add(
            "encoder.pos",
            cfg.n_patches(),
            cfg.d_enc,
            Init::Normal(0.5),
            false,
            rng,
        )?;
        let block = Block::new(
            store,
            rng,
            "encoder.block",
            cfg.d_enc,
            cfg.enc_heads,
            cfg.enc_hidden,
            (1.0 / cfg.d_enc as f64).sqrt(),
            false,
        )?;
        let ln = LayerNorm::new(store, rng, "encoder.ln", cfg.d_enc, false)?;
        Ok(Self {
            patch_embed,
            class_token,
            pos,
            block,
            ln,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            d_enc: cfg.d_enc,
        })
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn forward(&self, g: &mut Graph, image: &RgbImage) -> Result<Var> {
        if image.width != self.image_size || image.height != self.image_size {
            return Err(Error::Shape(format!(
                "encoder expects {0}x{0} images, got {1}x{2}",
                self.image_size, image.width, image.height
            )));
        }
        let patches = g.constant(image.patches(self.patch_size));
        let mut x = self.patch_embed.forward(g, patches);
        if let Some(cls) = self.class_token {
            let c = g.param(cls);
            x = g.concat_rows(&[c, x]);
        }
        let pos = g.param(self.pos);
        let x = g.add(x, pos);
        let x = self.block.forward(g, x, false);
        Ok(self.ln.forward(g, x))
    }

    /// `ε(X)`: deterministic patch features of one image.
    pub fn encode_image(&self, store: &ParamStore, image: &RgbImage) -> Result<PatchFeatures> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, image)?;
        Ok(PatchFeatures(g.value(out).clone()))
    }
}
