//! Turns variable-length entity text into entity features for the second stage.
//!
//! `mp` (the default) runs frozen self-attention over `[T_e; F_v]`, keeps the
//! `T_e` rows, lets them cross-attend to the embedded entity text and
//! normalises the result. `fusion` and `refine` are the two comparison
//! designs; `none` passes the embedded text through.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbones::{LanguageModel, VisualFeatures};
use crate::config::{ModelConfig, Purification};
use crate::error::{Error, Result};
use crate::nn::{Attention, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

const TRAINABLE_ATTN_STD: f64 = 0.02;

/// Token ids decoded by the first stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityInfo(pub Vec<u32>);

/// `F_e`: `n_eq × d_v` for `mp`/`refine`, `n_iq × d_v` for `fusion`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityFeatures(pub Matrix);

/// Frozen text path into `d_v`: language-model token and position
/// embeddings, then a fixed linear map. Positions let attention tell the
/// first entity from the second.
/// Empty input maps to one fixed null-entity row.
#[derive(Debug, Clone, Copy)]
pub struct EntityEncoder {
    pub embed: Linear,
    pub null_row: ParamId,
}

impl EntityEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            embed: Linear::new(
                store,
                rng,
                "purifier.entity_embed",
                cfg.d_llm,
                cfg.d_v,
                1.0 / (cfg.d_llm as f64).sqrt(),
                false,
            )?,
            null_row: store.add("purifier.null_entity", 1, cfg.d_v, Init::Normal(0.3), false, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, lm: &LanguageModel, info: &EntityInfo) -> Result<Var> {
        if info.0.is_empty() {
            return Ok(g.param(self.null_row));
        }
        let e = lm.embed_positioned(g, &info.0)?;
        Ok(self.embed.forward(g, e))
    }

    /// `len(I_e) × d_v` (one row when `I_e` is empty).
    pub fn embed_entity_info(&self, store: &ParamStore, lm: &LanguageModel, info: &EntityInfo) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let v = self.forward(&mut g, lm, info)?;
        Ok(g.value(v).clone())
    }
}

/// The two frozen attentions of `mp`.
#[derive(Debug, Clone, Copy)]
pub struct MpAttention {
    pub self_attn: Attention,
    pub cross_attn: Attention,
}

impl MpAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_v;
        let std = 1.0 / (d as f64).sqrt();
        let mut attn = |store: &mut ParamStore, name: &str| {
            Attention::new(store, rng, name, d, d, d, cfg.purifier_heads, std, false)
        };
        Ok(Self {
            self_attn: attn(store, "purifier.mp.self_attn")?,
            cross_attn: attn(store, "purifier.mp.cross_attn")?,
        })
    }

    /// Self-attention over `[queries; fv]`, keep the query rows, let them
    /// cross-attend to `entity`, normalise.
    pub fn forward(&self, g: &mut Graph, queries: Var, fv: Var, entity: Var) -> Var {
        let n = g.value(queries).rows();
        let x = g.concat_rows(&[queries, fv]);
        let a = self.self_attn.forward(g, x, x, false);
        let x = g.add(x, a);
        let h = g.slice_rows(x, 0, n);
        let c = self.cross_attn.forward(g, h, entity, false);
        let h = g.add(h, c);
        g.normalize(h)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Purifier {
    Mp {
        queries: ParamId,
        attn: MpAttention,
    },
    Fusion {
        self_attn_v: Attention,
        self_attn_t: Attention,
        cross_attn: Attention,
    },
    Refine {
        queries: ParamId,
        cross_attn: Attention,
    },
    None,
}

impl Purifier {
    /// Registers the variant's parameters, including its own frozen `mp` attention.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        kind: Purification,
    ) -> Result<Self> {
        Self::with_mp(store, rng, cfg, kind, None)
    }

    /// As [`Purifier::new`], reusing existing frozen `mp` attention (the
    /// backbone's pretrained one) when given.
    pub fn with_mp<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        kind: Purification,
        mp: Option<MpAttention>,
    ) -> Result<Self> {
        let d = cfg.d_v;
        let heads = cfg.purifier_heads;
        let queries = match kind {
            Purification::Mp | Purification::Refine => Some(store.add(
                "purifier.entity_query_tokens",
                cfg.n_eq,
                d,
                Init::Normal(1.0),
                true,
                rng,
            )?),
            _ => None,
        };
        let mut attn = |store: &mut ParamStore, name: &str, std: f64, trainable: bool| {
            Attention::new(store, rng, &format!("purifier.{name}"), d, d, d, heads, std, trainable)
        };
        Ok(match kind {
            Purification::Mp => Purifier::Mp {
                queries: queries.expect("registered above"),
                attn: match mp {
                    Some(a) => a,
                    None => MpAttention::new(store, rng, cfg)?,
                },
            },
            Purification::Fusion => Purifier::Fusion {
                self_attn_v: attn(store, "fusion.self_attn_v", TRAINABLE_ATTN_STD, true)?,
                self_attn_t: attn(store, "fusion.self_attn_t", TRAINABLE_ATTN_STD, true)?,
                cross_attn: attn(store, "fusion.cross_attn", TRAINABLE_ATTN_STD, true)?,
            },
            Purification::Refine => Purifier::Refine {
                queries: queries.expect("registered above"),
                cross_attn: attn(store, "refine.cross_attn", TRAINABLE_ATTN_STD, true)?,
            },
            Purification::None => Purifier::None,
        })
    }

    pub fn kind(&self) -> Purification {
        match self {
            Purifier::Mp { .. } => Purification::Mp,
            Purifier::Fusion { .. } => Purification::Fusion,
            Purifier::Refine { .. } => Purification::Refine,
            Purifier::None => Purification::None,
        }
    }

    /// `T_e`, when the variant has entity query tokens.
    pub fn entity_queries(&self) -> Option<ParamId> {
        match *self {
            Purifier::Mp { queries, .. } | Purifier::Refine { queries, .. } => Some(queries),
            _ => None,
        }
    }

    /// Trainable parameters the variant adds (query tokens and attention weights).
    pub fn trainable_count(cfg: &ModelConfig, kind: Purification) -> u64 {
        let d = cfg.d_v;
        let attn = Attention::param_count(d, d, d);
        let queries = (cfg.n_eq * d) as u64;
        match kind {
            Purification::Mp => queries,
            Purification::Fusion => 3 * attn,
            Purification::Refine => queries + attn,
            Purification::None => 0,
        }
    }

    /// Rows of the entity block handed to the second stage.
    pub fn output_rows(cfg: &ModelConfig, kind: Purification, entity_rows: usize) -> usize {
        match kind {
            Purification::Mp | Purification::Refine => cfg.n_eq,
            Purification::Fusion => cfg.n_iq,
            Purification::None => entity_rows,
        }
    }

    /// Graph form: `fv` is `n_iq × d_v`, `entity` the embedded entity text.
    pub fn forward(&self, g: &mut Graph, fv: Var, entity: Var) -> Result<Var> {
        let d = match self {
            Purifier::Mp { attn, .. } => attn.self_attn.q.d_in,
            Purifier::Fusion { cross_attn, .. } | Purifier::Refine { cross_attn, .. } => cross_attn.q.d_in,
            Purifier::None => g.value(entity).cols(),
        };
        for (what, v) in [("visual features", fv), ("entity rows", entity)] {
            let width = g.value(v).cols();
            if width != d {
                return Err(Error::Shape(format!("purifier takes {d}-wide {what}, got {width}")));
            }
        }
        Ok(match *self {
            Purifier::Mp { queries, attn } => {
                let t = g.param(queries);
                attn.forward(g, t, fv, entity)
            }
            Purifier::Fusion {
                self_attn_v,
                self_attn_t,
                cross_attn,
            } => {
                let a = self_attn_v.forward(g, fv, fv, false);
                let v = g.add(fv, a);
                let b = self_attn_t.forward(g, entity, entity, false);
                let e = g.add(entity, b);
                let c = cross_attn.forward(g, v, e, false);
                let h = g.add(v, c);
                g.normalize(h)
            }
            Purifier::Refine { queries, cross_attn } => {
                let t = g.param(queries);
                let c = cross_attn.forward(g, t, entity, false);
                let h = g.add(t, c);
                g.normalize(h)
            }
            Purifier::None => entity,
        })
    }

    /// `Ω(I_e, F_v, T_e)` on already-embedded entity rows.
    pub fn purify(&self, store: &ParamStore, fv: &VisualFeatures, entity_rows: &Matrix) -> Result<EntityFeatures> {
        let mut g = Graph::inference(store);
        let f = g.constant(fv.0.clone());
        let e = g.constant(entity_rows.clone());
        let out = self.forward(&mut g, f, e)?;
        Ok(EntityFeatures(g.value(out).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: Purification) -> (ParamStore, Purifier, ModelConfig) {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Purifier::new(&mut store, &mut rng, &cfg, kind).unwrap();
        (store, p, cfg)
    }

    #[test]
    fn output_rows_fixed_across_entity_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [Purification::Mp, Purification::Fusion, Purification::Refine] {
            let (store, p, cfg) = setup(kind);
            let fv = VisualFeatures(Matrix::randn(cfg.n_iq, cfg.d_v, 1.0, &mut rng));
            for len in [1, 7, 50] {
                let e = Matrix::randn(len, cfg.d_v, 1.0, &mut rng);
                let out = p.purify(&store, &fv, &e).unwrap();
                let rows = Purifier::output_rows(&cfg, kind, len);
                assert_eq!(out.0.shape(), (rows, cfg.d_v), "{kind} len {len}");
                assert!(out.0.is_finite());
            }
        }
    }

    #[test]
    fn refine_ignores_visual_features() {
        let (store, p, cfg) = setup(Purification::Refine);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Matrix::randn(3, cfg.d_v, 1.0, &mut rng);
        let a = p.purify(&store, &VisualFeatures(Matrix::randn(8, 32, 1.0, &mut rng)), &e).unwrap();
        let b = p.purify(&store, &VisualFeatures(Matrix::randn(8, 32, 1.0, &mut rng)), &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (store, p, _) = setup(Purification::Mp);
        let fv = VisualFeatures(Matrix::zeros(8, 32));
        assert!(matches!(p.purify(&store, &fv, &Matrix::zeros(2, 31)), Err(Error::Shape(_))));
        let fv = VisualFeatures(Matrix::zeros(8, 30));
        assert!(matches!(p.purify(&store, &fv, &Matrix::zeros(2, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_with_zero_text_and_zero_values_keeps_residual_path() {
        let (mut store, p, cfg) = setup(Purification::Fusion);
        let Purifier::Fusion { self_attn_t, cross_attn, .. } = p else { unreachable!() };
        // zero value projections silence both text-side attentions
        for l in [self_attn_t.v, self_attn_t.o, cross_attn.v, cross_attn.o] {
            for id in [l.weight, l.bias] {
                let (r, c) = store.param(id).shape();
                store.set_value(id, Matrix::zeros(r, c)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fv = VisualFeatures(Matrix::randn(cfg.n_iq, cfg.d_v, 1.0, &mut rng));
        let out = p.purify(&store, &fv, &Matrix::zeros(5, cfg.d_v)).unwrap();
        // expected: LN(F_v + SA_v(F_v))
        let Purifier::Fusion { self_attn_v, .. } = p else { unreachable!() };
        let mut g = Graph::inference(&store);
        let f = g.constant(fv.0.clone());
        let a = self_attn_v.forward(&mut g, f, f, false);
        let h = g.add(f, a);
        let want = g.normalize(h);
        assert!(out.0.max_abs_diff(g.value(want)) < 1e-12);
    }

    #[test]
    fn variant_trainable_counts_match_registry() {
        for kind in [Purification::Mp, Purification::Fusion, Purification::Refine, Purification::None] {
            let (store, _, cfg) = setup(kind);
            assert_eq!(store.registry().trainable_total(), Purifier::trainable_count(&cfg, kind), "{kind}");
        }
    }
}
