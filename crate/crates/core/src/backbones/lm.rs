use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Small GPT-style causal language model with learned absolute positions.
///
/// The output head starts at zero, so an untrained model predicts the
/// uniform distribution over the vocabulary.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    vocab: usize,
    d_model: usize,
    max_positions: usize,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        vocab: usize,
    ) -> Result<Self> {
        let d = cfg.d_llm;
        let tok_emb = store.add("lm.tok_emb", vocab, d, Init::Normal(0.3), false, rng)?;
        let pos_emb = store.add("lm.pos_emb", cfg.max_positions, d, Init::Normal(0.1), false, rng)?;
        let blocks = (0..cfg.lm_layers)
            .map(|i| {
                Block::new(
                    store,
                    rng,
                    &format!("lm.layers.{i}"),
                    d,
                    cfg.lm_heads,
                    cfg.lm_hidden,
                    0.02,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, rng, "lm.ln_f", d, false)?;
        let head = Linear::new(store, rng, "lm.head", d, vocab, 0.0, false)?;
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
            vocab,
            d_model: d,
            max_positions: cfg.max_positions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn embed(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let table = g.param(self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather(table, &idx))
    }

    /// Token plus position embeddings, as the model itself reads `ids` from position 0.
    pub fn embed_positioned(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if ids.len() > self.max_positions {
            return Err(Error::Input(format!(
                "{} tokens exceed the {} positions",
                ids.len(),
                self.max_positions
            )));
        }
        let tokens = self.embed(g, ids)?;
        let table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather(table, &positions);
        Ok(g.add(tokens, pos))
    }

    /// Logits for every position of an embedded sequence.
    pub fn forward(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        let (len, width) = g.value(embeddings).shape();
        if width != self.d_model {
            return Err(Error::Shape(format!(
                "language model takes {}-wide embeddings, got {width}",
                self.d_model
            )));
        }
        if len == 0 || len > self.max_positions {
            return Err(Error::Input(format!(
                "sequence length {len} outside 1..={}",
                self.max_positions
            )));
        }
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(embeddings, pos);
        for b in &self.blocks {
            x = b.forward(g, x, true);
        }
        let x = self.ln_f.forward(g, x);
        Ok(self.head.forward(g, x))
    }

    /// Row `i` is the embedding of `ids[i]`.
    pub fn lm_embed_tokens(&self, store: &ParamStore, ids: &[u32]) -> Result<Matrix> {
        if ids.is_empty() {
            return Ok(Matrix::zeros(0, self.d_model));
        }
        let mut g = Graph::inference(store);
        let v = self.embed(&mut g, ids)?;
        Ok(g.value(v).clone())
    }

    pub fn lm_forward(&self, store: &ParamStore, embeddings: &Matrix) -> Result<Matrix> {
        let mut g = Graph::inference(store);
        let e = g.constant(embeddings.clone());
        let out = self.forward(&mut g, e)?;
        Ok(g.value(out).clone())
    }
}
