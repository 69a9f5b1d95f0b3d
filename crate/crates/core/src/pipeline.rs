//! Prompt assembly and greedy decoding shared by both trigger-augmented stages.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::LanguageModel;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::tokenizer::{Tokenizer, BOS, EOS, FEAT, PAD};

pub const FEATURE_MARKER: &str = "<ProjFeature>";
const HUMAN_PREFIX: &str = "###Human: <Img>";
const LP1_SUFFIX: &str = "</Img> What are they? ###Assistant:";
const LP2_SUFFIX: &str = "</Img> Describe this image in detail. ###Assistant:";

/// Prompt text around a feature slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub prefix: &'static str,
    pub marker: &'static str,
    pub suffix: &'static str,
}

impl PromptTemplate {
    /// Entity prompt of the first stage.
    pub const fn lp1() -> Self {
        Self {
            prefix: HUMAN_PREFIX,
            marker: FEATURE_MARKER,
            suffix: LP1_SUFFIX,
        }
    }

    /// Caption prompt of the second stage.
    pub const fn lp2() -> Self {
        Self {
            prefix: HUMAN_PREFIX,
            marker: FEATURE_MARKER,
            suffix: LP2_SUFFIX,
        }
    }

    pub fn render(&self) -> String {
        format!("{}{}{}", self.prefix, self.marker, self.suffix)
    }

    /// Prefix and suffix token ids; the marker itself is never tokenised.
    pub fn token_ids(&self, tokenizer: &Tokenizer) -> (Vec<u32>, Vec<u32>) {
        (tokenizer.encode(self.prefix), tokenizer.encode(self.suffix))
    }
}

/// Prompt text that a vocabulary must cover.
pub fn prompt_words() -> [&'static str; 3] {
    [HUMAN_PREFIX, LP1_SUFFIX, LP2_SUFFIX]
}

/// Prompt embeddings with the projected feature rows spliced in.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    pub embeddings: Matrix,
    pub feature_span: Range<usize>,
}

impl AssembledPrompt {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph form of [`assemble_prompt`]: `prefix ⊕ features ⊕ suffix`.
pub fn assemble(
    g: &mut Graph,
    lm: &LanguageModel,
    prefix: &[u32],
    features: Var,
    suffix: &[u32],
) -> Result<(Var, Range<usize>)> {
    let width = g.value(features).cols();
    if width != lm.d_model() {
        return Err(Error::Shape(format!(
            "feature rows must be projected to {} columns, got {width}",
            lm.d_model()
        )));
    }
    let rows = g.value(features).rows();
    let mut parts = Vec::with_capacity(3);
    if !prefix.is_empty() {
        parts.push(lm.embed(g, prefix)?);
    }
    parts.push(features);
    if !suffix.is_empty() {
        parts.push(lm.embed(g, suffix)?);
    }
    let span = prefix.len()..prefix.len() + rows;
    Ok((g.concat_rows(&parts), span))
}

/// Splices already-projected feature blocks, in order, into a template.
pub fn assemble_prompt(
    store: &ParamStore,
    lm: &LanguageModel,
    tokenizer: &Tokenizer,
    template: &PromptTemplate,
    blocks: &[Matrix],
) -> Result<AssembledPrompt> {
    if let Some(b) = blocks.iter().find(|b| b.cols() != lm.d_model()) {
        return Err(Error::Shape(format!(
            "feature rows must be projected to {} columns, got {}",
            lm.d_model(),
            b.cols()
        )));
    }
    let (prefix, suffix) = template.token_ids(tokenizer);
    let mut g = Graph::inference(store);
    let features = if blocks.is_empty() {
        Matrix::zeros(0, lm.d_model())
    } else {
        Matrix::concat_rows(&blocks.iter().collect::<Vec<_>>())?
    };
    let f = g.constant(features);
    let (x, feature_span) = assemble(&mut g, lm, &prefix, f, &suffix)?;
    Ok(AssembledPrompt {
        embeddings: g.value(x).clone(),
        feature_span,
    })
}

/// What greedy decoding needs from a causal language model.
pub trait CausalLm {
    fn max_positions(&self) -> usize;
    fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix>;
    /// Logits of the next token after the last row of `embeddings`.
    fn last_logits(&self, embeddings: &Matrix) -> Result<Vec<f64>>;
}

/// A language model read from a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct StoredLm<'a> {
    pub lm: &'a LanguageModel,
    pub store: &'a ParamStore,
}

impl CausalLm for StoredLm<'_> {
    fn max_positions(&self) -> usize {
        self.lm.max_positions()
    }

    fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix> {
        self.lm.lm_embed_tokens(self.store, ids)
    }

    fn last_logits(&self, embeddings: &Matrix) -> Result<Vec<f64>> {
        let logits = self.lm.lm_forward(self.store, embeddings)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

/// Never emitted by the decoder.
pub const MASKED_IDS: [u32; 3] = [PAD, BOS, FEAT];

/// Highest admissible logit; ties go to the lowest id.
pub fn argmax_admissible(logits: &[f64]) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        let id = i as u32;
        if MASKED_IDS.contains(&id) {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map_or(EOS, |(id, _)| id)
}

/// Appends the argmax token until `<eos>`, `max_len` tokens, or the model's
/// context is full. The returned ids exclude `<eos>`.
pub fn greedy_decode(lm: &impl CausalLm, prompt: &AssembledPrompt, max_len: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.embeddings.clone();
    let mut out = Vec::new();
    while out.len() < max_len && seq.rows() < lm.max_positions() {
        let next = argmax_admissible(&lm.last_logits(&seq)?);
        if next == EOS {
            break;
        }
        out.push(next);
        seq = Matrix::concat_rows(&[&seq, &lm.embed_tokens(&[next])?])?;
    }
    Ok(out)
}

/// One line of `--dump-entity-info` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityDump {
    pub image_id: u64,
    pub entity_info_text: String,
    pub caption: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::backbones::Backbone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    #[test]
    fn templates_render_exactly() {
        assert_eq!(
            PromptTemplate::lp1().render(),
            "###Human: <Img><ProjFeature></Img> What are they? ###Assistant:"
        );
        assert_eq!(
            PromptTemplate::lp2().render(),
            "###Human: <Img><ProjFeature></Img> Describe this image in detail. ###Assistant:"
        );
    }

    fn backbone() -> Backbone {
        let mut texts = prompt_words().to_vec();
        texts.push("a red circle");
        Backbone::init(&RunConfig::default(), Tokenizer::from_texts(texts)).unwrap()
    }

    #[test]
    fn assembled_length_and_span() {
        let b = backbone();
        let lm = &b.modules.lm;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fv = Matrix::randn(8, 64, 1.0, &mut rng);
        let fe = Matrix::randn(4, 64, 1.0, &mut rng);
        let lp1 = PromptTemplate::lp1();
        let (pre, suf) = lp1.token_ids(&b.tokenizer);
        assert_eq!((pre.len(), suf.len()), (2, 5));
        let p = assemble_prompt(&b.store, lm, &b.tokenizer, &lp1, &[fv.clone()]).unwrap();
        assert_eq!(p.len(), 2 + 8 + 5);
        assert_eq!(p.feature_span, 2..10);
        let p = assemble_prompt(&b.store, lm, &b.tokenizer, &PromptTemplate::lp2(), &[fv.clone(), fe.clone()]).unwrap();
        assert_eq!(p.feature_span, 2..14);
        assert_eq!(p.embeddings.slice_rows(2, 10), fv);
        assert_eq!(p.embeddings.slice_rows(10, 14), fe);
        let (pre, suf) = PromptTemplate::lp2().token_ids(&b.tokenizer);
        assert_eq!(p.embeddings.slice_rows(0, 2), lm.lm_embed_tokens(&b.store, &pre).unwrap());
        assert_eq!(p.embeddings.slice_rows(14, p.len()), lm.lm_embed_tokens(&b.store, &suf).unwrap());
        assert!(matches!(
            assemble_prompt(&b.store, lm, &b.tokenizer, &lp1, &[Matrix::zeros(8, 32)]),
            Err(Error::Shape(_))
        ));
    }

    /// Replays fixed logits, one row per call, and records the prompt lengths it saw.
    struct Scripted {
        steps: Vec<Vec<f64>>,
        seen: RefCell<Vec<usize>>,
        max_positions: usize,
    }

    impl CausalLm for Scripted {
        fn max_positions(&self) -> usize {
            self.max_positions
        }

        fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix> {
            Ok(Matrix::filled(ids.len(), 2, ids[0] as f64))
        }

        fn last_logits(&self, embeddings: &Matrix) -> Result<Vec<f64>> {
            let mut seen = self.seen.borrow_mut();
            seen.push(embeddings.rows());
            Ok(self.steps[(seen.len() - 1).min(self.steps.len() - 1)].clone())
        }
    }

    fn scripted(steps: Vec<Vec<f64>>) -> Scripted {
        Scripted {
            steps,
            seen: RefCell::new(Vec::new()),
            max_positions: 100,
        }
    }

    fn prompt() -> AssembledPrompt {
        AssembledPrompt {
            embeddings: Matrix::zeros(3, 2),
            feature_span: 1..2,
        }
    }

    #[test]
    fn immediate_eos_gives_empty_output() {
        let lm = scripted(vec![vec![0.0, 0.0, 5.0, 1.0, 0.0, 2.0]]);
        assert!(greedy_decode(&lm, &prompt(), 10).unwrap().is_empty());
    }

    #[test]
    fn uniform_logits_stop_at_eos_because_specials_are_masked() {
        // pad and bos are excluded, so the lowest admissible id is eos
        let lm = scripted(vec![vec![0.0; 8]]);
        assert!(greedy_decode(&lm, &prompt(), 10).unwrap().is_empty());
        // with eos disfavoured, the lowest admissible non-eos id wins every tie
        let mut row = vec![0.0; 8];
        row[2] = -1.0;
        let lm = scripted(vec![row]);
        assert_eq!(greedy_decode(&lm, &prompt(), 4).unwrap(), vec![3; 4]);
    }

    #[test]
    fn matches_stepwise_argmax_oracle() {
        let steps = vec![
            vec![0.0, 9.0, 0.1, 0.5, 9.0, 0.7, 0.2],
            vec![0.0, 0.0, 0.1, 0.3, 0.0, 0.3, 0.9],
            vec![0.0, 0.0, 0.1, 2.0, 0.0, 1.0, 0.9],
            vec![0.0, 0.0, 3.0, 2.0, 0.0, 1.0, 0.9],
        ];
        let oracle: Vec<u32> = steps[..3]
            .iter()
            .map(|row| {
                let mut best = 2usize;
                for i in 2..row.len() {
                    if i != 4 && row[i] > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect();
        assert_eq!(oracle, vec![5, 6, 3]);
        let lm = scripted(steps);
        assert_eq!(greedy_decode(&lm, &prompt(), 10).unwrap(), oracle);
        assert_eq!(*lm.seen.borrow(), vec![3, 4, 5, 6]);
    }

    #[test]
    fn stops_at_max_len_and_context_limit() {
        let mut row = vec![0.0; 6];
        row[5] = 1.0;
        let lm = scripted(vec![row.clone()]);
        assert_eq!(greedy_decode(&lm, &prompt(), 3).unwrap().len(), 3);
        let lm = Scripted {
            max_positions: 5,
            ..scripted(vec![row])
        };
        assert_eq!(greedy_decode(&lm, &prompt(), 10).unwrap().len(), 2);
    }

    #[test]
    fn real_model_decoding_is_repeatable() {
        let mut b = backbone();
        let head = b.modules.lm.head();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, c) = b.store.param(head.weight).shape();
        b.store.set_value(head.weight, Matrix::randn(r, c, 1.0, &mut rng)).unwrap();
        let lm = StoredLm {
            lm: &b.modules.lm,
            store: &b.store,
        };
        let fv = Matrix::randn(8, 64, 1.0, &mut rng);
        let p = assemble_prompt(&b.store, &b.modules.lm, &b.tokenizer, &PromptTemplate::lp1(), &[fv]).unwrap();
        let a = greedy_decode(&lm, &p, 6).unwrap();
        assert_eq!(a, greedy_decode(&lm, &p, 6).unwrap());
        assert!(a.len() <= 6);
        assert!(a.iter().all(|id| !MASKED_IDS.contains(id)));
    }
}
