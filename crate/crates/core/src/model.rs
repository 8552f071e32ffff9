//! Encoder plus head, and the per-example input encoding each variant
//! expects.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{predict, HeadConfig, HeadOutput, HeadParams, Variant};
use crate::autograd::{Graph, Var};
use crate::data::LabeledExample;
use crate::encoder::{encode, Dropout, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::prompt::PromptTemplate;
use crate::tokenizer::{pad_or_truncate, TokenId, Vocabulary};

/// A tokenized example ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedExample {
    pub id: String,
    pub ids: Vec<TokenId>,
    pub valid_length: usize,
    /// `[MASK]` index for prompt variants, 0 (`[CLS]`) otherwise.
    pub mask_position: usize,
    pub label: usize,
}

pub fn prepare_one(
    v: &Vocabulary,
    template: &PromptTemplate,
    variant: Variant,
    text: &str,
    max_len: usize,
) -> Result<(Vec<TokenId>, usize, usize)> {
    if variant.uses_prompt() {
        let e = template.encode(v, text, max_len)?;
        Ok((e.ids, e.valid_length, e.mask_position))
    } else {
        let (ids, valid) = pad_or_truncate(&v.encode_sequence(text), max_len)?;
        Ok((ids, valid, 0))
    }
}

/// Wraps (unless the variant drops the prompt), tokenizes and pads.
pub fn prepare(
    v: &Vocabulary,
    template: &PromptTemplate,
    variant: Variant,
    examples: &[LabeledExample],
    max_len: usize,
) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|e| {
            let (ids, valid_length, mask_position) =
                prepare_one(v, template, variant, &e.text, max_len).map_err(|err| match err {
                    Error::MaskLost | Error::MultipleMasks(_) => {
                        Error::Data(format!("example `{}`: {err}", e.id))
                    }
                    other => other,
                })?;
            Ok(PreparedExample {
                id: e.id.clone(),
                ids,
                valid_length,
                mask_position,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub alphas: Option<Vec<f64>>,
}

impl Model {
    /// Fresh encoder and head from one seeded stream.
    pub fn init(encoder: EncoderConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        if encoder.d_model != head.d_model {
            return Err(Error::Config(format!(
                "encoder width {} != head width {}",
                encoder.d_model, head.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(encoder, &mut rng)?;
        let head = HeadParams::init(head, &mut rng)?;
        Ok(Self { encoder, head })
    }

    /// Records the full pipeline on `g`. With `frozen`, the encoder runs
    /// outside the tape and enters as constants.
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        evars: &Bound,
        hvars: &Bound,
        ex: &PreparedExample,
        dropout: Option<&mut Dropout<'_>>,
        frozen: bool,
    ) -> Result<HeadOutput> {
        let states: Vec<Var> = if frozen {
            encode(&self.encoder, &ex.ids, ex.valid_length)?
                .states
                .into_iter()
                .map(|s| g.constant(s))
                .collect()
        } else {
            self.encoder
                .forward_graph(g, evars, &ex.ids, ex.valid_length, dropout)?
        };
        self.head.forward_graph(g, hvars, &states, ex.mask_position)
    }

    pub fn predict(&self, ex: &PreparedExample) -> Result<Prediction> {
        let mut g = Graph::new();
        let evars = self.encoder.store().bind(&mut g);
        let hvars = self.head.store().bind(&mut g);
        let out = self.forward_graph(&mut g, &evars, &hvars, ex, None, false)?;
        let logits = g.value(out.logits).data().to_vec();
        let alphas = out
            .attention
            .and_then(|a| g.attention(a))
            .map(|p| p.alphas.clone());
        Ok(Prediction {
            predicted: predict(&logits),
            logits,
            alphas,
        })
    }
}
