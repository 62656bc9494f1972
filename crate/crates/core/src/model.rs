//! The complete affordance model: encoder, text pathway and one head
//! variant over a shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aqm::{self, AqmConfig};
use crate::autograd::{Graph, Var};
use crate::encoder::{self, EncoderConfig};
use crate::geometry::PointCloud;
use crate::head::{self, AffordancePrediction, HeadVariant};
use crate::lm::{self, LMConfig};
use crate::nn::Mode;
use crate::params::{Init, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError};
use crate::text::{self, TokenizedText, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocabulary: Vocabulary,
    pub lm: LMConfig,
    pub encoder: EncoderConfig,
    pub head: HeadVariant,
    /// Zero-initialize the inserted cross-attention output projections.
    pub gate_zero_init: bool,
    /// Keep the `lm.` parameters fixed during training.
    pub freeze_lm: bool,
}

impl ModelConfig {
    pub fn desk(vocabulary: Vocabulary, head: HeadVariant) -> Self {
        let lm = LMConfig::desk(vocabulary.len());
        ModelConfig {
            vocabulary,
            lm,
            encoder: EncoderConfig::desk(128),
            head,
            gate_zero_init: true,
            freeze_lm: false,
        }
    }

    /// Gradient-check scale: one block of width 8, `L = 3`, `d_P = 8`.
    pub fn micro(vocabulary: Vocabulary, head: HeadVariant) -> Self {
        let lm = LMConfig::micro(vocabulary.len());
        ModelConfig {
            vocabulary,
            lm,
            encoder: EncoderConfig::micro(8),
            head,
            gate_zero_init: true,
            freeze_lm: false,
        }
    }

    /// BERT-base-sized text pathway over the desk encoder.
    pub fn paper(vocabulary: Vocabulary, head: HeadVariant) -> Self {
        let lm = LMConfig::paper(vocabulary.len());
        ModelConfig {
            vocabulary,
            lm,
            encoder: EncoderConfig::desk(128),
            head,
            gate_zero_init: true,
            freeze_lm: false,
        }
    }

    pub fn d_p(&self) -> usize {
        self.encoder.d_p
    }

    pub fn aqm(&self) -> AqmConfig {
        AqmConfig {
            lm: self.lm.clone(),
            d_p: self.d_p(),
            gate_zero_init: self.gate_zero_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.encoder.validate()?;
        if self.lm.vocab_size != self.vocabulary.len() {
            return Err(TensorError::invalid(
                "model config",
                format!(
                    "vocab_size {} does not match the {}-token vocabulary",
                    self.lm.vocab_size,
                    self.vocabulary.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        encoder::init_encoder(&mut ps, &mut init, &config.encoder);
        let (d_lm, d_p) = (config.lm.d_model, config.d_p());
        match config.head {
            HeadVariant::Aqm => {
                lm::init_lm(&mut ps, &mut init, &config.lm);
                aqm::init_aqm(&mut ps, &mut init, &config.aqm());
                head::init_decoder(&mut ps, &mut init, d_p, d_lm, d_lm);
            }
            HeadVariant::Xattn => {
                // embeddings only; the layers replace the LM blocks
                let emb = LMConfig { n_layers: 0, ..config.lm.clone() };
                lm::init_lm(&mut ps, &mut init, &emb);
                head::init_plain_xattn(&mut ps, &mut init, &config.lm, d_p, config.gate_zero_init);
                head::init_decoder(&mut ps, &mut init, d_p, d_lm, d_lm);
            }
            HeadVariant::Cosine => {
                lm::init_lm(&mut ps, &mut init, &config.lm);
                head::init_cosine(&mut ps, &mut init, d_lm, d_p);
            }
        }
        if config.freeze_lm {
            ps.set_trainable_prefix("lm.", false);
        }
        Ok(Model { config, params: ps })
    }

    /// Builds a model from named tensors, which must match the parameters
    /// the configuration calls for in name, order and shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Model::<T>::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(TensorError::invalid(
                "model",
                format!("expected {} tensors, found {}", model.params.len(), tensors.len()),
            ));
        }
        let expected: Vec<String> = model.params.names().map(str::to_string).collect();
        for (want, (name, t)) in expected.iter().zip(tensors) {
            if *want != name {
                return Err(TensorError::invalid("model", format!("expected tensor `{want}`, found `{name}`")));
            }
            model.params.set(&name, t)?;
        }
        Ok(model)
    }

    pub fn tokenize(&self, word: &str) -> std::result::Result<TokenizedText, text::TextError> {
        text::tokenize(word, &self.config.vocabulary, self.config.lm.max_len)
    }

    /// `N×2` logits for each query on one cloud. The encoder and every
    /// point-side projection run once per call.
    pub fn forward(&self, g: &mut Graph<T>, pc: &PointCloud, queries: &[TokenizedText], mode: Mode) -> Result<Vec<Var>> {
        Ok(self.forward_batch(g, &[(pc, queries)], mode)?.remove(0))
    }

    /// Logits for several clouds, each with its own queries. The clouds
    /// share one encoder pass (see [`encoder::encode_batch`]).
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        items: &[(&PointCloud, &[TokenizedText])],
        mode: Mode,
    ) -> Result<Vec<Vec<Var>>> {
        let clouds: Vec<&PointCloud> = items.iter().map(|(pc, _)| *pc).collect();
        let enc = encoder::encode_batch(g, &self.params, &self.config.encoder, &clouds, mode)?;
        enc.iter()
            .zip(items)
            .map(|(e, (_, queries))| self.head_forward(g, e.h_c, queries))
            .collect()
    }

    fn head_forward(&self, g: &mut Graph<T>, h_c: Var, queries: &[TokenizedText]) -> Result<Vec<Var>> {
        let ps = &self.params;
        let cfg = &self.config;
        let heads = cfg.lm.n_heads;
        match cfg.head {
            HeadVariant::Aqm => {
                let aqm_cfg = cfg.aqm();
                let kv = aqm::project_point_keys(g, ps, &aqm_cfg, h_c)?;
                let q = head::decoder_queries(g, ps, h_c)?;
                queries
                    .iter()
                    .map(|t| {
                        let trace = aqm::aqm_forward(g, ps, &aqm_cfg, t, &kv)?;
                        head::decode_with_queries(g, ps, q, trace.g, &t.attention_mask, heads)
                    })
                    .collect()
            }
            HeadVariant::Xattn => {
                let kv = head::plain_xattn_keys(g, ps, &cfg.lm, h_c)?;
                let q = head::decoder_queries(g, ps, h_c)?;
                queries
                    .iter()
                    .map(|t| {
                        let x = head::plain_xattn_stack(g, ps, &cfg.lm, t, &kv)?;
                        head::decode_with_queries(g, ps, q, x, &t.attention_mask, heads)
                    })
                    .collect()
            }
            HeadVariant::Cosine => queries
                .iter()
                .map(|t| {
                    let states = lm::lm_forward(g, ps, &cfg.lm, t)?;
                    let emb = head::cosine_text_embedding(g, ps, states, &t.attention_mask)?;
                    head::cosine_baseline(g, ps, h_c, emb)
                })
                .collect(),
        }
    }

    /// Eval-mode predictions for several words on one cloud.
    pub fn predict_words(&self, pc: &PointCloud, words: &[&str]) -> Result<Vec<AffordancePrediction>> {
        let queries = words
            .iter()
            .map(|w| self.tokenize(w).map_err(|e| TensorError::invalid("predict", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        self.predict_tokens(pc, &queries)
    }

    pub fn predict_tokens(&self, pc: &PointCloud, queries: &[TokenizedText]) -> Result<Vec<AffordancePrediction>> {
        let mut g = Graph::inference();
        let logits = self.forward(&mut g, pc, queries, Mode::Eval)?;
        logits.iter().map(|&l| AffordancePrediction::from_logits(g.value(l))).collect()
    }

    pub fn predict(&self, pc: &PointCloud, word: &str) -> Result<AffordancePrediction> {
        Ok(self.predict_words(pc, &[word])?.remove(0))
    }
}
