//! The answer model: question encoder, bilinear attention fusion and answer
//! classifier, plus the per-question training sample.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::warn;

use crate::ban::{Ban, BanConfig, FusedInit, BanOutput};
use crate::checkpoint::{load_into, load_rvqw, save_rvqw};
use crate::config::KvConfig;
use crate::data::{QuestionType, VqaExample};
use crate::error::{Error, Result};
use crate::language::{
    encode_question, BertEncoder, EncoderConfig, GruConfig, GruEncoder, LanguageEncoder,
    TokenSequence,
};
use crate::numerics::{softmax, Graph, NodeId, ParamStore, Real, SoftmaxDomain, Tensor};
use crate::region::RegionFeatureSet;

#[derive(Clone, Debug, PartialEq)]
pub enum LanguageConfig {
    Bert(EncoderConfig),
    Gru(GruConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaModelConfig {
    pub language: LanguageConfig,
    pub ban: BanConfig,
    /// Feed the `[CLS]` state to the fusion model as an ordinary token.
    pub include_cls: bool,
    pub answers: Vec<String>,
}

impl VqaModelConfig {
    /// BERT-style encoder of width `hidden`, BAN with joint width `hidden`.
    pub fn toy_bert(vocab_size: usize, visual_dim: usize, hidden: usize, layers: usize, glimpses: usize, answers: Vec<String>) -> Self {
        let enc = EncoderConfig {
            dropout: 0.0,
            ..EncoderConfig::toy(vocab_size, hidden, layers, 2)
        };
        Self {
            language: LanguageConfig::Bert(enc),
            ban: BanConfig {
                glimpses,
                dropout: 0.0,
                ..BanConfig::new(visual_dim, hidden, hidden, answers.len())
            },
            include_cls: true,
            answers,
        }
    }

    /// Word-embedding + GRU encoder with `hidden`-wide states.
    pub fn toy_gru(vocab_size: usize, visual_dim: usize, embed_dim: usize, hidden: usize, joint: usize, glimpses: usize, answers: Vec<String>) -> Self {
        Self {
            language: LanguageConfig::Gru(GruConfig {
                vocab_size,
                embed_dim,
                hidden,
            }),
            ban: BanConfig {
                glimpses,
                dropout: 0.0,
                ..BanConfig::new(visual_dim, hidden, joint, answers.len())
            },
            include_cls: true,
            answers,
        }
    }

    /// Keys: `language` (bert|gru), `vocab_size`, `hidden`, `layers`,
    /// `heads`, `ffn`, `max_positions`, `dropout`, `gru_embed`,
    /// `gru_hidden`, `visual_dim`, `glimpses`, `joint_dim`, `rank`,
    /// `classifier_hidden`, `ban_dropout`, `fused_init` (zeros|first_join),
    /// `include_cls`, `answers` (comma-separated).
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let kind: String = kv.take("language", "bert".to_string())?;
        let vocab_size: usize = kv.take("vocab_size", 32)?;
        let hidden: usize = kv.take("hidden", 32)?;
        let language = match kind.as_str() {
            "bert" => {
                let layers = kv.take("layers", 2)?;
                let heads = kv.take("heads", 2)?;
                let base = EncoderConfig::toy(vocab_size, hidden, layers, heads);
                LanguageConfig::Bert(EncoderConfig {
                    ffn_size: kv.take("ffn", base.ffn_size)?,
                    max_positions: kv.take("max_positions", base.max_positions)?,
                    dropout: kv.take("dropout", 0.0)?,
                    ..base
                })
            }
            "gru" => LanguageConfig::Gru(GruConfig {
                vocab_size,
                embed_dim: kv.take("gru_embed", 32)?,
                hidden: kv.take("gru_hidden", crate::language::GRU_HIDDEN)?,
            }),
            other => return Err(Error::Config(format!("unknown language model '{other}'"))),
        };
        let answers: Vec<String> = kv.take_list("answers", vec![])?;
        if answers.is_empty() {
            return Err(Error::Config("'answers' must list the answer vocabulary".into()));
        }
        let question_dim = match &language {
            LanguageConfig::Bert(c) => c.hidden_size,
            LanguageConfig::Gru(c) => c.hidden,
        };
        let joint: usize = kv.take("joint_dim", hidden)?;
        let mut ban = BanConfig::new(kv.take("visual_dim", 16)?, question_dim, joint, answers.len());
        ban.glimpses = kv.take("glimpses", ban.glimpses)?;
        ban.rank = kv.take("rank", joint)?;
        ban.classifier_hidden = kv.take("classifier_hidden", ban.classifier_hidden)?;
        ban.dropout = kv.take("ban_dropout", 0.0)?;
        ban.init = match kv.take("fused_init", "zeros".to_string())?.as_str() {
            "zeros" => FusedInit::Zeros,
            "first_join" => FusedInit::FirstJoin,
            other => return Err(Error::Config(format!("unknown fused_init '{other}'"))),
        };
        Ok(Self {
            language,
            ban,
            include_cls: kv.take("include_cls", true)?,
            answers,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        match &self.language {
            LanguageConfig::Bert(c) => {
                kv.set("language", "bert");
                kv.set("vocab_size", c.vocab_size);
                kv.set("hidden", c.hidden_size);
                kv.set("layers", c.num_layers);
                kv.set("heads", c.num_heads);
                kv.set("ffn", c.ffn_size);
                kv.set("max_positions", c.max_positions);
                kv.set("dropout", c.dropout);
            }
            LanguageConfig::Gru(c) => {
                kv.set("language", "gru");
                kv.set("vocab_size", c.vocab_size);
                kv.set("gru_embed", c.embed_dim);
                kv.set("gru_hidden", c.hidden);
            }
        }
        let b = &self.ban;
        kv.set("visual_dim", b.visual_dim);
        kv.set("glimpses", b.glimpses);
        kv.set("joint_dim", b.joint_dim);
        kv.set("rank", b.rank);
        kv.set("classifier_hidden", b.classifier_hidden);
        kv.set("ban_dropout", b.dropout);
        kv.set(
            "fused_init",
            match b.init {
                FusedInit::Zeros => "zeros",
                FusedInit::FirstJoin => "first_join",
            },
        );
        kv.set("include_cls", self.include_cls);
        kv.set("answers", self.answers.join(","));
        kv
    }
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    config: VqaModelConfig,
    encoder: LanguageEncoder,
    ban: Ban,
    /// Wrapping rules for questions (specials and maximum length).
    tokens: EncoderConfig,
}

impl VqaModel {
    pub fn new(config: VqaModelConfig) -> Result<Self> {
        let (encoder, tokens) = match &config.language {
            LanguageConfig::Bert(c) => (LanguageEncoder::Bert(BertEncoder::new(c.clone())?), c.clone()),
            LanguageConfig::Gru(c) => (
                LanguageEncoder::Gru(GruEncoder::new(c.clone())?),
                EncoderConfig::toy(c.vocab_size.max(3), 2, 0, 1),
            ),
        };
        if encoder.out_dim() != config.ban.question_dim {
            return Err(Error::Config(format!(
                "encoder width {} does not match the fusion question width {}",
                encoder.out_dim(),
                config.ban.question_dim
            )));
        }
        if config.answers.len() != config.ban.num_answers {
            return Err(Error::Config("answer list and classifier width disagree".into()));
        }
        let ban = Ban::new(config.ban.clone())?;
        Ok(Self {
            config,
            encoder,
            ban,
            tokens,
        })
    }

    pub fn config(&self) -> &VqaModelConfig {
        &self.config
    }

    pub fn answers(&self) -> &[String] {
        &self.config.answers
    }

    pub fn encoder(&self) -> &LanguageEncoder {
        &self.encoder
    }

    pub fn ban(&self) -> &Ban {
        &self.ban
    }

    pub fn language_name(&self) -> &'static str {
        self.encoder.name()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut s = self.encoder.init_params(seed);
        s.merge_prefixed(&self.ban.init_params(seed), "");
        s
    }

    pub fn wrap_question(&self, tokens: &[usize]) -> Result<TokenSequence> {
        encode_question(tokens, &self.tokens)
    }

    /// 1×A answer logits and the fusion internals.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        regions: NodeId,
        seq: &TokenSequence,
    ) -> Result<(NodeId, BanOutput)> {
        let q = self.encoder.encode(g, store, seq)?;
        let out = self.ban.forward(g, store, regions, q, &seq.fusion_mask(self.config.include_cls))?;
        let logits = self.ban.answer_logits(g, store, out.fused)?;
        Ok((logits, out))
    }

    /// Softmax answer distribution in evaluation mode.
    pub fn distribution<T: Real>(&self, store: &ParamStore<T>, sample: &VqaSample<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.input(sample.regions.clone());
        let (logits, _) = self.forward(&mut g, store, v, &sample.question)?;
        // Normalised in f64 so averaged distributions stay on the simplex.
        Ok(softmax(&g.value(logits).cast::<f64>(), SoftmaxDomain::Rows)?.into_data())
    }

    /// Writes the parameters to `path` and the model configuration to
    /// `path` + `.cfg`, with `extra` appended to the configuration.
    pub fn save<T: Real>(&self, path: &Path, store: &ParamStore<T>, extra: &KvConfig) -> Result<()> {
        save_rvqw(path, store)?;
        let mut text = self.config.to_kv().render();
        text.push_str(&extra.render());
        std::fs::write(sidecar(path), text)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`VqaModel::save`]. Keys not used by the
    /// model configuration are returned.
    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>, KvConfig)> {
        let mut kv = KvConfig::load(&sidecar(path))?;
        let config = VqaModelConfig::from_kv(&mut kv)?;
        let model = Self::new(config)?;
        let mut store = model.init_params::<f32>(0);
        let loaded = load_rvqw(path)?;
        if loaded.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                store.len()
            )));
        }
        load_into(&mut store, &loaded)?;
        Ok((model, store, kv))
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// One question ready for the model.
#[derive(Clone, Debug)]
pub struct VqaSample<T> {
    pub id: u32,
    /// N×D region features.
    pub regions: Tensor<T>,
    pub question: TokenSequence,
    pub qtype: QuestionType,
    pub annotators: Vec<String>,
    /// Most frequent annotator answer, first occurrence on ties.
    pub majority: String,
    /// Soft score `min(votes/3, 1)` per answer.
    pub targets: Vec<T>,
}

impl<T: Real> VqaSample<T> {
    pub fn new(model: &VqaModel, example: &VqaExample, regions: &RegionFeatureSet) -> Result<Self> {
        let tensor = match regions.to_tensor::<T>() {
            Some(t) => t,
            None => {
                warn!("image {} has no regions; using one zero region", example.image.id);
                Tensor::zeros(&[1, regions.dim()])
            }
        };
        if tensor.shape()[1] != model.config.ban.visual_dim {
            return Err(Error::Config(format!(
                "region features are {}-dim, model expects {}",
                tensor.shape()[1],
                model.config.ban.visual_dim
            )));
        }
        if example.answers.is_empty() {
            return Err(Error::InvalidInput(format!("question {} has no annotator answers", example.id)));
        }
        let mut votes: HashMap<&str, usize> = HashMap::new();
        for a in &example.answers {
            *votes.entry(a.as_str()).or_default() += 1;
        }
        let mut majority = example.answers[0].as_str();
        for a in &example.answers {
            if votes[a.as_str()] > votes[majority] {
                majority = a;
            }
        }
        let targets = model
            .answers()
            .iter()
            .map(|a| T::of((votes.get(a.as_str()).copied().unwrap_or(0) as f64 / 3.0).min(1.0)))
            .collect();
        Ok(Self {
            id: example.id,
            regions: tensor,
            question: model.wrap_question(&example.question)?,
            qtype: example.qtype,
            annotators: example.answers.clone(),
            majority: majority.to_string(),
            targets,
        })
    }
}
