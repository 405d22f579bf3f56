//! Question encoders: a BERT-style transformer returning last-layer token
//! states, and a word-embedding + GRU baseline with 1280-dim states.

pub mod bert;
pub mod gru;

pub use bert::{param_count, BertEncoder, BlockOutput};
pub use gru::{GruConfig, GruEncoder, GRU_HIDDEN};

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore, Real, Tensor};

/// Parameter-name prefix shared by both encoders; the optimizer gives this
/// group its own learning rate.
pub const PREFIX: &str = "lang";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub pad_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
}

impl EncoderConfig {
    /// 12 layers, 768 hidden, 12 heads.
    pub fn base() -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 30522,
            max_positions: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            pad_id: 0,
            cls_id: 101,
            sep_id: 102,
        }
    }

    /// 24 layers, 1024 hidden, 16 heads.
    pub fn large() -> Self {
        Self {
            num_layers: 24,
            hidden_size: 1024,
            num_heads: 16,
            ffn_size: 4096,
            ..Self::base()
        }
    }

    /// Small encoder for tests and the synthetic data. Special ids are 0..3.
    pub fn toy(vocab_size: usize, hidden_size: usize, num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            hidden_size,
            num_heads,
            ffn_size: 2 * hidden_size,
            vocab_size,
            max_positions: 32,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            pad_id: 0,
            cls_id: 1,
            sep_id: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.vocab_size == 0 || self.max_positions < 2 || self.hidden_size < 2 {
            return bad(format!(
                "heads, vocab and hidden size must be positive and max_positions ≥ 2: {self:?}"
            ));
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.num_layers > 0 && self.ffn_size == 0 {
            return bad("ffn_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("layer_norm_eps must be positive".into());
        }
        for id in [self.pad_id, self.cls_id, self.sep_id] {
            if id >= self.vocab_size {
                return bad(format!("special token {id} outside vocabulary of {}", self.vocab_size));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// A single wrapped question: `[CLS] tokens… [SEP]`, optionally followed by
/// padding slots whose `mask` entry is false.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Segment id of every slot; always 0 (sentence A).
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    /// Content was cut to fit `max_positions`.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Appends padding slots up to `len` (no-op if already that long).
    pub fn pad_to(&mut self, len: usize, pad_id: usize) {
        while self.ids.len() < len {
            self.positions.push(self.ids.len());
            self.ids.push(pad_id);
            self.segments.push(0);
            self.mask.push(false);
        }
    }

    /// Slots visible to the fusion model. With `include_cls` false the
    /// leading `[CLS]` slot is hidden as well as padding.
    pub fn fusion_mask(&self, include_cls: bool) -> Vec<bool> {
        let mut m = self.mask.clone();
        if !include_cls && m.len() > 1 {
            m[0] = false;
        }
        m
    }
}

/// Wraps content ids as `[CLS] ids… [SEP]`. Content longer than
/// `max_positions − 2` is truncated and flagged.
pub fn encode_question(tokens: &[usize], config: &EncoderConfig) -> Result<TokenSequence> {
    config.validate()?;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if tokens.iter().any(|&t| t == config.cls_id || t == config.sep_id) {
        return Err(Error::InvalidInput(
            "question content must not contain [CLS] or [SEP]".into(),
        ));
    }
    let room = config.max_positions - 2;
    let truncated = tokens.len() > room;
    if truncated {
        warn!("question of {} tokens truncated to {room}", tokens.len());
    }
    let content = &tokens[..tokens.len().min(room)];
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(config.cls_id);
    ids.extend_from_slice(content);
    ids.push(config.sep_id);
    let t = ids.len();
    Ok(TokenSequence {
        ids,
        segments: vec![0; t],
        positions: (0..t).collect(),
        mask: vec![true; t],
        truncated,
    })
}

/// Either question encoder behind one interface.
#[derive(Clone, Debug)]
pub enum LanguageEncoder {
    Bert(BertEncoder),
    Gru(GruEncoder),
}

impl LanguageEncoder {
    pub fn out_dim(&self) -> usize {
        match self {
            Self::Bert(e) => e.config().hidden_size,
            Self::Gru(e) => e.config().hidden,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Bert(_) => "BERT",
            Self::Gru(_) => "GRU",
        }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        match self {
            Self::Bert(e) => e.init_params(seed),
            Self::Gru(e) => e.init_params(seed),
        }
    }

    /// Per-token states, T×out_dim.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &TokenSequence) -> Result<NodeId> {
        match self {
            Self::Bert(e) => Ok(e.encode(g, store, seq)?.states),
            Self::Gru(e) => e.encode(g, store, seq),
        }
    }

    /// Evaluation-mode encoding as a plain tensor.
    pub fn encode_tensor<T: Real>(&self, store: &ParamStore<T>, seq: &TokenSequence) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let id = self.encode(&mut g, store, seq)?;
        Ok(g.value(id).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wraps_with_specials() {
        let cfg = EncoderConfig::toy(16, 4, 1, 2);
        let s = encode_question(&[], &cfg).unwrap();
        assert_eq!(s.ids, vec![1, 2]);
        let s = encode_question(&[7, 9], &cfg).unwrap();
        assert_eq!(s.ids, vec![1, 7, 9, 2]);
        assert_eq!(s.segments, vec![0; 4]);
        assert_eq!(s.positions, vec![0, 1, 2, 3]);
        assert!(!s.truncated);
    }

    #[test]
    fn truncates_overlength() {
        let cfg = EncoderConfig {
            max_positions: 6,
            ..EncoderConfig::toy(16, 4, 1, 2)
        };
        let s = encode_question(&[5; 6], &cfg).unwrap();
        assert!(s.truncated);
        assert_eq!(s.ids, vec![1, 5, 5, 5, 5, 2]);
        assert_eq!(s.ids.iter().filter(|&&t| t == cfg.sep_id).count(), 1);
    }

    #[test]
    fn rejects_bad_ids_and_configs() {
        let cfg = EncoderConfig::toy(16, 4, 1, 2);
        assert!(matches!(encode_question(&[16], &cfg), Err(Error::InvalidInput(_))));
        assert!(matches!(encode_question(&[2], &cfg), Err(Error::InvalidInput(_))));
        let bad = EncoderConfig::toy(16, 6, 1, 4);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn padding_and_fusion_mask() {
        let cfg = EncoderConfig::toy(16, 4, 1, 2);
        let mut s = encode_question(&[5], &cfg).unwrap();
        s.pad_to(5, cfg.pad_id);
        assert_eq!(s.ids, vec![1, 5, 2, 0, 0]);
        assert_eq!(s.valid_len(), 3);
        assert_eq!(s.fusion_mask(true), vec![true, true, true, false, false]);
        assert_eq!(s.fusion_mask(false), vec![false, true, true, false, false]);
    }
}
