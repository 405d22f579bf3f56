//! Post-LN transformer encoder (BERT layout).

use std::path::Path;

use crate::checkpoint::{load_into, load_rvqw};
use crate::error::{Error, Result};
use crate::numerics::{linear, Activation, Graph, NodeId, ParamStore, Real, SoftmaxDomain};

use super::{EncoderConfig, TokenSequence, PREFIX};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct BertEncoder {
    config: EncoderConfig,
}

/// One block's output and its per-head attention probabilities (T×T each,
/// rows are queries).
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: NodeId,
    pub attention: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Last-layer token states, T×d.
    pub states: NodeId,
    /// `attention[layer][head]`.
    pub attention: Vec<Vec<NodeId>>,
}

/// Exact number of scalar parameters created by [`BertEncoder::init_params`].
pub fn param_count(config: &EncoderConfig) -> u64 {
    let (v, p, d, f) = (
        config.vocab_size as u64,
        config.max_positions as u64,
        config.hidden_size as u64,
        config.ffn_size as u64,
    );
    let embeddings = v * d + p * d + 2 * d + 2 * d;
    let attention = 4 * (d * d + d) + 2 * d;
    let ffn = d * f + f + f * d + d + 2 * d;
    embeddings + config.num_layers as u64 * (attention + ffn)
}

impl BertEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Normal(0, 0.02) weights and embeddings, zero biases, unit norm gains.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let (d, f) = (c.hidden_size, c.ffn_size);
        let mut s = ParamStore::new();
        let dense = |s: &mut ParamStore<T>, name: &str, i: usize, o: usize| {
            s.init_normal(&format!("{name}.w"), &[i, o], INIT_STD, seed);
            s.init_const(&format!("{name}.b"), &[o], 0.0);
        };
        let norm = |s: &mut ParamStore<T>, name: &str| {
            s.init_const(&format!("{name}.g"), &[d], 1.0);
            s.init_const(&format!("{name}.b"), &[d], 0.0);
        };
        s.init_normal(&format!("{PREFIX}.emb.token"), &[c.vocab_size, d], INIT_STD, seed);
        s.init_normal(&format!("{PREFIX}.emb.position"), &[c.max_positions, d], INIT_STD, seed);
        s.init_normal(&format!("{PREFIX}.emb.segment"), &[2, d], INIT_STD, seed);
        norm(&mut s, &format!("{PREFIX}.emb.ln"));
        for l in 0..c.num_layers {
            let p = format!("{PREFIX}.layer{l}");
            for m in ["q", "k", "v", "o"] {
                dense(&mut s, &format!("{p}.attn.{m}"), d, d);
            }
            norm(&mut s, &format!("{p}.attn.ln"));
            dense(&mut s, &format!("{p}.ffn.in"), d, f);
            dense(&mut s, &format!("{p}.ffn.out"), f, d);
            norm(&mut s, &format!("{p}.ffn.ln"));
        }
        s
    }

    /// Fresh parameters overwritten by the tensors in an `RVQW` file. Every
    /// tensor in the file must match a parameter name and shape.
    pub fn load_pretrained<T: Real>(&self, path: &Path, seed: u64) -> Result<ParamStore<T>> {
        let mut store = self.init_params(seed);
        let loaded = load_rvqw(path)?;
        load_into(&mut store, &loaded)?;
        Ok(store)
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let c = &self.config;
        let t = seq.len();
        if t == 0 || t > c.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence length {t} outside 1..={}",
                c.max_positions
            )));
        }
        if seq.segments.len() != t || seq.positions.len() != t || seq.mask.len() != t {
            return Err(Error::InvalidInput("ragged token sequence".into()));
        }
        if seq.ids.iter().any(|&i| i >= c.vocab_size) || seq.positions.iter().any(|&p| p >= c.max_positions) {
            return Err(Error::InvalidInput("token id or position out of range".into()));
        }
        if seq.segments.iter().any(|&s| s != 0) {
            return Err(Error::InvalidInput("only segment A is supported".into()));
        }
        Ok(())
    }

    /// Token + position + segment-A embeddings, layer norm, dropout.
    pub fn embed_tokens<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &TokenSequence) -> Result<NodeId> {
        self.check_sequence(seq)?;
        let tok = g.param(store, &format!("{PREFIX}.emb.token"))?;
        let pos = g.param(store, &format!("{PREFIX}.emb.position"))?;
        let seg = g.param(store, &format!("{PREFIX}.emb.segment"))?;
        let a = g.gather_rows(tok, &seq.ids)?;
        let b = g.gather_rows(pos, &seq.positions)?;
        let c = g.gather_rows(seg, &seq.segments)?;
        let ab = g.add(a, b)?;
        let x = g.add(ab, c)?;
        let x = self.norm(g, store, &format!("{PREFIX}.emb.ln"), x)?;
        g.dropout(x, self.config.dropout)
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, &format!("{name}.g"))?;
        let beta = g.param(store, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta, T::of(self.config.layer_norm_eps))
    }

    /// Multi-head self-attention and FFN, each followed by residual + layer
    /// norm. Keys with `mask[j] == false` get zero attention.
    pub fn transformer_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: usize,
        x: NodeId,
        mask: &[bool],
    ) -> Result<BlockOutput> {
        let c = &self.config;
        let (t, d) = g.value(x).dims2()?;
        if d != c.hidden_size || mask.len() != t {
            return Err(Error::shape("transformer_block", g.shape(x), &[mask.len(), c.hidden_size]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("attention mask excludes every position".into()));
        }
        if layer >= c.num_layers {
            return Err(Error::Config(format!("layer {layer} of a {}-layer encoder", c.num_layers)));
        }
        let p = format!("{PREFIX}.layer{layer}");
        let q = linear(g, store, &format!("{p}.attn.q"), x)?;
        let k = linear(g, store, &format!("{p}.attn.k"), x)?;
        let v = linear(g, store, &format!("{p}.attn.v"), x)?;
        let dh = c.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let key_mask: Vec<bool> = (0..t).flat_map(|_| mask.iter().copied()).collect();
        let mut heads = Vec::with_capacity(c.num_heads);
        let mut attention = Vec::with_capacity(c.num_heads);
        for h in 0..c.num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, SoftmaxDomain::Rows, Some(&key_mask))?;
            attention.push(probs);
            let dropped = g.dropout(probs, c.dropout)?;
            heads.push(g.matmul(dropped, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let o = linear(g, store, &format!("{p}.attn.o"), ctx)?;
        let o = g.dropout(o, c.dropout)?;
        let r = g.add(x, o)?;
        let h1 = self.norm(g, store, &format!("{p}.attn.ln"), r)?;

        let f = linear(g, store, &format!("{p}.ffn.in"), h1)?;
        let f = g.activation(f, Activation::Gelu);
        let f = linear(g, store, &format!("{p}.ffn.out"), f)?;
        let f = g.dropout(f, c.dropout)?;
        let r = g.add(h1, f)?;
        let out = self.norm(g, store, &format!("{p}.ffn.ln"), r)?;
        Ok(BlockOutput { out, attention })
    }

    /// Embeddings followed by every block; only the final layer's token
    /// states are returned (no pooling).
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &TokenSequence) -> Result<EncoderOutput> {
        let mut x = self.embed_tokens(g, store, seq)?;
        let mut attention = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let b = self.transformer_block(g, store, l, x, &seq.mask)?;
            x = b.out;
            attention.push(b.attention);
        }
        Ok(EncoderOutput { states: x, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_created_parameters() {
        for cfg in [
            EncoderConfig::toy(8, 4, 1, 2),
            EncoderConfig::toy(11, 6, 3, 3),
            EncoderConfig { num_layers: 0, ..EncoderConfig::toy(8, 4, 1, 2) },
        ] {
            let enc = BertEncoder::new(cfg.clone()).unwrap();
            assert_eq!(param_count(&cfg), enc.init_params::<f32>(0).scalar_count() as u64);
        }
    }

    #[test]
    fn named_configs_are_close_to_reported_sizes() {
        let base = param_count(&EncoderConfig::base()) as f64;
        let large = param_count(&EncoderConfig::large()) as f64;
        assert!((base / 110e6 - 1.0).abs() <= 0.02, "{base}");
        assert!((large / 340e6 - 1.0).abs() <= 0.03, "{large}");
    }
}
