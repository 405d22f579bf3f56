//! Word embeddings fed through a single-layer GRU; every step's hidden state
//! is returned.
//!
//! Gate layout follows the common `r, z, n` ordering:
//!
//! ```text
//! r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
//! z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
//! n  = tanh(x·W_in + b_in + r ∘ (h·W_hn + b_hn))
//! h' = (1 − z) ∘ n + z ∘ h
//! ```

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, NodeId, ParamStore, Real, Tensor};

use super::{TokenSequence, PREFIX};

pub const GRU_HIDDEN: usize = 1280;

#[derive(Clone, Debug, PartialEq)]
pub struct GruConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl GruConfig {
    /// 300-dim word vectors and 1280-dim states.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 300,
            hidden: GRU_HIDDEN,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GruEncoder {
    config: GruConfig,
}

impl GruEncoder {
    pub fn new(config: GruConfig) -> Result<Self> {
        if config.vocab_size == 0 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("GRU dimensions must be positive: {config:?}")));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &GruConfig {
        &self.config
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let GruConfig {
            vocab_size: v,
            embed_dim: e,
            hidden: h,
        } = self.config;
        let mut s = ParamStore::new();
        s.init_normal(&format!("{PREFIX}.gru.emb"), &[v, e], 1.0, seed);
        s.init_normal(&format!("{PREFIX}.gru.w_ih"), &[e, 3 * h], 1.0 / (e as f64).sqrt(), seed);
        s.init_normal(&format!("{PREFIX}.gru.w_hh"), &[h, 3 * h], 1.0 / (h as f64).sqrt(), seed);
        s.init_const(&format!("{PREFIX}.gru.b_ih"), &[3 * h], 0.0);
        s.init_const(&format!("{PREFIX}.gru.b_hh"), &[3 * h], 0.0);
        s
    }

    /// Hidden state after every token, T×hidden. The initial state is zero.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: &TokenSequence) -> Result<NodeId> {
        let h_dim = self.config.hidden;
        if seq.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside the embedding table")));
        }
        let emb = g.param(store, &format!("{PREFIX}.gru.emb"))?;
        let w_ih = g.param(store, &format!("{PREFIX}.gru.w_ih"))?;
        let w_hh = g.param(store, &format!("{PREFIX}.gru.w_hh"))?;
        let b_ih = g.param(store, &format!("{PREFIX}.gru.b_ih"))?;
        let b_hh = g.param(store, &format!("{PREFIX}.gru.b_hh"))?;

        let x = g.gather_rows(emb, &seq.ids)?;
        let gi_all = g.matmul(x, w_ih)?;
        let gi_all = g.add_row(gi_all, b_ih)?;
        let mut h = g.input(Tensor::zeros(&[1, h_dim]));
        let mut states = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let gi = g.gather_rows(gi_all, &[t])?;
            let gh = g.matmul(h, w_hh)?;
            let gh = g.add_row(gh, b_hh)?;
            let gate = |g: &mut Graph<T>, k: usize| -> Result<(NodeId, NodeId)> {
                Ok((g.slice_cols(gi, k * h_dim, h_dim)?, g.slice_cols(gh, k * h_dim, h_dim)?))
            };
            let (ir, hr) = gate(g, 0)?;
            let (iz, hz) = gate(g, 1)?;
            let (in_, hn) = gate(g, 2)?;
            let r = g.add(ir, hr)?;
            let r = g.activation(r, Activation::Sigmoid);
            let z = g.add(iz, hz)?;
            let z = g.activation(z, Activation::Sigmoid);
            let rn = g.mul(r, hn)?;
            let n = g.add(in_, rn)?;
            let n = g.activation(n, Activation::Tanh);
            let diff = g.sub(h, n)?;
            let zd = g.mul(z, diff)?;
            h = g.add(n, zd)?;
            states.push(h);
        }
        if states.len() == 1 {
            Ok(states[0])
        } else {
            g.concat_rows(&states)
        }
    }
}
