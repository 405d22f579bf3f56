//! Multi-glimpse low-rank bilinear attention over region features and
//! question token states, with residual accumulation of glimpse joins and a
//! two-layer answer classifier.
//!
//! For glimpse `g`, with `V` N×D_v regions, `Q` T×D_q tokens and ReLU
//! projections into a rank-K space:
//!
//! ```text
//! A_g  = softmax_{N·T}( (relu(V·U)·diag(h_g)) · relu(Q·W)ᵀ )
//! j_g  = Σ_{n,t} A_g[n,t] · relu(V·U_g)[n] ∘ relu(Q·W_g)[t]
//! f_g  = f_{g−1} + j_g·P_g + p_g
//! ```

use crate::error::{Error, Result};
use crate::numerics::{linear, Graph, NodeId, ParamStore, Real, SoftmaxDomain, Tensor};

pub const PREFIX: &str = "ban";
pub const CLASSIFIER_PREFIX: &str = "cls";

/// Starting value of the fused vector before the first glimpse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusedInit {
    Zeros,
    /// `f_0` is the raw first join; needs `rank == joint_dim`.
    FirstJoin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanConfig {
    pub glimpses: usize,
    pub joint_dim: usize,
    /// Rank of the bilinear forms.
    pub rank: usize,
    pub visual_dim: usize,
    pub question_dim: usize,
    pub num_answers: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub init: FusedInit,
}

impl BanConfig {
    /// Eight glimpses, rank equal to the joint width, classifier twice as
    /// wide as the joint vector.
    pub fn new(visual_dim: usize, question_dim: usize, joint_dim: usize, num_answers: usize) -> Self {
        Self {
            glimpses: 8,
            joint_dim,
            rank: joint_dim,
            visual_dim,
            question_dim,
            num_answers,
            classifier_hidden: 2 * joint_dim,
            dropout: 0.2,
            init: FusedInit::Zeros,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.glimpses,
            self.joint_dim,
            self.rank,
            self.visual_dim,
            self.question_dim,
            self.num_answers,
            self.classifier_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("BAN dimensions must be positive: {self:?}")));
        }
        if self.init == FusedInit::FirstJoin && self.rank != self.joint_dim {
            return Err(Error::Config(
                "starting from the first join needs rank == joint_dim".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BanOutput {
    /// 1×joint_dim.
    pub fused: NodeId,
    /// One N×T map per glimpse.
    pub maps: Vec<NodeId>,
    /// One 1×rank join per glimpse.
    pub joins: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Ban {
    config: BanConfig,
}

fn name(s: &str) -> String {
    format!("{PREFIX}.{s}")
}

impl Ban {
    pub fn new(config: BanConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BanConfig {
        &self.config
    }

    /// Fusion and classifier parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut s = ParamStore::new();
        s.init_normal(&name("att.v.w"), &[c.visual_dim, c.rank], he(c.visual_dim), seed);
        s.init_normal(&name("att.q.w"), &[c.question_dim, c.rank], he(c.question_dim), seed);
        s.init_normal(&name("att.h"), &[c.glimpses, c.rank], 1.0 / (c.rank as f64).sqrt(), seed);
        for g in 0..c.glimpses {
            s.init_normal(&name(&format!("g{g}.v.w")), &[c.visual_dim, c.rank], he(c.visual_dim), seed);
            s.init_normal(&name(&format!("g{g}.q.w")), &[c.question_dim, c.rank], he(c.question_dim), seed);
            s.init_normal(&name(&format!("g{g}.proj.w")), &[c.rank, c.joint_dim], 1.0 / (c.rank as f64).sqrt(), seed);
            s.init_const(&name(&format!("g{g}.proj.b")), &[c.joint_dim], 0.0);
        }
        let p = CLASSIFIER_PREFIX;
        s.init_normal(&format!("{p}.fc1.w"), &[c.joint_dim, c.classifier_hidden], he(c.joint_dim), seed);
        s.init_const(&format!("{p}.fc1.b"), &[c.classifier_hidden], 0.0);
        s.init_normal(
            &format!("{p}.fc2.w"),
            &[c.classifier_hidden, c.num_answers],
            1.0 / (c.classifier_hidden as f64).sqrt(),
            seed,
        );
        s.init_const(&format!("{p}.fc2.b"), &[c.num_answers], 0.0);
        s
    }

    fn check_inputs<T: Real>(&self, g: &Graph<T>, v: NodeId, q: NodeId, q_mask: &[bool]) -> Result<(usize, usize)> {
        let (n, dv) = g.value(v).dims2()?;
        let (t, dq) = g.value(q).dims2()?;
        if dv != self.config.visual_dim || dq != self.config.question_dim {
            return Err(Error::shape("ban inputs", g.shape(v), g.shape(q)));
        }
        if q_mask.len() != t {
            return Err(Error::shape("question mask", g.shape(q), &[q_mask.len()]));
        }
        if !q_mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("every question token is masked".into()));
        }
        Ok((n, t))
    }

    fn project<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, w: &str) -> Result<NodeId> {
        let w = g.param(store, &name(w))?;
        let y = g.matmul(x, w)?;
        Ok(g.relu(y))
    }

    fn map_from_projections<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        vp: NodeId,
        qp: NodeId,
        q_mask: &[bool],
        glimpse: usize,
    ) -> Result<NodeId> {
        let n = g.value(vp).dims2()?.0;
        let h = g.param(store, &name("att.h"))?;
        let hg = g.gather_rows(h, &[glimpse])?;
        let weighted = g.mul_row(vp, hg)?;
        let logits = g.matmul_bt(weighted, qp)?;
        let valid: Vec<bool> = (0..n).flat_map(|_| q_mask.iter().copied()).collect();
        g.softmax(logits, SoftmaxDomain::All, Some(&valid))
    }

    /// Attention over all N·T region/token pairs for one glimpse. Masked
    /// tokens get exactly zero weight.
    pub fn bilinear_attention_map<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
        q: NodeId,
        q_mask: &[bool],
        glimpse: usize,
    ) -> Result<NodeId> {
        self.check_inputs(g, v, q, q_mask)?;
        self.check_glimpse(glimpse)?;
        let vp = self.project(g, store, v, "att.v.w")?;
        let qp = self.project(g, store, q, "att.q.w")?;
        self.map_from_projections(g, store, vp, qp, q_mask, glimpse)
    }

    fn check_glimpse(&self, glimpse: usize) -> Result<()> {
        if glimpse >= self.config.glimpses {
            return Err(Error::InvalidInput(format!(
                "glimpse {glimpse} of {}",
                self.config.glimpses
            )));
        }
        Ok(())
    }

    /// Attention-weighted bilinear pooling, 1×rank: for each channel k,
    /// `Σ_{n,t} A[n,t]·V'[n,k]·Q'[t,k]`.
    pub fn glimpse_join<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
        q: NodeId,
        attention: NodeId,
        glimpse: usize,
    ) -> Result<NodeId> {
        self.check_glimpse(glimpse)?;
        let vj = self.project(g, store, v, &format!("g{glimpse}.v.w"))?;
        let qj = self.project(g, store, q, &format!("g{glimpse}.q.w"))?;
        let aq = g.matmul(attention, qj)?;
        let prod = g.mul(vj, aq)?;
        g.sum_rows(prod)
    }

    /// All glimpses with residual accumulation of projected joins.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v: NodeId,
        q: NodeId,
        q_mask: &[bool],
    ) -> Result<BanOutput> {
        self.check_inputs(g, v, q, q_mask)?;
        let c = &self.config;
        let vp = self.project(g, store, v, "att.v.w")?;
        let qp = self.project(g, store, q, "att.q.w")?;
        let mut maps = Vec::with_capacity(c.glimpses);
        let mut joins = Vec::with_capacity(c.glimpses);
        let mut fused: Option<NodeId> = None;
        for gl in 0..c.glimpses {
            let a = self.map_from_projections(g, store, vp, qp, q_mask, gl)?;
            let j = self.glimpse_join(g, store, v, q, a, gl)?;
            maps.push(a);
            joins.push(j);
            let step = linear(g, store, &name(&format!("g{gl}.proj")), j)?;
            let prev = match (fused, c.init) {
                (Some(f), _) => Some(f),
                (None, FusedInit::FirstJoin) => Some(j),
                (None, FusedInit::Zeros) => None,
            };
            fused = Some(match prev {
                Some(f) => g.add(f, step)?,
                None => step,
            });
        }
        Ok(BanOutput {
            fused: fused.expect("at least one glimpse"),
            maps,
            joins,
        })
    }

    /// FC → ReLU → dropout → FC, giving 1×A logits.
    pub fn answer_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fused: NodeId) -> Result<NodeId> {
        let h = linear(g, store, &format!("{CLASSIFIER_PREFIX}.fc1"), fused)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout)?;
        linear(g, store, &format!("{CLASSIFIER_PREFIX}.fc2"), h)
    }

    /// Evaluation-mode logits for plain tensors.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, v: &Tensor<T>, q: &Tensor<T>, q_mask: &[bool]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vi = g.input(v.clone());
        let qi = g.input(q.clone());
        let out = self.forward(&mut g, store, vi, qi, q_mask)?;
        let l = self.answer_logits(&mut g, store, out.fused)?;
        Ok(g.value(l).clone())
    }
}
