//! Global-Layer-Attention: leader-side queries attend to assistant-side
//! keys/values, followed by the classification head over the two class
//! tokens.
//!
//! Token bookkeeping for a stream sequence of length `L = n + 1`:
//!
//! * `Q` has `L + 1` rows: the self-attended leader sequence
//!   `LNorm(G_l + MHSA(G_l))` followed by the assistant's class token row.
//! * `K = V = MLP(G_a)` has `L` rows.
//! * The refined output has `L + 1 = n + 2` rows; row 0 is the leader class
//!   token and the last row the assistant class token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Init, ParamStore, Scalar, Var};
use crate::projection::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Cross,
    /// Keys and values come from the leader stream itself.
    SelfAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlaConfig {
    pub heads: usize,
    pub modules: usize,
    pub attention: AttentionMode,
    /// Hidden width of the post-attention MLP as a multiple of `d`.
    pub mlp_ratio: usize,
}

impl Default for GlaConfig {
    fn default() -> Self {
        GlaConfig {
            heads: 8,
            modules: 1,
            attention: AttentionMode::Cross,
            mlp_ratio: 2,
        }
    }
}

impl GlaConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.modules == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "GLA modules and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Refined tokens `[b, n+2, d]` with the positions of the two class tokens.
#[derive(Debug, Clone, Copy)]
pub struct RefinedTokens {
    pub tokens: Var,
    pub leader_clf: usize,
    pub assistant_clf: usize,
}

/// `LNorm(x + MLP(x))` with a GELU hidden layer.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        ratio: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(
                store,
                init,
                &format!("{prefix}.mlp_hidden"),
                dim,
                dim * ratio,
            )?,
            out: Linear::new(store, init, &format!("{prefix}.mlp_out"), dim * ratio, dim)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm_mlp"), dim)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = self.out.forward(g, h)?;
        let s = g.add(x, h)?;
        self.norm.forward(g, s)
    }
}

/// One Global-Layer-Attention module.
#[derive(Debug, Clone)]
pub struct GlaModule {
    pub self_attn: MultiHeadAttention,
    pub norm_query: LayerNorm,
    pub key_value: Linear,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
}

impl GlaModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        config: &GlaConfig,
    ) -> Result<Self> {
        config.validate(dim)?;
        Ok(GlaModule {
            self_attn: MultiHeadAttention::new(
                store,
                init,
                &format!("{prefix}.self_attn"),
                dim,
                config.heads,
            )?,
            norm_query: LayerNorm::new(store, &format!("{prefix}.norm_query"), dim)?,
            key_value: Linear::new(store, init, &format!("{prefix}.key_value"), dim, dim)?,
            cross_attn: MultiHeadAttention::new(
                store,
                init,
                &format!("{prefix}.cross_attn"),
                dim,
                config.heads,
            )?,
            norm_cross: LayerNorm::new(store, &format!("{prefix}.norm_cross"), dim)?,
            ffn: FeedForward::new(store, init, prefix, dim, config.mlp_ratio)?,
        })
    }

    /// `LNorm(x + MHSA(x))`, then, when given, the assistant class-token row
    /// appended as the last query.
    pub fn build_query<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        leader: Var,
        clf_assistant: Option<Var>,
    ) -> Result<Var> {
        let s = self.self_attn.forward(g, leader, leader, leader)?;
        let sum = g.add(leader, s)?;
        let q = self.norm_query.forward(g, sum)?;
        match clf_assistant {
            Some(clf) => {
                let (qs, cs) = (g.shape(q).to_vec(), g.shape(clf).to_vec());
                if cs.len() != 3 || cs[1] != 1 || cs[0] != qs[0] || cs[2] != qs[2] {
                    return Err(Error::shape(
                        "build_query",
                        format!("class token {cs:?} does not fit query {qs:?}"),
                    ));
                }
                g.concat(&[q, clf], 1)
            }
            None => Ok(q),
        }
    }

    /// `K = V = MLP(G)`; the same node is returned twice.
    pub fn build_key_value<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let kv = self.key_value.forward(g, tokens)?;
        Ok((kv, kv))
    }

    /// `LNorm(Q + MHA(Q, K, V))`.
    pub fn cross_attend<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let a = self.cross_attn.forward(g, q, k, v)?;
        let sum = g.add(q, a)?;
        self.norm_cross.forward(g, sum)
    }
}

#[derive(Debug, Clone)]
pub struct Gla {
    pub config: GlaConfig,
    pub modules: Vec<GlaModule>,
}

impl Gla {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        config: &GlaConfig,
    ) -> Result<Self> {
        config.validate(dim)?;
        let modules = (0..config.modules)
            .map(|i| GlaModule::new(store, init, &format!("{prefix}.module{i}"), dim, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gla {
            config: config.clone(),
            modules,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        leader: &TokenSequence,
        assistant: &TokenSequence,
    ) -> Result<RefinedTokens> {
        let (ls, as_) = (
            g.shape(leader.tokens).to_vec(),
            g.shape(assistant.tokens).to_vec(),
        );
        if ls != as_ || leader.layout != assistant.layout {
            return Err(Error::shape(
                "gla_forward",
                format!("leader tokens {ls:?} and assistant tokens {as_:?} differ in layout"),
            ));
        }
        let clf_assistant = g.narrow(assistant.tokens, 1, 0, 1)?;
        let kv_source = match self.config.attention {
            AttentionMode::Cross => assistant.tokens,
            AttentionMode::SelfAblation => leader.tokens,
        };
        let mut x = leader.tokens;
        for (i, m) in self.modules.iter().enumerate() {
            let q = m.build_query(g, x, (i == 0).then_some(clf_assistant))?;
            let (k, v) = m.build_key_value(g, kv_source)?;
            let w = m.cross_attend(g, q, k, v)?;
            x = m.ffn.forward(g, w)?;
        }
        let rows = g.shape(x)[1];
        Ok(RefinedTokens {
            tokens: x,
            leader_clf: 0,
            assistant_clf: rows - 1,
        })
    }
}

/// Concatenates the two class-token rows and maps them to class scores.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub linear: Linear,
}

impl ClassificationHead {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(ClassificationHead {
            linear: Linear::new(store, init, &format!("{prefix}.linear"), 2 * dim, classes)?,
        })
    }

    pub fn classify<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        refined: &RefinedTokens,
    ) -> Result<Var> {
        let s = g.shape(refined.tokens).to_vec();
        if s.len() != 3 || refined.leader_clf >= s[1] || refined.assistant_clf >= s[1] {
            return Err(Error::shape(
                "classify",
                format!(
                    "class-token rows {}/{} invalid for refined tokens {s:?}",
                    refined.leader_clf, refined.assistant_clf
                ),
            ));
        }
        let a = g.narrow(refined.tokens, 1, refined.leader_clf, 1)?;
        let b = g.narrow(refined.tokens, 1, refined.assistant_clf, 1)?;
        let both = g.concat(&[a, b], 2)?;
        let flat = g.reshape(both, &[s[0], 2 * s[2]])?;
        self.linear.forward(g, flat)
    }
}
