//! Full dual-path model and the baselines used by the ablation suite.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::gla::{ClassificationHead, FeedForward, Gla, GlaConfig};
use crate::nn::layers::{LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Init, ParamStore, Scalar, Tensor, Var};
use crate::projection::{
    AbstractProjection, ClassToken, Projection, ProjectionConfig, ProjectionMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Leader,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Shared backbone, projection, Global-Layer-Attention, two-token head.
    Gla,
    /// Two independent single-stream pipelines, each trained on its own
    /// loss; predictions average their logits.
    LateFusion,
    LeaderOnly,
    AssistantOnly,
    /// Global-pooled block5 of both streams concatenated into a linear head.
    PooledConcat,
    /// Projected token sequences, mean-pooled, concatenated into a linear head.
    ProjectedConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub projection: ProjectionConfig,
    pub gla: GlaConfig,
    pub classes: usize,
    pub variant: Variant,
    /// Feed the assistant stream to the query side and the leader to keys/values.
    pub swap_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            projection: ProjectionConfig::default(),
            gla: GlaConfig::default(),
            classes: 6,
            variant: Variant::Gla,
            swap_inputs: false,
        }
    }
}

impl ModelConfig {
    /// Large preset: 80-frame snippets, width 768.
    pub fn full_scale() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full_scale(),
            projection: ProjectionConfig {
                dim: 768,
                ..ProjectionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.projection.validate()?;
        self.gla.validate(self.projection.dim)?;
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }
}

/// Self-attention refinement of one stream, reading its class token.
#[derive(Debug, Clone)]
pub struct StreamEncoder {
    pub backbone: Backbone,
    pub projection: Projection,
    pub clf: ClassToken,
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
    pub head: Linear,
}

impl StreamEncoder {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        config: &ModelConfig,
    ) -> Result<Self> {
        let d = config.projection.dim;
        Ok(StreamEncoder {
            backbone: Backbone::new(store, init, &format!("{prefix}.backbone"), &config.backbone)?,
            projection: Projection::new(
                store,
                init,
                &format!("{prefix}.projection"),
                &config.backbone,
                &config.projection,
            )?,
            clf: ClassToken::new(store, init, &format!("{prefix}.clf"), d)?,
            attn: MultiHeadAttention::new(
                store,
                init,
                &format!("{prefix}.self_attn"),
                d,
                config.gla.heads,
            )?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm_attn"), d)?,
            ffn: FeedForward::new(store, init, prefix, d, config.gla.mlp_ratio)?,
            head: Linear::new(store, init, &format!("{prefix}.head"), d, config.classes)?,
        })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, clip: Var) -> Result<Var> {
        let feats = self.backbone.forward(g, clip)?;
        let seq = self.projection.project(g, &feats, self.clf)?;
        let a = self.attn.forward(g, seq.tokens, seq.tokens, seq.tokens)?;
        let s = g.add(seq.tokens, a)?;
        let x = self.norm.forward(g, s)?;
        let x = self.ffn.forward(g, x)?;
        let clf = g.narrow(x, 1, 0, 1)?;
        let s = g.shape(clf).to_vec();
        let clf = g.reshape(clf, &[s[0], s[2]])?;
        self.head.forward(g, clf)
    }
}

#[derive(Debug, Clone)]
pub struct GlaNet {
    pub backbone: Backbone,
    pub projection: Projection,
    pub clf_leader: ClassToken,
    pub clf_assistant: ClassToken,
    pub gla: Gla,
    pub head: ClassificationHead,
}

#[derive(Debug, Clone)]
pub struct ConcatNet {
    pub backbone: Backbone,
    pub projection: Option<(AbstractProjection, ClassToken, ClassToken)>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub enum Architecture {
    Gla(GlaNet),
    LateFusion {
        leader: StreamEncoder,
        assistant: StreamEncoder,
    },
    Single {
        role: Role,
        encoder: StreamEncoder,
    },
    Concat(ConcatNet),
}

/// Logits plus, for late fusion, the two per-stream logits.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    pub stream_logits: Option<[Var; 2]>,
}

#[derive(Debug, Clone)]
pub struct DyadModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub arch: Architecture,
}

impl<F: Scalar> DyadModel<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.projection.dim;
        let arch = match config.variant {
            Variant::Gla => {
                let backbone = Backbone::new(&mut store, &mut init, "backbone", &config.backbone)?;
                let projection = Projection::new(
                    &mut store,
                    &mut init,
                    "projection",
                    &config.backbone,
                    &config.projection,
                )?;
                let clf_leader =
                    ClassToken::new(&mut store, &mut init, "projection.clf_leader", d)?;
                let clf_assistant =
                    ClassToken::new(&mut store, &mut init, "projection.clf_assistant", d)?;
                let gla = Gla::new(&mut store, &mut init, "gla", d, &config.gla)?;
                let head =
                    ClassificationHead::new(&mut store, &mut init, "head", d, config.classes)?;
                Architecture::Gla(GlaNet {
                    backbone,
                    projection,
                    clf_leader,
                    clf_assistant,
                    gla,
                    head,
                })
            }
            Variant::LateFusion => Architecture::LateFusion {
                leader: StreamEncoder::new(&mut store, &mut init, "leader", config)?,
                assistant: StreamEncoder::new(&mut store, &mut init, "assistant", config)?,
            },
            Variant::LeaderOnly | Variant::AssistantOnly => {
                let role = if config.variant == Variant::LeaderOnly {
                    Role::Leader
                } else {
                    Role::Assistant
                };
                let name = if role == Role::Leader {
                    "leader"
                } else {
                    "assistant"
                };
                Architecture::Single {
                    role,
                    encoder: StreamEncoder::new(&mut store, &mut init, name, config)?,
                }
            }
            Variant::PooledConcat | Variant::ProjectedConcat => {
                let backbone = Backbone::new(&mut store, &mut init, "backbone", &config.backbone)?;
                let (projection, width) = if config.variant == Variant::ProjectedConcat {
                    if config.projection.mode != ProjectionMode::Abstract {
                        return Err(Error::Config(
                            "projected-concat requires abstract projection".into(),
                        ));
                    }
                    let p = AbstractProjection::new(
                        &mut store,
                        &mut init,
                        "projection",
                        &config.backbone,
                        &config.projection,
                    )?;
                    let cl = ClassToken::new(&mut store, &mut init, "projection.clf_leader", d)?;
                    let ca = ClassToken::new(&mut store, &mut init, "projection.clf_assistant", d)?;
                    (Some((p, cl, ca)), d)
                } else {
                    (None, config.backbone.channels[NUM_BLOCKS - 1])
                };
                let head = Linear::new(
                    &mut store,
                    &mut init,
                    "head.linear",
                    2 * width,
                    config.classes,
                )?;
                Architecture::Concat(ConcatNet {
                    backbone,
                    projection,
                    head,
                })
            }
        };
        Ok(DyadModel {
            config: config.clone(),
            params: store,
            arch,
        })
    }

    /// A graph bound to this model's parameters.
    pub fn graph(&self) -> Graph<'_, F> {
        Graph::with_params(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Scalar>(&self) -> DyadModel<G> {
        DyadModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// `leader`/`assistant`: `[b, c, t, h, w]` clips already on the graph.
    pub fn forward(
        &self,
        g: &mut Graph<'_, F>,
        leader: Var,
        assistant: Var,
    ) -> Result<ModelOutput> {
        let (leader, assistant) = if self.config.swap_inputs {
            (assistant, leader)
        } else {
            (leader, assistant)
        };
        match &self.arch {
            Architecture::Gla(net) => {
                let (fl, fa) = net.backbone.dual_forward(g, leader, assistant)?;
                let gl = net.projection.project(g, &fl, net.clf_leader)?;
                let ga = net.projection.project(g, &fa, net.clf_assistant)?;
                let refined = net.gla.forward(g, &gl, &ga)?;
                let logits = net.head.classify(g, &refined)?;
                Ok(ModelOutput {
                    logits,
                    stream_logits: None,
                })
            }
            Architecture::LateFusion {
                leader: el,
                assistant: ea,
            } => {
                let ll = el.forward(g, leader)?;
                let la = ea.forward(g, assistant)?;
                let sum = g.add(ll, la)?;
                let logits = g.scale(sum, 0.5)?;
                Ok(ModelOutput {
                    logits,
                    stream_logits: Some([ll, la]),
                })
            }
            Architecture::Single { role, encoder } => {
                let clip = match role {
                    Role::Leader => leader,
                    Role::Assistant => assistant,
                };
                Ok(ModelOutput {
                    logits: encoder.forward(g, clip)?,
                    stream_logits: None,
                })
            }
            Architecture::Concat(net) => {
                let (fl, fa) = net.backbone.dual_forward(g, leader, assistant)?;
                let (a, b) = match &net.projection {
                    None => (g.avg_pool3d_global(fl.g5())?, g.avg_pool3d_global(fa.g5())?),
                    Some((p, cl, ca)) => {
                        let gl = p.project(g, &fl, *cl)?;
                        let ga = p.project(g, &fa, *ca)?;
                        (g.mean_axis(gl.tokens, 1)?, g.mean_axis(ga.tokens, 1)?)
                    }
                };
                let both = g.concat(&[a, b], 1)?;
                Ok(ModelOutput {
                    logits: net.head.forward(g, both)?,
                    stream_logits: None,
                })
            }
        }
    }

    /// Training objective: cross-entropy of the logits, or for late fusion
    /// the sum of the two independent per-stream cross-entropies.
    pub fn loss(&self, g: &mut Graph<'_, F>, out: &ModelOutput, labels: &[usize]) -> Result<Var> {
        match out.stream_logits {
            Some([l, a]) => {
                let ll = g.cross_entropy(l, labels)?;
                let la = g.cross_entropy(a, labels)?;
                g.add(ll, la)
            }
            None => g.cross_entropy(out.logits, labels),
        }
    }

    /// Forward pass without gradients; returns `[b, k]` logits and, for late
    /// fusion, the per-stream logits.
    pub fn predict(
        &self,
        leader: &Tensor<F>,
        assistant: &Tensor<F>,
    ) -> Result<(Tensor<F>, Option<[Tensor<F>; 2]>)> {
        let mut g = self.graph();
        let l = g.constant(leader.clone())?;
        let a = g.constant(assistant.clone())?;
        let out = self.forward(&mut g, l, a)?;
        let streams = out
            .stream_logits
            .map(|[x, y]| [g.value(x).clone(), g.value(y).clone()]);
        Ok((g.value(out.logits).clone(), streams))
    }
}
