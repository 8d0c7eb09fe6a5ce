//! Abstract Projection: pooled block features become per-stream token
//! sequences `[clf, L_i...]`, plus the frame-token variant built from the
//! last block only.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BlockFeatures, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{Graph, Init, ParamId, ParamStore, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Global 3D pooling per tapped block, one token per block.
    Abstract,
    /// Spatial pooling of the last block, one token per surviving frame.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub mode: ProjectionMode,
    /// 1-based backbone blocks feeding abstract mode.
    pub blocks: Vec<usize>,
    pub dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            mode: ProjectionMode::Abstract,
            blocks: vec![3, 4, 5],
            dim: 96,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if self.mode == ProjectionMode::Abstract {
            if self.blocks.is_empty() {
                return Err(Error::Config(
                    "abstract projection needs at least one block".into(),
                ));
            }
            let mut seen = [false; NUM_BLOCKS];
            for &b in &self.blocks {
                if !(1..=NUM_BLOCKS).contains(&b) || std::mem::replace(&mut seen[b - 1], true) {
                    return Err(Error::Config(format!(
                        "projection blocks must be distinct values in 1..=5, got {:?}",
                        self.blocks
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of tokens per stream, classification token included.
    pub fn sequence_len(&self, backbone: &BackboneConfig) -> Result<usize> {
        Ok(match self.mode {
            ProjectionMode::Abstract => self.blocks.len() + 1,
            ProjectionMode::Temporal => backbone.block_extents()?[NUM_BLOCKS - 1][0] + 1,
        })
    }
}

/// What each token position means.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenLayout {
    /// `[clf, block b_1, ..., block b_n]`
    Layers(Vec<usize>),
    /// `[clf, frame 0, ..., frame t-1]`
    Frames(usize),
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        match self {
            TokenLayout::Layers(b) => b.len() + 1,
            TokenLayout::Frames(t) => t + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Projected embedding of one stream, `[b, L, d]`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: TokenLayout,
}

/// Learnable `[1, 1, d]` classification token.
#[derive(Debug, Clone, Copy)]
pub struct ClassToken(pub ParamId);

impl ClassToken {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(ClassToken(
            store.register(name, init.normal(&[1, 1, dim], 0.02))?,
        ))
    }
}

/// Learnable `[1, L, d]` positional encoding, added before normalisation.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEncoding(pub ParamId);

impl PositionalEncoding {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        len: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(PositionalEncoding(
            store.register(name, init.normal(&[1, len, dim], 0.02))?,
        ))
    }
}

/// `LNorm(concat(clf, tokens...) + PE)`. `rows` are `[b, d]` or `[b, n, d]`.
pub fn assemble_tokens<F: Scalar>(
    g: &mut Graph<'_, F>,
    rows: &[Var],
    clf: ClassToken,
    pe: PositionalEncoding,
    norm: &LayerNorm,
) -> Result<Var> {
    let first = g.shape(rows[0]).to_vec();
    let batch = first[0];
    let dim = *first.last().expect("rank >= 2");
    let clf = g.param(clf.0)?;
    if g.shape(clf)[2] != dim {
        return Err(Error::shape(
            "assemble_tokens",
            format!("clf width {} vs token width {dim}", g.shape(clf)[2]),
        ));
    }
    let clf = g.repeat_batch(clf, batch)?;
    let mut parts = vec![clf];
    for &r in rows {
        let s = g.shape(r).to_vec();
        let r = if s.len() == 2 {
            g.reshape(r, &[s[0], 1, s[1]])?
        } else {
            r
        };
        parts.push(r);
    }
    let seq = g.concat(&parts, 1)?;
    let pe = g.param(pe.0)?;
    let seq = g.add_broadcast(seq, pe)?;
    norm.forward(g, seq)
}

/// Global average pooling of each tapped block, GELU, then a per-block
/// linear map to the shared width: one `[b, d]` token per block.
#[derive(Debug, Clone)]
pub struct AbstractProjection {
    pub blocks: Vec<usize>,
    pub mlps: Vec<Linear>,
    pub pe: PositionalEncoding,
    pub norm: LayerNorm,
}

impl AbstractProjection {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        backbone: &BackboneConfig,
        config: &ProjectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mlps = config
            .blocks
            .iter()
            .map(|&b| {
                Linear::new(
                    store,
                    init,
                    &format!("{prefix}.mlp_block{b}"),
                    backbone.channels[b - 1],
                    config.dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pe = PositionalEncoding::new(
            store,
            init,
            &format!("{prefix}.pos"),
            config.blocks.len() + 1,
            config.dim,
        )?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), config.dim)?;
        Ok(AbstractProjection {
            blocks: config.blocks.clone(),
            mlps,
            pe,
            norm,
        })
    }

    /// `L_i = MLP_i(gelu(avgpool3d(g_i)))` for every tapped block.
    pub fn layer_tokens<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        features: &BlockFeatures,
    ) -> Result<Vec<Var>> {
        self.blocks
            .iter()
            .zip(&self.mlps)
            .map(|(&b, mlp)| {
                let x = features.block(b);
                let c = g.shape(x)[1];
                if c != mlp.d_in {
                    return Err(Error::Config(format!(
                        "block{b} has {c} channels but its projection expects {}",
                        mlp.d_in
                    )));
                }
                let pooled = g.avg_pool3d_global(x)?;
                let act = g.gelu(pooled)?;
                mlp.forward(g, act)
            })
            .collect()
    }

    pub fn project<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        features: &BlockFeatures,
        clf: ClassToken,
    ) -> Result<TokenSequence> {
        let rows = self.layer_tokens(g, features)?;
        let tokens = assemble_tokens(g, &rows, clf, self.pe, &self.norm)?;
        Ok(TokenSequence {
            tokens,
            layout: TokenLayout::Layers(self.blocks.clone()),
        })
    }
}

/// Spatial average pooling of block5 per frame, ReLU, linear to `d`:
/// one token per frame, then the same clf/PE/normalisation assembly.
#[derive(Debug, Clone)]
pub struct TemporalProjection {
    pub frames: usize,
    pub mlp: Linear,
    pub pe: PositionalEncoding,
    pub norm: LayerNorm,
}

impl TemporalProjection {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        backbone: &BackboneConfig,
        config: &ProjectionConfig,
    ) -> Result<Self> {
        let frames = backbone.block_extents()?[NUM_BLOCKS - 1][0];
        let mlp = Linear::new(
            store,
            init,
            &format!("{prefix}.mlp_frames"),
            backbone.channels[NUM_BLOCKS - 1],
            config.dim,
        )?;
        let pe = PositionalEncoding::new(
            store,
            init,
            &format!("{prefix}.pos"),
            frames + 1,
            config.dim,
        )?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), config.dim)?;
        Ok(TemporalProjection {
            frames,
            mlp,
            pe,
            norm,
        })
    }

    /// `[b, c, t, h, w] -> [b, t, d]` frame tokens.
    pub fn frame_tokens<F: Scalar>(&self, g: &mut Graph<'_, F>, g5: Var) -> Result<Var> {
        let s = g.shape(g5).to_vec();
        if s.len() != 5 || s[2] != self.frames {
            return Err(Error::shape(
                "temporal_project",
                format!("expected block5 with {} frames, got {s:?}", self.frames),
            ));
        }
        let pooled = g.avg_pool2d_spatial(g5)?; // [b, c, t]
        let act = g.relu(pooled)?;
        // [b, c, t] -> [b, t, c]
        let (b, c, t) = (s[0], s[1], s[2]);
        let frames = (0..t)
            .map(|i| {
                let col = g.narrow(act, 2, i, 1)?;
                g.reshape(col, &[b, 1, c])
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = g.concat(&frames, 1)?;
        self.mlp.forward(g, seq)
    }

    pub fn project<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        features: &BlockFeatures,
        clf: ClassToken,
    ) -> Result<TokenSequence> {
        let frames = self.frame_tokens(g, features.g5())?;
        let tokens = assemble_tokens(g, &[frames], clf, self.pe, &self.norm)?;
        Ok(TokenSequence {
            tokens,
            layout: TokenLayout::Frames(self.frames),
        })
    }
}

/// Either projection, shared by both streams.
#[derive(Debug, Clone)]
pub enum Projection {
    Abstract(AbstractProjection),
    Temporal(TemporalProjection),
}

impl Projection {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        prefix: &str,
        backbone: &BackboneConfig,
        config: &ProjectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(match config.mode {
            ProjectionMode::Abstract => Projection::Abstract(AbstractProjection::new(
                store, init, prefix, backbone, config,
            )?),
            ProjectionMode::Temporal => Projection::Temporal(TemporalProjection::new(
                store, init, prefix, backbone, config,
            )?),
        })
    }

    pub fn project<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        features: &BlockFeatures,
        clf: ClassToken,
    ) -> Result<TokenSequence> {
        match self {
            Projection::Abstract(p) => p.project(g, features, clf),
            Projection::Temporal(p) => p.project(g, features, clf),
        }
    }
}
