//! End-to-end gradient check of a full model in double precision.

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{DyadModel, ModelConfig};
use crate::nn::gradcheck::{check_params, GradcheckOptions, GradcheckReport};
use crate::nn::Init;
use crate::projection::ProjectionConfig;

/// A miniature desk config that finite differences can sweep quickly:
/// 3x8x8x8 clips, channels 2..6, width 16 with 8 heads.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [2, 3, 4, 4, 6],
            frames: 8,
            height: 8,
            width: 8,
            ..BackboneConfig::toy()
        },
        projection: ProjectionConfig {
            dim: 16,
            ..ProjectionConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Checks d(loss)/d(parameter) for the model built from `config` and
/// `seed` on a random batch of two clip pairs.
pub fn check_model(
    config: &ModelConfig,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut model = DyadModel::<f64>::new(config, seed)?;
    let [c, t, h, w] = config.backbone.clip_shape();
    let mut init = Init::new(seed.wrapping_add(1));
    let leader = init.uniform(&[2, c, t, h, w], 1.0);
    let assistant = init.uniform(&[2, c, t, h, w], 1.0);
    let labels = [
        (seed % config.classes as u64) as usize,
        ((seed + 1) % config.classes as u64) as usize,
    ];
    let arch = model.clone();
    check_params(
        |g| {
            let l = g.constant(leader.clone())?;
            let a = g.constant(assistant.clone())?;
            let out = arch.forward(g, l, a)?;
            arch.loss(g, &out, &labels)
        },
        &mut model.params,
        opts,
    )
}
