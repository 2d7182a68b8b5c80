//! Reverse-mode gradient of the compound loss with respect to the latent.
//!
//! Forward chain per token: signature projection, matched filter,
//! block-mean pooling, tempered softmax, centroid/variance. The backward pass
//! walks the same chain with hand-written adjoints.

use crate::backbone::{Backbone, Level, Schedule, LAYERS};
use crate::error::Result;
use crate::grid::{cross_correlate_adjoint, downsample_avg_adjoint, spatial_softmax_backward, Latent, ScalarGrid};
use crate::losses::{compound_loss_with_gradient, LossBreakdown, LossConfig};
use crate::prompt::PromptTriplet;
use crate::scalar::Scalar;
use crate::stats::{centroid_unchecked, variance_unchecked, LayerStats, TokenStats};

const LOSS_LEVELS: [Level; 2] = [Level::Coarse, Level::Mid];

struct TokenForward<T> {
    class: usize,
    /// `maps[level][layer]` over [`LOSS_LEVELS`].
    maps: Vec<Vec<ScalarGrid<T>>>,
    stats: TokenStats<T>,
}

fn forward_token<T: Scalar>(backbone: &Backbone<T>, z: &Latent<T>, class: usize) -> Result<TokenForward<T>> {
    let response = backbone.response(z, class)?;
    let mut maps = Vec::with_capacity(LOSS_LEVELS.len());
    let mut entries = Vec::with_capacity(LOSS_LEVELS.len() * LAYERS);
    for level in LOSS_LEVELS {
        let layer_maps = backbone.attention_level(&response, level)?;
        for (j, map) in layer_maps.iter().enumerate() {
            let centroid = centroid_unchecked(map);
            entries.push(LayerStats {
                level,
                layer: j + 1,
                centroid,
                variance: variance_unchecked(map, centroid),
            });
        }
        maps.push(layer_maps);
    }
    Ok(TokenForward {
        class,
        maps,
        stats: TokenStats { entries },
    })
}

/// Exact gradient of the compound loss of `triplet`'s attention at `z`,
/// together with the loss itself.
pub fn loss_gradient<T: Scalar>(
    backbone: &Backbone<T>,
    z: &Latent<T>,
    t: usize,
    triplet: &PromptTriplet,
    schedule: &Schedule<T>,
    cfg: &LossConfig,
) -> Result<(Latent<T>, LossBreakdown<T>)> {
    backbone.check_latent(z)?;
    schedule.check_step(t)?;
    cfg.validate()?;
    let classes = backbone.token_classes(triplet)?;
    let a = forward_token(backbone, z, classes[0])?;
    let b = forward_token(backbone, z, classes[1])?;
    let (loss, upstream) = compound_loss_with_gradient(&a.stats, &b.stats, triplet.relation, cfg)?;

    let (c, h, w) = backbone.latent_shape();
    let mut grad = Latent::zeros(c, h, w);
    if cfg.is_disabled() {
        return Ok((grad, loss));
    }
    for (token, stats_grad) in [(&a, &upstream.a), (&b, &upstream.b)] {
        let mut grad_response = ScalarGrid::zeros(h, w);
        for (li, level) in LOSS_LEVELS.into_iter().enumerate() {
            let pooled_dims = token.maps[li][0].dims();
            let mut grad_pooled = ScalarGrid::zeros(pooled_dims.0, pooled_dims.1);
            for (j, map) in token.maps[li].iter().enumerate() {
                let idx = li * LAYERS + j;
                let s = &token.stats.entries[idx];
                let g = stats_grad[idx];
                let grad_map = crate::stats::stats_backward(map, s.centroid, s.variance, g.x, g.y, g.variance);
                let tau = backbone.attention_temperature(level, j + 1);
                grad_pooled.accumulate(&spatial_softmax_backward(map, &grad_map, tau)?, T::one());
            }
            grad_response.accumulate(&downsample_avg_adjoint(&grad_pooled, level.factor())?, T::one());
        }
        let grad_intensity = cross_correlate_adjoint(&grad_response, backbone.template(token.class))?;
        grad.spread(&grad_intensity, backbone.signature(token.class));
    }
    Ok((grad, loss))
}

/// Compound loss of `triplet`'s attention at `z`, without the gradient.
pub fn guidance_loss<T: Scalar>(
    backbone: &Backbone<T>,
    z: &Latent<T>,
    triplet: &PromptTriplet,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    backbone.check_latent(z)?;
    let classes = backbone.token_classes(triplet)?;
    let a = forward_token(backbone, z, classes[0])?;
    let b = forward_token(backbone, z, classes[1])?;
    Ok(compound_loss_with_gradient(&a.stats, &b.stats, triplet.relation, cfg)?.0)
}
