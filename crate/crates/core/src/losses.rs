//! Spatial, presence and balance losses and their weighted compound.

use serde::{Deserialize, Serialize};

use crate::backbone::{Level, LAYERS};
use crate::error::{Error, Result};
use crate::prompt::Relation;
use crate::scalar::Scalar;
use crate::stats::{relation_delta, relation_delta_grad, sign, Centroid, TokenStats};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Activation applied to the scaled margin violation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluExact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Steepness of the spatial penalty.
    pub alpha: f64,
    /// Minimum centroid separation, in normalized units.
    pub margin: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub activation: Activation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            margin: 0.25,
            lambda_s: 0.5,
            lambda_p: 1.0,
            lambda_b: 0.5,
            activation: Activation::GeluExact,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must lie in [0, 1], got {}", self.margin)));
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_p", self.lambda_p),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether every loss term is switched off.
    pub fn is_disabled(&self) -> bool {
        self.lambda_s == 0.0 && self.lambda_p == 0.0 && self.lambda_b == 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LossBreakdown<T> {
    pub spatial: T,
    pub presence: T,
    pub balance: T,
    pub total: T,
}

/// Standard normal CDF via the error function.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

/// `d/dx gelu(x) = Phi(x) + x * phi(x)`.
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let density = T::lit(FRAC_1_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    normal_cdf(x) + x * density
}

fn activate<T: Scalar>(x: T, activation: Activation) -> (T, T) {
    match activation {
        Activation::GeluExact => (gelu(x), gelu_derivative(x)),
    }
}

/// `f(alpha * (margin - delta))`.
pub fn spatial_loss<T: Scalar>(delta: T, cfg: &LossConfig) -> T {
    activate(T::lit(cfg.alpha) * (T::lit(cfg.margin) - delta), cfg.activation).0
}

pub fn presence_loss<T: Scalar>(var_a: T, var_b: T) -> T {
    var_a + var_b
}

pub fn balance_loss<T: Scalar>(var_a: T, var_b: T) -> T {
    (var_a - var_b).abs()
}

/// Upstream gradient of the compound loss with respect to one layer's
/// statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StatsGradient<T> {
    pub x: T,
    pub y: T,
    pub variance: T,
}

/// Per-token gradients, aligned with the [`TokenStats`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundGradient<T> {
    pub a: Vec<StatsGradient<T>>,
    pub b: Vec<StatsGradient<T>>,
}

fn lookup<T: Scalar>(stats: &TokenStats<T>, level: Level, layer: usize) -> Result<(usize, Centroid<T>, T)> {
    stats
        .entries
        .iter()
        .position(|e| e.level == level && e.layer == layer)
        .map(|i| (i, stats.entries[i].centroid, stats.entries[i].variance))
        .ok_or_else(|| Error::InvalidArgument(format!("token stats lack {level:?} layer {layer}")))
}

/// Weighted compound loss over Coarse and Mid statistics.
///
/// Spatial averages all six Coarse/Mid layers; presence averages the Coarse
/// layers; balance averages the Mid layers.
pub fn compound_loss<T: Scalar>(stats_a: &TokenStats<T>, stats_b: &TokenStats<T>, relation: Relation, cfg: &LossConfig) -> Result<LossBreakdown<T>> {
    compound_loss_with_gradient(stats_a, stats_b, relation, cfg).map(|(l, _)| l)
}

/// [`compound_loss`] plus its gradient with respect to every layer's
/// centroid and variance.
pub fn compound_loss_with_gradient<T: Scalar>(
    stats_a: &TokenStats<T>,
    stats_b: &TokenStats<T>,
    relation: Relation,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, CompoundGradient<T>)> {
    let alpha = T::lit(cfg.alpha);
    let margin = T::lit(cfg.margin);
    let (ls, lp, lb) = (T::lit(cfg.lambda_s), T::lit(cfg.lambda_p), T::lit(cfg.lambda_b));
    let layers = T::lit(LAYERS as f64);
    let spatial_count = T::lit((2 * LAYERS) as f64);

    let mut grad = CompoundGradient {
        a: vec![StatsGradient::default(); stats_a.len()],
        b: vec![StatsGradient::default(); stats_b.len()],
    };
    let mut spatial = T::zero();
    let mut presence = T::zero();
    let mut balance = T::zero();

    for level in [Level::Coarse, Level::Mid] {
        for layer in 1..=LAYERS {
            let (ia, ca, va) = lookup(stats_a, level, layer)?;
            let (ib, cb, vb) = lookup(stats_b, level, layer)?;

            let delta = relation_delta(ca, cb, relation);
            let (value, slope) = activate(alpha * (margin - delta), cfg.activation);
            spatial = spatial + value;
            let d_delta = -ls * slope * alpha / spatial_count;
            let (dxa, dya) = relation_delta_grad(ca, cb, relation);
            grad.a[ia].x = grad.a[ia].x + d_delta * dxa;
            grad.a[ia].y = grad.a[ia].y + d_delta * dya;
            grad.b[ib].x = grad.b[ib].x - d_delta * dxa;
            grad.b[ib].y = grad.b[ib].y - d_delta * dya;

            match level {
                Level::Coarse => {
                    presence = presence + presence_loss(va, vb);
                    grad.a[ia].variance = grad.a[ia].variance + lp / layers;
                    grad.b[ib].variance = grad.b[ib].variance + lp / layers;
                }
                Level::Mid => {
                    balance = balance + balance_loss(va, vb);
                    let s = sign(va - vb) * lb / layers;
                    grad.a[ia].variance = grad.a[ia].variance + s;
                    grad.b[ib].variance = grad.b[ib].variance - s;
                }
                Level::Fine => unreachable!(),
            }
        }
    }

    let spatial = spatial / spatial_count;
    let presence = presence / layers;
    let balance = balance / layers;
    let breakdown = LossBreakdown {
        spatial,
        presence,
        balance,
        total: ls * spatial + lp * presence + lb * balance,
    };
    Ok((breakdown, grad))
}
