//! Classifier-free guidance plus attention-loss guidance, and the reverse
//! sampling loop.

mod gradient;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use gradient::{guidance_loss, loss_gradient};

use crate::backbone::{Backbone, Level, Schedule, Token, LAYERS};
use crate::error::{Error, Result};
use crate::grid::Latent;
use crate::losses::{compound_loss, LossBreakdown, LossConfig};
use crate::prompt::PromptTriplet;
use crate::scalar::Scalar;
use crate::stats::{centroid, stats_for_token, Centroid};

/// How the guidance weight is applied to the loss gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// `eta * grad`.
    Fixed,
    /// `eta * grad / |grad|`: every guided step moves the noise estimate by
    /// exactly `eta`, whatever the raw gradient scale.
    #[default]
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free guidance strength.
    pub gamma: f64,
    /// Weight of the loss gradient in the noise update.
    pub eta: f64,
    pub eta_mode: EtaMode,
    pub loss: LossConfig,
    /// Largest timestep that receives loss guidance; `None` means `T`.
    pub apply_from_step: Option<usize>,
    /// Smallest timestep that receives loss guidance.
    pub apply_to_step: usize,
    /// Rescale gradients whose norm exceeds 1.
    pub clip_gradient_norm: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 7.5,
            eta: 1000.0,
            eta_mode: EtaMode::Normalized,
            loss: LossConfig::default(),
            apply_from_step: None,
            apply_to_step: 1,
            clip_gradient_norm: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        self.loss.validate()?;
        let from = self.apply_from_step.unwrap_or(steps);
        if self.apply_to_step == 0 || self.apply_to_step > from || from > steps {
            return Err(Error::Config(format!(
                "guidance window {}..={from} must lie within 1..={steps}",
                self.apply_to_step
            )));
        }
        Ok(())
    }

    /// Whether loss guidance runs at timestep `t`.
    pub fn is_active(&self, t: usize, steps: usize) -> bool {
        self.eta > 0.0
            && !self.loss.is_disabled()
            && t >= self.apply_to_step
            && t <= self.apply_from_step.unwrap_or(steps)
    }
}

/// `eps_unc + gamma * (eps_cond - eps_unc) + eta * grad`, cell-wise.
pub fn guided_noise<T: Scalar>(eps_unc: &Latent<T>, eps_cond: &Latent<T>, grad: &Latent<T>, gamma: T, eta: T) -> Result<Latent<T>> {
    let cfg = eps_unc.zip_map(eps_cond, |u, c| u + gamma * (c - u))?;
    cfg.add_scaled(grad, eta)
}

/// Deterministic update from `t` to `t - 1`: predict the clean latent from
/// `eps`, then re-noise it to level `t - 1` along the same `eps`.
pub fn reverse_step<T: Scalar>(z: &Latent<T>, t: usize, eps: &Latent<T>, schedule: &Schedule<T>) -> Result<Latent<T>> {
    schedule.check_step(t)?;
    let abar = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let (sa, sn) = (abar.sqrt(), (T::one() - abar).sqrt());
    let (pa, pn) = (abar_prev.sqrt(), (T::one() - abar_prev).sqrt());
    z.zip_map(eps, |zv, e| {
        let x0 = (zv - sn * e) / sa;
        pa * x0 + pn * e
    })
}

/// Centroid of one token at one level (sharpest layer).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TokenCentroid<T> {
    pub token: Token,
    pub level: Level,
    pub centroid: Centroid<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StepTrace<T> {
    pub t: usize,
    pub loss: LossBreakdown<T>,
    pub gradient_norm: T,
    pub centroids: Vec<TokenCentroid<T>>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    pub latent: Latent<T>,
    pub trace: Vec<StepTrace<T>>,
}

impl<T: Scalar> SampleOutput<T> {
    /// Streams the trace as JSON lines.
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        for step in &self.trace {
            let line = serde_json::to_string(step).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("writing trace", e))?;
        }
        Ok(())
    }
}

/// Runs the full reverse loop from a seeded standard-normal `z_T`.
pub fn sample<T: Scalar>(
    backbone: &Backbone<T>,
    triplet: &PromptTriplet,
    schedule: &Schedule<T>,
    guidance: &GuidanceConfig,
    rng_seed: u64,
) -> Result<SampleOutput<T>> {
    sample_from(backbone, backbone.gaussian_latent(rng_seed), triplet, schedule, guidance)
}

/// Runs the reverse loop from a given `z_T`.
pub fn sample_from<T: Scalar>(
    backbone: &Backbone<T>,
    z_start: Latent<T>,
    triplet: &PromptTriplet,
    schedule: &Schedule<T>,
    guidance: &GuidanceConfig,
) -> Result<SampleOutput<T>> {
    let steps = schedule.steps();
    guidance.validate(steps)?;
    backbone.check_latent(&z_start)?;
    let gamma = T::lit(guidance.gamma);
    let eta = T::lit(guidance.eta);
    let mut z = z_start;
    let mut trace = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let out = backbone.denoise(&z, t, triplet, schedule)?;
        let (grad, loss) = if guidance.is_active(t, steps) {
            let (mut grad, loss) = loss_gradient(backbone, &z, t, triplet, schedule, &guidance.loss)?;
            let norm = grad.norm();
            if guidance.eta_mode == EtaMode::Normalized && norm > T::zero() {
                grad = grad.scale(T::one() / norm);
            } else if guidance.clip_gradient_norm && norm > T::one() {
                grad = grad.scale(T::one() / norm);
            }
            (grad, loss)
        } else {
            let stats_a = stats_for_token(&out.attention, Token::A, &[Level::Coarse, Level::Mid])?;
            let stats_b = stats_for_token(&out.attention, Token::B, &[Level::Coarse, Level::Mid])?;
            let (c, h, w) = backbone.latent_shape();
            let loss = compound_loss(&stats_a, &stats_b, triplet.relation, &guidance.loss)?;
            (Latent::zeros(c, h, w), loss)
        };
        let gradient_norm = grad.norm();
        let eps = guided_noise(&out.eps_unconditional, &out.eps_conditional, &grad, gamma, eta)?;
        z = reverse_step(&z, t, &eps, schedule)?;
        if !z.is_finite() || !loss.total.is_finite() || !gradient_norm.is_finite() {
            return Err(Error::NonFinite { step: t });
        }

        let mut centroids = Vec::with_capacity(6);
        for token in Token::BOTH {
            for level in Level::ALL {
                let map = out
                    .attention
                    .get(level, LAYERS, token)
                    .expect("denoise emits every level");
                centroids.push(TokenCentroid {
                    token,
                    level,
                    centroid: centroid(map)?,
                });
            }
        }
        trace.push(StepTrace {
            t,
            loss,
            gradient_norm,
            centroids,
        });
    }
    Ok(SampleOutput { latent: z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{add_noise, BackboneConfig};
    use crate::prompt::Relation;

    fn latent(c: usize, seed: u64) -> Latent<f64> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        crate::backbone::gaussian_latent((c, 4, 4), &mut rng)
    }

    #[test]
    fn guided_noise_identities() {
        let (u, c, g) = (latent(2, 1), latent(2, 2), latent(2, 3));
        let zero = Latent::zeros(2, 4, 4);
        let cond_only = guided_noise(&u, &c, &zero, 1.0, 5.0).unwrap();
        for (o, b) in cond_only.iter().zip(c.iter()) {
            assert!((o - b).abs() < 1e-12);
        }
        let cfg = guided_noise(&u, &c, &zero, 7.5, 5.0).unwrap();
        for ((o, a), b) in cfg.iter().zip(u.iter()).zip(c.iter()) {
            assert!((o - (a + 7.5 * (b - a))).abs() < 1e-12);
        }
        let only_grad = guided_noise(&zero, &zero, &g, 7.5, 1000.0).unwrap();
        for (o, gv) in only_grad.iter().zip(g.iter()) {
            assert_eq!(o, 1000.0 * gv);
        }
        let merged = guided_noise(&u, &c, &g.scale(3.0), 2.0, 1.0).unwrap();
        let separate = guided_noise(&u, &c, &g, 2.0, 3.0).unwrap();
        for (a, b) in merged.iter().zip(separate.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(guided_noise(&u, &latent(1, 2), &g, 1.0, 1.0).is_err());
    }

    #[test]
    fn reverse_step_cases() {
        let s = Schedule::<f64>::linear(50, 1e-4, 0.02).unwrap();
        let x0 = latent(2, 11);
        for t in [1, 17, 50] {
            let (xt, eps) = add_noise(&x0, t, &s, 5).unwrap();
            let prev = reverse_step(&xt, t, &eps, &s).unwrap();
            // Re-noising with the true eps lands on the forward marginal at t - 1.
            let (pa, pn) = (s.alpha_bar(t - 1).sqrt(), (1.0 - s.alpha_bar(t - 1)).sqrt());
            for ((p, x), e) in prev.iter().zip(x0.iter()).zip(eps.iter()) {
                assert!((p - (pa * x + pn * e)).abs() < 1e-9);
            }
        }
        let (x1, eps) = add_noise(&x0, 1, &s, 5).unwrap();
        let out = reverse_step(&x1, 1, &eps, &s).unwrap();
        for (o, x) in out.iter().zip(x0.iter()) {
            assert!((o - x).abs() < 1e-9);
        }
        let z = latent(2, 4);
        let t = 30;
        let out = reverse_step(&z, t, &Latent::zeros(2, 4, 4), &s).unwrap();
        let k = (s.alpha_bar(t - 1) / s.alpha_bar(t)).sqrt();
        for (o, zv) in out.iter().zip(z.iter()) {
            assert!((o - k * zv).abs() < 1e-12);
        }
        // Same update expressed through the schedule's step size.
        let eps = latent(2, 9);
        let out = reverse_step(&z, t, &eps, &s).unwrap();
        for ((o, zv), e) in out.iter().zip(z.iter()).zip(eps.iter()) {
            assert!((o - (k * zv - s.step_size(t) * e)).abs() < 1e-12);
        }
        assert!(reverse_step(&z, 0, &eps, &s).is_err());
    }

    #[test]
    fn window_and_validation() {
        let g = GuidanceConfig::default();
        assert!(g.validate(50).is_ok());
        assert!(g.is_active(50, 50) && g.is_active(1, 50));
        let w = GuidanceConfig { apply_from_step: Some(40), apply_to_step: 10, ..GuidanceConfig::default() };
        assert!(w.is_active(40, 50) && w.is_active(10, 50));
        assert!(!w.is_active(41, 50) && !w.is_active(9, 50));
        assert!(GuidanceConfig { apply_from_step: Some(60), ..GuidanceConfig::default() }.validate(50).is_err());
        assert!(GuidanceConfig { apply_to_step: 0, ..GuidanceConfig::default() }.validate(50).is_err());
        assert!(GuidanceConfig { eta: -1.0, ..GuidanceConfig::default() }.validate(50).is_err());
        assert!(!GuidanceConfig { eta: 0.0, ..GuidanceConfig::default() }.is_active(5, 50));
    }

    #[test]
    fn short_sample_runs_and_traces() {
        let bb = Backbone::<f64>::new(BackboneConfig::default()).unwrap();
        let s = Schedule::linear(5, 1e-3, 0.2).unwrap();
        let t = PromptTriplet::new("cat", Relation::Above, "car", bb.vocabulary()).unwrap();
        let out = sample(&bb, &t, &s, &GuidanceConfig::default(), 3).unwrap();
        assert_eq!(out.trace.len(), 5);
        assert_eq!(out.trace.iter().map(|s| s.t).collect::<Vec<_>>(), vec![5, 4, 3, 2, 1]);
        assert!(out.trace.iter().all(|s| s.loss.total.is_finite() && s.gradient_norm > 0.0));
        let mut buf = Vec::new();
        out.write_trace(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
