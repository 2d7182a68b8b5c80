//! Synthetic "blob world" diffusion backbone.
//!
//! Objects are Gaussian bumps. Each vocabulary class owns a template and a
//! channel signature; a class's intensity field is the latent projected onto
//! its signature. The denoiser localises classes with matched filters, turns
//! the responses into location beliefs, and reconstructs the clean latent by
//! stamping templates at those beliefs. Cross-attention maps are softmaxes of
//! downsampled responses at three resolutions and three sharpness levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cross_correlate, downsample_avg, gaussian_template, spatial_softmax, Latent, ScalarGrid};
use crate::prompt::{PromptTriplet, Vocabulary};
use crate::scalar::Scalar;

/// Number of attention layers per level.
pub const LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Coarse,
    Mid,
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Mid, Level::Fine];

    /// Downsampling factor from the latent resolution.
    pub fn factor(self) -> usize {
        match self {
            Level::Coarse => 4,
            Level::Mid => 2,
            Level::Fine => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    A,
    B,
}

impl Token {
    pub const BOTH: [Token; 2] = [Token::A, Token::B];

    fn index(self) -> usize {
        match self {
            Token::A => 0,
            Token::B => 1,
        }
    }
}

/// Linear beta schedule with its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    step_size: Vec<T>,
}

impl<T: Scalar> Schedule<T> {
    /// `steps` betas linearly spaced over `[beta_start, beta_end]`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        // z_{t-1} = sqrt(abar_{t-1} / abar_t) z_t - s_t eps under the
        // deterministic update used by the sampler.
        let step_size = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (prev / alpha_bar[i]).sqrt() * (1.0 - alpha_bar[i]).sqrt() - (1.0 - prev).sqrt()
            })
            .collect::<Vec<_>>();
        let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect();
        Ok(Self {
            beta: cast(beta),
            alpha: cast(alpha),
            alpha_bar: cast(alpha_bar),
            step_size: cast(step_size),
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn step_size(&self, t: usize) -> T {
        self.step_size[t - 1]
    }
}

/// Per-level attention sharpness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelTemperatures {
    pub coarse: f64,
    pub mid: f64,
    pub fine: f64,
}

impl Default for LevelTemperatures {
    fn default() -> Self {
        Self {
            coarse: 2.0,
            mid: 1.0,
            fine: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    /// 1, or a power of two larger than the vocabulary size.
    pub channels: usize,
    /// Inner product between any two class signatures, in `[0, 1]`. At 1
    /// every class reads the same shared direction.
    pub signature_overlap: f64,
    /// Location-belief temperature as a fraction of the peak response.
    /// Higher values let the unconditional branch lose objects more often.
    pub loc_temperature_ratio: f64,
    pub level_temperatures: LevelTemperatures,
    /// Per-layer multipliers on the level temperature; strictly decreasing.
    pub layer_scales: [f64; LAYERS],
    /// Scale each reconstruction by the evidence for its class, so weakly
    /// supported objects fade instead of being restored at full strength.
    pub evidence_amplitude: bool,
    /// Magnitude clip for synthesized clean latents.
    pub clip: f64,
    /// Classes reconstructed by the unconditional branch.
    pub unconditional_classes: usize,
    pub vocabulary: Vocabulary,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 32,
            signature_overlap: 0.0,
            loc_temperature_ratio: 0.18,
            level_temperatures: LevelTemperatures::default(),
            layer_scales: [1.0, 0.5, 0.25],
            evidence_amplitude: false,
            clip: 1.5,
            unconditional_classes: 2,
            vocabulary: Vocabulary::default_toy(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad(format!(
                "resolution {}x{} must be positive multiples of 4",
                self.height, self.width
            ));
        }
        let k = self.vocabulary.len();
        if k < 2 {
            return bad("vocabulary needs at least two classes".into());
        }
        if self.channels != 1 && (!self.channels.is_power_of_two() || self.channels <= k) {
            return bad(format!(
                "channels must be 1 or a power of two > {k}, got {}",
                self.channels
            ));
        }
        for e in self.vocabulary.entries() {
            if e.side > self.height || e.side > self.width {
                return bad(format!("{}: template side {} exceeds resolution", e.id, e.side));
            }
        }
        let lt = &self.level_temperatures;
        if [lt.coarse, lt.mid, lt.fine]
            .iter()
            .any(|t| !(*t > 0.0) || !t.is_finite())
        {
            return bad("level temperatures must be positive".into());
        }
        let s = self.layer_scales;
        if !(s[2] > 0.0 && s[1] > s[2] && s[0] > s[1]) || s.iter().any(|v| !v.is_finite()) {
            return bad(format!("layer scales must be positive and strictly decreasing, got {s:?}"));
        }
        if !(self.loc_temperature_ratio > 0.0) || !self.loc_temperature_ratio.is_finite() {
            return bad("loc_temperature_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.signature_overlap) {
            return bad(format!("signature_overlap must lie in [0, 1], got {}", self.signature_overlap));
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive".into());
        }
        if self.unconditional_classes == 0 || self.unconditional_classes > k {
            return bad(format!(
                "unconditional_classes must be in 1..={k}, got {}",
                self.unconditional_classes
            ));
        }
        Ok(())
    }

    pub fn level_temperature(&self, level: Level) -> f64 {
        match level {
            Level::Coarse => self.level_temperatures.coarse,
            Level::Mid => self.level_temperatures.mid,
            Level::Fine => self.level_temperatures.fine,
        }
    }
}

/// Attention maps for tokens A and B, per level and layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AttentionStack<T> {
    levels: Vec<(Level, Vec<[ScalarGrid<T>; 2]>)>,
}

impl<T: Scalar> Default for AttentionStack<T> {
    fn default() -> Self {
        Self { levels: Vec::new() }
    }
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one level: `layers[j] = [map_a, map_b]` for layer `j + 1`.
    pub fn insert(&mut self, level: Level, layers: Vec<[ScalarGrid<T>; 2]>) -> Result<()> {
        if layers.len() != LAYERS {
            return Err(Error::InvalidArgument(format!(
                "expected {LAYERS} layers for {level:?}, got {}",
                layers.len()
            )));
        }
        let dims = layers[0][0].dims();
        for pair in &layers {
            for map in pair {
                if map.dims() != dims {
                    return Err(Error::Dimension(format!(
                        "{level:?} maps disagree on resolution"
                    )));
                }
                map.check_distribution()?;
            }
        }
        self.levels.retain(|(l, _)| *l != level);
        self.levels.push((level, layers));
        self.levels.sort_by_key(|(l, _)| *l);
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = Level> + '_ {
        self.levels.iter().map(|(l, _)| *l)
    }

    pub fn has_level(&self, level: Level) -> bool {
        self.levels.iter().any(|(l, _)| *l == level)
    }

    /// Map for a 1-based layer index.
    pub fn get(&self, level: Level, layer: usize, token: Token) -> Option<&ScalarGrid<T>> {
        let (_, layers) = self.levels.iter().find(|(l, _)| *l == level)?;
        layers
            .get(layer.checked_sub(1)?)
            .map(|pair| &pair[token.index()])
    }

    pub fn maps(&self) -> impl Iterator<Item = &ScalarGrid<T>> + '_ {
        self.levels
            .iter()
            .flat_map(|(_, layers)| layers.iter().flat_map(|p| p.iter()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput<T> {
    pub eps_conditional: Latent<T>,
    pub eps_unconditional: Latent<T>,
    pub attention: AttentionStack<T>,
}

/// Orthonormal Sylvester-Hadamard row `row` of size `n`.
fn hadamard_row<T: Scalar>(row: usize, n: usize) -> Vec<T> {
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|col| {
            let sign = if (row & col).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            T::lit(sign * scale)
        })
        .collect()
}

/// A validated backbone with its templates and channel signatures.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    templates: Vec<ScalarGrid<T>>,
    signatures: Vec<Vec<T>>,
    self_response: Vec<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut templates = Vec::with_capacity(config.vocabulary.len());
        for e in config.vocabulary.entries() {
            templates.push(gaussian_template(e.side, T::lit(e.sigma))?);
        }
        // Class k mixes the shared row 0 with its own row k + 1.
        let shared: Vec<T> = hadamard_row(0, config.channels);
        let (ws, wo) = (T::lit(config.signature_overlap.sqrt()), T::lit((1.0 - config.signature_overlap).sqrt()));
        let signatures = (0..config.vocabulary.len())
            .map(|k| {
                if config.channels == 1 {
                    return vec![T::one()];
                }
                let own: Vec<T> = hadamard_row(k + 1, config.channels);
                shared.iter().zip(own).map(|(s, o)| ws * *s + wo * o).collect()
            })
            .collect();
        let self_response = templates
            .iter()
            .map(|t| t.values().iter().map(|v| *v * *v).sum())
            .collect();
        Ok(Self {
            config,
            templates,
            signatures,
            self_response,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.config.vocabulary
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.height, self.config.width)
    }

    pub fn class_index(&self, id: &str) -> Result<usize> {
        self.config
            .vocabulary
            .index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("object {id:?} not in vocabulary")))
    }

    /// Class indices of the triplet's objects A and B.
    pub fn token_classes(&self, triplet: &PromptTriplet) -> Result<[usize; 2]> {
        Ok([
            self.class_index(&triplet.object_a)?,
            self.class_index(&triplet.object_b)?,
        ])
    }

    pub fn template(&self, class: usize) -> &ScalarGrid<T> {
        &self.templates[class]
    }

    pub fn signature(&self, class: usize) -> &[T] {
        &self.signatures[class]
    }

    /// Matched-filter response of a clean unit-peak template to itself.
    pub fn self_response(&self, class: usize) -> T {
        self.self_response[class]
    }

    pub fn check_latent(&self, z: &Latent<T>) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(Error::Dimension(format!(
                "latent shape {:?}, backbone expects {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }

    /// Intensity field of one class: the latent projected onto its signature.
    pub fn intensity(&self, z: &Latent<T>, class: usize) -> Result<ScalarGrid<T>> {
        z.project(&self.signatures[class])
    }

    /// Matched-filter response of one class.
    pub fn response(&self, z: &Latent<T>, class: usize) -> Result<ScalarGrid<T>> {
        cross_correlate(&self.intensity(z, class)?, &self.templates[class])
    }

    /// Temperature of a 1-based attention layer.
    pub fn attention_temperature(&self, level: Level, layer: usize) -> T {
        T::lit(self.config.level_temperature(level) * self.config.layer_scales[layer - 1])
    }

    /// The three layer maps of one level for a class response.
    pub fn attention_level(&self, response: &ScalarGrid<T>, level: Level) -> Result<Vec<ScalarGrid<T>>> {
        let pooled = downsample_avg(response, level.factor())?;
        (1..=LAYERS)
            .map(|layer| spatial_softmax(&pooled, self.attention_temperature(level, layer)))
            .collect()
    }

    /// Attention maps for tokens A and B at the requested levels.
    pub fn attention(&self, z: &Latent<T>, triplet: &PromptTriplet, levels: &[Level]) -> Result<AttentionStack<T>> {
        self.check_latent(z)?;
        let classes = self.token_classes(triplet)?;
        let responses = [self.response(z, classes[0])?, self.response(z, classes[1])?];
        self.stack_from_responses(&responses, levels)
    }

    fn stack_from_responses(&self, responses: &[ScalarGrid<T>; 2], levels: &[Level]) -> Result<AttentionStack<T>> {
        let mut stack = AttentionStack::new();
        for &level in levels {
            let a = self.attention_level(&responses[0], level)?;
            let b = self.attention_level(&responses[1], level)?;
            let layers = a.into_iter().zip(b).map(|(a, b)| [a, b]).collect();
            stack.insert(level, layers)?;
        }
        Ok(stack)
    }

    fn location_belief(&self, response: &ScalarGrid<T>) -> Result<ScalarGrid<T>> {
        let peak = response.max_abs();
        let tau = if peak > T::zero() {
            T::lit(self.config.loc_temperature_ratio) * peak
        } else {
            T::one()
        };
        spatial_softmax(response, tau)
    }

    /// Template of `class` blurred by its location belief, optionally scaled
    /// by the peak response relative to a clean object at noise level `t`.
    fn reconstruct(&self, response: &ScalarGrid<T>, class: usize, t: usize, schedule: &Schedule<T>) -> Result<ScalarGrid<T>> {
        let x = cross_correlate(&self.location_belief(response)?, &self.templates[class])?;
        if !self.config.evidence_amplitude {
            return Ok(x);
        }
        let expected = schedule.alpha_bar(t).sqrt() * self.self_response[class];
        let amplitude = (response.max() / expected).max(T::zero()).min(T::one());
        Ok(x.scale(amplitude))
    }

    fn eps_from_reconstruction(&self, z: &Latent<T>, x0: &Latent<T>, t: usize, schedule: &Schedule<T>) -> Result<Latent<T>> {
        let abar = schedule.alpha_bar(t);
        let signal = abar.sqrt();
        let noise = (T::one() - abar).sqrt();
        z.zip_map(x0, |zv, xv| (zv - signal * xv) / noise)
    }

    /// Conditional and unconditional noise predictions plus attention maps.
    pub fn denoise(&self, z: &Latent<T>, t: usize, triplet: &PromptTriplet, schedule: &Schedule<T>) -> Result<DenoiserOutput<T>> {
        self.check_latent(z)?;
        schedule.check_step(t)?;
        let classes = self.token_classes(triplet)?;
        let responses: Vec<ScalarGrid<T>> = (0..self.templates.len())
            .map(|k| self.response(z, k))
            .collect::<Result<_>>()?;

        let (c, h, w) = self.latent_shape();
        let mut x0_cond = Latent::zeros(c, h, w);
        for &k in &classes {
            x0_cond.spread(&self.reconstruct(&responses[k], k, t, schedule)?, &self.signatures[k]);
        }

        // Unconditional branch keeps only the classes with the strongest
        // normalised peak response; lower index wins ties.
        let mut ranked: Vec<usize> = (0..responses.len()).collect();
        let score = |k: usize| responses[k].max() / self.self_response[k];
        ranked.sort_by(|&i, &j| score(j).partial_cmp(&score(i)).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
        let mut x0_unc = Latent::zeros(c, h, w);
        for &k in &ranked[..self.config.unconditional_classes] {
            x0_unc.spread(&self.reconstruct(&responses[k], k, t, schedule)?, &self.signatures[k]);
        }

        let eps_conditional = self.eps_from_reconstruction(z, &x0_cond, t, schedule)?;
        let eps_unconditional = self.eps_from_reconstruction(z, &x0_unc, t, schedule)?;
        let pair = [responses[classes[0]].clone(), responses[classes[1]].clone()];
        let attention = self.stack_from_responses(&pair, &Level::ALL)?;
        Ok(DenoiserOutput {
            eps_conditional,
            eps_unconditional,
            attention,
        })
    }

    /// Grid cell (0-based) nearest a normalized coordinate along an axis.
    fn cell_for(coord: f64, extent: usize) -> usize {
        ((coord * extent as f64).ceil() as usize).clamp(1, extent) - 1
    }

    /// Unit-peak template of `class` stamped at a normalized `(x, y)`.
    pub fn stamp(&self, class: usize, placement: (f64, f64)) -> ScalarGrid<T> {
        let (h, w) = (self.config.height, self.config.width);
        let row = Self::cell_for(placement.1, h);
        let col = Self::cell_for(placement.0, w);
        let mut impulse = ScalarGrid::zeros(h, w);
        *impulse.at_mut(row, col) = T::one();
        cross_correlate(&impulse, &self.templates[class]).expect("templates fit the resolution")
    }

    /// Clean latent with A at `placement_a` and B at `placement_b`, both in
    /// normalized `(x, y)` with the origin top-left. Channel values are
    /// clipped to magnitude `clip`.
    pub fn synthesize_clean(&self, triplet: &PromptTriplet, placement_a: (f64, f64), placement_b: (f64, f64)) -> Result<Latent<T>> {
        let classes = self.token_classes(triplet)?;
        self.synthesize_objects(&[(classes[0], placement_a), (classes[1], placement_b)])
    }

    /// Clean latent with any set of `(class, placement)` stamps.
    pub fn synthesize_objects(&self, objects: &[(usize, (f64, f64))]) -> Result<Latent<T>> {
        for (class, (x, y)) in objects {
            if *class >= self.templates.len() {
                return Err(Error::InvalidArgument(format!("class {class} out of range")));
            }
            if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                return Err(Error::InvalidArgument(format!(
                    "placement ({x}, {y}) outside the unit square"
                )));
            }
        }
        let (c, h, w) = self.latent_shape();
        let mut z = Latent::zeros(c, h, w);
        for (class, placement) in objects {
            z.spread(&self.stamp(*class, *placement), &self.signatures[*class]);
        }
        let clip = T::lit(self.config.clip);
        Ok(z.map(|v| v.max(-clip).min(clip)))
    }

    /// Standard-normal latent from a seed.
    pub fn gaussian_latent(&self, rng_seed: u64) -> Latent<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        gaussian_latent(self.latent_shape(), &mut rng)
    }
}

pub(crate) fn gaussian_latent<T: Scalar>(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Latent<T> {
    let (c, h, w) = shape;
    let mut z = Latent::zeros(c, h, w);
    for ch in z.channels_mut() {
        for v in ch.values_mut() {
            let sample: f64 = StandardNormal.sample(rng);
            *v = T::lit(sample);
        }
    }
    z
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise<T: Scalar>(x0: &Latent<T>, t: usize, schedule: &Schedule<T>, rng_seed: u64) -> Result<(Latent<T>, Latent<T>)> {
    schedule.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let eps = gaussian_latent(x0.shape(), &mut rng);
    let abar = schedule.alpha_bar(t);
    let xt = x0.zip_map(&eps, |x, e| abar.sqrt() * x + (T::one() - abar).sqrt() * e)?;
    Ok((xt, eps))
}
