//! Dense 2D fields and the handful of operations every other module builds on.
//!
//! Storage is row-major and 0-based. Documentation elsewhere in the crate
//! talks about 1-based `(h, w)` cells with the origin in the top-left corner;
//! cell `(h, w)` lives at index `(h - 1) * width + (w - 1)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense `height x width` field of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid<T>", bound = "T: Scalar")]
pub struct ScalarGrid<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct RawGrid<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> TryFrom<RawGrid<T>> for ScalarGrid<T> {
    type Error = Error;

    fn try_from(raw: RawGrid<T>) -> Result<Self> {
        ScalarGrid::new(raw.height, raw.width, raw.values)
    }
}

impl<T: Scalar> ScalarGrid<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    /// Builds a grid from a function of 0-based `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Value at 0-based `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    #[inline]
    pub(crate) fn at_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.values[row * self.width + col]
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.values
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// 0-based `(row, col)` of the largest value; the first one in row-major
    /// order wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(
            self.height,
            self.width,
            self.values.iter().map(|v| f(*v)).collect(),
        )
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Self, factor: T) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self::from_raw(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| *a + factor * *b)
                .collect(),
        ))
    }

    pub(crate) fn accumulate(&mut self, other: &Self, factor: T) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + factor * *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Whether the grid is a probability distribution over its cells.
    pub fn is_distribution(&self) -> bool {
        self.check_distribution().is_ok()
    }

    pub fn check_distribution(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| *v < T::zero()) {
            return Err(Error::NotDistribution(format!(
                "negative mass {} at index {i}",
                self.values[i]
            )));
        }
        let total = self.sum();
        if (total - T::one()).abs() > T::distribution_tolerance() {
            return Err(Error::NotDistribution(format!("total mass {total}")));
        }
        Ok(())
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Writes an 8-bit binary PGM with values min-max scaled to 0..=255.
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        let lo = self.min().as_f64();
        let hi = self.max().as_f64();
        let span = hi - lo;
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| {
                if span > 0.0 {
                    ((v.as_f64() - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        out.write_all(&bytes)
    }
}

fn check_template(input_dims: (usize, usize), template: (usize, usize)) -> Result<()> {
    let (th, tw) = template;
    if th % 2 == 0 || tw % 2 == 0 {
        return Err(Error::Dimension(format!(
            "template must be odd-sided, got {th}x{tw}"
        )));
    }
    if th > input_dims.0 || tw > input_dims.1 {
        return Err(Error::Dimension(format!(
            "template {th}x{tw} larger than input {}x{}",
            input_dims.0, input_dims.1
        )));
    }
    Ok(())
}

/// Zero-padded cross-correlation with the template centred on each output cell.
///
/// `out[h, w] = sum_{i, j} input[h + i - ch, w + j - cw] * template[i, j]`
/// where `(ch, cw)` is the template centre. Output has the input's dimensions.
pub fn cross_correlate<T: Scalar>(
    input: &ScalarGrid<T>,
    template: &ScalarGrid<T>,
) -> Result<ScalarGrid<T>> {
    check_template(input.dims(), template.dims())?;
    let (h, w) = input.dims();
    let (th, tw) = template.dims();
    let (ch, cw) = (th / 2, tw / 2);
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        let i_lo = ch.saturating_sub(r);
        let i_hi = th.min(h + ch - r);
        for c in 0..w {
            let j_lo = cw.saturating_sub(c);
            let j_hi = tw.min(w + cw - c);
            let mut acc = T::zero();
            for i in i_lo..i_hi {
                let row = (r + i - ch) * w;
                let trow = i * tw;
                for j in j_lo..j_hi {
                    acc = acc + input.values[row + c + j - cw] * template.values[trow + j];
                }
            }
            out[r * w + c] = acc;
        }
    }
    Ok(ScalarGrid::from_raw(h, w, out))
}

/// Adjoint of [`cross_correlate`] with respect to its input: scatters each
/// output gradient back through the template.
pub fn cross_correlate_adjoint<T: Scalar>(
    grad_out: &ScalarGrid<T>,
    template: &ScalarGrid<T>,
) -> Result<ScalarGrid<T>> {
    check_template(grad_out.dims(), template.dims())?;
    let (h, w) = grad_out.dims();
    let (th, tw) = template.dims();
    let (ch, cw) = (th / 2, tw / 2);
    let mut grad_in = vec![T::zero(); h * w];
    for r in 0..h {
        let i_lo = ch.saturating_sub(r);
        let i_hi = th.min(h + ch - r);
        for c in 0..w {
            let g = grad_out.values[r * w + c];
            if g == T::zero() {
                continue;
            }
            let j_lo = cw.saturating_sub(c);
            let j_hi = tw.min(w + cw - c);
            for i in i_lo..i_hi {
                let row = (r + i - ch) * w;
                let trow = i * tw;
                for j in j_lo..j_hi {
                    let cell = &mut grad_in[row + c + j - cw];
                    *cell = *cell + g * template.values[trow + j];
                }
            }
        }
    }
    Ok(ScalarGrid::from_raw(h, w, grad_in))
}

/// Block-mean downsampling by an integer factor.
pub fn downsample_avg<T: Scalar>(input: &ScalarGrid<T>, factor: usize) -> Result<ScalarGrid<T>> {
    let (h, w) = input.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "factor {factor} does not divide {h}x{w}"
        )));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::one() / T::lit((factor * factor) as f64);
    let mut out = vec![T::zero(); oh * ow];
    for r in 0..h {
        for c in 0..w {
            let o = &mut out[(r / factor) * ow + c / factor];
            *o = *o + input.values[r * w + c];
        }
    }
    for v in &mut out {
        *v = *v * norm;
    }
    Ok(ScalarGrid::from_raw(oh, ow, out))
}

/// Adjoint of [`downsample_avg`]: each fine cell receives its block's
/// gradient divided by `factor^2`.
pub fn downsample_avg_adjoint<T: Scalar>(
    grad_out: &ScalarGrid<T>,
    factor: usize,
) -> Result<ScalarGrid<T>> {
    if factor == 0 {
        return Err(Error::Dimension("factor must be positive".into()));
    }
    let (oh, ow) = grad_out.dims();
    let norm = T::one() / T::lit((factor * factor) as f64);
    Ok(ScalarGrid::from_fn(oh * factor, ow * factor, |r, c| {
        grad_out.values[(r / factor) * ow + c / factor] * norm
    }))
}

/// Softmax over all cells at the given temperature, with max subtraction.
pub fn spatial_softmax<T: Scalar>(input: &ScalarGrid<T>, temperature: T) -> Result<ScalarGrid<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let peak = input.max();
    let mut values: Vec<T> = input
        .values
        .iter()
        .map(|v| ((*v - peak) / temperature).exp())
        .collect();
    let total: T = values.iter().copied().sum();
    for v in &mut values {
        *v = *v / total;
    }
    Ok(ScalarGrid::from_raw(input.height, input.width, values))
}

/// Vector-Jacobian product of [`spatial_softmax`], given its output `probs`.
pub fn spatial_softmax_backward<T: Scalar>(
    probs: &ScalarGrid<T>,
    grad_out: &ScalarGrid<T>,
    temperature: T,
) -> Result<ScalarGrid<T>> {
    probs.check_same_dims(grad_out)?;
    let inner: T = probs
        .values
        .iter()
        .zip(&grad_out.values)
        .map(|(p, g)| *p * *g)
        .sum();
    Ok(ScalarGrid::from_raw(
        probs.height,
        probs.width,
        probs
            .values
            .iter()
            .zip(&grad_out.values)
            .map(|(p, g)| *p * (*g - inner) / temperature)
            .collect(),
    ))
}

/// Isotropic Gaussian bump on a `side x side` support, scaled to unit peak.
pub fn gaussian_template<T: Scalar>(side: usize, sigma: T) -> Result<ScalarGrid<T>> {
    if side % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "template side must be odd, got {side}"
        )));
    }
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "template sigma must be positive, got {sigma}"
        )));
    }
    let centre = (side / 2) as f64;
    let denom = T::lit(2.0) * sigma * sigma;
    let mut grid = ScalarGrid::from_fn(side, side, |r, c| {
        let dr = T::lit(r as f64 - centre);
        let dc = T::lit(c as f64 - centre);
        (-(dr * dr + dc * dc) / denom).exp()
    });
    // The centre is exp(0) = 1 already; pin it so the peak is exact.
    *grid.at_mut(side / 2, side / 2) = T::one();
    Ok(grid)
}

/// A `channels x height x width` field: the diffusion state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Latent<T> {
    channels: Vec<ScalarGrid<T>>,
}

impl<T: Scalar> Latent<T> {
    pub fn new(channels: Vec<ScalarGrid<T>>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Dimension("latent needs at least one channel".into()))?;
        for ch in &channels[1..] {
            first.check_same_dims(ch)?;
        }
        Ok(Self { channels })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0, "latent needs at least one channel");
        Self {
            channels: vec![ScalarGrid::zeros(height, width); channels],
        }
    }

    pub fn from_grid(grid: ScalarGrid<T>) -> Self {
        Self {
            channels: vec![grid],
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels.len(), self.height(), self.width())
    }

    pub fn channels(&self) -> &[ScalarGrid<T>] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &ScalarGrid<T> {
        &self.channels[index]
    }

    pub(crate) fn channels_mut(&mut self) -> &mut [ScalarGrid<T>] {
        &mut self.channels
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.channels.iter().flat_map(|g| g.values().iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(ScalarGrid::is_finite)
    }

    pub fn norm(&self) -> T {
        self.iter().map(|v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "latent shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Cell-wise `f(self, other)`.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| {
                ScalarGrid::from_raw(
                    a.height(),
                    a.width(),
                    a.values()
                        .iter()
                        .zip(b.values())
                        .map(|(x, y)| f(*x, *y))
                        .collect(),
                )
            })
            .collect();
        Ok(Self { channels })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels.iter().map(|g| g.map(&f)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Self, factor: T) -> Result<Self> {
        self.zip_map(other, |a, b| a + factor * b)
    }

    /// Weighted sum of channels: `sum_c weights[c] * channel[c]`.
    pub fn project(&self, weights: &[T]) -> Result<ScalarGrid<T>> {
        if weights.len() != self.channels.len() {
            return Err(Error::Dimension(format!(
                "{} projection weights for {} channels",
                weights.len(),
                self.channels.len()
            )));
        }
        let (h, w) = self.channels[0].dims();
        let mut out = ScalarGrid::zeros(h, w);
        for (ch, weight) in self.channels.iter().zip(weights) {
            out.accumulate(ch, *weight);
        }
        Ok(out)
    }

    /// Adds `weights[c] * grid` into every channel `c`.
    pub(crate) fn spread(&mut self, grid: &ScalarGrid<T>, weights: &[T]) {
        debug_assert_eq!(weights.len(), self.channels.len());
        for (ch, weight) in self.channels.iter_mut().zip(weights) {
            ch.accumulate(grid, *weight);
        }
    }

    pub fn channel_mean(&self) -> ScalarGrid<T> {
        let n = self.channels.len();
        let weight = T::one() / T::lit(n as f64);
        self.project(&vec![weight; n])
            .expect("weights match channel count")
    }
}
