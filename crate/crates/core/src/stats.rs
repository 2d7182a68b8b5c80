//! Centroid, variance and relation delta of attention maps.
//!
//! Cell `(h, w)` (1-based, origin top-left, y grows downward) sits at the
//! normalized cell centre `((w - 0.5) / W, (h - 0.5) / H)`.

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionStack, Level, Token, LAYERS};
use crate::error::{Error, Result};
use crate::grid::ScalarGrid;
use crate::prompt::Relation;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Centroid<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Centroid<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }
}

/// Normalized coordinate of the centre of 0-based cell `index` along an axis
/// of `extent` cells.
#[inline]
pub fn cell_center<T: Scalar>(index: usize, extent: usize) -> T {
    T::lit((index as f64 + 0.5) / extent as f64)
}

/// Attention-weighted mean position.
pub fn centroid<T: Scalar>(map: &ScalarGrid<T>) -> Result<Centroid<T>> {
    map.check_distribution()?;
    Ok(centroid_unchecked(map))
}

pub(crate) fn centroid_unchecked<T: Scalar>(map: &ScalarGrid<T>) -> Centroid<T> {
    let (h, w) = map.dims();
    let mut mass = T::zero();
    let mut sx = T::zero();
    let mut sy = T::zero();
    for r in 0..h {
        let y: T = cell_center(r, h);
        for c in 0..w {
            let p = map.at(r, c);
            mass = mass + p;
            sx = sx + p * cell_center(c, w);
            sy = sy + p * y;
        }
    }
    Centroid::new(sx / mass, sy / mass)
}

/// Attention-weighted mean squared distance from `c`.
pub fn variance<T: Scalar>(map: &ScalarGrid<T>, c: Centroid<T>) -> Result<T> {
    map.check_distribution()?;
    Ok(variance_unchecked(map, c))
}

pub(crate) fn variance_unchecked<T: Scalar>(map: &ScalarGrid<T>, c: Centroid<T>) -> T {
    let (h, w) = map.dims();
    let mut mass = T::zero();
    let mut acc = T::zero();
    for r in 0..h {
        let dy = cell_center::<T>(r, h) - c.y;
        for col in 0..w {
            let dx = cell_center::<T>(col, w) - c.x;
            let p = map.at(r, col);
            mass = mass + p;
            acc = acc + p * (dx * dx + dy * dy);
        }
    }
    acc / mass
}

/// Gradient of `gx * x + gy * y + gv * var` with respect to every map cell,
/// with `x, y, var` the mass-normalised centroid and variance of `map`.
pub(crate) fn stats_backward<T: Scalar>(map: &ScalarGrid<T>, c: Centroid<T>, var: T, gx: T, gy: T, gv: T) -> ScalarGrid<T> {
    let (h, w) = map.dims();
    let mass = map.sum();
    ScalarGrid::from_fn(h, w, |r, col| {
        let dx = cell_center::<T>(col, w) - c.x;
        let dy = cell_center::<T>(r, h) - c.y;
        (gx * dx + gy * dy + gv * (dx * dx + dy * dy - var)) / mass
    })
}

/// Signed separation along the axis the relation names; positive when the
/// relation holds.
pub fn relation_delta<T: Scalar>(a: Centroid<T>, b: Centroid<T>, relation: Relation) -> T {
    match relation {
        Relation::Left => b.x - a.x,
        Relation::Right => a.x - b.x,
        Relation::Above => b.y - a.y,
        Relation::Below => a.y - b.y,
        Relation::Near => (a.x - b.x).abs(),
    }
}

/// Sign with `sign(0) == 0`.
pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `d delta / d (x_a, y_a)`; the B gradient is the negation.
pub(crate) fn relation_delta_grad<T: Scalar>(a: Centroid<T>, b: Centroid<T>, relation: Relation) -> (T, T) {
    match relation {
        Relation::Left => (-T::one(), T::zero()),
        Relation::Right => (T::one(), T::zero()),
        Relation::Above => (T::zero(), -T::one()),
        Relation::Below => (T::zero(), T::one()),
        Relation::Near => (sign(a.x - b.x), T::zero()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerStats<T> {
    pub level: Level,
    /// 1-based.
    pub layer: usize,
    pub centroid: Centroid<T>,
    pub variance: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TokenStats<T> {
    pub entries: Vec<LayerStats<T>>,
}

impl<T: Scalar> TokenStats<T> {
    pub fn get(&self, level: Level, layer: usize) -> Option<&LayerStats<T>> {
        self.entries
            .iter()
            .find(|e| e.level == level && e.layer == layer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Centroid and variance of every layer of the selected levels.
pub fn stats_for_token<T: Scalar>(stack: &AttentionStack<T>, token: Token, levels: &[Level]) -> Result<TokenStats<T>> {
    let mut entries = Vec::with_capacity(levels.len() * LAYERS);
    for &level in levels {
        if !stack.has_level(level) {
            return Err(Error::InvalidArgument(format!(
                "attention stack has no {level:?} level"
            )));
        }
        for layer in 1..=LAYERS {
            let map = stack
                .get(level, layer, token)
                .expect("levels always carry every layer");
            let c = centroid(map)?;
            entries.push(LayerStats {
                level,
                layer,
                centroid: c,
                variance: variance(map, c)?,
            });
        }
    }
    Ok(TokenStats { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass(h: usize, w: usize, cells: &[((usize, usize), f64)]) -> ScalarGrid<f64> {
        let mut g = ScalarGrid::zeros(h, w);
        for ((r, c), m) in cells {
            *g.at_mut(*r, *c) = *m;
        }
        g
    }

    #[test]
    fn centroid_examples() {
        for n in [1, 3, 8, 31] {
            let u = ScalarGrid::filled(n, n, 1.0 / (n * n) as f64);
            let c = centroid(&u).unwrap();
            assert!((c.x - 0.5).abs() < 1e-12 && (c.y - 0.5).abs() < 1e-12);
        }
        let c = centroid(&point_mass(4, 4, &[((0, 0), 1.0)])).unwrap();
        assert_eq!((c.x, c.y), (0.125, 0.125));

        let two = point_mass(4, 4, &[((1, 0), 0.5), ((1, 3), 0.5)]);
        let c = centroid(&two).unwrap();
        assert!((c.x - 0.5).abs() < 1e-15 && (c.y - 0.375).abs() < 1e-15);
        assert!((variance(&two, c).unwrap() - 0.140625).abs() < 1e-15);

        assert!(centroid(&ScalarGrid::filled(2, 2, 0.3)).is_err());
        assert!(centroid(&point_mass(2, 2, &[((0, 0), 1.5), ((0, 1), -0.5)])).is_err());
    }

    #[test]
    fn variance_of_point_mass_is_zero() {
        let m = point_mass(5, 7, &[((3, 2), 1.0)]);
        let c = centroid(&m).unwrap();
        assert_eq!(variance(&m, c).unwrap(), 0.0);
    }

    #[test]
    fn uniform_variance_approaches_one_sixth() {
        let n = 32;
        let u = ScalarGrid::filled(n, n, 1.0 / (n * n) as f64);
        let v = variance(&u, centroid(&u).unwrap()).unwrap();
        // Discrete uniform on n centres: per-axis (n^2 - 1) / (12 n^2).
        let exact = 2.0 * ((n * n - 1) as f64) / (12.0 * (n * n) as f64);
        assert!((v - exact).abs() < 1e-12);
        assert!((v - 1.0 / 6.0).abs() < 5e-3);
    }

    #[test]
    fn relation_delta_examples() {
        let a = Centroid::new(0.7f64, 0.5);
        let b = Centroid::new(0.2, 0.5);
        assert!((relation_delta(a, b, Relation::Right) - 0.5).abs() < 1e-15);
        for r in Relation::DIRECTIONAL {
            assert_eq!(relation_delta(a, a, r), 0.0);
        }
        let a = Centroid::new(0.5f64, 0.2);
        let b = Centroid::new(0.5, 0.8);
        assert!((relation_delta(a, b, Relation::Above) - 0.6).abs() < 1e-15);
        assert!((relation_delta(Centroid::new(0.1f64, 0.0), Centroid::new(0.4, 1.0), Relation::Near) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn stats_backward_matches_finite_differences() {
        let map = ScalarGrid::from_fn(4, 5, |r, c| 0.1 + ((r * 5 + c) % 7) as f64 * 0.05);
        let total = map.sum();
        let map = map.scale(1.0 / total);
        let (gx, gy, gv) = (0.3, -1.1, 2.0);
        let objective = |m: &ScalarGrid<f64>| {
            let c = centroid_unchecked(m);
            gx * c.x + gy * c.y + gv * variance_unchecked(m, c)
        };
        let c = centroid_unchecked(&map);
        let analytic = stats_backward(&map, c, variance_unchecked(&map, c), gx, gy, gv);
        let h = 1e-6;
        for i in 0..map.len() {
            let mut p = map.clone();
            p.values_mut()[i] += h;
            let mut m = map.clone();
            m.values_mut()[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - analytic.values()[i]).abs() < 1e-8, "cell {i}");
        }
    }

    proptest::proptest! {
        #[test]
        fn shift_right_moves_centroid_by_one_cell(r in 1usize..7, c in 1usize..6, m in 0.1f64..0.9) {
            let a = point_mass(8, 8, &[((r, c), m), ((r - 1, c - 1), 1.0 - m)]);
            let b = point_mass(8, 8, &[((r, c + 1), m), ((r - 1, c), 1.0 - m)]);
            let ca = centroid(&a).unwrap();
            let cb = centroid(&b).unwrap();
            proptest::prop_assert!((cb.x - ca.x - 1.0 / 8.0).abs() < 1e-12);
            proptest::prop_assert!((cb.y - ca.y).abs() < 1e-12);
        }

        #[test]
        fn variance_invariant_under_rotation(vals in proptest::collection::vec(0.01f64..1.0, 36)) {
            // Symmetrise under 90 degree rotation so the centroid stays put.
            let n = 6;
            let base = ScalarGrid::new(n, n, vals).unwrap();
            let rot = |g: &ScalarGrid<f64>| ScalarGrid::from_fn(n, n, |r, c| g.at(n - 1 - c, r));
            let r1 = rot(&base);
            let r2 = rot(&r1);
            let r3 = rot(&r2);
            let sym = ScalarGrid::from_fn(n, n, |r, c| base.at(r, c) + r1.at(r, c) + r2.at(r, c) + r3.at(r, c));
            let total = sym.sum();
            let sym = sym.scale(1.0 / total);
            let rotated = rot(&sym);
            let v1 = variance(&sym, centroid(&sym).unwrap()).unwrap();
            let v2 = variance(&rotated, centroid(&rotated).unwrap()).unwrap();
            proptest::prop_assert!((v1 - v2).abs() < 1e-12);
        }

        #[test]
        fn deltas_are_antisymmetric(ax in 0.0f64..1.0, ay in 0.0f64..1.0, bx in 0.0f64..1.0, by in 0.0f64..1.0) {
            let a = Centroid::new(ax, ay);
            let b = Centroid::new(bx, by);
            proptest::prop_assert_eq!(relation_delta(a, b, Relation::Left), -relation_delta(a, b, Relation::Right));
            proptest::prop_assert_eq!(relation_delta(a, b, Relation::Above), -relation_delta(a, b, Relation::Below));
        }
    }
}
