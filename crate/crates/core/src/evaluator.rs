//! Toy object detector, relation classifier and the VISOR / spatial-score
//! metric family.
//!
//! Detection, judgments and reports are plain `f64` regardless of the scalar
//! type the latent was sampled in, so reports compare byte-for-byte.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::grid::Latent;
use crate::prompt::{PromptTriplet, Relation};
use crate::scalar::Scalar;
use crate::stats::cell_center;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    /// Detection threshold as a fraction of the clean self-response.
    pub det: f64,
    /// Largest box IoU a directional relation tolerates.
    pub iou: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { det: 0.4, iou: 0.1 }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.det > 0.0) || !self.det.is_finite() {
            return Err(Error::Config(format!("det threshold must be positive, got {}", self.det)));
        }
        if !(0.0..=1.0).contains(&self.iou) {
            return Err(Error::Config(format!("iou threshold must lie in [0, 1], got {}", self.iou)));
        }
        Ok(())
    }
}

/// Normalized `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub const EMPTY: BoundingBox = BoundingBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 0.0,
        y_max: 0.0,
    };

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    fn mean_side(&self) -> f64 {
        0.5 * ((self.x_max - self.x_min) + (self.y_max - self.y_min))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub object: String,
    pub present: bool,
    pub confidence: f64,
    /// Normalized `(x, y)` of the peak cell.
    pub center: (f64, f64),
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl Detection {
    pub fn absent(object: &str) -> Self {
        Self {
            object: object.to_string(),
            present: false,
            confidence: 0.0,
            center: (0.0, 0.0),
            bbox: BoundingBox::EMPTY,
        }
    }
}

/// Matched-filter detection of one class.
pub fn detect_class<T: Scalar>(backbone: &Backbone<T>, latent: &Latent<T>, class: usize, det_threshold: f64) -> Result<Detection> {
    backbone.check_latent(latent)?;
    let object = &backbone.vocabulary().entries()[class];
    let response = backbone.response(latent, class)?;
    let (row, col) = response.argmax();
    let peak = response.at(row, col).as_f64();
    let reference = backbone.self_response(class).as_f64();
    if peak < det_threshold * reference {
        return Ok(Detection::absent(&object.id));
    }
    let (h, w) = response.dims();
    let half = (object.side / 2) as f64;
    let bbox = BoundingBox {
        x_min: ((col as f64 - half) / w as f64).clamp(0.0, 1.0),
        y_min: ((row as f64 - half) / h as f64).clamp(0.0, 1.0),
        x_max: ((col as f64 + half + 1.0) / w as f64).clamp(0.0, 1.0),
        y_max: ((row as f64 + half + 1.0) / h as f64).clamp(0.0, 1.0),
    };
    Ok(Detection {
        object: object.id.clone(),
        present: true,
        confidence: (peak / reference).min(1.0),
        center: (cell_center(col, w), cell_center(row, h)),
        bbox,
    })
}

/// Detections of the triplet's objects A and B.
pub fn detect<T: Scalar>(backbone: &Backbone<T>, latent: &Latent<T>, triplet: &PromptTriplet, det_threshold: f64) -> Result<(Detection, Detection)> {
    let [a, b] = backbone.token_classes(triplet)?;
    Ok((
        detect_class(backbone, latent, a, det_threshold)?,
        detect_class(backbone, latent, b, det_threshold)?,
    ))
}

/// Relation realized by two detections along their dominant axis; the x axis
/// wins exact ties. `None` unless both are present.
pub fn classify_relation(det_a: &Detection, det_b: &Detection) -> Option<Relation> {
    if !det_a.present || !det_b.present {
        return None;
    }
    let dx = det_a.center.0 - det_b.center.0;
    let dy = det_a.center.1 - det_b.center.1;
    Some(if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Relation::Left
        } else {
            Relation::Right
        }
    } else if dy < 0.0 {
        Relation::Above
    } else {
        Relation::Below
    })
}

fn near_positional(det_a: &Detection, det_b: &Detection) -> bool {
    let dx = det_a.center.0 - det_b.center.0;
    let dy = det_a.center.1 - det_b.center.1;
    let side = 0.5 * (det_a.bbox.mean_side() + det_b.bbox.mean_side());
    (dx * dx + dy * dy).sqrt() < 3.0 * side
}

/// Per-image spatial score in `[0, 1]`.
///
/// Directional relations score 1 when both objects are present, the signed
/// offset along the stated axis is right, that axis dominates, and the boxes
/// overlap less than `iou_threshold`. `Near` scores the smaller confidence
/// when the centres are within three mean box sides.
pub fn t2i_spatial_score(det_a: &Detection, det_b: &Detection, relation: Relation, iou_threshold: f64) -> f64 {
    if !det_a.present || !det_b.present {
        return 0.0;
    }
    let dx = det_a.center.0 - det_b.center.0;
    let dy = det_a.center.1 - det_b.center.1;
    let (stated, other) = match relation {
        Relation::Left => (-dx, dy),
        Relation::Right => (dx, dy),
        Relation::Above => (-dy, dx),
        Relation::Below => (dy, dx),
        Relation::Near => {
            let positional = if near_positional(det_a, det_b) { 1.0 } else { 0.0 };
            return det_a.confidence.min(det_b.confidence) * positional;
        }
    };
    let ok = stated > 0.0 && stated.abs() > other.abs() && det_a.bbox.iou(&det_b.bbox) < iou_threshold;
    if ok {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageJudgment {
    pub prompt_index: usize,
    pub image_index: usize,
    pub both_present: bool,
    pub relation_correct: bool,
    pub t2i_score: f64,
}

impl ImageJudgment {
    /// Judges one image. For `Near` prompts, which the dominant-axis rule
    /// cannot produce, a relation counts as correct when the centres are
    /// within three mean box sides.
    pub fn from_detections(
        prompt_index: usize,
        image_index: usize,
        det_a: &Detection,
        det_b: &Detection,
        relation: Relation,
        thresholds: &EvalThresholds,
    ) -> Self {
        let both_present = det_a.present && det_b.present;
        let relation_correct = if relation.is_directional() {
            classify_relation(det_a, det_b) == Some(relation)
        } else {
            both_present && near_positional(det_a, det_b)
        };
        debug_assert!(!relation_correct || both_present);
        Self {
            prompt_index,
            image_index,
            both_present,
            relation_correct,
            t2i_score: t2i_spatial_score(det_a, det_b, relation, thresholds.iou),
        }
    }

    /// Judgment of an image whose sampling aborted.
    pub fn aborted(prompt_index: usize, image_index: usize) -> Self {
        Self {
            prompt_index,
            image_index,
            both_present: false,
            relation_correct: false,
            t2i_score: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_index: usize,
    pub present: usize,
    pub correct: usize,
    pub t2i_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images_per_prompt: usize,
    pub oa: f64,
    pub visor_uncond: f64,
    pub visor_cond: f64,
    pub visor_1: f64,
    pub visor_2: f64,
    pub visor_3: f64,
    pub visor_4: f64,
    pub t2i_spatial: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<EvalThresholds>,
    pub prompts: Vec<PromptRecord>,
}

impl MetricsReport {
    pub fn visor_k(&self) -> [f64; 4] {
        [self.visor_1, self.visor_2, self.visor_3, self.visor_4]
    }

    /// Checks the structural invariants every report must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        let pct = [self.oa, self.visor_uncond, self.visor_cond, self.visor_1, self.visor_2, self.visor_3, self.visor_4];
        if pct.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return fail(format!("percentage outside [0, 100]: {pct:?}"));
        }
        if (self.visor_uncond - self.oa * self.visor_cond / 100.0).abs() > 1e-6 {
            return fail(format!(
                "uncond {} != oa {} x cond {} / 100",
                self.visor_uncond, self.oa, self.visor_cond
            ));
        }
        let k = self.visor_k();
        if k.windows(2).any(|w| w[0] < w[1]) {
            return fail(format!("VISOR_k not monotone: {k:?}"));
        }
        if !(0.0..=1.0).contains(&self.t2i_spatial) {
            return fail(format!("t2i score {} outside [0, 1]", self.t2i_spatial));
        }
        Ok(())
    }

    /// Canonical pretty JSON, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Aggregates per-image judgments into the metric family. Every prompt must
/// have exactly `images_per_prompt` judgments.
pub fn visor_metrics(judgments: &[ImageJudgment], images_per_prompt: usize) -> Result<MetricsReport> {
    if images_per_prompt == 0 {
        return Err(Error::InvalidArgument("images_per_prompt must be at least 1".into()));
    }
    if judgments.is_empty() {
        return Err(Error::InvalidArgument("no judgments to aggregate".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&ImageJudgment>> = BTreeMap::new();
    for j in judgments {
        if j.relation_correct && !j.both_present {
            return Err(Error::InvalidArgument(format!(
                "prompt {} image {}: relation correct without both objects",
                j.prompt_index, j.image_index
            )));
        }
        if !(0.0..=1.0).contains(&j.t2i_score) {
            return Err(Error::InvalidArgument(format!(
                "prompt {} image {}: score {} outside [0, 1]",
                j.prompt_index, j.image_index, j.t2i_score
            )));
        }
        groups.entry(j.prompt_index).or_default().push(j);
    }

    let mut prompts = Vec::with_capacity(groups.len());
    let (mut present, mut correct, mut score) = (0usize, 0usize, 0.0);
    let mut at_least = [0usize; 4];
    for (&prompt_index, images) in &groups {
        if images.len() != images_per_prompt {
            return Err(Error::InvalidArgument(format!(
                "prompt {prompt_index} has {} judgments, expected {images_per_prompt}",
                images.len()
            )));
        }
        let p = images.iter().filter(|j| j.both_present).count();
        let c = images.iter().filter(|j| j.relation_correct).count();
        let s: f64 = images.iter().map(|j| j.t2i_score).sum();
        for (k, slot) in at_least.iter_mut().enumerate() {
            if c > k {
                *slot += 1;
            }
        }
        present += p;
        correct += c;
        score += s;
        prompts.push(PromptRecord {
            prompt_index,
            present: p,
            correct: c,
            t2i_mean: s / images_per_prompt as f64,
        });
    }

    let total = judgments.len() as f64;
    let prompt_count = groups.len() as f64;
    let pct = |n: usize, d: f64| 100.0 * n as f64 / d;
    Ok(MetricsReport {
        images_per_prompt,
        oa: pct(present, total),
        visor_uncond: pct(correct, total),
        visor_cond: if present == 0 { 0.0 } else { pct(correct, present as f64) },
        visor_1: pct(at_least[0], prompt_count),
        visor_2: pct(at_least[1], prompt_count),
        visor_3: pct(at_least[2], prompt_count),
        visor_4: pct(at_least[3], prompt_count),
        t2i_spatial: score / total,
        thresholds: None,
        prompts,
    })
}

pub fn write_judgments(judgments: &[ImageJudgment], mut out: impl Write) -> Result<()> {
    for j in judgments {
        let line = serde_json::to_string(j).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("writing judgments", e))?;
    }
    Ok(())
}

pub fn read_judgments(input: impl BufRead) -> Result<Vec<ImageJudgment>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading judgments", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let j = serde_json::from_str(&line).map_err(|e| Error::Serde(format!("line {}: {e}", i + 1)))?;
        out.push(j);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::prompt::Vocabulary;

    fn det(x: f64, y: f64) -> Detection {
        Detection {
            object: "o".into(),
            present: true,
            confidence: 0.9,
            center: (x, y),
            bbox: BoundingBox {
                x_min: x - 0.05,
                y_min: y - 0.05,
                x_max: x + 0.05,
                y_max: y + 0.05,
            },
        }
    }

    fn judgment(p: usize, i: usize, present: bool, correct: bool) -> ImageJudgment {
        ImageJudgment {
            prompt_index: p,
            image_index: i,
            both_present: present,
            relation_correct: correct,
            t2i_score: if correct { 1.0 } else { 0.0 },
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_relation(&det(0.2, 0.5), &det(0.8, 0.5)), Some(Relation::Left));
        assert_eq!(classify_relation(&det(0.5, 0.9), &det(0.5, 0.1)), Some(Relation::Below));
        assert_eq!(classify_relation(&det(0.25, 0.25), &det(0.5, 0.5)), Some(Relation::Left));
        assert_eq!(classify_relation(&det(0.75, 0.25), &det(0.5, 0.5)), Some(Relation::Right));
        assert_eq!(classify_relation(&Detection::absent("o"), &det(0.5, 0.5)), None);
    }

    #[test]
    fn score_examples() {
        let (a, b) = (det(0.2, 0.5), det(0.8, 0.5));
        assert_eq!(t2i_spatial_score(&a, &b, Relation::Left, 0.1), 1.0);
        assert_eq!(t2i_spatial_score(&a, &b, Relation::Right, 0.1), 0.0);
        let same = det(0.5, 0.5);
        for r in Relation::DIRECTIONAL {
            assert_eq!(t2i_spatial_score(&same, &same, r, 0.1), 0.0);
        }
        // Right sign on x but y dominates.
        assert_eq!(t2i_spatial_score(&det(0.45, 0.1), &det(0.55, 0.9), Relation::Left, 0.1), 0.0);
        assert_eq!(t2i_spatial_score(&det(0.5, 0.5), &det(0.55, 0.5), Relation::Near, 0.1), 0.9);
        assert_eq!(t2i_spatial_score(&det(0.1, 0.1), &det(0.9, 0.9), Relation::Near, 0.1), 0.0);
    }

    #[test]
    fn iou_cases() {
        let a = det(0.5, 0.5).bbox;
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a.iou(&det(0.9, 0.9).bbox), 0.0);
        // Half overlap along x: 0.05 / 0.15.
        assert!((a.iou(&det(0.55, 0.5).bbox) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_prompt_fixture() {
        let flags = [
            (0, [(true, true), (true, true), (true, false), (false, false)]),
            (1, [(true, true), (false, false), (false, false), (false, false)]),
        ];
        let js: Vec<_> = flags
            .iter()
            .flat_map(|(p, imgs)| imgs.iter().enumerate().map(move |(i, (pr, c))| judgment(*p, i, *pr, *c)))
            .collect();
        let r = visor_metrics(&js, 4).unwrap();
        assert_eq!(r.oa, 50.0);
        assert_eq!(r.visor_uncond, 37.5);
        assert_eq!(r.visor_cond, 75.0);
        assert_eq!(r.visor_k(), [100.0, 50.0, 0.0, 0.0]);
        r.check_invariants().unwrap();
    }

    #[test]
    fn saturated_and_empty() {
        let all: Vec<_> = (0..8).map(|i| judgment(i / 4, i % 4, true, true)).collect();
        let r = visor_metrics(&all, 4).unwrap();
        assert_eq!([r.oa, r.visor_uncond, r.visor_cond], [100.0; 3]);
        assert_eq!(r.visor_k(), [100.0; 4]);
        let none: Vec<_> = (0..8).map(|i| judgment(i / 4, i % 4, false, false)).collect();
        let r = visor_metrics(&none, 4).unwrap();
        assert_eq!([r.oa, r.visor_uncond, r.visor_cond], [0.0; 3]);
        assert_eq!(r.visor_k(), [0.0; 4]);
        r.check_invariants().unwrap();
    }

    #[test]
    fn ragged_and_inconsistent_rejected() {
        let js: Vec<_> = (0..7).map(|i| judgment(i / 4, i % 4, true, true)).collect();
        assert!(visor_metrics(&js, 4).is_err());
        assert!(visor_metrics(&[judgment(0, 0, false, true)], 1).is_err());
        assert!(visor_metrics(&[], 4).is_err());
    }

    #[test]
    fn detect_synthesized_objects() {
        let bb = Backbone::<f64>::new(BackboneConfig::default()).unwrap();
        let vocab = Vocabulary::default_toy();
        let tri = PromptTriplet::new("dog", Relation::Left, "car", &vocab).unwrap();
        let (pa, pb) = ((0.25, 0.5), (0.75, 0.5));
        let z = bb.synthesize_clean(&tri, pa, pb).unwrap();
        let (a, b) = detect(&bb, &z, &tri, 0.4).unwrap();
        assert!(a.present && b.present);
        let cell = 1.0 / 32.0;
        assert!((a.center.0 - pa.0).abs() <= cell && (a.center.1 - pa.1).abs() <= cell);
        assert!((b.center.0 - pb.0).abs() <= cell && (b.center.1 - pb.1).abs() <= cell);
        assert!(a.bbox.x_min < a.bbox.x_max && a.bbox.y_min < a.bbox.y_max);
        assert_eq!(classify_relation(&a, &b), Some(Relation::Left));

        let zero = Latent::zeros(32, 32, 32);
        let (a, b) = detect(&bb, &zero, &tri, 0.4).unwrap();
        assert!(!a.present && !b.present && a.confidence == 0.0 && b.confidence == 0.0);

        let only_a = bb.synthesize_objects(&[(bb.class_index("dog").unwrap(), pa)]).unwrap();
        let (a, b) = detect(&bb, &only_a, &tri, 0.4).unwrap();
        assert!(a.present && !b.present);
    }

    #[test]
    fn judgments_round_trip() {
        let js: Vec<_> = (0..4).map(|i| judgment(0, i, i % 2 == 0, i == 0)).collect();
        let mut buf = Vec::new();
        write_judgments(&js, &mut buf).unwrap();
        assert_eq!(read_judgments(&buf[..]).unwrap(), js);
    }
}
