//! Quality control for pseudo-edited samples: a global sanity check, then
//! one class-specific gate. The first failing gate decides the verdict.

use serde::{Deserialize, Serialize};

use crate::backends::Vlm;
use crate::edges::{edge_ssim, EdgeParams, SsimParams};
use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::types::{ClassLabel, EditAction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStage {
    GlobalSanity,
    Pedestrian,
    VehicleOrientation,
    RemovalSemantic,
    RemovalStructural,
    TrafficlightPresence,
    TrafficlightColor,
    TrafficlightStructural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcVerdict {
    pub accepted: bool,
    /// Failing gate, or the last gate evaluated when accepted.
    pub stage: QcStage,
    pub score: Option<f64>,
    pub reason: String,
}

impl QcVerdict {
    fn pass(stage: QcStage, score: Option<f64>) -> Self {
        Self {
            accepted: true,
            stage,
            score,
            reason: "passed".into(),
        }
    }

    fn fail(stage: QcStage, score: Option<f64>, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self {
            accepted: false,
            stage,
            score,
            reason,
        }
    }

    fn backend_failure(stage: QcStage, err: Error) -> Self {
        Self::fail(stage, None, format!("vlm failure: {err}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    pub ssim_threshold: f64,
    pub edge: EdgeParams,
    pub ssim: SsimParams,
    /// Bicubic enlargement applied to crops before VLM and SSIM.
    pub enlarge_factor: usize,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            ssim_threshold: 0.35,
            edge: EdgeParams::default(),
            ssim: SsimParams::default(),
            enlarge_factor: 2,
        }
    }
}

pub fn enlarge(crop: &Image, factor: usize) -> Image {
    crop.resize_bicubic(crop.width() * factor.max(1), crop.height() * factor.max(1))
}

fn structural(original: &Image, edited: &Image, cfg: &QcConfig, stage: QcStage) -> std::result::Result<f64, QcVerdict> {
    edge_ssim(original, edited, &cfg.edge, &cfg.ssim)
        .map_err(|e| QcVerdict::fail(stage, None, format!("edge ssim: {e}")))
}

/// Semantic check first (class no longer visible), then edge SSIM.
pub fn check_removal(
    original_crop: &Image,
    edited_crop: &Image,
    class: ClassLabel,
    vlm: &dyn Vlm,
    cfg: &QcConfig,
) -> QcVerdict {
    match vlm.class_visible(edited_crop, class) {
        Err(e) => return QcVerdict::backend_failure(QcStage::RemovalSemantic, e),
        Ok(true) => {
            return QcVerdict::fail(
                QcStage::RemovalSemantic,
                None,
                format!("{class} still visible after removal"),
            )
        }
        Ok(false) => {}
    }
    let s = match structural(original_crop, edited_crop, cfg, QcStage::RemovalStructural) {
        Ok(s) => s,
        Err(v) => return v,
    };
    if s >= cfg.ssim_threshold {
        QcVerdict::pass(QcStage::RemovalStructural, Some(s))
    } else {
        QcVerdict::fail(
            QcStage::RemovalStructural,
            Some(s),
            format!("edge ssim {s:.3} below {:.3}", cfg.ssim_threshold),
        )
    }
}

/// Light present, predicted color equals the target, edge SSIM at threshold.
pub fn check_trafficlight(
    original_crop: &Image,
    edited_crop: &Image,
    target_color: &str,
    vlm: &dyn Vlm,
    cfg: &QcConfig,
) -> QcVerdict {
    let color = match vlm.traffic_light_color(edited_crop) {
        Err(e) => return QcVerdict::backend_failure(QcStage::TrafficlightPresence, e),
        Ok(None) => return QcVerdict::fail(QcStage::TrafficlightPresence, None, "no traffic light detected"),
        Ok(Some(c)) => c,
    };
    if !color.trim().eq_ignore_ascii_case(target_color.trim()) {
        return QcVerdict::fail(
            QcStage::TrafficlightColor,
            None,
            format!("predicted {color}, intended {target_color}"),
        );
    }
    let s = match structural(original_crop, edited_crop, cfg, QcStage::TrafficlightStructural) {
        Ok(s) => s,
        Err(v) => return v,
    };
    if s >= cfg.ssim_threshold {
        QcVerdict::pass(QcStage::TrafficlightStructural, Some(s))
    } else {
        QcVerdict::fail(
            QcStage::TrafficlightStructural,
            Some(s),
            format!("edge ssim {s:.3} below {:.3}", cfg.ssim_threshold),
        )
    }
}

pub fn check_pedestrian(edited_crop: &Image, vlm: &dyn Vlm) -> QcVerdict {
    match vlm.subject_realistic(edited_crop) {
        Err(e) => QcVerdict::backend_failure(QcStage::Pedestrian, e),
        Ok(true) => QcVerdict::pass(QcStage::Pedestrian, None),
        Ok(false) => QcVerdict::fail(QcStage::Pedestrian, None, "subject judged unrealistic"),
    }
}

/// Orientation vocabulary the vehicle gate understands; anything else is
/// treated as ambiguous.
pub const ORIENTATIONS: &[&str] = &[
    "facing forward",
    "facing away",
    "facing left",
    "facing right",
    "turning left",
    "turning right",
];

pub fn normalize_orientation(raw: &str) -> Option<&'static str> {
    let t = raw.trim().trim_end_matches('.').to_ascii_lowercase();
    ORIENTATIONS.iter().copied().find(|o| *o == t)
}

/// Orientation rule: with an explicit expectation it must match; for edits
/// of an existing vehicle the context is the original vehicle's orientation;
/// insertions accept any recognized orientation.
pub fn check_vehicle(
    original_crop: &Image,
    edited_crop: &Image,
    action: EditAction,
    expected: Option<&str>,
    vlm: &dyn Vlm,
) -> QcVerdict {
    let stage = QcStage::VehicleOrientation;
    let predicted = match vlm.vehicle_orientation(edited_crop) {
        Err(e) => return QcVerdict::backend_failure(stage, e),
        Ok(p) => p,
    };
    let Some(predicted) = normalize_orientation(&predicted) else {
        return QcVerdict::fail(stage, None, format!("ambiguous orientation {predicted:?}"));
    };
    let expected = match expected {
        Some(e) => normalize_orientation(e),
        None if matches!(action, EditAction::Modify | EditAction::Replace) => {
            match vlm.vehicle_orientation(original_crop) {
                Err(e) => return QcVerdict::backend_failure(stage, e),
                Ok(o) => normalize_orientation(&o),
            }
        }
        None => return QcVerdict::pass(stage, None),
    };
    match expected {
        Some(e) if e == predicted => QcVerdict::pass(stage, None),
        Some(e) => QcVerdict::fail(stage, None, format!("orientation {predicted} does not match {e}")),
        None => QcVerdict::fail(stage, None, "reference orientation ambiguous"),
    }
}

/// What the pseudo-edit was supposed to do, enough to pick the gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntendedEdit {
    Global,
    Removal {
        class_label: ClassLabel,
        bbox: BBox,
    },
    TrafficLight {
        bbox: BBox,
        target_color: String,
    },
    Pedestrian {
        bbox: BBox,
    },
    Vehicle {
        bbox: BBox,
        action: EditAction,
        #[serde(default)]
        expected_orientation: Option<String>,
    },
}

impl IntendedEdit {
    /// Gate selection from a local edit: deletions go to the removal gate,
    /// otherwise by class.
    pub fn from_local(action: EditAction, class: ClassLabel, bbox: BBox, target: Option<&str>) -> Option<Self> {
        if action == EditAction::Delete {
            return Some(IntendedEdit::Removal {
                class_label: class,
                bbox,
            });
        }
        if class.is_traffic_light() {
            return target.map(|t| IntendedEdit::TrafficLight {
                bbox,
                target_color: t.to_string(),
            });
        }
        if class.is_pedestrian() {
            return Some(IntendedEdit::Pedestrian { bbox });
        }
        if class.is_vehicle() {
            return Some(IntendedEdit::Vehicle {
                bbox,
                action,
                expected_orientation: None,
            });
        }
        None
    }

    pub fn bbox(&self) -> Option<BBox> {
        match self {
            IntendedEdit::Global => None,
            IntendedEdit::Removal { bbox, .. }
            | IntendedEdit::TrafficLight { bbox, .. }
            | IntendedEdit::Pedestrian { bbox }
            | IntendedEdit::Vehicle { bbox, .. } => Some(*bbox),
        }
    }
}

/// Runs the gates in order on an (original, edited) pair. Images are only
/// read; accepted samples pass through untouched.
pub fn run_qc(
    original: &Image,
    edited: &Image,
    intent: &IntendedEdit,
    vlm: &dyn Vlm,
    cfg: &QcConfig,
) -> Result<QcVerdict> {
    if original.dims() != edited.dims() {
        return Err(Error::Shape("original and edited images differ in size".into()));
    }
    match vlm.looks_synthetic(edited) {
        Err(e) => return Ok(QcVerdict::backend_failure(QcStage::GlobalSanity, e)),
        Ok(true) => {
            return Ok(QcVerdict::fail(
                QcStage::GlobalSanity,
                None,
                "image shows obvious synthetic artifacts",
            ))
        }
        Ok(false) => {}
    }
    let Some(bbox) = intent.bbox() else {
        return Ok(QcVerdict::pass(QcStage::GlobalSanity, None));
    };
    bbox.check_in(original.width(), original.height())?;
    let a = enlarge(&original.crop(&bbox), cfg.enlarge_factor);
    let b = enlarge(&edited.crop(&bbox), cfg.enlarge_factor);
    Ok(match intent {
        IntendedEdit::Global => unreachable!(),
        IntendedEdit::Removal { class_label, .. } => check_removal(&a, &b, *class_label, vlm, cfg),
        IntendedEdit::TrafficLight { target_color, .. } => check_trafficlight(&a, &b, target_color, vlm, cfg),
        IntendedEdit::Pedestrian { .. } => check_pedestrian(&b, vlm),
        IntendedEdit::Vehicle {
            action,
            expected_orientation,
            ..
        } => check_vehicle(&a, &b, *action, expected_orientation.as_deref(), vlm),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::backends::{FailingBackend, GlobalEditVerdict, MockVlm};

    fn scene() -> Image {
        Image::from_fn(32, 32, |x, y| {
            if (8..24).contains(&x) && (8..24).contains(&y) {
                [0.9, 0.2, 0.2]
            } else {
                [0.2, 0.2, 0.25]
            }
        })
    }

    #[test]
    fn present_class_rejected_before_structure() {
        let vlm = MockVlm {
            class_visible: Some(true),
            ..Default::default()
        };
        let v = check_removal(&scene(), &scene(), ClassLabel::Car, &vlm, &QcConfig::default());
        assert!(!v.accepted);
        assert_eq!(v.stage, QcStage::RemovalSemantic);
        assert_eq!(v.score, None);
    }

    #[test]
    fn absent_class_with_similar_edges_accepted() {
        let v = check_removal(
            &scene(),
            &scene(),
            ClassLabel::Car,
            &MockVlm::default(),
            &QcConfig::default(),
        );
        assert!(v.accepted);
        assert_eq!(v.score, Some(1.0));
    }

    #[test]
    fn absent_class_with_broken_edges_rejected() {
        let flat = Image::filled(32, 32, [0.2, 0.2, 0.25]);
        let v = check_removal(
            &scene(),
            &flat,
            ClassLabel::Car,
            &MockVlm::default(),
            &QcConfig::default(),
        );
        assert!(!v.accepted);
        assert_eq!(v.stage, QcStage::RemovalStructural);
        assert!(v.score.unwrap() < 0.35);
    }

    #[test]
    fn vlm_failure_is_a_semantic_rejection() {
        let v = check_removal(
            &scene(),
            &scene(),
            ClassLabel::Car,
            &FailingBackend,
            &QcConfig::default(),
        );
        assert_eq!(v.stage, QcStage::RemovalSemantic);
        assert!(!v.reason.is_empty());
    }

    #[test]
    fn trafficlight_conditions() {
        let cfg = QcConfig::default();
        let none = MockVlm {
            light_color: Some(None),
            ..Default::default()
        };
        assert_eq!(
            check_trafficlight(&scene(), &scene(), "red", &none, &cfg).stage,
            QcStage::TrafficlightPresence
        );
        let green = MockVlm {
            light_color: Some(Some("green".into())),
            ..Default::default()
        };
        let v = check_trafficlight(&scene(), &scene(), "red", &green, &cfg);
        assert_eq!((v.accepted, v.stage), (false, QcStage::TrafficlightColor));
        let v = check_trafficlight(&scene(), &scene(), "green", &green, &cfg);
        assert!(v.accepted);
        let flat = Image::filled(32, 32, [0.2; 3]);
        let v = check_trafficlight(&scene(), &flat, "green", &green, &cfg);
        assert_eq!((v.accepted, v.stage), (false, QcStage::TrafficlightStructural));
    }

    #[test]
    fn orientation_rules() {
        let img = scene();
        let fwd = MockVlm::default();
        assert!(check_vehicle(&img, &img, EditAction::Insert, Some("facing forward"), &fwd).accepted);
        assert!(!check_vehicle(&img, &img, EditAction::Insert, Some("facing away"), &fwd).accepted);
        assert!(check_vehicle(&img, &img, EditAction::Modify, None, &fwd).accepted);
        let vague = MockVlm {
            orientation: Some("sideways-ish".into()),
            ..Default::default()
        };
        let v = check_vehicle(&img, &img, EditAction::Insert, None, &vague);
        assert!(!v.accepted && v.reason.contains("ambiguous"));
    }

    #[test]
    fn pedestrian_gate() {
        let bad = MockVlm {
            realistic: Some(false),
            ..Default::default()
        };
        assert!(!check_pedestrian(&scene(), &bad).accepted);
        assert!(check_pedestrian(&scene(), &MockVlm::default()).accepted);
    }

    struct CountingVlm {
        inner: MockVlm,
        calls: AtomicUsize,
    }

    impl Vlm for CountingVlm {
        fn looks_synthetic(&self, image: &Image) -> Result<bool> {
            self.inner.looks_synthetic(image)
        }
        fn verify_global_edit(&self, a: &Image, b: &Image, c: &str) -> Result<GlobalEditVerdict> {
            self.inner.verify_global_edit(a, b, c)
        }
        fn subject_realistic(&self, crop: &Image) -> Result<bool> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.subject_realistic(crop)
        }
        fn vehicle_orientation(&self, crop: &Image) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.vehicle_orientation(crop)
        }
        fn class_visible(&self, crop: &Image, class: ClassLabel) -> Result<bool> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.class_visible(crop, class)
        }
        fn traffic_light_color(&self, crop: &Image) -> Result<Option<String>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.traffic_light_color(crop)
        }
    }

    #[test]
    fn global_sanity_short_circuits() {
        let vlm = CountingVlm {
            inner: MockVlm {
                synthetic: Some(true),
                ..Default::default()
            },
            calls: AtomicUsize::new(0),
        };
        let intent = IntendedEdit::Pedestrian {
            bbox: BBox::new(8, 8, 24, 24),
        };
        let v = run_qc(&scene(), &scene(), &intent, &vlm, &QcConfig::default()).unwrap();
        assert_eq!(v.stage, QcStage::GlobalSanity);
        assert_eq!(vlm.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn intent_serializes_with_kind_tag() {
        let i = IntendedEdit::TrafficLight {
            bbox: BBox::new(1, 2, 3, 4),
            target_color: "red".into(),
        };
        let v = serde_json::to_value(&i).unwrap();
        assert_eq!(v["kind"], "traffic_light");
        let back: IntendedEdit = serde_json::from_value(v).unwrap();
        assert_eq!(back, i);
    }
}
