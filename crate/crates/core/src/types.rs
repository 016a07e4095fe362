//! Domain records shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::langmask::LangMask;

/// Camera pose of one logged frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    /// Camera position in meters.
    pub position: [f64; 3],
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Microseconds since epoch.
    pub timestamp: i64,
    pub traversal_id: String,
    pub frame_id: String,
}

impl FramePose {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.roll.is_finite()
            && self.pitch.is_finite()
            && self.yaw.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid(format!("frame {} has non-finite pose", self.frame_id)));
        }
        let pi = std::f64::consts::PI;
        for (name, v) in [("roll", self.roll), ("pitch", self.pitch), ("yaw", self.yaw)] {
            if !(-pi..=pi).contains(&v) {
                return Err(Error::invalid(format!(
                    "frame {}: {name} {v} outside [-pi, pi]",
                    self.frame_id
                )));
            }
        }
        Ok(())
    }
}

/// Checks every pose and that timestamps strictly increase within each traversal
/// (in input order).
pub fn validate_log(log: &[FramePose]) -> Result<()> {
    let mut last: BTreeMap<&str, i64> = BTreeMap::new();
    for pose in log {
        pose.validate()?;
        if let Some(&prev) = last.get(pose.traversal_id.as_str()) {
            if pose.timestamp <= prev {
                return Err(Error::invalid(format!(
                    "traversal {}: timestamp {} not after {prev}",
                    pose.traversal_id, pose.timestamp
                )));
            }
        }
        last.insert(&pose.traversal_id, pose.timestamp);
    }
    Ok(())
}

macro_rules! closed_set {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Case-insensitive exact match against the closed set.
            pub fn parse_exact(s: &str) -> Option<Self> {
                let s = s.trim();
                Self::ALL.iter().copied().find(|v| v.as_str().eq_ignore_ascii_case(s))
            }

            pub fn names() -> Vec<&'static str> {
                Self::ALL.iter().map(|v| v.as_str()).collect()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_set!(
    /// Detector vocabulary.
    ClassLabel {
        Ambulance => "ambulance",
        Bicycle => "bicycle",
        TrafficLight => "traffic light",
        TrafficCone => "traffic cone",
        Person => "person",
        Car => "car",
        Motorcycle => "motorcycle",
        Bus => "bus",
        Building => "building",
        FireTruck => "fire truck",
    }
);

closed_set!(Weather {
    Sunny => "Sunny",
    Cloudy => "Cloudy",
    Foggy => "Foggy",
    Rainy => "Rainy",
    Snowy => "Snowy",
});

closed_set!(TimeOfDay {
    Dawn => "Dawn",
    Day => "Day",
    Dusk => "Dusk",
    Night => "Night",
});

closed_set!(Season {
    Spring => "Spring",
    Summer => "Summer",
    Autumn => "Autumn",
    Winter => "Winter",
});

closed_set!(SceneType {
    Urban => "Urban",
    Suburban => "Suburban",
    Residential => "Residential",
    Highway => "Highway",
    Rural => "Rural",
});

impl ClassLabel {
    pub fn is_vehicle(&self) -> bool {
        matches!(
            self,
            ClassLabel::Ambulance
                | ClassLabel::Bicycle
                | ClassLabel::Car
                | ClassLabel::Motorcycle
                | ClassLabel::Bus
                | ClassLabel::FireTruck
        )
    }

    pub fn is_pedestrian(&self) -> bool {
        *self == ClassLabel::Person
    }

    pub fn is_traffic_light(&self) -> bool {
        *self == ClassLabel::TrafficLight
    }

    /// Classes the local pseudo-pair generator edits.
    pub fn is_editable(&self) -> bool {
        self.is_vehicle() || self.is_pedestrian() || self.is_traffic_light()
    }

    /// Maps free text ("blue truck", "motorcycle with its rider") to a class:
    /// the longest class name contained in the text wins; generic vehicle
    /// nouns map to `car`.
    pub fn from_description(text: &str) -> Option<ClassLabel> {
        let lower = text.to_ascii_lowercase();
        let by_name = ClassLabel::ALL
            .iter()
            .copied()
            .filter(|c| lower.contains(c.as_str()))
            .max_by_key(|c| c.as_str().len());
        by_name.or_else(|| {
            const PEOPLE: [&str; 5] = ["pedestrian", "man", "woman", "child", "people"];
            const VEHICLES: [&str; 4] = ["truck", "van", "vehicle", "suv"];
            let words: Vec<&str> = lower.split(|c: char| !c.is_ascii_alphanumeric()).collect();
            if words.iter().any(|w| PEOPLE.contains(w)) {
                Some(ClassLabel::Person)
            } else if words.iter().any(|w| VEHICLES.contains(w)) {
                Some(ClassLabel::Car)
            } else {
                None
            }
        })
    }
}

/// Scene-level attributes. Values always come from the closed sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalAttributes {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub season: Season,
    pub scene_type: SceneType,
}

/// Editable global attribute families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalCategory {
    Weather,
    TimeOfDay,
    Season,
}

impl GlobalCategory {
    pub const ALL: [GlobalCategory; 3] = [
        GlobalCategory::Weather,
        GlobalCategory::TimeOfDay,
        GlobalCategory::Season,
    ];

    pub fn phrase(&self) -> &'static str {
        match self {
            GlobalCategory::Weather => "weather",
            GlobalCategory::TimeOfDay => "time of day",
            GlobalCategory::Season => "season",
        }
    }

    pub fn values(&self) -> Vec<&'static str> {
        match self {
            GlobalCategory::Weather => Weather::names(),
            GlobalCategory::TimeOfDay => TimeOfDay::names(),
            GlobalCategory::Season => Season::names(),
        }
    }

    pub fn get(&self, g: &GlobalAttributes) -> &'static str {
        match self {
            GlobalCategory::Weather => g.weather.as_str(),
            GlobalCategory::TimeOfDay => g.time_of_day.as_str(),
            GlobalCategory::Season => g.season.as_str(),
        }
    }

    /// Returns a copy of `g` with this category set to `value`.
    pub fn with(&self, g: &GlobalAttributes, value: &str) -> Result<GlobalAttributes> {
        let bad = || Error::invalid(format!("{value} is not a {} value", self.phrase()));
        let mut out = *g;
        match self {
            GlobalCategory::Weather => out.weather = Weather::parse_exact(value).ok_or_else(bad)?,
            GlobalCategory::TimeOfDay => out.time_of_day = TimeOfDay::parse_exact(value).ok_or_else(bad)?,
            GlobalCategory::Season => out.season = Season::parse_exact(value).ok_or_else(bad)?,
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub class_label: ClassLabel,
    pub bbox: BBox,
    /// Mean masked depth in meters; `None` when the depth facet is missing.
    pub distance_m: Option<f64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl InstanceRecord {
    /// Short appearance description, e.g. "white car".
    pub fn appearance(&self) -> String {
        match self.attributes.get("color") {
            Some(color) if !color.is_empty() => format!("{color} {}", self.class_label),
            _ => self.class_label.to_string(),
        }
    }
}

/// Annotation facets that a backend failure can leave unfilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Global,
    Detection,
    Segmentation,
    Depth,
    InstanceAttributes,
    Caption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub global: Option<GlobalAttributes>,
    pub instances: Vec<InstanceRecord>,
    pub caption: String,
    #[serde(default)]
    pub caption_paraphrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<Facet>,
}

impl SceneAnnotation {
    pub const MAX_PARAPHRASES: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.caption_paraphrases.len() > Self::MAX_PARAPHRASES {
            return Err(Error::invalid(format!(
                "{}: {} paraphrases (max 4)",
                self.image_id,
                self.caption_paraphrases.len()
            )));
        }
        for inst in &self.instances {
            inst.bbox.check_in(self.width, self.height)?;
            if let Some(d) = inst.distance_m {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::invalid(format!(
                        "{}: distance {d} must be positive",
                        inst.instance_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_missing(&self, facet: Facet) -> bool {
        self.missing.contains(&facet)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Insert,
    Delete,
    Modify,
    Replace,
}

impl EditAction {
    pub const ALL: [EditAction; 4] = [
        EditAction::Insert,
        EditAction::Delete,
        EditAction::Modify,
        EditAction::Replace,
    ];

    pub fn needs_target(&self) -> bool {
        !matches!(self, EditAction::Delete)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EditAction::Insert => "insert",
            EditAction::Delete => "delete",
            EditAction::Modify => "modify",
            EditAction::Replace => "replace",
        }
    }

    pub fn parse(s: &str) -> Option<EditAction> {
        EditAction::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for EditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One object-level edit and the sentence that describes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub action: EditAction,
    pub subject_class: ClassLabel,
    pub bbox: BBox,
    pub target_description: Option<String>,
    pub distance_m: f64,
    pub instruction_sentence: String,
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        let has_target = self.target_description.as_deref().is_some_and(|t| !t.trim().is_empty());
        if self.action.needs_target() && !has_target {
            return Err(Error::invalid(format!(
                "{} edit requires a target description",
                self.action
            )));
        }
        if !self.action.needs_target() && self.target_description.is_some() {
            return Err(Error::invalid("delete edit must not carry a target description"));
        }
        if self.instruction_sentence.trim().is_empty() {
            return Err(Error::invalid("empty instruction sentence"));
        }
        if self.bbox.is_empty() {
            return Err(Error::invalid("empty edit bbox"));
        }
        if !(self.distance_m.is_finite() && self.distance_m >= 0.0) {
            return Err(Error::invalid(format!("bad edit distance {}", self.distance_m)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditType {
    Local,
    Global,
    Compound,
    Identity,
}

impl EditType {
    pub const ALL: [EditType; 4] = [
        EditType::Local,
        EditType::Global,
        EditType::Compound,
        EditType::Identity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EditType::Local => "local",
            EditType::Global => "global",
            EditType::Compound => "compound",
            EditType::Identity => "identity",
        }
    }
}

/// Weights of the combined training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sft: f64,
    pub sft_lpips: f64,
    pub id: f64,
    pub id_lpips: f64,
    pub cycle: f64,
    pub cycle_lpips: f64,
    pub clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sft: 3.0,
            sft_lpips: 0.5,
            id: 0.05,
            id_lpips: 0.05,
            cycle: 0.05,
            cycle_lpips: 0.05,
            clip: 3.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            sft: 0.0,
            sft_lpips: 0.0,
            id: 0.0,
            id_lpips: 0.0,
            cycle: 0.0,
            cycle_lpips: 0.0,
            clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sft,
            self.sft_lpips,
            self.id,
            self.id_lpips,
            self.cycle,
            self.cycle_lpips,
            self.clip,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )))
        }
    }
}

/// `(x_s, x_t, t_t, t_s, M_t, M_s)` plus the kind of edit it carries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub source_image: Image,
    pub target_image: Image,
    pub forward_instruction: String,
    pub backward_instruction: String,
    pub forward_mask: LangMask,
    pub backward_mask: LangMask,
    pub edit_type: EditType,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.source_image.dims();
        if self.target_image.dims() != (w, h) {
            return Err(Error::Shape("source and target image dims differ".into()));
        }
        for m in [&self.forward_mask, &self.backward_mask] {
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::Shape(format!(
                    "mask {}x{} vs image {w}x{h}",
                    m.width(),
                    m.height()
                )));
            }
        }
        let in_range = |img: &Image| img.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.source_image) || !in_range(&self.target_image) {
            return Err(Error::invalid("image values outside [0, 1]"));
        }
        if self.edit_type == EditType::Identity
            && (self.source_image != self.target_image
                || !self.forward_mask.is_blank()
                || !self.backward_mask.is_blank())
        {
            return Err(Error::invalid("identity sample needs equal images and blank masks"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_labels_serialize_with_spaces() {
        let s = serde_json::to_string(&ClassLabel::TrafficLight).unwrap();
        assert_eq!(s, "\"traffic light\"");
        assert_eq!(ClassLabel::parse_exact("Fire Truck"), Some(ClassLabel::FireTruck));
    }

    #[test]
    fn class_from_description() {
        assert_eq!(ClassLabel::from_description("blue truck"), Some(ClassLabel::Car));
        assert_eq!(
            ClassLabel::from_description("red fire truck"),
            Some(ClassLabel::FireTruck)
        );
        assert_eq!(
            ClassLabel::from_description("motorcycle with its rider"),
            Some(ClassLabel::Motorcycle)
        );
        assert_eq!(
            ClassLabel::from_description("middle-aged person"),
            Some(ClassLabel::Person)
        );
        assert_eq!(ClassLabel::from_description("a tree"), None);
    }

    #[test]
    fn edit_spec_target_rules() {
        let mut spec = EditSpec {
            action: EditAction::Delete,
            subject_class: ClassLabel::Car,
            bbox: BBox::new(0, 0, 2, 2),
            target_description: Some("red car".into()),
            distance_m: 5.0,
            instruction_sentence: "delete the car".into(),
        };
        assert!(spec.validate().is_err());
        spec.target_description = None;
        spec.validate().unwrap();
        spec.action = EditAction::Modify;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn log_timestamps_must_increase() {
        let pose = |t: i64| FramePose {
            position: [0.0; 3],
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            timestamp: t,
            traversal_id: "a".into(),
            frame_id: format!("f{t}"),
        };
        validate_log(&[pose(1), pose(2)]).unwrap();
        assert!(validate_log(&[pose(2), pose(2)]).is_err());
        let mut bad = pose(3);
        bad.yaw = 4.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            [w.sft, w.sft_lpips, w.id, w.id_lpips, w.cycle, w.cycle_lpips, w.clip],
            [3.0, 0.5, 0.05, 0.05, 0.05, 0.05, 3.0]
        );
        w.validate().unwrap();
        assert!(LossWeights { clip: -1.0, ..w }.validate().is_err());
    }
}
