//! Pluggable model roles (detector, segmenter, depth, captioner, VLM, LLM,
//! editor, super-resolution, embeddings) and deterministic offline mocks.
//!
//! Real models plug in by implementing the traits. Everything in this module
//! that starts with `Mock`, `Fixture` or a geometric name is a pure function of
//! its inputs and configuration so the whole pipeline runs offline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use std::sync::Mutex;

use crate::banks::{TRAFFIC_LIGHT_COLORS, VEHICLE_COLORS};
use crate::embed::{EmbeddingProvider, MockEmbedder};
use crate::error::{Error, Result};
use crate::image::{BBox, Image, Plane};
use crate::langmask::{BinaryMask, LangMask};
use crate::types::ClassLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_label: ClassLabel,
    pub bbox: BBox,
    pub score: f64,
}

pub trait Detector {
    /// `image_id` lets fixture-backed detectors look up canned results; real
    /// detectors ignore it.
    fn detect(&self, image_id: &str, image: &Image) -> Result<Vec<Detection>>;
}

pub trait Segmenter {
    /// Foreground mask of the object in `bbox`, sized like the box.
    fn segment(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask>;
}

pub trait DepthEstimator {
    /// Metric depth in meters, one value per pixel.
    fn depth(&self, image: &Image) -> Result<Plane>;
}

/// Raw captioner answer for the scene-level prompt. Attribute strings are
/// free text and get snapped to the closed sets by the descriptor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub weather: String,
    pub time_of_day: String,
    pub season: String,
    pub scene_type: String,
    pub caption: String,
    #[serde(default)]
    pub paraphrases: Vec<String>,
}

pub trait Captioner {
    fn describe_scene(&self, image: &Image, prompt: &str) -> Result<SceneDescription>;

    /// Re-prompt restricted to a closed option list.
    fn choose(&self, image: &Image, attribute: &str, options: &[&str]) -> Result<String>;

    /// Per-instance attributes ("color", "state", ...) from a box crop.
    fn describe_instance(&self, crop: &Image, class: ClassLabel) -> Result<BTreeMap<String, String>>;

    /// Short noun phrase naming the main subject of a crop.
    fn describe_subject(&self, crop: &Image) -> Result<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalEditVerdict {
    pub same_scene: bool,
    pub change_applied: bool,
}

/// Vision-language judgments used by verification and quality control.
pub trait Vlm {
    fn looks_synthetic(&self, image: &Image) -> Result<bool>;
    fn verify_global_edit(&self, original: &Image, edited: &Image, change: &str) -> Result<GlobalEditVerdict>;
    fn subject_realistic(&self, crop: &Image) -> Result<bool>;
    /// Free-text orientation such as "facing forward".
    fn vehicle_orientation(&self, crop: &Image) -> Result<String>;
    fn class_visible(&self, crop: &Image, class: ClassLabel) -> Result<bool>;
    /// Signal color of a plausible traffic light, `None` if no light is seen.
    fn traffic_light_color(&self, crop: &Image) -> Result<Option<String>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalChange {
    pub category: crate::types::GlobalCategory,
    pub from: String,
    pub to: String,
}

/// Language model that phrases global attribute differences as an instruction.
pub trait InstructionWriter {
    fn summarize_global_change(&self, changes: &[GlobalChange]) -> Result<String>;
}

/// External image editor role.
pub trait GeneratorBackend {
    fn edit(&self, image: &Image, instruction: &str, mask: Option<&LangMask>) -> Result<Image>;
}

pub trait Upscaler {
    fn upscale(&self, image: &Image) -> Result<Image>;
}

pub type SharedDetector = Arc<dyn Detector + Send + Sync>;
pub type SharedSegmenter = Arc<dyn Segmenter + Send + Sync>;
pub type SharedDepth = Arc<dyn DepthEstimator + Send + Sync>;
pub type SharedCaptioner = Arc<dyn Captioner + Send + Sync>;
pub type SharedVlm = Arc<dyn Vlm + Send + Sync>;
pub type SharedWriter = Arc<dyn InstructionWriter + Send + Sync>;
pub type SharedGenerator = Arc<dyn GeneratorBackend + Send + Sync>;
pub type SharedUpscaler = Arc<dyn Upscaler + Send + Sync>;
pub type SharedEmbedder = Arc<dyn EmbeddingProvider>;

/// Wraps a backend that is not safe for concurrent calls; every call takes a lock.
pub struct Serialized<T>(Mutex<T>);

impl<T> Serialized<T> {
    pub fn new(inner: T) -> Self {
        Self(Mutex::new(inner))
    }

    fn with<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let guard = self.0.lock().unwrap_or_else(|p| p.into_inner());
        f(&guard)
    }
}

impl<T: Detector> Detector for Serialized<T> {
    fn detect(&self, image_id: &str, image: &Image) -> Result<Vec<Detection>> {
        self.with(|t| t.detect(image_id, image))
    }
}

impl<T: Segmenter> Segmenter for Serialized<T> {
    fn segment(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask> {
        self.with(|t| t.segment(image, bbox))
    }
}

impl<T: DepthEstimator> DepthEstimator for Serialized<T> {
    fn depth(&self, image: &Image) -> Result<Plane> {
        self.with(|t| t.depth(image))
    }
}

impl<T: Captioner> Captioner for Serialized<T> {
    fn describe_scene(&self, image: &Image, prompt: &str) -> Result<SceneDescription> {
        self.with(|t| t.describe_scene(image, prompt))
    }
    fn choose(&self, image: &Image, attribute: &str, options: &[&str]) -> Result<String> {
        self.with(|t| t.choose(image, attribute, options))
    }
    fn describe_instance(&self, crop: &Image, class: ClassLabel) -> Result<BTreeMap<String, String>> {
        self.with(|t| t.describe_instance(crop, class))
    }
    fn describe_subject(&self, crop: &Image) -> Result<String> {
        self.with(|t| t.describe_subject(crop))
    }
}

impl<T: Vlm> Vlm for Serialized<T> {
    fn looks_synthetic(&self, image: &Image) -> Result<bool> {
        self.with(|t| t.looks_synthetic(image))
    }
    fn verify_global_edit(&self, original: &Image, edited: &Image, change: &str) -> Result<GlobalEditVerdict> {
        self.with(|t| t.verify_global_edit(original, edited, change))
    }
    fn subject_realistic(&self, crop: &Image) -> Result<bool> {
        self.with(|t| t.subject_realistic(crop))
    }
    fn vehicle_orientation(&self, crop: &Image) -> Result<String> {
        self.with(|t| t.vehicle_orientation(crop))
    }
    fn class_visible(&self, crop: &Image, class: ClassLabel) -> Result<bool> {
        self.with(|t| t.class_visible(crop, class))
    }
    fn traffic_light_color(&self, crop: &Image) -> Result<Option<String>> {
        self.with(|t| t.traffic_light_color(crop))
    }
}

impl<T: GeneratorBackend> GeneratorBackend for Serialized<T> {
    fn edit(&self, image: &Image, instruction: &str, mask: Option<&LangMask>) -> Result<Image> {
        self.with(|t| t.edit(image, instruction, mask))
    }
}

// ---------------------------------------------------------------------------
// Detection / segmentation / depth mocks

/// Canned detections keyed by image id; the `"*"` entry applies to any id
/// without its own entry.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FixtureDetector {
    pub detections: BTreeMap<String, Vec<Detection>>,
}

impl FixtureDetector {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with(image_id: &str, detections: Vec<Detection>) -> Self {
        let mut map = BTreeMap::new();
        map.insert(image_id.to_string(), detections);
        Self { detections: map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            detections: serde_json::from_str(&text)?,
        })
    }
}

impl Detector for FixtureDetector {
    fn detect(&self, image_id: &str, image: &Image) -> Result<Vec<Detection>> {
        let dets = self
            .detections
            .get(image_id)
            .or_else(|| self.detections.get("*"))
            .cloned()
            .unwrap_or_default();
        for d in &dets {
            d.bbox.check_in(image.width(), image.height())?;
        }
        Ok(dets)
    }
}

/// Finds axis-aligned blobs of saturated color, the way "vehicles" are drawn
/// in synthetic scenes. Every blob is reported as `class`.
#[derive(Clone, Debug)]
pub struct SaturationBlobDetector {
    pub class_label: ClassLabel,
    pub min_saturation: f64,
    pub min_area: usize,
}

impl Default for SaturationBlobDetector {
    fn default() -> Self {
        Self {
            class_label: ClassLabel::Car,
            min_saturation: 0.35,
            min_area: 6,
        }
    }
}

fn saturation(px: [f64; 3]) -> f64 {
    let hi = px.iter().cloned().fold(f64::MIN, f64::max);
    let lo = px.iter().cloned().fold(f64::MAX, f64::min);
    hi - lo
}

impl Detector for SaturationBlobDetector {
    fn detect(&self, _image_id: &str, image: &Image) -> Result<Vec<Detection>> {
        let (w, h) = image.dims();
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if seen[sy * w + sx] || saturation(image.pixel(sx, sy)) < self.min_saturation {
                    continue;
                }
                let mut stack = vec![(sx, sy)];
                seen[sy * w + sx] = true;
                let (mut x0, mut y0, mut x1, mut y1, mut n) = (sx, sy, sx, sy, 0usize);
                while let Some((x, y)) = stack.pop() {
                    n += 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                    let mut push = |nx: usize, ny: usize| {
                        let i = ny * w + nx;
                        if !seen[i] && saturation(image.pixel(nx, ny)) >= self.min_saturation {
                            seen[i] = true;
                            stack.push((nx, ny));
                        }
                    };
                    if x > 0 {
                        push(x - 1, y);
                    }
                    if x + 1 < w {
                        push(x + 1, y);
                    }
                    if y > 0 {
                        push(x, y - 1);
                    }
                    if y + 1 < h {
                        push(x, y + 1);
                    }
                }
                if n >= self.min_area {
                    out.push(Detection {
                        class_label: self.class_label,
                        bbox: BBox::new(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1),
                        score: 0.9,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Whole box is foreground.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxSegmenter;

impl Segmenter for BoxSegmenter {
    fn segment(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask> {
        bbox.check_in(image.width(), image.height())?;
        let mut m = BinaryMask::new(bbox.width() as usize, bbox.height() as usize);
        m.bits.iter_mut().for_each(|b| *b = true);
        Ok(m)
    }
}

/// Foreground = pixels whose color differs from the box-border mean by more
/// than `tolerance` (max channel difference). Falls back to the whole box
/// when nothing stands out.
#[derive(Clone, Copy, Debug)]
pub struct ContrastSegmenter {
    pub tolerance: f64,
}

impl Default for ContrastSegmenter {
    fn default() -> Self {
        Self { tolerance: 0.1 }
    }
}

impl Segmenter for ContrastSegmenter {
    fn segment(&self, image: &Image, bbox: &BBox) -> Result<BinaryMask> {
        bbox.check_in(image.width(), image.height())?;
        let crop = image.crop(bbox);
        let (w, h) = crop.dims();
        let mut border = [0.0; 3];
        let mut n = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    let p = crop.pixel(x, y);
                    (0..3).for_each(|c| border[c] += p[c]);
                    n += 1.0;
                }
            }
        }
        let border = border.map(|v| v / n);
        let mut m = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = crop.pixel(x, y);
                let d = (0..3).map(|c| (p[c] - border[c]).abs()).fold(0.0, f64::max);
                m.set(x, y, d > self.tolerance);
            }
        }
        if m.count() == 0 {
            return BoxSegmenter.segment(image, bbox);
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantDepth(pub f64);

impl DepthEstimator for ConstantDepth {
    fn depth(&self, image: &Image) -> Result<Plane> {
        Ok(Plane::filled(image.width(), image.height(), self.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampAxis {
    /// Left to right.
    Horizontal,
    /// Top to bottom.
    Vertical,
}

/// Linear depth ramp sampled at pixel centers: `start` at the first edge,
/// `end` at the opposite edge.
#[derive(Clone, Copy, Debug)]
pub struct RampDepth {
    pub start: f64,
    pub end: f64,
    pub axis: RampAxis,
}

impl RampDepth {
    /// Far at the top of the frame, near at the bottom.
    pub fn road() -> Self {
        Self {
            start: 80.0,
            end: 3.0,
            axis: RampAxis::Vertical,
        }
    }

    pub fn value_at(&self, x: usize, y: usize, width: usize, height: usize) -> f64 {
        let (pos, len) = match self.axis {
            RampAxis::Horizontal => (x, width),
            RampAxis::Vertical => (y, height),
        };
        let t = (pos as f64 + 0.5) / len as f64;
        self.start + (self.end - self.start) * t
    }
}

impl DepthEstimator for RampDepth {
    fn depth(&self, image: &Image) -> Result<Plane> {
        let (w, h) = image.dims();
        Ok(Plane::from_fn(w, h, |x, y| self.value_at(x, y, w, h)))
    }
}

// ---------------------------------------------------------------------------
// Language mocks

fn content_seed(seed: u64, image: &Image) -> u64 {
    let h = image.content_hash();
    u64::from_str_radix(&h[..16], 16).unwrap_or(0) ^ seed
}

fn nearest_named(rgb: [f64; 3], names: &[&str]) -> String {
    names
        .iter()
        .min_by(|a, b| {
            let da = color_distance(rgb, named_rgb(a));
            let db = color_distance(rgb, named_rgb(b));
            da.total_cmp(&db)
        })
        .map(|s| s.to_string())
        .unwrap_or_default()
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// Reference RGB for bank color words; unknown words map to mid grey.
pub fn named_rgb(name: &str) -> [f64; 3] {
    match name {
        "red" => [0.85, 0.1, 0.1],
        "blue" => [0.1, 0.2, 0.85],
        "green" => [0.1, 0.75, 0.2],
        "yellow" => [0.9, 0.85, 0.1],
        "black" => [0.05, 0.05, 0.05],
        "white" => [0.95, 0.95, 0.95],
        "silver" => [0.75, 0.75, 0.78],
        "grey" | "gray" => [0.5, 0.5, 0.5],
        "orange" => [0.95, 0.55, 0.1],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Mean color of the most saturated quarter of a crop's pixels.
fn salient_rgb(crop: &Image) -> [f64; 3] {
    let mut px: Vec<[f64; 3]> = (0..crop.height())
        .flat_map(|y| (0..crop.width()).map(move |x| (x, y)))
        .map(|(x, y)| crop.pixel(x, y))
        .collect();
    if px.is_empty() {
        return [0.5; 3];
    }
    px.sort_by(|a, b| saturation(*b).total_cmp(&saturation(*a)));
    let k = (px.len() / 4).max(1);
    let mut acc = [0.0; 3];
    for p in &px[..k] {
        (0..3).for_each(|c| acc[c] += p[c]);
    }
    acc.map(|v| v / k as f64)
}

/// Seeded template captioner. Scene attributes are drawn from a hash of the
/// image bytes; a few draws are deliberately off-vocabulary ("clear",
/// "overcast") so callers exercise closed-set re-prompting. `fixed` overrides
/// the scene answer for fixtures.
#[derive(Clone, Debug, Default)]
pub struct MockCaptioner {
    pub seed: u64,
    pub fixed: Option<SceneDescription>,
}

impl MockCaptioner {
    pub fn new(seed: u64) -> Self {
        Self { seed, fixed: None }
    }

    pub fn fixed(desc: SceneDescription) -> Self {
        Self {
            seed: 0,
            fixed: Some(desc),
        }
    }
}

const WEATHER_WORDS: &[&str] = &["sunny", "Cloudy", "foggy", "Rainy", "snowy", "clear", "overcast"];
const TIME_WORDS: &[&str] = &["day", "Dusk", "night", "dawn", "afternoon"];
const SEASON_WORDS: &[&str] = &["summer", "Winter", "autumn", "spring", "fall"];
const SCENE_WORDS: &[&str] = &["urban", "suburban", "highway", "residential", "rural"];

impl Captioner for MockCaptioner {
    fn describe_scene(&self, image: &Image, _prompt: &str) -> Result<SceneDescription> {
        if let Some(d) = &self.fixed {
            return Ok(d.clone());
        }
        let s = content_seed(self.seed, image);
        let pick = |words: &[&str], salt: u64| {
            let i = (s.rotate_left(salt as u32 * 13) ^ salt.wrapping_mul(0x9E37_79B9)) % words.len() as u64;
            words[i as usize].to_string()
        };
        let weather = pick(WEATHER_WORDS, 1);
        let time_of_day = pick(TIME_WORDS, 2);
        let season = pick(SEASON_WORDS, 3);
        let scene_type = pick(SCENE_WORDS, 4);
        let caption = format!("a {scene_type} road scene on a {weather} {season} {time_of_day}");
        let paraphrases = vec![
            format!("{weather} {season} {time_of_day} on a {scene_type} road"),
            format!("driving through a {scene_type} area, {weather}, {time_of_day}"),
        ];
        Ok(SceneDescription {
            weather,
            time_of_day,
            season,
            scene_type,
            caption,
            paraphrases,
        })
    }

    fn choose(&self, image: &Image, attribute: &str, options: &[&str]) -> Result<String> {
        if options.is_empty() {
            return Err(Error::backend("captioner", "empty option list"));
        }
        let s = content_seed(self.seed, image) ^ attribute.len() as u64;
        Ok(options[(s % options.len() as u64) as usize].to_string())
    }

    fn describe_instance(&self, crop: &Image, class: ClassLabel) -> Result<BTreeMap<String, String>> {
        let rgb = salient_rgb(crop);
        let mut attrs = BTreeMap::new();
        if class.is_traffic_light() {
            attrs.insert("color".into(), nearest_named(rgb, TRAFFIC_LIGHT_COLORS));
        } else if class.is_vehicle() {
            attrs.insert("color".into(), nearest_named(rgb, VEHICLE_COLORS));
        } else if class.is_pedestrian() {
            attrs.insert(
                "clothing".into(),
                format!("{} clothes", nearest_named(rgb, VEHICLE_COLORS)),
            );
        }
        Ok(attrs)
    }

    fn describe_subject(&self, crop: &Image) -> Result<String> {
        Ok(format!("{} car", nearest_named(salient_rgb(crop), VEHICLE_COLORS)))
    }
}

/// Writes "adjust the weather to rainy and the season to winter".
#[derive(Clone, Copy, Debug, Default)]
pub struct MockInstructionWriter;

impl InstructionWriter for MockInstructionWriter {
    fn summarize_global_change(&self, changes: &[GlobalChange]) -> Result<String> {
        Ok(crate::descriptor::template_global_instruction(changes))
    }
}

/// Always fails; exercises fallbacks.
#[derive(Clone, Copy, Debug, Default)]
pub struct FailingBackend;

impl InstructionWriter for FailingBackend {
    fn summarize_global_change(&self, _: &[GlobalChange]) -> Result<String> {
        Err(Error::backend("llm", "unavailable"))
    }
}

impl DepthEstimator for FailingBackend {
    fn depth(&self, _: &Image) -> Result<Plane> {
        Err(Error::backend("depth", "unavailable"))
    }
}

impl Captioner for FailingBackend {
    fn describe_scene(&self, _: &Image, _: &str) -> Result<SceneDescription> {
        Err(Error::backend("captioner", "unavailable"))
    }
    fn choose(&self, _: &Image, _: &str, _: &[&str]) -> Result<String> {
        Err(Error::backend("captioner", "unavailable"))
    }
    fn describe_instance(&self, _: &Image, _: ClassLabel) -> Result<BTreeMap<String, String>> {
        Err(Error::backend("captioner", "unavailable"))
    }
    fn describe_subject(&self, _: &Image) -> Result<String> {
        Err(Error::backend("captioner", "unavailable"))
    }
}

impl Segmenter for FailingBackend {
    fn segment(&self, _: &Image, _: &BBox) -> Result<BinaryMask> {
        Err(Error::backend("segmenter", "unavailable"))
    }
}

impl Detector for FailingBackend {
    fn detect(&self, _: &str, _: &Image) -> Result<Vec<Detection>> {
        Err(Error::backend("detector", "unavailable"))
    }
}

impl GeneratorBackend for FailingBackend {
    fn edit(&self, _: &Image, _: &str, _: Option<&LangMask>) -> Result<Image> {
        Err(Error::backend("generator", "timed out"))
    }
}

impl Vlm for FailingBackend {
    fn looks_synthetic(&self, _: &Image) -> Result<bool> {
        Err(Error::backend("vlm", "unavailable"))
    }
    fn verify_global_edit(&self, _: &Image, _: &Image, _: &str) -> Result<GlobalEditVerdict> {
        Err(Error::backend("vlm", "unavailable"))
    }
    fn subject_realistic(&self, _: &Image) -> Result<bool> {
        Err(Error::backend("vlm", "unavailable"))
    }
    fn vehicle_orientation(&self, _: &Image) -> Result<String> {
        Err(Error::backend("vlm", "unavailable"))
    }
    fn class_visible(&self, _: &Image, _: ClassLabel) -> Result<bool> {
        Err(Error::backend("vlm", "unavailable"))
    }
    fn traffic_light_color(&self, _: &Image) -> Result<Option<String>> {
        Err(Error::backend("vlm", "unavailable"))
    }
}

/// VLM with scripted answers. Unscripted questions fall back to simple image
/// heuristics: global edits count as "same scene" when the mean absolute
/// difference is below `same_scene_max_diff` and "applied" when it exceeds
/// `min_change`; traffic-light color is the nearest of red/green/yellow to the
/// crop's salient color.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MockVlm {
    #[serde(default)]
    pub synthetic: Option<bool>,
    #[serde(default)]
    pub realistic: Option<bool>,
    #[serde(default)]
    pub orientation: Option<String>,
    #[serde(default)]
    pub class_visible: Option<bool>,
    #[serde(default)]
    pub light_color: Option<Option<String>>,
    #[serde(default)]
    pub global_verdict: Option<GlobalEditVerdict>,
    #[serde(default = "MockVlm::default_same_scene")]
    pub same_scene_max_diff: f64,
    #[serde(default = "MockVlm::default_min_change")]
    pub min_change: f64,
}

impl MockVlm {
    fn default_same_scene() -> f64 {
        0.35
    }

    fn default_min_change() -> f64 {
        1e-3
    }
}

impl Default for MockVlm {
    fn default() -> Self {
        Self {
            synthetic: None,
            realistic: None,
            orientation: None,
            class_visible: None,
            light_color: None,
            global_verdict: None,
            same_scene_max_diff: Self::default_same_scene(),
            min_change: Self::default_min_change(),
        }
    }
}

impl Vlm for MockVlm {
    fn looks_synthetic(&self, _image: &Image) -> Result<bool> {
        Ok(self.synthetic.unwrap_or(false))
    }

    fn verify_global_edit(&self, original: &Image, edited: &Image, _change: &str) -> Result<GlobalEditVerdict> {
        if let Some(v) = self.global_verdict {
            return Ok(v);
        }
        if original.dims() != edited.dims() {
            return Ok(GlobalEditVerdict {
                same_scene: false,
                change_applied: false,
            });
        }
        let n = original.data().len().max(1) as f64;
        let mad = original
            .data()
            .iter()
            .zip(edited.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        Ok(GlobalEditVerdict {
            same_scene: mad < self.same_scene_max_diff,
            change_applied: mad > self.min_change,
        })
    }

    fn subject_realistic(&self, _crop: &Image) -> Result<bool> {
        Ok(self.realistic.unwrap_or(true))
    }

    fn vehicle_orientation(&self, _crop: &Image) -> Result<String> {
        Ok(self.orientation.clone().unwrap_or_else(|| "facing forward".to_string()))
    }

    fn class_visible(&self, _crop: &Image, _class: ClassLabel) -> Result<bool> {
        Ok(self.class_visible.unwrap_or(false))
    }

    fn traffic_light_color(&self, crop: &Image) -> Result<Option<String>> {
        if let Some(v) = &self.light_color {
            return Ok(v.clone());
        }
        Ok(Some(nearest_named(salient_rgb(crop), TRAFFIC_LIGHT_COLORS)))
    }
}

// ---------------------------------------------------------------------------
// Editors

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityGenerator;

impl GeneratorBackend for IdentityGenerator {
    fn edit(&self, image: &Image, _instruction: &str, _mask: Option<&LangMask>) -> Result<Image> {
        Ok(image.clone())
    }
}

/// Adds a fixed RGB offset everywhere (inside the mask's support when a
/// non-blank mask is given), clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct TintGenerator {
    pub delta: [f64; 3],
}

impl GeneratorBackend for TintGenerator {
    fn edit(&self, image: &Image, _instruction: &str, mask: Option<&LangMask>) -> Result<Image> {
        let support = mask.filter(|m| !m.is_blank()).map(|m| m.project_binary());
        let mut out = image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if support.as_ref().is_none_or(|s| s.get(x, y)) {
                    for c in 0..3 {
                        out.set(x, y, c, (image.get(x, y, c) + self.delta[c]).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Instruction-parsing painter for pseudo-pair generation on crops:
/// "delete" fills with the crop's border color, any other sentence paints the
/// central region with the last color word it mentions.
#[derive(Clone, Copy, Debug, Default)]
pub struct RulePainter;

impl RulePainter {
    fn last_color(instruction: &str) -> Option<[f64; 3]> {
        instruction
            .split(|c: char| !c.is_ascii_alphabetic())
            .rfind(|w| VEHICLE_COLORS.contains(w) || TRAFFIC_LIGHT_COLORS.contains(w) || *w == "gray")
            .map(named_rgb)
    }
}

impl GeneratorBackend for RulePainter {
    fn edit(&self, image: &Image, instruction: &str, _mask: Option<&LangMask>) -> Result<Image> {
        let (w, h) = image.dims();
        if w == 0 || h == 0 {
            return Ok(image.clone());
        }
        let lower = instruction.to_ascii_lowercase();
        let mut border = [0.0; 3];
        let mut n = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    let p = image.pixel(x, y);
                    (0..3).for_each(|c| border[c] += p[c]);
                    n += 1.0;
                }
            }
        }
        let border = border.map(|v| v / n);
        let fill = if lower.starts_with("delete") || lower.starts_with("remove") {
            border
        } else {
            Self::last_color(&lower).unwrap_or([0.5, 0.5, 0.5])
        };
        let inner = BBox::new((w / 6) as u32, (h / 6) as u32, (w - w / 6) as u32, (h - h / 6) as u32);
        let mut out = image.clone();
        for (x, y) in inner.pixels() {
            out.put_pixel(x, y, fill);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BicubicUpscaler {
    pub factor: usize,
}

impl Default for BicubicUpscaler {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

impl Upscaler for BicubicUpscaler {
    fn upscale(&self, image: &Image) -> Result<Image> {
        Ok(image.resize_bicubic(image.width() * self.factor, image.height() * self.factor))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    #[default]
    None,
    Fixture {
        path: PathBuf,
    },
    SaturationBlobs {
        #[serde(default = "default_blob_class")]
        class_label: ClassLabel,
    },
}

fn default_blob_class() -> ClassLabel {
    ClassLabel::Car
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterConfig {
    #[default]
    Box,
    Contrast {
        tolerance: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthConfig {
    Constant { meters: f64 },
    Ramp { start: f64, end: f64, axis: RampAxis },
}

impl Default for DepthConfig {
    fn default() -> Self {
        let r = RampDepth::road();
        DepthConfig::Ramp {
            start: r.start,
            end: r.end,
            axis: r.axis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptionerConfig {
    Mock {
        #[serde(default)]
        seed: u64,
    },
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig::Mock { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum GeneratorConfig {
    Identity,
    Tint {
        delta: [f64; 3],
    },
    #[default]
    RulePainter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Mock {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_dim() -> usize {
    MockEmbedder::DEFAULT_DIM
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Mock {
            dim: default_dim(),
            seed: 0,
        }
    }
}

/// Backend selection file. Relative fixture paths resolve against the file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
    pub depth: DepthConfig,
    pub captioner: CaptionerConfig,
    pub vlm: MockVlm,
    pub generator: GeneratorConfig,
    pub upscale_factor: Option<usize>,
    pub embedder: EmbedderConfig,
    pub image_embedder: Option<EmbedderConfig>,
    /// Prompt template file for the scene-level captioner call.
    pub prompt_path: Option<PathBuf>,
}

impl PartialEq for MockVlm {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

/// Every role instantiated and shareable across threads.
#[derive(Clone)]
pub struct BackendSet {
    pub detector: SharedDetector,
    pub segmenter: SharedSegmenter,
    pub depth: SharedDepth,
    pub captioner: SharedCaptioner,
    pub vlm: SharedVlm,
    pub writer: SharedWriter,
    pub generator: SharedGenerator,
    pub upscaler: SharedUpscaler,
    pub embedder: SharedEmbedder,
    /// Second image encoder for evaluation (DINO role).
    pub image_embedder: SharedEmbedder,
    pub scene_prompt: String,
}

pub const DEFAULT_SCENE_PROMPT: &str = "Describe the driving scene. Report the weather, time of day, \
season and scene type, each as a single word, then a one-sentence caption and up to four paraphrases.";

impl BackendSet {
    /// All-mock set with an empty fixture detector.
    pub fn mock() -> Self {
        Self::from_config(&BackendConfig::default(), Path::new(".")).expect("default mocks")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: BackendConfig = serde_json::from_str(&text)?;
        Self::from_config(&cfg, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_config(cfg: &BackendConfig, base: &Path) -> Result<Self> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let detector: SharedDetector = match &cfg.detector {
            DetectorConfig::None => Arc::new(FixtureDetector::empty()),
            DetectorConfig::Fixture { path } => Arc::new(FixtureDetector::load(&resolve(path))?),
            DetectorConfig::SaturationBlobs { class_label } => Arc::new(SaturationBlobDetector {
                class_label: *class_label,
                ..Default::default()
            }),
        };
        let segmenter: SharedSegmenter = match cfg.segmenter {
            SegmenterConfig::Box => Arc::new(BoxSegmenter),
            SegmenterConfig::Contrast { tolerance } => Arc::new(ContrastSegmenter { tolerance }),
        };
        let depth: SharedDepth = match cfg.depth {
            DepthConfig::Constant { meters } => Arc::new(ConstantDepth(meters)),
            DepthConfig::Ramp { start, end, axis } => Arc::new(RampDepth { start, end, axis }),
        };
        let captioner: SharedCaptioner = match cfg.captioner {
            CaptionerConfig::Mock { seed } => Arc::new(MockCaptioner::new(seed)),
        };
        let generator: SharedGenerator = match cfg.generator {
            GeneratorConfig::Identity => Arc::new(IdentityGenerator),
            GeneratorConfig::Tint { delta } => Arc::new(TintGenerator { delta }),
            GeneratorConfig::RulePainter => Arc::new(RulePainter),
        };
        let make_embedder = |c: &EmbedderConfig, dino: bool| -> SharedEmbedder {
            match *c {
                EmbedderConfig::Mock { dim, seed } if dino => Arc::new(MockEmbedder::dino_style(dim, seed)),
                EmbedderConfig::Mock { dim, seed } => Arc::new(MockEmbedder::new(dim, seed)),
            }
        };
        let embedder = make_embedder(&cfg.embedder, false);
        let image_embedder = make_embedder(cfg.image_embedder.as_ref().unwrap_or(&cfg.embedder), true);
        let scene_prompt = match &cfg.prompt_path {
            Some(p) => {
                let p = resolve(p);
                std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
            }
            None => DEFAULT_SCENE_PROMPT.to_string(),
        };
        Ok(Self {
            detector,
            segmenter,
            depth,
            captioner,
            vlm: Arc::new(cfg.vlm.clone()),
            writer: Arc::new(MockInstructionWriter),
            generator,
            upscaler: Arc::new(BicubicUpscaler {
                factor: cfg.upscale_factor.unwrap_or(2),
            }),
            embedder,
            image_embedder,
            scene_prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_values_at_pixel_centers() {
        let r = RampDepth {
            start: 0.0,
            end: 50.0,
            axis: RampAxis::Horizontal,
        };
        let d = r.depth(&Image::new(10, 2)).unwrap();
        assert!((d.get(0, 0) - 2.5).abs() < 1e-12);
        assert!((d.get(9, 1) - 47.5).abs() < 1e-12);
    }

    #[test]
    fn blob_detector_finds_rectangles() {
        let mut img = Image::filled(20, 12, [0.4, 0.4, 0.4]);
        for (x, y) in BBox::new(3, 4, 8, 7).pixels() {
            img.put_pixel(x, y, [0.9, 0.1, 0.1]);
        }
        for (x, y) in BBox::new(12, 2, 18, 10).pixels() {
            img.put_pixel(x, y, [0.1, 0.2, 0.9]);
        }
        let dets = SaturationBlobDetector::default().detect("x", &img).unwrap();
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        assert_eq!(boxes, vec![BBox::new(12, 2, 18, 10), BBox::new(3, 4, 8, 7)]);
    }

    #[test]
    fn captioner_instance_color_is_nearest_bank_color() {
        let crop = Image::filled(6, 6, named_rgb("blue"));
        let attrs = MockCaptioner::new(0).describe_instance(&crop, ClassLabel::Car).unwrap();
        assert_eq!(attrs["color"], "blue");
        let light = Image::filled(3, 6, [0.9, 0.1, 0.05]);
        let attrs = MockCaptioner::new(0)
            .describe_instance(&light, ClassLabel::TrafficLight)
            .unwrap();
        assert_eq!(attrs["color"], "red");
    }

    #[test]
    fn rule_painter_parses_colors() {
        let img = Image::filled(12, 12, [0.4, 0.4, 0.4]);
        let out = RulePainter.edit(&img, "change the car to green", None).unwrap();
        assert_eq!(out.pixel(6, 6), named_rgb("green"));
        assert_eq!(out.pixel(0, 0), img.pixel(0, 0));
        let del = RulePainter.edit(&out, "delete the car", None).unwrap();
        assert!(del.linf_distance(&img) < 1e-12);
    }

    #[test]
    fn config_roundtrip_and_defaults() {
        let cfg: BackendConfig = serde_json::from_str(
            r#"{"depth": {"kind": "constant", "meters": 12.0}, "generator": {"kind": "identity"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.depth, DepthConfig::Constant { meters: 12.0 });
        let set = BackendSet::from_config(&cfg, Path::new(".")).unwrap();
        let d = set.depth.depth(&Image::new(2, 2)).unwrap();
        assert_eq!(d.get(1, 1), 12.0);
        assert!(serde_json::from_str::<BackendConfig>(r#"{"depth": {"kind": "lidar"}}"#).is_err());
    }

    #[test]
    fn serialized_adapter_delegates() {
        let s = Serialized::new(ConstantDepth(4.0));
        assert_eq!(s.depth(&Image::new(1, 1)).unwrap().get(0, 0), 4.0);
    }
}
