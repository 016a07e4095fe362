//! Scene annotation from composed detector / segmenter / depth / captioner
//! backends, and instruction generation for pose-aligned pairs.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendSet, GlobalChange, InstructionWriter};
use crate::banks::{edit_sentence, REMOVE_ALL_TRAFFIC};
use crate::error::{Error, Result};
use crate::image::{BBox, Image, Plane};
use crate::langmask::{filter_instances, BinaryMask, FilterConfig};
use crate::types::{
    ClassLabel, EditAction, EditSpec, Facet, GlobalAttributes, GlobalCategory, InstanceRecord, SceneAnnotation,
    SceneType, Season, TimeOfDay, Weather,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Detections scoring below this are ignored.
    pub score_threshold: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self { score_threshold: 0.3 }
    }
}

/// Snaps a free-text answer onto a closed set: exact (case-insensitive) match
/// first, otherwise one re-prompt restricted to the set.
fn snap<T: Copy>(
    raw: &str,
    parse: fn(&str) -> Option<T>,
    names: &[&str],
    attribute: &str,
    image: &Image,
    backends: &BackendSet,
) -> Option<T> {
    parse(raw).or_else(|| {
        backends
            .captioner
            .choose(image, attribute, names)
            .ok()
            .and_then(|a| parse(&a))
    })
}

/// Mean of `depth` over the mask pixels of `bbox`; the whole box when the
/// mask is empty.
pub fn masked_mean_depth(depth: &Plane, bbox: &BBox, mask: &BinaryMask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in bbox.pixels() {
        if mask.get(x - bbox.x0 as usize, y - bbox.y0 as usize) {
            sum += depth.get(x, y);
            n += 1;
        }
    }
    if n == 0 {
        let crop = depth.crop(bbox);
        return crop.data().iter().sum::<f64>() / crop.data().len() as f64;
    }
    sum / n as f64
}

/// Runs every backend on one image. A failing backend leaves its facet
/// listed in `missing` instead of inventing values.
pub fn annotate(
    image_id: &str,
    image: &Image,
    backends: &BackendSet,
    cfg: &DescriptorConfig,
) -> Result<SceneAnnotation> {
    if image.is_empty() {
        return Err(Error::invalid("cannot annotate an empty image"));
    }
    let (width, height) = image.dims();
    let mut missing = Vec::new();

    let mut global = None;
    let mut caption = String::new();
    let mut caption_paraphrases = Vec::new();
    match backends.captioner.describe_scene(image, &backends.scene_prompt) {
        Ok(desc) => {
            let weather = snap(
                &desc.weather,
                Weather::parse_exact,
                &Weather::names(),
                "weather",
                image,
                backends,
            );
            let time = snap(
                &desc.time_of_day,
                TimeOfDay::parse_exact,
                &TimeOfDay::names(),
                "time of day",
                image,
                backends,
            );
            let season = snap(
                &desc.season,
                Season::parse_exact,
                &Season::names(),
                "season",
                image,
                backends,
            );
            let scene = snap(
                &desc.scene_type,
                SceneType::parse_exact,
                &SceneType::names(),
                "scene type",
                image,
                backends,
            );
            match (weather, time, season, scene) {
                (Some(weather), Some(time_of_day), Some(season), Some(scene_type)) => {
                    global = Some(GlobalAttributes {
                        weather,
                        time_of_day,
                        season,
                        scene_type,
                    })
                }
                _ => missing.push(Facet::Global),
            }
            caption = desc.caption;
            caption_paraphrases = desc.paraphrases;
            caption_paraphrases.truncate(SceneAnnotation::MAX_PARAPHRASES);
        }
        Err(_) => {
            missing.push(Facet::Global);
            missing.push(Facet::Caption);
        }
    }

    let depth = match backends.depth.depth(image) {
        Ok(d) if d.width() == width && d.height() == height => Some(d),
        _ => {
            missing.push(Facet::Depth);
            None
        }
    };

    let detections = match backends.detector.detect(image_id, image) {
        Ok(d) => d,
        Err(_) => {
            missing.push(Facet::Detection);
            Vec::new()
        }
    };

    let mut instances = Vec::new();
    for det in detections.into_iter().filter(|d| d.score >= cfg.score_threshold) {
        det.bbox.check_in(width, height)?;
        let mask = match backends.segmenter.segment(image, &det.bbox) {
            Ok(m) if m.width == det.bbox.width() as usize && m.height == det.bbox.height() as usize => m,
            _ => {
                missing.push(Facet::Segmentation);
                let mut full = BinaryMask::new(det.bbox.width() as usize, det.bbox.height() as usize);
                full.bits.iter_mut().for_each(|b| *b = true);
                full
            }
        };
        let distance_m = depth.as_ref().map(|d| masked_mean_depth(d, &det.bbox, &mask));
        let attributes = match backends
            .captioner
            .describe_instance(&image.crop(&det.bbox), det.class_label)
        {
            Ok(a) => a,
            Err(_) => {
                missing.push(Facet::InstanceAttributes);
                Default::default()
            }
        };
        instances.push(InstanceRecord {
            instance_id: format!("{image_id}/{}", instances.len()),
            class_label: det.class_label,
            bbox: det.bbox,
            distance_m,
            attributes,
        });
    }

    missing.sort();
    missing.dedup();
    Ok(SceneAnnotation {
        image_id: image_id.to_string(),
        width,
        height,
        global,
        instances,
        caption,
        caption_paraphrases,
        missing,
    })
}

/// Attribute changes needed to go from `from` to `to`.
pub fn global_diff(from: &GlobalAttributes, to: &GlobalAttributes) -> Vec<GlobalChange> {
    GlobalCategory::ALL
        .iter()
        .filter(|c| c.get(from) != c.get(to))
        .map(|&category| GlobalChange {
            category,
            from: category.get(from).to_string(),
            to: category.get(to).to_string(),
        })
        .collect()
}

pub const NO_GLOBAL_CHANGE: &str = "keep the weather, time of day, and season unchanged";

/// "adjust the weather to rainy and the season to winter".
pub fn template_global_instruction(changes: &[GlobalChange]) -> String {
    if changes.is_empty() {
        return NO_GLOBAL_CHANGE.to_string();
    }
    let parts: Vec<String> = changes
        .iter()
        .map(|c| format!("the {} to {}", c.category.phrase(), c.to.to_ascii_lowercase()))
        .collect();
    format!("adjust {}", parts.join(" and "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInstructions {
    /// Source → target global prompt (t_t).
    pub forward_instruction: String,
    /// Target → source global prompt (t_s).
    pub backward_instruction: String,
    pub forward_specs: Vec<EditSpec>,
    pub backward_specs: Vec<EditSpec>,
    pub forward_changes: Vec<GlobalChange>,
    /// Set when the language backend failed and template text was used.
    pub used_fallback: bool,
}

/// Specs that re-populate a scene after the remove-all prompt: traffic lights
/// are modified to their observed color, vehicles and pedestrians inserted.
pub fn insertion_specs(ann: &SceneAnnotation, filter: &FilterConfig) -> Vec<EditSpec> {
    filter_instances(&ann.instances, ann.width, ann.height, filter)
        .into_iter()
        .filter(|i| i.class_label.is_editable())
        .filter_map(|inst| {
            let distance_m = inst.distance_m?;
            let (action, target) = if inst.class_label.is_traffic_light() {
                match inst.attributes.get("color") {
                    Some(c) => (EditAction::Modify, c.clone()),
                    None => (EditAction::Insert, inst.appearance()),
                }
            } else {
                (EditAction::Insert, inst.appearance())
            };
            let subject = inst.class_label.to_string();
            Some(EditSpec {
                action,
                subject_class: inst.class_label,
                bbox: inst.bbox,
                instruction_sentence: edit_sentence(action, inst.class_label, &subject, Some(&target)),
                target_description: Some(target),
                distance_m,
            })
        })
        .collect()
}

fn compound_prompt(global: &str) -> String {
    format!("{REMOVE_ALL_TRAFFIC}. {global}")
}

/// Compound-edit instructions for a pose-aligned pair: remove-all prefix plus
/// the summarized global change, with the target's traffic carried by specs.
pub fn generate_pair_instructions(
    source: &SceneAnnotation,
    target: &SceneAnnotation,
    writer: &dyn InstructionWriter,
    filter: &FilterConfig,
) -> Result<PairInstructions> {
    let (Some(sg), Some(tg)) = (&source.global, &target.global) else {
        return Err(Error::invalid("both annotations need global attributes"));
    };
    let forward_changes = global_diff(sg, tg);
    let backward_changes = global_diff(tg, sg);
    let mut used_fallback = false;
    let mut phrase = |changes: &[GlobalChange]| match writer.summarize_global_change(changes) {
        Ok(s) if !s.trim().is_empty() => s,
        _ => {
            used_fallback = true;
            template_global_instruction(changes)
        }
    };
    let forward_instruction = compound_prompt(&phrase(&forward_changes));
    let backward_instruction = compound_prompt(&phrase(&backward_changes));
    Ok(PairInstructions {
        forward_instruction,
        backward_instruction,
        forward_specs: insertion_specs(target, filter),
        backward_specs: insertion_specs(source, filter),
        forward_changes,
        used_fallback,
    })
}

/// Class of an instance overlapping `bbox` with IoU at least `min_iou`, best first.
pub fn matching_instance<'a>(ann: &'a SceneAnnotation, bbox: &BBox, min_iou: f64) -> Option<&'a InstanceRecord> {
    ann.instances
        .iter()
        .map(|i| (i.bbox.iou(bbox), i))
        .filter(|(iou, _)| *iou >= min_iou)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, i)| i)
}

/// Convenience for callers holding a class only.
pub fn subject_phrase(class: ClassLabel) -> String {
    class.to_string()
}
