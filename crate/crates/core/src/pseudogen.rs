//! Pseudo-pair generation from unpaired images: global attribute edits and
//! local crop–upscale–edit–blend edits, with role assignment and masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendSet;
use crate::banks::{
    edit_sentence, global_sentence, sample_clothing, sample_light_color, sample_pedestrian_target,
    sample_vehicle_color, sample_vehicle_target,
};
use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::langmask::{blank_mask, build_langmask, BinaryMask};
use crate::poisson::{poisson_blend, PoissonConfig};
use crate::types::{
    ClassLabel, EditAction, EditSpec, EditType, GlobalCategory, InstanceRecord, SceneAnnotation, TrainingSample,
};

/// Per-image generator seeded from `(seed, image_id)`, so results do not
/// depend on which worker handles which image.
pub fn rng_for(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// One of the caption and its paraphrases, uniformly.
pub fn sample_caption<R: Rng + ?Sized>(ann: &SceneAnnotation, rng: &mut R) -> String {
    let mut pool: Vec<&String> = Vec::with_capacity(1 + ann.caption_paraphrases.len());
    if !ann.caption.is_empty() {
        pool.push(&ann.caption);
    }
    pool.extend(ann.caption_paraphrases.iter().filter(|p| !p.is_empty()));
    pool.choose(rng).map(|s| s.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalEditDraw {
    pub category: GlobalCategory,
    pub from_value: String,
    pub to_value: String,
    pub instruction: String,
}

/// Uniform category, then a uniform value different from the current one.
pub fn sample_global_edit<R: Rng + ?Sized>(ann: &SceneAnnotation, rng: &mut R) -> Result<GlobalEditDraw> {
    let global = ann
        .global
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{}: global attributes missing", ann.image_id)))?;
    let category = *GlobalCategory::ALL.choose(rng).expect("non-empty");
    let from_value = category.get(global);
    let options: Vec<&str> = category.values().into_iter().filter(|v| *v != from_value).collect();
    let to_value = *options
        .choose(rng)
        .ok_or_else(|| Error::invalid(format!("{} bank has a single value", category.phrase())))?;
    Ok(GlobalEditDraw {
        category,
        from_value: from_value.to_string(),
        to_value: to_value.to_string(),
        instruction: global_sentence(category, to_value),
    })
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum GlobalPairOutcome {
    Accepted {
        sample: TrainingSample,
        edit: GlobalEditDraw,
    },
    Dropped {
        edit: GlobalEditDraw,
        reason: String,
    },
}

/// The edited image becomes the source and the real image the target; the
/// pair is kept only if the verifier confirms same scene and applied change.
pub fn make_global_pair<R: Rng + ?Sized>(
    image: &Image,
    ann: &SceneAnnotation,
    backends: &BackendSet,
    rng: &mut R,
) -> Result<GlobalPairOutcome> {
    let edit = sample_global_edit(ann, rng)?;
    let edited = backends.generator.edit(image, &edit.instruction, None)?;
    if edited.dims() != image.dims() {
        return Err(Error::Shape("generator changed image dims".into()));
    }
    let edited = edited.clamp01();
    let verdict = backends.vlm.verify_global_edit(image, &edited, &edit.instruction)?;
    if !verdict.same_scene || !verdict.change_applied {
        let reason = if !verdict.same_scene {
            "verifier: not the same scene"
        } else {
            "verifier: change not applied"
        };
        return Ok(GlobalPairOutcome::Dropped {
            edit,
            reason: reason.to_string(),
        });
    }
    let (w, h) = image.dims();
    let dim = backends.embedder.dim();
    let sample = TrainingSample {
        source_image: edited,
        target_image: image.clone(),
        forward_instruction: global_sentence(edit.category, &edit.from_value),
        backward_instruction: global_sentence(edit.category, &edit.to_value),
        forward_mask: blank_mask(w, h, dim),
        backward_mask: blank_mask(w, h, dim),
        edit_type: EditType::Global,
    };
    Ok(GlobalPairOutcome::Accepted { sample, edit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalConfig {
    pub poisson: PoissonConfig,
    /// Segmenter mask dilation before blending, in pixels.
    pub dilation_px: u32,
    /// Probability that a deletion's pseudo image serves as ground truth.
    pub delete_as_target_probability: f64,
    /// Actions drawn uniformly for non-traffic-light instances.
    pub action_pool: Vec<EditAction>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            poisson: PoissonConfig::default(),
            dilation_px: 2,
            delete_as_target_probability: 0.5,
            action_pool: EditAction::ALL.to_vec(),
        }
    }
}

/// An object edit, the object it applies to and the appearance it replaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEdit {
    pub action: EditAction,
    pub subject_class: ClassLabel,
    /// Noun phrase for the existing subject ("car", "blue truck").
    pub subject: String,
    pub target: Option<String>,
    /// Appearance of the subject before the edit ("white car", "red").
    pub original_appearance: String,
}

impl LocalEdit {
    pub fn sentence(&self) -> String {
        edit_sentence(self.action, self.subject_class, &self.subject, self.target.as_deref())
    }

    /// The edit that undoes this one: delete ↔ insert, modify(a→b) ↔
    /// modify(b→a), replace(s→x) ↔ replace(x→s).
    pub fn inverse(&self) -> LocalEdit {
        match self.action {
            EditAction::Delete => LocalEdit {
                action: EditAction::Insert,
                subject_class: self.subject_class,
                subject: String::new(),
                target: Some(self.original_appearance.clone()),
                original_appearance: String::new(),
            },
            EditAction::Insert => {
                let added = self.target.clone().unwrap_or_default();
                LocalEdit {
                    action: EditAction::Delete,
                    subject_class: ClassLabel::from_description(&added).unwrap_or(self.subject_class),
                    subject: added.clone(),
                    target: None,
                    original_appearance: added,
                }
            }
            EditAction::Modify => LocalEdit {
                action: EditAction::Modify,
                subject_class: self.subject_class,
                subject: self.subject.clone(),
                target: Some(self.original_appearance.clone()),
                original_appearance: self.target.clone().unwrap_or_default(),
            },
            EditAction::Replace => {
                let new = self.target.clone().unwrap_or_default();
                LocalEdit {
                    action: EditAction::Replace,
                    subject_class: ClassLabel::from_description(&new).unwrap_or(self.subject_class),
                    subject: new.clone(),
                    target: Some(self.original_appearance.clone()),
                    original_appearance: new,
                }
            }
        }
    }

    pub fn to_spec(&self, bbox: BBox, distance_m: f64) -> EditSpec {
        EditSpec {
            action: self.action,
            subject_class: self.subject_class,
            bbox,
            target_description: self.target.clone(),
            distance_m,
            instruction_sentence: self.sentence(),
        }
    }
}

/// Appearance attribute the modify action changes for this class.
fn modified_attribute(inst: &InstanceRecord) -> Option<&str> {
    let key = if inst.class_label.is_pedestrian() {
        "clothing"
    } else {
        "color"
    };
    inst.attributes.get(key).map(String::as_str)
}

/// Samples the action and target for one instance.
pub fn sample_local_edit<R: Rng + ?Sized>(inst: &InstanceRecord, pool: &[EditAction], rng: &mut R) -> LocalEdit {
    let class = inst.class_label;
    let subject = class.to_string();
    if class.is_traffic_light() {
        let current = modified_attribute(inst);
        return LocalEdit {
            action: EditAction::Modify,
            subject_class: class,
            subject,
            target: Some(sample_light_color(rng, current)),
            original_appearance: current.unwrap_or("unlit").to_string(),
        };
    }
    let action = *pool.choose(rng).unwrap_or(&EditAction::Modify);
    let target = match (action, class.is_pedestrian()) {
        (EditAction::Delete, _) => None,
        (EditAction::Modify, true) => Some(sample_clothing(rng)),
        (EditAction::Modify, false) => Some(sample_vehicle_color(rng, modified_attribute(inst))),
        (_, true) => Some(sample_pedestrian_target(rng)),
        (_, false) => Some(sample_vehicle_target(rng)),
    };
    let original_appearance = match action {
        EditAction::Modify => modified_attribute(inst)
            .unwrap_or("its original appearance")
            .to_string(),
        _ => inst.appearance(),
    };
    LocalEdit {
        action,
        subject_class: class,
        subject,
        target,
        original_appearance,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalProvenance {
    pub image_id: String,
    pub instance_id: String,
    /// Edit applied to the real image to produce the pseudo image.
    pub applied: LocalEdit,
    /// True when the pseudo image is the ground truth `x_t`.
    pub pseudo_is_target: bool,
    pub region: Option<BBox>,
    pub blend_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct LocalPair {
    pub sample: TrainingSample,
    pub provenance: LocalProvenance,
    /// The pseudo-edited full image, whichever role it took.
    pub pseudo_image: Image,
}

/// Instances the local generator may pick: editable class, known distance,
/// box clear of the one-pixel image border.
pub fn editable_instances(ann: &SceneAnnotation) -> Vec<&InstanceRecord> {
    ann.instances
        .iter()
        .filter(|i| i.class_label.is_editable() && i.distance_m.is_some())
        .filter(|i| {
            let inner = BBox::new(1, 1, ann.width as u32 - 1, ann.height as u32 - 1);
            i.bbox.intersect(&inner).is_some()
        })
        .collect()
}

/// Segmenter mask in frame coordinates, dilated by `px` (square element),
/// clipped to the box and to the frame inset by one pixel.
pub fn blend_region(seg: &BinaryMask, bbox: &BBox, width: usize, height: usize, px: u32) -> BinaryMask {
    let mut region = BinaryMask::new(width, height);
    let r = px as i64;
    let clip = bbox
        .intersect(&BBox::new(1, 1, width as u32 - 1, height as u32 - 1))
        .unwrap_or(BBox::new(0, 0, 0, 0));
    for (x, y) in clip.pixels() {
        let lx = x as i64 - bbox.x0 as i64;
        let ly = y as i64 - bbox.y0 as i64;
        let hit = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (sx, sy) = (lx + dx, ly + dy);
                sx >= 0
                    && sy >= 0
                    && (sx as usize) < seg.width
                    && (sy as usize) < seg.height
                    && seg.get(sx as usize, sy as usize)
            })
        });
        region.set(x, y, hit);
    }
    region
}

/// Crop, upscale, edit, downscale and blend one object edit into the image,
/// then assign roles and build both masks.
pub fn make_local_pair<R: Rng + ?Sized>(
    image: &Image,
    ann: &SceneAnnotation,
    backends: &BackendSet,
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<LocalPair> {
    let (w, h) = image.dims();
    if (ann.width, ann.height) != (w, h) {
        return Err(Error::Shape("annotation dims differ from image".into()));
    }
    let candidates = editable_instances(ann);
    let inst = *candidates
        .choose(rng)
        .ok_or_else(|| Error::invalid(format!("{}: no editable instance", ann.image_id)))?;
    let applied = sample_local_edit(inst, &cfg.action_pool, rng);
    let pseudo_is_target = applied.action == EditAction::Delete && rng.gen_bool(cfg.delete_as_target_probability);
    let caption = sample_caption(ann, rng);

    let bbox = inst.bbox;
    let crop = image.crop(&bbox);
    let enhanced = backends.upscaler.upscale(&crop)?;
    let edited = backends.generator.edit(&enhanced, &applied.sentence(), None)?;
    let patch = edited.resize_bicubic(crop.width(), crop.height());
    let mut source = image.clone();
    source.paste(&patch, bbox.x0 as usize, bbox.y0 as usize);

    let seg = backends.segmenter.segment(image, &bbox)?;
    let region = blend_region(&seg, &bbox, w, h, cfg.dilation_px);
    let blended = poisson_blend(image, &source, &region, &cfg.poisson)?;
    let mut pseudo = blended.image;
    for (x, y) in bbox.pixels() {
        if region.get(x, y) {
            let p = pseudo.pixel(x, y).map(|v| v.clamp(0.0, 1.0));
            pseudo.put_pixel(x, y, p);
        }
    }

    let distance = inst.distance_m.unwrap_or_default();
    let applied_spec = applied.to_spec(bbox, distance);
    let inverse_spec = applied.inverse().to_spec(bbox, distance);
    let (source_image, target_image, forward_spec, backward_spec) = if pseudo_is_target {
        (image.clone(), pseudo.clone(), applied_spec, inverse_spec)
    } else {
        (pseudo.clone(), image.clone(), inverse_spec, applied_spec)
    };
    let embedder = backends.embedder.as_ref();
    let sample = TrainingSample {
        source_image,
        target_image,
        forward_instruction: caption.clone(),
        backward_instruction: caption,
        forward_mask: build_langmask(&[forward_spec], w, h, embedder)?,
        backward_mask: build_langmask(&[backward_spec], w, h, embedder)?,
        edit_type: EditType::Local,
    };
    Ok(LocalPair {
        sample,
        provenance: LocalProvenance {
            image_id: ann.image_id.clone(),
            instance_id: inst.instance_id.clone(),
            applied,
            pseudo_is_target,
            region: region.bounding_box(),
            blend_iterations: blended.iterations,
        },
        pseudo_image: pseudo,
    })
}
