//! Edit sessions without any HTTP concerns.

use serde::{Deserialize, Serialize};

use drivedit_core::backends::BackendSet;
use drivedit_core::banks::edit_sentence;
use drivedit_core::descriptor::{annotate, DescriptorConfig};
use drivedit_core::{
    build_langmask, BBox, ClassLabel, EditAction, EditSpec, Error, Image, LangMask, Result, SceneAnnotation,
};

/// Overlap needed before a drawn box inherits an annotated instance's identity.
pub const INSTANCE_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub prompt: String,
    pub mask: LangMask,
    pub preview: Image,
}

#[derive(Clone, Debug)]
pub struct EditSession {
    pub id: String,
    pub image: Image,
    pub annotation: SceneAnnotation,
    pub specs: Vec<EditSpec>,
    history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub bbox: BBox,
    pub action: EditAction,
    #[serde(default)]
    pub target_description: Option<String>,
}

impl EditSession {
    pub fn create(
        id: String,
        image_id: &str,
        image: Image,
        backends: &BackendSet,
        cfg: &DescriptorConfig,
    ) -> Result<Self> {
        let annotation = annotate(image_id, &image, backends, cfg)?;
        Ok(Self {
            id,
            image,
            annotation,
            specs: Vec::new(),
            history: Vec::new(),
        })
    }

    pub(crate) fn restore(
        id: String,
        image: Image,
        annotation: SceneAnnotation,
        specs: Vec<EditSpec>,
        history: Vec<HistoryEntry>,
    ) -> Self {
        Self {
            id,
            image,
            annotation,
            specs,
            history,
        }
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Builds, validates and appends one spec. Nothing changes on error.
    pub fn add_edit(&mut self, req: &EditRequest, backends: &BackendSet) -> Result<EditSpec> {
        let (w, h) = self.image.dims();
        req.bbox.check_in(w, h)?;
        if req.bbox.is_empty() {
            return Err(Error::invalid("empty edit box"));
        }
        let target = req
            .target_description
            .as_deref()
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        if req.action.needs_target() && target.is_none() {
            return Err(Error::invalid(format!(
                "{} edit requires a target description",
                req.action
            )));
        }
        if !req.action.needs_target() && req.target_description.is_some() {
            return Err(Error::invalid("delete edit must not carry a target description"));
        }

        let known = self
            .annotation
            .instances
            .iter()
            .map(|i| (i.bbox.iou(&req.bbox), i))
            .filter(|(iou, _)| *iou >= INSTANCE_IOU)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, i)| i);

        let (subject_class, subject, distance) = if req.action == EditAction::Insert {
            let t = target.as_deref().unwrap_or_default();
            let class = ClassLabel::from_description(t)
                .filter(ClassLabel::is_editable)
                .ok_or_else(|| {
                    Error::invalid(format!("cannot insert \"{t}\": not a vehicle, person or traffic light"))
                })?;
            (class, String::new(), self.box_depth(&req.bbox, backends)?)
        } else if let Some(inst) = known {
            let d = match inst.distance_m {
                Some(d) => d,
                None => self.box_depth(&req.bbox, backends)?,
            };
            (inst.class_label, inst.class_label.to_string(), d)
        } else {
            let subject = backends.captioner.describe_subject(&self.image.crop(&req.bbox))?;
            let class = ClassLabel::from_description(&subject)
                .ok_or_else(|| Error::invalid(format!("could not classify the selected region (\"{subject}\")")))?;
            (class, subject, self.box_depth(&req.bbox, backends)?)
        };

        let spec = EditSpec {
            action: req.action,
            subject_class,
            bbox: req.bbox,
            instruction_sentence: edit_sentence(req.action, subject_class, &subject, target.as_deref()),
            target_description: target,
            distance_m: distance,
        };
        spec.validate()?;
        self.specs.push(spec.clone());
        Ok(spec)
    }

    /// Mean depth-backend value over a drawn box that matches no instance.
    fn box_depth(&self, bbox: &BBox, backends: &BackendSet) -> Result<f64> {
        let depth = backends.depth.depth(&self.image)?;
        let crop = depth.crop(bbox);
        let d = crop.data().iter().sum::<f64>() / crop.data().len() as f64;
        Ok(d.max(0.0))
    }

    pub fn mask(&self, backends: &BackendSet) -> Result<LangMask> {
        let (w, h) = self.image.dims();
        build_langmask(&self.specs, w, h, backends.embedder.as_ref())
    }

    pub fn push_history(&mut self, entry: HistoryEntry) {
        self.history.push(entry);
    }
}
