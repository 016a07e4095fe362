//! LangMask tensors: per-pixel instruction embeddings inside edit boxes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::image::{encode_binary_png, BBox};
use crate::types::{EditSpec, InstanceRecord};

/// `height × width × dim` float tensor, row-major `(y, x, channel)`, together
/// with the specs that produced it in assembly order.
#[derive(Clone, Debug, PartialEq)]
pub struct LangMask {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f32>,
    specs: Vec<EditSpec>,
}

impl LangMask {
    /// All-zero mask with no specs.
    pub fn blank(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
            specs: Vec::new(),
        }
    }

    pub fn from_parts(width: usize, height: usize, dim: usize, data: Vec<f32>, specs: Vec<EditSpec>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::Shape(format!(
                "mask {height}x{width}x{dim} needs {} values, got {}",
                width * height * dim,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
            specs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn specs(&self) -> &[EditSpec] {
        &self.specs
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn project_binary(&self) -> BinaryMask {
        let bits = self
            .data
            .chunks_exact(self.dim.max(1))
            .map(|px| px.iter().any(|&v| v != 0.0))
            .collect();
        BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Structural invariant: nothing outside the union of spec boxes is set.
    pub fn check_support(&self) -> Result<()> {
        for y in 0..self.height {
            for x in 0..self.width {
                let inside = self.specs.iter().any(|s| s.bbox.contains(x, y));
                if !inside && self.pixel(x, y).iter().any(|&v| v != 0.0) {
                    return Err(Error::invalid(format!("pixel ({x}, {y}) set outside every spec box")));
                }
            }
        }
        Ok(())
    }
}

/// `height × width` boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Rasterized union of boxes.
    pub fn from_boxes<'a>(width: usize, height: usize, boxes: impl IntoIterator<Item = &'a BBox>) -> Self {
        let mut m = Self::new(width, height);
        for b in boxes {
            for (x, y) in b.pixels() {
                m.set(x, y, true);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding rectangle of the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let (x, y) = (x as u32, y as u32);
                    b = Some(match b {
                        None => BBox::new(x, y, x + 1, y + 1),
                        Some(b) => BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x + 1), b.y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_binary_png(self.width, self.height, &self.bits)
    }
}

/// Thresholds for dropping instances before mask assembly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Instances farther than this are dropped unless large.
    pub max_distance_m: f64,
    /// Area fraction that counts as "significant" for far instances.
    pub significant_area_frac: f64,
    /// A box this close to any border is a truncation candidate.
    pub border_margin_px: u32,
    /// Truncation candidates smaller than this area fraction are dropped.
    pub truncated_area_frac: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_distance_m: 50.0,
            significant_area_frac: 0.02,
            border_margin_px: 2,
            truncated_area_frac: 0.005,
        }
    }
}

impl FilterConfig {
    pub fn keeps(&self, inst: &InstanceRecord, width: usize, height: usize) -> bool {
        let image_area = (width * height) as f64;
        let frac = inst.bbox.area() as f64 / image_area;
        let far = inst.distance_m.is_some_and(|d| d > self.max_distance_m);
        if far && frac < self.significant_area_frac {
            return false;
        }
        let m = self.border_margin_px;
        let b = &inst.bbox;
        let near_border = b.x0 <= m || b.y0 <= m || b.x1 + m >= width as u32 || b.y1 + m >= height as u32;
        !(near_border && frac < self.truncated_area_frac)
    }
}

/// Drops far-and-small and truncated instances. Overlapping boxes all survive.
pub fn filter_instances(
    instances: &[InstanceRecord],
    width: usize,
    height: usize,
    cfg: &FilterConfig,
) -> Vec<InstanceRecord> {
    instances
        .iter()
        .filter(|i| cfg.keeps(i, width, height))
        .cloned()
        .collect()
}

pub fn blank_mask(width: usize, height: usize, dim: usize) -> LangMask {
    LangMask::blank(width, height, dim)
}

/// Farthest first; equal distances put the larger box first, then the
/// remaining fields decide so the order is total.
fn assembly_order(a: &EditSpec, b: &EditSpec) -> Ordering {
    b.distance_m
        .total_cmp(&a.distance_m)
        .then_with(|| b.bbox.area().cmp(&a.bbox.area()))
        .then_with(|| a.instruction_sentence.cmp(&b.instruction_sentence))
        .then_with(|| (a.bbox.y0, a.bbox.x0, a.bbox.y1, a.bbox.x1).cmp(&(b.bbox.y0, b.bbox.x0, b.bbox.y1, b.bbox.x1)))
        .then_with(|| a.action.cmp(&b.action))
        .then_with(|| a.subject_class.cmp(&b.subject_class))
        .then_with(|| a.target_description.cmp(&b.target_description))
}

/// Writes each spec's sentence embedding into its box, farthest spec first so
/// nearer objects overwrite farther ones.
pub fn build_langmask(
    specs: &[EditSpec],
    width: usize,
    height: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<LangMask> {
    let dim = provider.dim();
    for spec in specs {
        spec.validate()?;
        spec.bbox.check_in(width, height)?;
    }
    let mut ordered = specs.to_vec();
    ordered.sort_by(assembly_order);

    let mut mask = LangMask::blank(width, height, dim);
    for spec in &ordered {
        let emb = provider.text_embed(&spec.instruction_sentence)?;
        if emb.len() != dim {
            return Err(Error::Shape(format!(
                "embedding has {} channels, mask has {dim}",
                emb.len()
            )));
        }
        for (x, y) in spec.bbox.pixels() {
            let i = (y * width + x) * dim;
            mask.data[i..i + dim].copy_from_slice(&emb);
        }
    }
    mask.specs = ordered;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::embed::MockEmbedder;
    use crate::types::{ClassLabel, EditAction};

    fn inst(bbox: BBox, distance: f64) -> InstanceRecord {
        InstanceRecord {
            instance_id: "i".into(),
            class_label: ClassLabel::Car,
            bbox,
            distance_m: Some(distance),
            attributes: BTreeMap::new(),
        }
    }

    fn spec(bbox: BBox, distance: f64, sentence: &str) -> EditSpec {
        EditSpec {
            action: EditAction::Insert,
            subject_class: ClassLabel::Car,
            bbox,
            target_description: Some("white car".into()),
            distance_m: distance,
            instruction_sentence: sentence.into(),
        }
    }

    #[test]
    fn far_small_instance_excluded() {
        // 100x100 image, 0.1% area = 10 px.
        let cfg = FilterConfig::default();
        let kept = filter_instances(&[inst(BBox::new(40, 40, 45, 42), 60.0)], 100, 100, &cfg);
        assert!(kept.is_empty());
    }

    #[test]
    fn far_large_instance_retained() {
        // 5% of 100x100 = 500 px: 25x20 box.
        let cfg = FilterConfig::default();
        let kept = filter_instances(&[inst(BBox::new(30, 30, 55, 50), 60.0)], 100, 100, &cfg);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn truncated_instance_excluded() {
        // flush to the left edge, 0.2% = 20 px.
        let cfg = FilterConfig::default();
        let kept = filter_instances(&[inst(BBox::new(0, 40, 4, 45), 10.0)], 100, 100, &cfg);
        assert!(kept.is_empty());
        // same size away from the border survives
        let kept = filter_instances(&[inst(BBox::new(20, 40, 24, 45), 10.0)], 100, 100, &cfg);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn overlapping_instances_all_preserved() {
        let cfg = FilterConfig::default();
        let a = inst(BBox::new(10, 10, 40, 40), 20.0);
        let b = inst(BBox::new(20, 20, 50, 50), 25.0);
        assert_eq!(filter_instances(&[a, b], 100, 100, &cfg).len(), 2);
    }

    #[test]
    fn empty_specs_give_zero_mask() {
        let p = MockEmbedder::default();
        let m = build_langmask(&[], 6, 5, &p).unwrap();
        assert!(m.is_blank());
        assert_eq!(m.data().len(), 6 * 5 * 64);
        assert_eq!(m.project_binary().count(), 0);
    }

    #[test]
    fn single_box_pixels() {
        let p = MockEmbedder::default();
        // rows 2-4, cols 3-6 inclusive
        let s = spec(BBox::new(3, 2, 7, 5), 12.0, "insert a white car");
        let m = build_langmask(std::slice::from_ref(&s), 10, 8, &p).unwrap();
        let emb = p.text_embed(&s.instruction_sentence).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let inside = (2..=4).contains(&y) && (3..=6).contains(&x);
                if inside {
                    assert_eq!(m.pixel(x, y), emb.as_slice());
                } else {
                    assert!(m.pixel(x, y).iter().all(|&v| v == 0.0));
                }
            }
        }
        m.check_support().unwrap();
    }

    #[test]
    fn nearer_spec_wins_overlap() {
        let p = MockEmbedder::default();
        let far = spec(BBox::new(0, 0, 6, 6), 30.0, "insert a red car");
        let near = spec(BBox::new(3, 3, 8, 8), 10.0, "insert a blue car");
        let m = build_langmask(&[near.clone(), far.clone()], 8, 8, &p).unwrap();
        let e_near = p.text_embed(&near.instruction_sentence).unwrap();
        let e_far = p.text_embed(&far.instruction_sentence).unwrap();
        for (x, y) in BBox::new(3, 3, 6, 6).pixels() {
            assert_eq!(m.pixel(x, y), e_near.as_slice());
        }
        assert_eq!(m.pixel(0, 0), e_far.as_slice());
        assert_eq!(m.specs()[0], far);
        assert_eq!(m.specs()[1], near);
    }

    #[test]
    fn out_of_bounds_spec_rejected() {
        let p = MockEmbedder::default();
        let s = spec(BBox::new(3, 2, 11, 5), 12.0, "insert a white car");
        assert!(build_langmask(&[s], 10, 8, &p).is_err());
    }

    #[test]
    fn projection_of_disjoint_boxes_is_union() {
        let p = MockEmbedder::default();
        let a = spec(BBox::new(0, 0, 2, 2), 5.0, "insert a red car");
        let b = spec(BBox::new(4, 3, 6, 6), 7.0, "insert a blue car");
        let m = build_langmask(&[a.clone(), b.clone()], 7, 7, &p).unwrap();
        assert_eq!(m.project_binary(), BinaryMask::from_boxes(7, 7, [&a.bbox, &b.bbox]));
        assert_eq!(m.project_binary().bounding_box(), Some(BBox::new(0, 0, 6, 6)));
    }

    #[test]
    fn blank_mask_is_zero() {
        let m = blank_mask(4, 4, 8);
        assert!(m.is_blank());
        assert!(m.specs().is_empty());
        let norm: f32 = m.pixel(2, 3).iter().map(|v| v * v).sum();
        assert_eq!(norm, 0.0);
    }
}
