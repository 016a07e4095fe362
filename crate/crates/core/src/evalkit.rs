//! Evaluation metrics: pixel distances and image-embedding similarities on
//! full images and on the edited-region crop, aggregated per edit type.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::langmask::LangMask;
use crate::manifest::{read_manifest, resolve, ManifestRecord};
use crate::maskio::deserialize_mask;
use crate::types::EditType;

/// Mean absolute and mean squared difference over all pixels and channels.
pub fn pixel_metrics(a: &Image, b: &Image) -> Result<(f64, f64)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let (mut l1, mut l2) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        l1 += d.abs();
        l2 += d * d;
    }
    Ok((l1 / n as f64, l2 / n as f64))
}

pub fn embedding_similarity(a: &Image, b: &Image, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let ea = provider.image_embed(a)?;
    let eb = provider.image_embed(b)?;
    Ok(cosine(&ea, &eb).clamp(-1.0, 1.0))
}

/// Image encoders for the two similarity columns.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub clip: &'a dyn EmbeddingProvider,
    pub dino: &'a dyn EmbeddingProvider,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub l1: f64,
    pub l2: f64,
    pub clip: f64,
    pub dino: f64,
}

pub fn image_metrics(output: &Image, truth: &Image, p: Providers<'_>) -> Result<MetricRecord> {
    let (l1, l2) = pixel_metrics(output, truth)?;
    Ok(MetricRecord {
        l1,
        l2,
        clip: embedding_similarity(output, truth, p.clip)?,
        dino: embedding_similarity(output, truth, p.dino)?,
    })
}

pub const DEFAULT_CROP_PAD: u32 = 4;

/// Tight rectangle of the mask's support, padded and clipped; `None` for a
/// blank mask.
pub fn crop_rect(mask: &LangMask, pad: u32) -> Option<BBox> {
    mask.project_binary()
        .bounding_box()
        .map(|b| b.pad_clip(pad, mask.width(), mask.height()))
}

pub fn crop_metrics(
    output: &Image,
    truth: &Image,
    mask: &LangMask,
    p: Providers<'_>,
    pad: u32,
) -> Result<Option<MetricRecord>> {
    if (mask.width(), mask.height()) != output.dims() {
        return Err(Error::Shape("mask dims differ from image".into()));
    }
    let Some(rect) = crop_rect(mask, pad) else {
        return Ok(None);
    };
    if rect == BBox::full(output.width(), output.height()) {
        return image_metrics(output, truth, p).map(Some);
    }
    image_metrics(&output.crop(&rect), &truth.crop(&rect), p).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub pair_id: String,
    pub edit_type: EditType,
    pub full: MetricRecord,
    pub crop: Option<MetricRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    FullImage,
    Crop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub edit_type: EditType,
    pub region: Region,
    pub count: usize,
    pub mean: MetricRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn row(&self, edit_type: EditType, region: Region) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.edit_type == edit_type && r.region == region)
    }
}

/// Means per (edit type, region). Rows are ordered by edit type then region;
/// crop rows only exist where some sample had a non-blank mask.
pub fn aggregate(samples: &[SampleMetrics]) -> AggregateTable {
    let mut groups: BTreeMap<(EditType, Region), Vec<MetricRecord>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.edit_type, Region::FullImage)).or_default().push(s.full);
        if let Some(c) = s.crop {
            groups.entry((s.edit_type, Region::Crop)).or_default().push(c);
        }
    }
    let rows = groups
        .into_iter()
        .map(|((edit_type, region), recs)| {
            let n = recs.len() as f64;
            let mean = |f: fn(&MetricRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
            AggregateRow {
                edit_type,
                region,
                count: recs.len(),
                mean: MetricRecord {
                    l1: mean(|r| r.l1),
                    l2: mean(|r| r.l2),
                    clip: mean(|r| r.clip),
                    dino: mean(|r| r.dino),
                },
            }
        })
        .collect();
    AggregateTable { rows }
}

pub fn evaluate_sample(
    pair_id: &str,
    edit_type: EditType,
    output: &Image,
    truth: &Image,
    mask: &LangMask,
    p: Providers<'_>,
    pad: u32,
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        pair_id: pair_id.to_string(),
        edit_type,
        full: image_metrics(output, truth, p)?,
        crop: crop_metrics(output, truth, mask, p, pad)?,
    })
}

/// Scores `{outputs_dir}/{pair_id}.png` against each record's target image,
/// cropping by the forward mask.
pub fn evaluate_manifest(
    manifest_path: &Path,
    outputs_dir: &Path,
    p: Providers<'_>,
    pad: u32,
) -> Result<(Vec<SampleMetrics>, AggregateTable)> {
    let records: Vec<ManifestRecord> = read_manifest(manifest_path)?;
    let mut per_sample = Vec::with_capacity(records.len());
    for rec in &records {
        let truth = Image::load(&resolve(manifest_path, &rec.target_path))?;
        let output = Image::load(&outputs_dir.join(format!("{}.png", rec.pair_id)))?;
        let mask = deserialize_mask(&resolve(manifest_path, &rec.forward_mask_path))?;
        per_sample.push(evaluate_sample(
            &rec.pair_id,
            rec.edit_type,
            &output,
            &truth,
            &mask,
            p,
            pad,
        )?);
    }
    let table = aggregate(&per_sample);
    Ok((per_sample, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockEmbedder;
    use crate::langmask::build_langmask;
    use crate::types::{ClassLabel, EditAction, EditSpec};

    fn img(seed: f64) -> Image {
        Image::from_fn(20, 16, |x, y| {
            [
                (x as f64 * 0.04 + seed).fract(),
                (y as f64 * 0.05 + seed * 0.5).fract(),
                0.3,
            ]
        })
    }

    fn spec(b: BBox) -> EditSpec {
        EditSpec {
            action: EditAction::Delete,
            subject_class: ClassLabel::Car,
            bbox: b,
            target_description: None,
            distance_m: 10.0,
            instruction_sentence: "delete the car".into(),
        }
    }

    #[test]
    fn constant_offset() {
        let a = Image::filled(4, 4, [0.2; 3]);
        let b = Image::filled(4, 4, [0.3; 3]);
        let (l1, l2) = pixel_metrics(&a, &b).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12);
        assert!((l2 - 0.01).abs() < 1e-12);
        assert_eq!(pixel_metrics(&a, &b).unwrap(), pixel_metrics(&b, &a).unwrap());
    }

    #[test]
    fn identical_images_are_perfect() {
        let e = MockEmbedder::new(16, 1);
        let d = MockEmbedder::dino_style(16, 2);
        let p = Providers { clip: &e, dino: &d };
        let m = image_metrics(&img(0.1), &img(0.1), p).unwrap();
        assert_eq!((m.l1, m.l2), (0.0, 0.0));
        assert!((m.clip - 1.0).abs() < 1e-12 && (m.dino - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crop_rectangle_is_padded_box() {
        let e = MockEmbedder::new(8, 0);
        let mask = build_langmask(&[spec(BBox::new(6, 5, 9, 8))], 20, 16, &e).unwrap();
        assert_eq!(crop_rect(&mask, 4), Some(BBox::new(2, 1, 13, 12)));
        let mask = build_langmask(&[spec(BBox::new(1, 0, 3, 2))], 20, 16, &e).unwrap();
        assert_eq!(crop_rect(&mask, 4), Some(BBox::new(0, 0, 7, 6)));
    }

    #[test]
    fn blank_and_full_frame_masks() {
        let e = MockEmbedder::new(8, 0);
        let p = Providers { clip: &e, dino: &e };
        let blank = LangMask::blank(20, 16, 8);
        assert!(crop_metrics(&img(0.1), &img(0.4), &blank, p, 4).unwrap().is_none());
        let full = build_langmask(&[spec(BBox::full(20, 16))], 20, 16, &e).unwrap();
        let c = crop_metrics(&img(0.1), &img(0.4), &full, p, 4).unwrap().unwrap();
        assert_eq!(c, image_metrics(&img(0.1), &img(0.4), p).unwrap());
    }

    #[test]
    fn aggregate_means_and_counts() {
        let m = |v: f64| MetricRecord {
            l1: v,
            l2: v * v,
            clip: 1.0 - v,
            dino: 1.0 - 2.0 * v,
        };
        let samples = vec![
            SampleMetrics {
                pair_id: "a".into(),
                edit_type: EditType::Local,
                full: m(0.1),
                crop: Some(m(0.3)),
            },
            SampleMetrics {
                pair_id: "b".into(),
                edit_type: EditType::Local,
                full: m(0.2),
                crop: None,
            },
            SampleMetrics {
                pair_id: "c".into(),
                edit_type: EditType::Global,
                full: m(0.4),
                crop: None,
            },
        ];
        let t = aggregate(&samples);
        let local = t.row(EditType::Local, Region::FullImage).unwrap();
        assert_eq!(local.count, 2);
        assert!((local.mean.l1 - 0.15).abs() < 1e-12);
        assert!((local.mean.l2 - 0.025).abs() < 1e-12);
        assert_eq!(t.row(EditType::Local, Region::Crop).unwrap().count, 1);
        assert!(t.row(EditType::Global, Region::Crop).is_none());
        let mut rev = samples.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev), t);
    }
}
