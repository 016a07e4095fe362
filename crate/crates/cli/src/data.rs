use std::path::Path;

use anyhow::{bail, Context, Result};

use drivedit_core::descriptor::{annotate, DescriptorConfig};
use drivedit_core::manifest::{read_jsonl, write_jsonl};
use drivedit_core::maskio::serialize_mask;
use drivedit_core::pairing::{pair_logs, PairingConfig};
use drivedit_core::types::validate_log;
use drivedit_core::{build_langmask, EditSpec, FramePose, Image, SceneAnnotation};

use crate::load_backends;

pub fn pair(
    poses: &Path,
    threshold: f64,
    radius: f64,
    wrap_angles: bool,
    traversals: Option<Vec<String>>,
    out: &Path,
) -> Result<()> {
    let log: Vec<FramePose> = read_jsonl(poses)?;
    validate_log(&log)?;
    let cfg = PairingConfig {
        distance_threshold: threshold,
        radius_m: radius,
        traversal_filter: traversals,
        wrap_angles,
    };
    let pairs = pair_logs(&log, &cfg)?;
    write_jsonl(out, &pairs)?;
    tracing::info!(frames = log.len(), pairs = pairs.len(), "pairing done");
    Ok(())
}

pub fn describe(images: &Path, backends: Option<&Path>, out: &Path) -> Result<()> {
    let backends = load_backends(backends)?;
    let mut files: Vec<_> = std::fs::read_dir(images)
        .with_context(|| format!("reading {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let cfg = DescriptorConfig::default();
    let mut anns = Vec::with_capacity(files.len());
    for f in &files {
        let id = f.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?;
        let image = Image::load(f)?;
        let ann = annotate(id, &image, &backends, &cfg)?;
        if !ann.missing.is_empty() {
            tracing::warn!(image = id, missing = ?ann.missing, "annotation incomplete");
        }
        anns.push(ann);
    }
    write_jsonl(out, &anns)?;
    tracing::info!(images = anns.len(), "annotations written");
    Ok(())
}

pub fn mask(annotation: &Path, edits: &Path, backends: Option<&Path>, out: &Path, png: Option<&Path>) -> Result<()> {
    let ann: SceneAnnotation = serde_json::from_slice(&std::fs::read(annotation)?)?;
    let specs: Vec<EditSpec> = serde_json::from_slice(&std::fs::read(edits)?)?;
    if ann.width == 0 || ann.height == 0 {
        bail!("annotation {} has no image size", ann.image_id);
    }
    let backends = load_backends(backends)?;
    let m = build_langmask(&specs, ann.width, ann.height, backends.embedder.as_ref())?;
    let bytes = serialize_mask(&m, out)?;
    if let Some(p) = png {
        std::fs::write(p, m.project_binary().encode_png()?)?;
    }
    tracing::info!(specs = specs.len(), bytes, "mask written");
    Ok(())
}
