//! JSONL manifests of training pairs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::maskio::{deserialize_mask, serialize_mask};
use crate::types::{EditType, TrainingSample};

/// One manifest line. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub source_path: String,
    pub target_path: String,
    pub forward_instruction: String,
    pub backward_instruction: String,
    pub forward_mask_path: String,
    pub backward_mask_path: String,
    pub edit_type: EditType,
    pub split: String,
}

impl ManifestRecord {
    fn paths(&self) -> [&str; 4] {
        [
            &self.source_path,
            &self.target_path,
            &self.forward_mask_path,
            &self.backward_mask_path,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ManifestReport {
    pub written: usize,
    pub rejected: Vec<Rejection>,
}

/// Relative record paths resolve against the manifest's directory.
pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes records whose referenced files all exist; the rest are reported as
/// rejected and the stream continues.
pub fn write_manifest<I>(records: I, path: &Path) -> Result<ManifestReport>
where
    I: IntoIterator<Item = ManifestRecord>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut report = ManifestReport::default();
    for rec in records {
        if let Some(missing) = rec.paths().into_iter().find(|p| !resolve(path, p).is_file()) {
            report.rejected.push(Rejection {
                pair_id: rec.pair_id.clone(),
                reason: format!("missing file {missing}"),
            });
            continue;
        }
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        report.written += 1;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(report)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Reads any JSONL file of `T`.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads the images and masks a record points at.
pub fn load_sample(manifest_path: &Path, rec: &ManifestRecord) -> Result<TrainingSample> {
    let sample = TrainingSample {
        source_image: Image::load(&resolve(manifest_path, &rec.source_path))?,
        target_image: Image::load(&resolve(manifest_path, &rec.target_path))?,
        forward_instruction: rec.forward_instruction.clone(),
        backward_instruction: rec.backward_instruction.clone(),
        forward_mask: deserialize_mask(&resolve(manifest_path, &rec.forward_mask_path))?,
        backward_mask: deserialize_mask(&resolve(manifest_path, &rec.backward_mask_path))?,
        edit_type: rec.edit_type,
    };
    if sample.source_image.dims() != sample.target_image.dims() {
        return Err(Error::Shape(format!("{}: source and target sizes differ", rec.pair_id)));
    }
    Ok(sample)
}

/// Writes a sample's four files under `dir` (`images/` and `masks/`) and
/// returns a record with paths relative to `dir`.
pub fn save_sample(dir: &Path, pair_id: &str, split: &str, s: &TrainingSample) -> Result<ManifestRecord> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rec = ManifestRecord {
        pair_id: pair_id.to_string(),
        source_path: format!("images/{pair_id}_src.png"),
        target_path: format!("images/{pair_id}_tgt.png"),
        forward_instruction: s.forward_instruction.clone(),
        backward_instruction: s.backward_instruction.clone(),
        forward_mask_path: format!("masks/{pair_id}_fwd.lmsk"),
        backward_mask_path: format!("masks/{pair_id}_bwd.lmsk"),
        edit_type: s.edit_type,
        split: split.to_string(),
    };
    s.source_image.save_png(&dir.join(&rec.source_path))?;
    s.target_image.save_png(&dir.join(&rec.target_path))?;
    serialize_mask(&s.forward_mask, &dir.join(&rec.forward_mask_path))?;
    serialize_mask(&s.backward_mask, &dir.join(&rec.backward_mask_path))?;
    Ok(rec)
}
