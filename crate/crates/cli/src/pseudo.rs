use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use drivedit_core::manifest::{read_jsonl, read_manifest, resolve, save_sample, write_jsonl, write_manifest};
use drivedit_core::pseudogen::{
    editable_instances, make_global_pair, make_local_pair, rng_for, GlobalPairOutcome, LocalConfig, LocalProvenance,
};
use drivedit_core::qc::{run_qc, IntendedEdit, QcConfig, QcVerdict};
use drivedit_core::{Error, Image, SceneAnnotation};

use crate::{load_backends, PseudoKind};

/// What the QC step needs per pair: which file is the real image, which the
/// edit, and what the edit was meant to do.
#[derive(Serialize, Deserialize)]
pub struct QcInput {
    pub pair_id: String,
    pub original_path: String,
    pub edited_path: String,
    pub intent: IntendedEdit,
}

#[derive(Serialize)]
struct Dropped {
    image_id: String,
    reason: String,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    pair_id: &'a str,
    #[serde(flatten)]
    verdict: &'a QcVerdict,
}

pub fn pseudogen(
    kind: PseudoKind,
    annotations: &Path,
    images: Option<&Path>,
    backends: Option<&Path>,
    local_config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let backends = load_backends(backends)?;
    let anns: Vec<SceneAnnotation> = read_jsonl(annotations)?;
    let image_dir: PathBuf = match images {
        Some(d) => d.to_path_buf(),
        None => annotations.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let cfg: LocalConfig = match local_config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => LocalConfig::default(),
    };
    std::fs::create_dir_all(out)?;

    let mut records = Vec::new();
    let mut qc_inputs = Vec::new();
    let mut provenance: Vec<LocalProvenance> = Vec::new();
    let mut dropped = Vec::new();
    for ann in &anns {
        let path = image_dir.join(format!("{}.png", ann.image_id));
        let image = Image::load(&path).with_context(|| format!("image for {}", ann.image_id))?;
        let mut rng = rng_for(seed, &ann.image_id);
        let drop = |reason: String| Dropped {
            image_id: ann.image_id.clone(),
            reason,
        };
        match kind {
            PseudoKind::Global => match make_global_pair(&image, ann, &backends, &mut rng) {
                Ok(GlobalPairOutcome::Accepted { sample, .. }) => {
                    let rec = save_sample(out, &format!("{}_global", ann.image_id), "train", &sample)?;
                    qc_inputs.push(QcInput {
                        pair_id: rec.pair_id.clone(),
                        original_path: rec.target_path.clone(),
                        edited_path: rec.source_path.clone(),
                        intent: IntendedEdit::Global,
                    });
                    records.push(rec);
                }
                Ok(GlobalPairOutcome::Dropped { reason, .. }) => dropped.push(drop(reason)),
                Err(e) => dropped.push(drop(e.to_string())),
            },
            PseudoKind::Local => {
                if editable_instances(ann).is_empty() {
                    dropped.push(drop("no editable instance".into()));
                    continue;
                }
                let pair = match make_local_pair(&image, ann, &backends, &cfg, &mut rng) {
                    Ok(p) => p,
                    Err(e @ (Error::Blend(_) | Error::Backend { .. })) => {
                        dropped.push(drop(e.to_string()));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let rec = save_sample(
                    out,
                    &format!("{}_{}", ann.image_id, pair.provenance.instance_id.replace('/', "_")),
                    "train",
                    &pair.sample,
                )?;
                let applied = &pair.provenance.applied;
                let bbox = pair.sample.forward_mask.specs()[0].bbox;
                let (original_path, edited_path) = if pair.provenance.pseudo_is_target {
                    (rec.source_path.clone(), rec.target_path.clone())
                } else {
                    (rec.target_path.clone(), rec.source_path.clone())
                };
                match IntendedEdit::from_local(applied.action, applied.subject_class, bbox, applied.target.as_deref()) {
                    Some(intent) => qc_inputs.push(QcInput {
                        pair_id: rec.pair_id.clone(),
                        original_path,
                        edited_path,
                        intent,
                    }),
                    None => tracing::warn!(pair = rec.pair_id, "no QC gate for this edit"),
                }
                provenance.push(pair.provenance);
                records.push(rec);
            }
        }
    }
    let manifest = out.join("manifest.jsonl");
    let report = write_manifest(records, &manifest)?;
    write_jsonl(&out.join("qc_inputs.jsonl"), &qc_inputs)?;
    write_jsonl(&out.join("dropped.jsonl"), &dropped)?;
    if matches!(kind, PseudoKind::Local) {
        write_jsonl(&out.join("provenance.jsonl"), &provenance)?;
    }
    tracing::info!(written = report.written, dropped = dropped.len(), "pseudo pairs done");
    Ok(())
}

pub fn qc(input: &Path, backends: Option<&Path>, report: &Path) -> Result<()> {
    let backends = load_backends(backends)?;
    let cfg = QcConfig::default();
    let manifest = input.join("manifest.jsonl");
    let inputs: Vec<QcInput> = read_jsonl(&input.join("qc_inputs.jsonl"))?;
    let mut lines = Vec::with_capacity(inputs.len());
    for q in &inputs {
        let original = Image::load(&resolve(&manifest, &q.original_path))?;
        let edited = Image::load(&resolve(&manifest, &q.edited_path))?;
        let v = run_qc(&original, &edited, &q.intent, backends.vlm.as_ref(), &cfg)?;
        lines.push((q.pair_id.clone(), v));
    }
    let out: Vec<ReportLine> = lines
        .iter()
        .map(|(id, v)| ReportLine {
            pair_id: id,
            verdict: v,
        })
        .collect();
    write_jsonl(report, &out)?;
    let keep: BTreeSet<&str> = lines
        .iter()
        .filter(|(_, v)| v.accepted)
        .map(|(id, _)| id.as_str())
        .collect();
    let accepted = read_manifest(&manifest)?
        .into_iter()
        .filter(|r| keep.contains(r.pair_id.as_str()));
    let written = write_manifest(accepted, &input.join("manifest.accepted.jsonl"))?.written;
    tracing::info!(checked = lines.len(), accepted = written, "qc done");
    Ok(())
}
