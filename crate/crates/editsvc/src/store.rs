//! In-memory session table with optional on-disk mirroring.
//!
//! Layout per session: `{dir}/{id}/session.json`, `base.png`, and
//! `history/{n}.lmsk` plus `history/{n}.png` for every render.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use drivedit_core::maskio::{decode_mask, encode_mask};
use drivedit_core::{EditSpec, Error, Image, Result, SceneAnnotation};

use crate::session::{EditSession, HistoryEntry};

pub type SessionHandle = Arc<Mutex<EditSession>>;

#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    id: String,
    annotation: SceneAnnotation,
    specs: Vec<EditSpec>,
    prompts: Vec<String>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every session found under `dir` (created if missing).
    pub fn persistent(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.join("session.json").is_file() {
                let s = load_session(&path)?;
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    pub fn insert(&self, session: EditSession) -> Result<SessionHandle> {
        self.save(&session)?;
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, handle.clone());
        Ok(handle)
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the session's state; a no-op for in-memory stores. History
    /// files already on disk are not rewritten.
    pub fn save(&self, s: &EditSession) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let root = dir.join(&s.id);
        let hist = root.join("history");
        std::fs::create_dir_all(&hist).map_err(|e| Error::io(&hist, e))?;
        let base = root.join("base.png");
        if !base.exists() {
            s.image.save_png(&base)?;
        }
        for (n, h) in s.history().iter().enumerate() {
            let m = hist.join(format!("{n}.lmsk"));
            if !m.exists() {
                std::fs::write(&m, encode_mask(&h.mask)?).map_err(|e| Error::io(&m, e))?;
                h.preview.save_png(&hist.join(format!("{n}.png")))?;
            }
        }
        let file = SessionFile {
            id: s.id.clone(),
            annotation: s.annotation.clone(),
            specs: s.specs.clone(),
            prompts: s.history().iter().map(|h| h.prompt.clone()).collect(),
        };
        let tmp = root.join("session.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&tmp, e))?;
        let dst = root.join("session.json");
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}

fn load_session(root: &Path) -> Result<EditSession> {
    let path = root.join("session.json");
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let f: SessionFile = serde_json::from_slice(&text)?;
    let image = Image::load(&root.join("base.png"))?;
    let mut history = Vec::with_capacity(f.prompts.len());
    for (n, prompt) in f.prompts.into_iter().enumerate() {
        let m = root.join("history").join(format!("{n}.lmsk"));
        let bytes = std::fs::read(&m).map_err(|e| Error::io(&m, e))?;
        history.push(HistoryEntry {
            prompt,
            mask: decode_mask(&bytes)?,
            preview: Image::load(&root.join("history").join(format!("{n}.png")))?,
        });
    }
    Ok(EditSession::restore(f.id, image, f.annotation, f.specs, history))
}
