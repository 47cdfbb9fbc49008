//! Session files on disk, one JSON document per session.

use std::fs;
use std::path::{Path, PathBuf};

use coconstruct_core::session::{load_session, save_session, SessionState};

use crate::error::ErrorEnvelope;

const CURRENT: &str = "current";

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

fn io_error(path: &Path, err: impl std::fmt::Display) -> ErrorEnvelope {
    ErrorEnvelope::new("io", format!("{}: {err}", path.display()))
}

impl Store {
    /// Opens `dir`, creating it, and checks that it is writable.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ErrorEnvelope> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"").map_err(|e| io_error(&dir, format!("storage directory is not writable: {e}")))?;
        let _ = fs::remove_file(&probe);
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn check_id(id: &str) -> Result<(), ErrorEnvelope> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(ErrorEnvelope::new("validation", format!("invalid session id {id:?}")))
        }
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn exists(&self, id: &str) -> bool {
        Self::check_id(id).is_ok() && self.path(id).is_file()
    }

    pub fn save(&self, state: &SessionState) -> Result<(), ErrorEnvelope> {
        Self::check_id(&state.session_id)?;
        save_session(state, &self.path(&state.session_id)).map_err(ErrorEnvelope::from)
    }

    pub fn load(&self, id: &str) -> Result<SessionState, ErrorEnvelope> {
        Self::check_id(id)?;
        if !self.path(id).is_file() {
            return Err(ErrorEnvelope::unknown_session(id));
        }
        load_session(&self.path(id)).map_err(ErrorEnvelope::from)
    }

    pub fn list(&self) -> Result<Vec<String>, ErrorEnvelope> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| io_error(&self.dir, e))? {
            let path = entry.map_err(|e| io_error(&self.dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn set_current(&self, id: &str) -> Result<(), ErrorEnvelope> {
        let path = self.dir.join(CURRENT);
        fs::write(&path, id).map_err(|e| io_error(&path, e))
    }

    pub fn current(&self) -> Option<String> {
        fs::read_to_string(self.dir.join(CURRENT))
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
    }
}
