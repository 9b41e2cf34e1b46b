//! One directory per configuration fingerprint.
//!
//! ```text
//! <runs>/<fp[0..16]>/run.lock
//!                    config.json       state.json        items.jsonl
//!                    transcripts.jsonl selections.jsonl  adapted.jsonl
//!                    predictions.jsonl report.json       report.csv  pairs.csv
//! ```
//!
//! `items.jsonl` is the resume checkpoint: one finished item per line,
//! appended as workers complete them.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::pipeline::{ItemKey, ItemRecord};

use super::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Ingested,
    Indexed,
    Selected,
    Adapted,
    Composed,
    Evaluated,
}

impl RunPhase {
    pub const ALL: [RunPhase; 6] = [
        RunPhase::Ingested,
        RunPhase::Indexed,
        RunPhase::Selected,
        RunPhase::Adapted,
        RunPhase::Composed,
        RunPhase::Evaluated,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub fingerprint: String,
    pub phase: Option<RunPhase>,
    /// Items recorded in the checkpoint when the phase was last written.
    pub items_done: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), RunError> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row).map_err(|e| io_err(path, e))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub struct RunDir {
    root: PathBuf,
    _lock: File,
    checkpoint: Mutex<Option<File>>,
}

impl RunDir {
    /// Creates the directory if needed and takes its lock.
    pub fn open(root: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let lock_path = root.join("run.lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| io_err(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                return Err(RunError::User(format!("{} is in use by another run", root.display())))
            }
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            _lock: lock,
            checkpoint: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn state(&self) -> Result<Option<RunState>, RunError> {
        let p = self.path("state.json");
        if !p.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        serde_json::from_str(&raw).map(Some).map_err(|e| io_err(&p, e))
    }

    /// Records `phase`; never moves backwards.
    pub fn advance(&self, fingerprint: &str, phase: RunPhase, items_done: usize) -> Result<RunState, RunError> {
        let prior = self.state()?.filter(|s| s.fingerprint == fingerprint);
        let phase = prior.as_ref().and_then(|s| s.phase).map_or(phase, |p| p.max(phase));
        let state = RunState {
            fingerprint: fingerprint.to_string(),
            phase: Some(phase),
            items_done,
        };
        let bytes = serde_json::to_vec_pretty(&state).expect("state serializes");
        write_atomic(&self.path("state.json"), &bytes)?;
        Ok(state)
    }

    /// Finished items from earlier attempts. A torn final line (from a
    /// killed writer) is cut off so later appends start on a clean line.
    pub fn load_checkpoint(&self) -> Result<HashMap<ItemKey, ItemRecord>, RunError> {
        let p = self.path("items.jsonl");
        let mut done = HashMap::new();
        let file = match File::open(&p) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
            Err(e) => return Err(io_err(&p, e)),
        };
        let mut good_len = 0u64;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| io_err(&p, e))?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<ItemRecord>(&line) {
                Ok(r) => {
                    done.insert(r.key.clone(), r);
                    good_len += n as u64;
                }
                Err(_) => break,
            }
        }
        let f = OpenOptions::new().write(true).open(&p).map_err(|e| io_err(&p, e))?;
        f.set_len(good_len).map_err(|e| io_err(&p, e))?;
        Ok(done)
    }

    pub fn append_item(&self, record: &ItemRecord) -> Result<(), RunError> {
        let p = self.path("items.jsonl");
        let mut guard = self.checkpoint.lock().expect("checkpoint lock");
        if guard.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| io_err(&p, e))?;
            *guard = Some(f);
        }
        let mut line = serde_json::to_vec(record).map_err(|e| io_err(&p, e))?;
        line.push(b'\n');
        let f = guard.as_mut().expect("opened above");
        f.write_all(&line).map_err(|e| io_err(&p, e))?;
        f.flush().map_err(|e| io_err(&p, e))
    }
}
