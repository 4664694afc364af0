//! Durable storage: game documents, session records, append-only event logs
//! (one canonical JSON event per line) and copilot jobs.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copilot::CopilotJob;
use crate::events::BusEvent;
use crate::game_schema::{load_game, serialize_game, GameDefinition};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt document {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub game_id: String,
    pub created_at: u64,
    pub ended_at: Option<u64>,
    pub round_count: u64,
    pub event_log_ref: String,
}

pub trait Store: Send + Sync {
    fn put_game(&self, def: &GameDefinition) -> Result<(), PersistError>;
    fn games(&self) -> Result<Vec<GameDefinition>, PersistError>;
    fn put_record(&self, record: &SessionRecord) -> Result<(), PersistError>;
    fn records(&self) -> Result<Vec<SessionRecord>, PersistError>;
    /// Appends events to a session's log in one write.
    fn append_events(&self, session_id: &str, events: &[BusEvent]) -> Result<(), PersistError>;
    fn load_events(&self, session_id: &str) -> Result<Vec<BusEvent>, PersistError>;
    fn log_ref(&self, session_id: &str) -> String;
    fn put_job(&self, job: &CopilotJob) -> Result<(), PersistError>;
    fn jobs(&self) -> Result<Vec<CopilotJob>, PersistError>;
}

// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct MemoryStore {
    games: Mutex<BTreeMap<String, GameDefinition>>,
    records: Mutex<BTreeMap<String, SessionRecord>>,
    logs: Mutex<BTreeMap<String, Vec<String>>>,
    jobs: Mutex<BTreeMap<String, CopilotJob>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Raw log lines, as a file store would hold them.
    pub fn log_lines(&self, session_id: &str) -> Vec<String> {
        self.logs.lock().expect("store lock").get(session_id).cloned().unwrap_or_default()
    }
}

impl Store for MemoryStore {
    fn put_game(&self, def: &GameDefinition) -> Result<(), PersistError> {
        self.games.lock().expect("store lock").insert(def.game_id.clone(), def.clone());
        Ok(())
    }

    fn games(&self) -> Result<Vec<GameDefinition>, PersistError> {
        Ok(self.games.lock().expect("store lock").values().cloned().collect())
    }

    fn put_record(&self, record: &SessionRecord) -> Result<(), PersistError> {
        self.records.lock().expect("store lock").insert(record.session_id.clone(), record.clone());
        Ok(())
    }

    fn records(&self) -> Result<Vec<SessionRecord>, PersistError> {
        Ok(self.records.lock().expect("store lock").values().cloned().collect())
    }

    fn append_events(&self, session_id: &str, events: &[BusEvent]) -> Result<(), PersistError> {
        let mut logs = self.logs.lock().expect("store lock");
        logs.entry(session_id.to_string()).or_default().extend(events.iter().map(BusEvent::to_line));
        Ok(())
    }

    fn load_events(&self, session_id: &str) -> Result<Vec<BusEvent>, PersistError> {
        self.log_lines(session_id)
            .iter()
            .map(|l| {
                BusEvent::from_line(l).map_err(|e| PersistError::Corrupt { path: PathBuf::from(self.log_ref(session_id)), reason: e.to_string() })
            })
            .collect()
    }

    fn log_ref(&self, session_id: &str) -> String {
        format!("memory:{session_id}")
    }

    fn put_job(&self, job: &CopilotJob) -> Result<(), PersistError> {
        self.jobs.lock().expect("store lock").insert(job.job_id.clone(), job.clone());
        Ok(())
    }

    fn jobs(&self) -> Result<Vec<CopilotJob>, PersistError> {
        Ok(self.jobs.lock().expect("store lock").values().cloned().collect())
    }
}

// ---------------------------------------------------------------------------

/// Embedded file store:
///
/// ```text
/// <root>/games/<game_id>.json
/// <root>/sessions/<session_id>.record.json
/// <root>/sessions/<session_id>.log
/// <root>/jobs/<job_id>.json
/// ```
pub struct FileStore {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.to_path_buf(), source }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), PersistError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_dir_sorted(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, PersistError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PersistError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PersistError> {
        let root = root.into();
        for sub in ["games", "sessions", "jobs"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn log_path(&self, session_id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{session_id}.log"))
    }
}

impl Store for FileStore {
    fn put_game(&self, def: &GameDefinition) -> Result<(), PersistError> {
        write_atomic(&self.root.join("games").join(format!("{}.json", def.game_id)), &serialize_game(def))
    }

    fn games(&self) -> Result<Vec<GameDefinition>, PersistError> {
        read_dir_sorted(&self.root.join("games"), ".json")?
            .into_iter()
            .map(|p| {
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                load_game(&bytes).map_err(|e| PersistError::Corrupt { path: p.clone(), reason: e.to_string() })
            })
            .collect()
    }

    fn put_record(&self, record: &SessionRecord) -> Result<(), PersistError> {
        let path = self.root.join("sessions").join(format!("{}.record.json", record.session_id));
        write_atomic(&path, &serde_json::to_string_pretty(record).expect("records serialize"))
    }

    fn records(&self) -> Result<Vec<SessionRecord>, PersistError> {
        read_dir_sorted(&self.root.join("sessions"), ".record.json")?.iter().map(|p| read_json(p)).collect()
    }

    fn append_events(&self, session_id: &str, events: &[BusEvent]) -> Result<(), PersistError> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.log_path(session_id);
        let mut buf = String::new();
        for e in events {
            buf.push_str(&e.to_line());
            buf.push('\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    fn load_events(&self, session_id: &str) -> Result<Vec<BusEvent>, PersistError> {
        let path = self.log_path(session_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(PersistError::Io { path, source: e }),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| BusEvent::from_line(l).map_err(|e| PersistError::Corrupt { path: path.clone(), reason: e.to_string() }))
            .collect()
    }

    fn log_ref(&self, session_id: &str) -> String {
        format!("sessions/{session_id}.log")
    }

    fn put_job(&self, job: &CopilotJob) -> Result<(), PersistError> {
        let path = self.root.join("jobs").join(format!("{}.json", job.job_id));
        write_atomic(&path, &serde_json::to_string_pretty(job).expect("jobs serialize"))
    }

    fn jobs(&self) -> Result<Vec<CopilotJob>, PersistError> {
        read_dir_sorted(&self.root.join("jobs"), ".json")?.iter().map(|p| read_json(p)).collect()
    }
}
