//! File-backed entity store.
//!
//! Every entity is one JSON document under `<root>/<kind>/<id>.json`,
//! written to a temporary file in the same directory and renamed into place,
//! so readers only ever see complete documents. Executions live in one
//! append-only JSON-lines file.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::Serialize;
use shadowopt_core::model::{read_jsonl, to_json, ExecutionRecord};
use tempfile::NamedTempFile;

use crate::error::{ApiError, ApiResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Program,
    Dataset,
    Model,
    Optimization,
    Job,
    Session,
    Idempotency,
}

impl Kind {
    pub const ALL: [Kind; 7] =
        [Kind::Program, Kind::Dataset, Kind::Model, Kind::Optimization, Kind::Job, Kind::Session, Kind::Idempotency];

    pub fn dir(self) -> &'static str {
        match self {
            Kind::Program => "programs",
            Kind::Dataset => "datasets",
            Kind::Model => "models",
            Kind::Optimization => "optimizations",
            Kind::Job => "jobs",
            Kind::Session => "sessions",
            Kind::Idempotency => "idempotency",
        }
    }
}

pub const EXECUTIONS_FILE: &str = "executions.jsonl";
pub const INBOX_DIR: &str = "inbox";

/// Ids become file names, so only a conservative alphabet is allowed.
pub fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 96
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(ApiError::validation(
            "request.id_invalid",
            format!("id `{id}` must be 1-96 characters of [A-Za-z0-9._-] and not start with a dot"),
            Some("id".into()),
        ))
    }
}

pub struct Store {
    root: PathBuf,
    entity_locks: Mutex<HashMap<(Kind, String), Arc<Mutex<()>>>>,
    executions: RwLock<Arc<Vec<ExecutionRecord>>>,
    append_lock: Mutex<()>,
}

impl Store {
    /// Creates the directory layout and proves the root is writable.
    pub fn open(root: impl Into<PathBuf>) -> ApiResult<Store> {
        let root = root.into();
        let fail = |what: &str, e: std::io::Error| {
            ApiError::internal(format!("data directory {}: cannot {what}: {e}", root.display()))
        };
        fs::create_dir_all(&root).map_err(|e| fail("create", e))?;
        for kind in Kind::ALL {
            fs::create_dir_all(root.join(kind.dir())).map_err(|e| fail("create subdirectories", e))?;
        }
        fs::create_dir_all(root.join(INBOX_DIR)).map_err(|e| fail("create inbox", e))?;
        NamedTempFile::new_in(&root).map_err(|e| fail("write", e))?;
        let path = root.join(EXECUTIONS_FILE);
        let executions = if path.exists() {
            let file = File::open(&path).map_err(|e| fail("read executions", e))?;
            read_jsonl(BufReader::new(file))?
        } else {
            Vec::new()
        };
        Ok(Store {
            root,
            entity_locks: Mutex::new(HashMap::new()),
            executions: RwLock::new(Arc::new(executions)),
            append_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: Kind, id: &str) -> PathBuf {
        self.root.join(kind.dir()).join(format!("{id}.json"))
    }

    fn lock(&self, kind: Kind, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.entity_locks.lock().unwrap();
        locks.entry((kind, id.to_string())).or_default().clone()
    }

    pub fn put<T: Serialize>(&self, kind: Kind, id: &str, value: &T) -> ApiResult<()> {
        check_id(id)?;
        let lock = self.lock(kind, id);
        let _guard = lock.lock().unwrap();
        write_atomic(&self.path(kind, id), to_json(value).as_bytes())
    }

    /// Writes only when no document exists yet; returns whether it wrote.
    pub fn put_new<T: Serialize>(&self, kind: Kind, id: &str, value: &T) -> ApiResult<bool> {
        check_id(id)?;
        let lock = self.lock(kind, id);
        let _guard = lock.lock().unwrap();
        let path = self.path(kind, id);
        if path.exists() {
            return Ok(false);
        }
        write_atomic(&path, to_json(value).as_bytes())?;
        Ok(true)
    }

    pub fn get_raw(&self, kind: Kind, id: &str) -> ApiResult<Option<String>> {
        if check_id(id).is_err() {
            return Ok(None);
        }
        match fs::read_to_string(self.path(kind, id)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get<T: DeserializeOwned>(&self, kind: Kind, id: &str) -> ApiResult<Option<T>> {
        match self.get_raw(kind, id)? {
            Some(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| ApiError::internal(format!("corrupt {} document `{id}`: {e}", kind.dir()))),
            None => Ok(None),
        }
    }

    pub fn exists(&self, kind: Kind, id: &str) -> bool {
        check_id(id).is_ok() && self.path(kind, id).exists()
    }

    /// Ids of every stored entity of `kind`, sorted.
    pub fn ids(&self, kind: Kind) -> ApiResult<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join(kind.dir()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn list<T: DeserializeOwned>(&self, kind: Kind) -> ApiResult<Vec<T>> {
        let mut out = Vec::new();
        for id in self.ids(kind)? {
            if let Some(v) = self.get(kind, &id)? {
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Appends to the execution log and syncs before publishing the records.
    pub fn append_executions(&self, records: &[ExecutionRecord]) -> ApiResult<usize> {
        let _guard = self.append_lock.lock().unwrap();
        let mut buf = String::new();
        for r in records {
            buf.push_str(&to_json(r));
            buf.push('\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(self.root.join(EXECUTIONS_FILE))?;
        file.write_all(buf.as_bytes())?;
        file.sync_all()?;
        let mut current = self.executions.write().unwrap();
        let mut next = Vec::with_capacity(current.len() + records.len());
        next.extend_from_slice(&current);
        next.extend_from_slice(records);
        *current = Arc::new(next);
        Ok(current.len())
    }

    /// Snapshot of all ingested executions.
    pub fn executions(&self) -> Arc<Vec<ExecutionRecord>> {
        self.executions.read().unwrap().clone()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> ApiResult<()> {
    let dir = path.parent().expect("entity paths have a parent");
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ApiError::from(e.error))?;
    Ok(())
}
