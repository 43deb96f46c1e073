//! Profile persistence.
//!
//! Two backends implement [`ProfileStore`]:
//!
//! * [`FileStore`]: one pretty-printed JSON file per profile in a directory.
//! * [`DocumentBackend`]: compact JSON documents in any [`DocumentStore`],
//!   capped at [`StoreLimits::max_document_bytes`]. [`MemoryDocuments`] is
//!   an in-memory store, [`DirDocuments`] keeps documents on disk.
//!
//! Saves never overwrite: equal-key profiles accumulate so repeated runs can
//! be aggregated. Loads return profiles ordered by `created_at`, then by
//! save order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec;
use crate::model::{aggregate_stats, ModelError, Profile, ProfileStats};

/// Locator prefix selecting the document backend, e.g. `doc:/var/profiles`.
pub const DOC_LOCATOR_PREFIX: &str = "doc:";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt profile record {record}: {reason}")]
    Corrupt { record: String, reason: String },
    #[error("serialized profile is {bytes} bytes, over the {limit} byte document limit")]
    StoreLimit { bytes: usize, limit: usize },
    #[error("no profile for key {0}")]
    NotFound(ProfileKey),
    #[error("profile rejected: {0}")]
    Invalid(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Index of a profile: exact command line plus tag set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProfileKey {
    pub command: String,
    pub tags: BTreeSet<String>,
}

impl ProfileKey {
    pub fn new<I, S>(command: impl Into<String>, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ProfileKey { command: command.into(), tags: tags.into_iter().map(Into::into).collect() }
    }

    pub fn of(profile: &Profile) -> Self {
        ProfileKey { command: profile.command.clone(), tags: profile.tags.clone() }
    }

    pub fn matches(&self, profile: &Profile) -> bool {
        self.command == profile.command && self.tags == profile.tags
    }

    /// Stable 16 hex digit digest of the key.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        for t in &self.tags {
            h.update([0u8]);
            h.update(t.as_bytes());
        }
        hex16(&h.finalize())
    }
}

impl std::fmt::Display for ProfileKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "`{}`", self.command)?;
        if !self.tags.is_empty() {
            let tags: Vec<&str> = self.tags.iter().map(String::as_str).collect();
            write!(f, " [{}]", tags.join(", "))?;
        }
        Ok(())
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn content_digest(profile: &Profile) -> String {
    let mut h = Sha256::new();
    h.update(ProfileKey::of(profile).digest().as_bytes());
    h.update(profile.created_at.to_rfc3339().as_bytes());
    hex16(&h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreLimits {
    pub max_document_bytes: usize,
}

impl StoreLimits {
    /// Roughly how many samples fit under the document cap.
    pub const APPROX_MAX_SAMPLES: usize = 250_000;
}

impl Default for StoreLimits {
    fn default() -> Self {
        StoreLimits { max_document_bytes: 16 * 1024 * 1024 }
    }
}

pub trait ProfileStore: Send + Sync {
    /// Persists `profile` and returns its record id.
    fn save(&self, profile: &Profile) -> Result<String, StoreError>;

    /// All profiles stored under `key`, oldest first. Empty when none match.
    fn load(&self, key: &ProfileKey) -> Result<Vec<Profile>, StoreError>;

    fn stats_for(&self, key: &ProfileKey) -> Result<ProfileStats, StoreError> {
        let profiles = self.load(key)?;
        if profiles.is_empty() {
            return Err(StoreError::NotFound(key.clone()));
        }
        Ok(aggregate_stats(&profiles)?)
    }

    /// Most recent profile for `key`.
    fn latest(&self, key: &ProfileKey) -> Result<Profile, StoreError> {
        self.load(key)?.pop().ok_or_else(|| StoreError::NotFound(key.clone()))
    }
}

/// Opens a store from a CLI locator: `doc:<dir>` for the document backend,
/// anything else is a directory for the file backend.
pub fn open_store(locator: &str) -> Result<Box<dyn ProfileStore>, StoreError> {
    match locator.strip_prefix(DOC_LOCATOR_PREFIX) {
        Some(dir) => Ok(Box::new(DocumentBackend::new(DirDocuments::open(dir)?))),
        None => Ok(Box::new(FileStore::open(locator)?)),
    }
}

fn save_stamp() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{nanos:020}")
}


/// Writes `bytes` to `dir/<stem>.json` atomically and without replacing
/// an existing record: the data goes to a hidden temp file that is then
/// hard-linked into place. Returns the final file stem.
fn write_new_record(dir: &Path, stem: &str, bytes: &[u8]) -> Result<String, StoreError> {
    static TMP_SEQ: AtomicU64 = AtomicU64::new(0);
    let tmp = dir.join(format!(".tmp-{}-{}", std::process::id(), TMP_SEQ.fetch_add(1, Ordering::Relaxed)));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create_new(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(source) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::Io { path: tmp, source });
    }
    let mut attempt = 0u32;
    let result = loop {
        let name = if attempt == 0 { stem.to_string() } else { format!("{stem}~{attempt}") };
        let path = dir.join(format!("{name}.json"));
        match fs::hard_link(&tmp, &path) {
            Ok(()) => break Ok(name),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
            Err(source) => break Err(StoreError::Io { path, source }),
        }
    };
    let _ = fs::remove_file(&tmp);
    result
}

/// Lists `<prefix>*.json` records in `dir`, sorted by name. Temp files are
/// hidden and never listed.
fn list_records(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, StoreError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(StoreError::Io { path: dir.to_path_buf(), source }),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if name.starts_with(prefix) && name.ends_with(".json") && !name.starts_with('.') {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

fn parse_record(record: &str, bytes: &[u8]) -> Result<Profile, StoreError> {
    let corrupt = |reason: String| StoreError::Corrupt { record: record.to_string(), reason };
    let profile: Profile = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
    profile.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(profile)
}

/// Parses records in parallel, keeps those matching `key` and orders them
/// by creation time. Input order breaks ties.
fn collect_matching(key: &ProfileKey, records: Vec<(String, Vec<u8>)>) -> Result<Vec<Profile>, StoreError> {
    let parsed = exec::map(&records, |(id, bytes)| parse_record(id, bytes));
    let mut out = Vec::with_capacity(parsed.len());
    for p in parsed {
        let p = p?;
        if key.matches(&p) {
            out.push(p);
        }
    }
    out.sort_by_key(|p| p.created_at);
    Ok(out)
}

/// One JSON file per profile, named
/// `<key digest>-<save stamp>-<digest of key and created_at>.json`.
#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(FileStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ProfileStore for FileStore {
    fn save(&self, profile: &Profile) -> Result<String, StoreError> {
        profile.validate()?;
        let bytes = serde_json::to_vec_pretty(profile).expect("profile serializes");
        let stem = format!("{}-{}-{}", ProfileKey::of(profile).digest(), save_stamp(), content_digest(profile));
        write_new_record(&self.dir, &stem, &bytes)
    }

    fn load(&self, key: &ProfileKey) -> Result<Vec<Profile>, StoreError> {
        let paths = list_records(&self.dir, &format!("{}-", key.digest()))?;
        let mut records = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            records.push((path.display().to_string(), bytes));
        }
        collect_matching(key, records)
    }
}

/// Minimal key-document store: documents are opaque blobs grouped by key.
pub trait DocumentStore: Send + Sync {
    /// Appends a document under `key` and returns its id.
    fn put(&self, key: &str, document: Vec<u8>) -> Result<String, StoreError>;

    /// All `(id, document)` pairs under `key` in insertion order.
    fn query(&self, key: &str) -> Result<Vec<(String, Vec<u8>)>, StoreError>;
}

#[derive(Debug, Default)]
pub struct MemoryDocuments {
    docs: Mutex<BTreeMap<String, Vec<Vec<u8>>>>,
}

impl MemoryDocuments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn document_count(&self) -> usize {
        self.docs.lock().unwrap().values().map(Vec::len).sum()
    }
}

impl DocumentStore for MemoryDocuments {
    fn put(&self, key: &str, document: Vec<u8>) -> Result<String, StoreError> {
        let mut docs = self.docs.lock().unwrap();
        let list = docs.entry(key.to_string()).or_default();
        list.push(document);
        Ok(format!("{key}/{}", list.len() - 1))
    }

    fn query(&self, key: &str) -> Result<Vec<(String, Vec<u8>)>, StoreError> {
        let docs = self.docs.lock().unwrap();
        Ok(docs
            .get(key)
            .map(|list| list.iter().enumerate().map(|(i, d)| (format!("{key}/{i}"), d.clone())).collect())
            .unwrap_or_default())
    }
}

/// Documents as files: `<dir>/<key>/<save stamp>.json`.
#[derive(Debug, Clone)]
pub struct DirDocuments {
    dir: PathBuf,
}

impl DirDocuments {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(DirDocuments { dir })
    }
}

impl DocumentStore for DirDocuments {
    fn put(&self, key: &str, document: Vec<u8>) -> Result<String, StoreError> {
        let sub = self.dir.join(key);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let name = write_new_record(&sub, &save_stamp(), &document)?;
        Ok(format!("{key}/{name}"))
    }

    fn query(&self, key: &str) -> Result<Vec<(String, Vec<u8>)>, StoreError> {
        let mut out = Vec::new();
        for path in list_records(&self.dir.join(key), "")? {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            out.push((path.display().to_string(), bytes));
        }
        Ok(out)
    }
}

/// Profiles as compact JSON documents keyed by [`ProfileKey::digest`].
#[derive(Debug)]
pub struct DocumentBackend<D> {
    docs: D,
    limits: StoreLimits,
}

impl<D: DocumentStore> DocumentBackend<D> {
    pub fn new(docs: D) -> Self {
        DocumentBackend { docs, limits: StoreLimits::default() }
    }

    pub fn with_limits(docs: D, limits: StoreLimits) -> Self {
        DocumentBackend { docs, limits }
    }

    pub fn documents(&self) -> &D {
        &self.docs
    }

    pub fn limits(&self) -> StoreLimits {
        self.limits
    }
}

impl<D: DocumentStore> ProfileStore for DocumentBackend<D> {
    fn save(&self, profile: &Profile) -> Result<String, StoreError> {
        profile.validate()?;
        let bytes = serde_json::to_vec(profile).expect("profile serializes");
        if bytes.len() > self.limits.max_document_bytes {
            return Err(StoreError::StoreLimit { bytes: bytes.len(), limit: self.limits.max_document_bytes });
        }
        self.docs.put(&ProfileKey::of(profile).digest(), bytes)
    }

    fn load(&self, key: &ProfileKey) -> Result<Vec<Profile>, StoreError> {
        collect_matching(key, self.docs.query(&key.digest())?)
    }
}
