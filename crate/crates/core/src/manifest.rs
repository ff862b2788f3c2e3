//! Line-delimited manifest files.
//!
//! A manifest file starts with one header line, followed by one JSON record per line. Each
//! record carries a `section` tag. Records are appended as stages complete, and a later record
//! with the same id replaces an earlier one when the file is loaded, so the file stays
//! append-only while the in-memory manifest reflects the latest state.
//!
//! ```text
//! {"format":"minchange-manifest","schema_version":1,"dataset_id":"pets",...}
//! {"section":"class","class_id":0,"name":"Abyssinian","dataset_id":"pets"}
//! {"section":"prompt","prompt_id":"c000-background-F-000",...}
//! {"section":"image","image_id":"r0001",...}
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassEntry, ImageRecord, JobFailure, Manifest, PromptRecord, Stage};

pub const FORMAT_TAG: &str = "minchange-manifest";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    schema_version: u32,
    dataset_id: String,
    pipeline_config_hash: String,
    created_at: String,
    #[serde(default)]
    stages: Vec<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
pub enum Record {
    Class(ClassEntry),
    Prompt(PromptRecord),
    Image(ImageRecord),
    Failure(JobFailure),
    Stage { stage: Stage },
    ConfigHash { pipeline_config_hash: String },
}

impl Record {
    pub(crate) fn apply(self, manifest: &mut Manifest) {
        match self {
            Record::Class(c) => match manifest.classes.iter_mut().find(|e| e.class_id == c.class_id) {
                Some(slot) => *slot = c,
                None => manifest.classes.push(c),
            },
            Record::Prompt(p) => manifest.upsert_prompt(p),
            Record::Image(i) => manifest.upsert_image(i),
            Record::Failure(f) => match manifest.failures.iter_mut().find(|e| e.job_id == f.job_id) {
                Some(slot) => *slot = f,
                None => manifest.failures.push(f),
            },
            Record::Stage { stage } => {
                manifest.stages.insert(stage);
            }
            Record::ConfigHash { pipeline_config_hash } => {
                manifest.pipeline_config_hash = pipeline_config_hash;
            }
        }
    }
}

fn encode_line<T: Serialize>(value: &T) -> Result<String> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    Ok(line)
}

/// Serialize a manifest in compacted form: header, then classes, prompts, images and failures.
pub fn to_string(manifest: &Manifest) -> Result<String> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        schema_version: SCHEMA_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        pipeline_config_hash: manifest.pipeline_config_hash.clone(),
        created_at: manifest.created_at.clone(),
        stages: manifest.stages.iter().copied().collect(),
    };
    let mut out = encode_line(&header)?;
    for c in &manifest.classes {
        out.push_str(&encode_line(&Record::Class(c.clone()))?);
    }
    for p in &manifest.prompts {
        out.push_str(&encode_line(&Record::Prompt(p.clone()))?);
    }
    for i in &manifest.images {
        out.push_str(&encode_line(&Record::Image(i.clone()))?);
    }
    for f in &manifest.failures {
        out.push_str(&encode_line(&Record::Failure(f.clone()))?);
    }
    Ok(out)
}

/// Parse manifest text. A truncated final line (no trailing newline, not valid JSON) is
/// treated as an interrupted append and dropped.
pub fn from_str(text: &str) -> Result<Manifest> {
    let mut lines = text.split_inclusive('\n').enumerate();
    let Some((_, first)) = lines.next() else {
        return Err(Error::Parse { line: 1, message: "missing header".into() });
    };
    let header: Header = serde_json::from_str(first.trim_end()).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != FORMAT_TAG {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected format tag `{}`", header.format),
        });
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let mut manifest = Manifest {
        dataset_id: header.dataset_id,
        pipeline_config_hash: header.pipeline_config_hash,
        created_at: header.created_at,
        stages: header.stages.into_iter().collect(),
        ..Default::default()
    };
    for (idx, raw) in lines {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(trimmed) {
            Ok(record) => record.apply(&mut manifest),
            Err(e) if !raw.ends_with('\n') => {
                log::warn!("dropping truncated manifest line {}: {e}", idx + 1);
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

/// Write the compacted manifest atomically (temp file, then rename).
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_string(manifest)?;
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Single writer that appends records to a manifest file from a dedicated thread.
///
/// Clones of the [`ManifestSink`] can be handed to concurrent workers; lines reach the file in
/// the order the writer receives them.
pub struct ManifestWriter {
    sink: ManifestSink,
    handle: Option<JoinHandle<Result<()>>>,
}

#[derive(Clone)]
pub struct ManifestSink {
    tx: mpsc::Sender<Record>,
}

impl ManifestSink {
    pub fn append(&self, record: Record) -> Result<()> {
        self.tx
            .send(record)
            .map_err(|_| Error::Precondition("manifest writer has shut down".into()))
    }
}

impl ManifestWriter {
    /// Open `path` for appending. The file must already contain a header (see [`save_manifest`]).
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let check = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut first = String::new();
        BufReader::new(check)
            .read_line(&mut first)
            .map_err(|e| Error::io(&path, e))?;
        if first.trim().is_empty() {
            return Err(Error::Parse { line: 1, message: "missing header".into() });
        }
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let (tx, rx) = mpsc::channel::<Record>();
        let handle = std::thread::spawn(move || -> Result<()> {
            for record in rx {
                let line = encode_line(&record)?;
                file.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
                file.flush().map_err(|e| Error::io(&path, e))?;
            }
            file.sync_all().map_err(|e| Error::io(&path, e))
        });
        Ok(ManifestWriter {
            sink: ManifestSink { tx },
            handle: Some(handle),
        })
    }

    pub fn sink(&self) -> ManifestSink {
        self.sink.clone()
    }

    pub fn append(&self, record: Record) -> Result<()> {
        self.sink.append(record)
    }

    /// Flush pending records and stop the writer thread.
    pub fn finish(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        let (dead_tx, _) = mpsc::channel();
        drop(std::mem::replace(&mut self.sink.tx, dead_tx));
        match self.handle.take() {
            Some(h) => h
                .join()
                .map_err(|_| Error::Precondition("manifest writer panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for ManifestWriter {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("manifest writer: {e}");
        }
    }
}
