//! Content-addressed image artifacts.
//!
//! Every image that flows through the agent (inputs, intermediate images,
//! best-of-N candidates) is an [`ImageRef`]: the SHA-256 of its bytes, a
//! format tag and a path relative to the run directory. Artifacts live at
//! `artifacts/<digest>.<ext>` so identical images are stored once.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Directory (relative to the run directory) holding image artifacts.
pub const ARTIFACT_DIR: &str = "artifacts";

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("image {0} is not readable: {1}")]
    Unreadable(String, String),
    #[error("image {digest} failed its integrity check (found {actual})")]
    DigestMismatch { digest: String, actual: String },
    #[error("unrecognized image format")]
    UnknownFormat,
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageFormat {
    #[serde(rename = "png")]
    Png,
    #[serde(rename = "jpeg")]
    Jpeg,
    /// Attribute bag produced by the simulated backend.
    #[serde(rename = "sim-json")]
    SimJson,
}

impl ImageFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpeg",
            ImageFormat::SimJson => "sim-json",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
            ImageFormat::SimJson => "sim.json",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "jpeg" | "jpg" => Some(ImageFormat::Jpeg),
            "sim-json" => Some(ImageFormat::SimJson),
            _ => None,
        }
    }

    /// Sniffs the format from magic bytes. Sim-json is recognized by parsing.
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(ImageFormat::Jpeg)
        } else if crate::backend::sim::AttributeBag::decode(bytes).is_ok() {
            Some(ImageFormat::SimJson)
        } else {
            None
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reference to a stored image.
///
/// The bytes travel with the reference while a run is in progress; a
/// reference loaded back from a trace carries only the metadata until it is
/// hydrated from its run directory.
#[derive(Clone, Serialize, Deserialize)]
pub struct ImageRef {
    pub digest: String,
    pub format: ImageFormat,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(skip)]
    bytes: Option<Arc<[u8]>>,
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest && self.format == other.format && self.path == other.path
    }
}

impl Eq for ImageRef {}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageRef")
            .field("digest", &self.digest)
            .field("format", &self.format)
            .field("path", &self.path)
            .field("loaded", &self.bytes.is_some())
            .finish()
    }
}

impl ImageRef {
    /// Builds a reference for in-memory bytes. Does not store anything.
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>, format: ImageFormat) -> Self {
        let bytes: Arc<[u8]> = bytes.into();
        let digest = digest_bytes(&bytes);
        let (width, height) = match format {
            ImageFormat::SimJson => (None, None),
            _ => match imagesize::blob_size(&bytes) {
                Ok(size) => (Some(size.width as u32), Some(size.height as u32)),
                Err(_) => (None, None),
            },
        };
        let path = Path::new(ARTIFACT_DIR).join(format!("{digest}.{}", format.extension()));
        Self {
            digest,
            format,
            path,
            width,
            height,
            bytes: Some(bytes),
        }
    }

    /// Reads an image file from anywhere on disk, sniffing its format.
    pub fn from_file(path: &Path) -> Result<Self, ArtifactError> {
        let bytes = fs::read(path)
            .map_err(|e| ArtifactError::Unreadable(path.display().to_string(), e.to_string()))?;
        let format = ImageFormat::detect(&bytes).ok_or(ArtifactError::UnknownFormat)?;
        Ok(Self::from_bytes(bytes, format))
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        self.bytes.as_deref()
    }

    pub fn is_loaded(&self) -> bool {
        self.bytes.is_some()
    }

    /// Loads the bytes from `run_dir` and checks them against the digest.
    pub fn hydrate(&mut self, run_dir: &Path) -> Result<(), ArtifactError> {
        if self.bytes.is_some() {
            return Ok(());
        }
        let full = run_dir.join(&self.path);
        let bytes = fs::read(&full)
            .map_err(|e| ArtifactError::Unreadable(full.display().to_string(), e.to_string()))?;
        let actual = digest_bytes(&bytes);
        if actual != self.digest {
            return Err(ArtifactError::DigestMismatch {
                digest: self.digest.clone(),
                actual,
            });
        }
        self.bytes = Some(bytes.into());
        Ok(())
    }

    /// Returns the bytes, failing when the reference was never hydrated.
    pub fn require_bytes(&self) -> Result<&[u8], ArtifactError> {
        self.bytes().ok_or_else(|| {
            ArtifactError::Unreadable(self.digest.clone(), "bytes not loaded".to_string())
        })
    }

    pub fn short_digest(&self) -> &str {
        &self.digest[..self.digest.len().min(12)]
    }
}

enum StoreInner {
    Memory(Mutex<HashMap<String, Arc<[u8]>>>),
    Dir(PathBuf),
}

/// Where a backend handle writes the images it receives.
///
/// `Dir` stores write into `<run_dir>/artifacts/`; `Memory` stores are for
/// large simulated sweeps where nothing needs to hit the disk.
#[derive(Clone)]
pub struct ArtifactStore {
    inner: Arc<StoreInner>,
}

impl fmt::Debug for ArtifactStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.inner {
            StoreInner::Memory(_) => f.write_str("ArtifactStore::Memory"),
            StoreInner::Dir(d) => write!(f, "ArtifactStore::Dir({})", d.display()),
        }
    }
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        Self {
            inner: Arc::new(StoreInner::Memory(Mutex::new(HashMap::new()))),
        }
    }

    pub fn in_dir(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            inner: Arc::new(StoreInner::Dir(run_dir.into())),
        }
    }

    pub fn run_dir(&self) -> Option<&Path> {
        match &*self.inner {
            StoreInner::Dir(d) => Some(d),
            StoreInner::Memory(_) => None,
        }
    }

    pub fn put(&self, bytes: Vec<u8>, format: ImageFormat) -> Result<ImageRef, ArtifactError> {
        let image = ImageRef::from_bytes(bytes, format);
        self.ingest(&image)?;
        Ok(image)
    }

    /// Stores an image produced elsewhere (e.g. an editing input).
    pub fn ingest(&self, image: &ImageRef) -> Result<(), ArtifactError> {
        let bytes = image.require_bytes()?;
        match &*self.inner {
            StoreInner::Memory(map) => {
                let mut map = map.lock().expect("artifact map poisoned");
                map.entry(image.digest.clone())
                    .or_insert_with(|| Arc::from(bytes));
            }
            StoreInner::Dir(root) => write_artifact(root, image, bytes)?,
        }
        Ok(())
    }

    pub fn contains(&self, image: &ImageRef) -> bool {
        match &*self.inner {
            StoreInner::Memory(map) => map
                .lock()
                .expect("artifact map poisoned")
                .contains_key(&image.digest),
            StoreInner::Dir(root) => root.join(&image.path).is_file(),
        }
    }
}

fn write_artifact(root: &Path, image: &ImageRef, bytes: &[u8]) -> Result<(), ArtifactError> {
    let target = root.join(&image.path);
    if target.is_file() {
        return Ok(());
    }
    let parent = target.parent().unwrap_or(root);
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.{}.tmp",
        image.digest,
        uuid::Uuid::new_v4().simple()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(())
}
