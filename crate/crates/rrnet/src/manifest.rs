//! Dataset manifests: one `image_path<TAB>mask_path` pair per line. Relative
//! paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rrnet_core::data::Sample;

use crate::pnm::{self, PnmError};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: expected `image<TAB>mask`")]
    Syntax { path: String, line: usize },
    #[error(transparent)]
    Image(#[from] PnmError),
    #[error("{id}: {source}")]
    Sample { id: String, source: rrnet_core::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Vec<Entry>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(image), Some(mask), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(ManifestError::Syntax {
                path: origin.into(),
                line: i + 1,
            });
        };
        out.push(Entry {
            image: base.join(image.trim()),
            mask: base.join(mask.trim()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Entry>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base, &path.display().to_string())
}

pub fn load_sample(e: &Entry) -> Result<Sample, ManifestError> {
    let image = pnm::read_image(&e.image)?;
    let mask = pnm::read_mask(&e.mask)?;
    let id = e
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(image, mask, id.clone()).map_err(|source| ManifestError::Sample { id, source })
}

pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> std::io::Result<()> {
    let text: String = entries.iter().map(|(i, m)| format!("{i}\t{m}\n")).collect();
    fs::write(path, text)
}
