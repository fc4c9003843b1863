use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForgeryKind, Label, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Video directory, relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Label,
    pub forgery_kind: ForgeryKind,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Checks the label/kind/split invariants. `line_of(i)` names entry `i` in errors.
    fn validate_with(&self, line_of: impl Fn(usize) -> String) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.split == Split::Pretrain && e.label != Label::Real {
                return Err(Error::Validation(format!(
                    "{}: pretrain split must contain only real videos, found fake `{}`",
                    line_of(i),
                    e.path
                )));
            }
            if (e.label == Label::Real) != (e.forgery_kind == ForgeryKind::None) {
                return Err(Error::Validation(format!(
                    "{}: label `{:?}` is inconsistent with forgery kind `{}` for `{}`",
                    line_of(i),
                    e.label,
                    e.forgery_kind.name(),
                    e.path
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(|i| format!("entry {}", i + 1))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
        lines.push(i + 1);
    }
    let manifest = Manifest { entries };
    manifest.validate_with(|i| format!("{}:{}", path.display(), lines[i]))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut buf = Vec::new();
    for e in &manifest.entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
