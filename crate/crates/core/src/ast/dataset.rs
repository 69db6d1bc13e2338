use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{from_json_slice, to_json_vec, AstError, AstNode, Tree, DEFAULT_MAX_DEPTH};

/// A labelled tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tree: Tree,
    pub label: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    label: usize,
    tree: AstNode,
}

#[derive(Serialize)]
struct SampleRecordOut {
    label: usize,
    tree: AstNode,
}

/// Parses a JSON-lines dataset, reporting the 1-based line of the first
/// bad record. Blank lines are skipped.
pub fn read_dataset(reader: impl Read) -> Result<Vec<Sample>, AstError> {
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| AstError::Line {
            line: i + 1,
            message,
        };
        let record: SampleRecord =
            from_json_slice(line.as_bytes()).map_err(|e| bad(e.to_string()))?;
        let tree =
            Tree::from_ast(&record.tree, DEFAULT_MAX_DEPTH).map_err(|e| bad(e.to_string()))?;
        samples.push(Sample {
            tree,
            label: record.label,
        });
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        let record = SampleRecordOut {
            label: s.label,
            tree: s.tree.to_ast(),
        };
        out.extend(to_json_vec(&record).expect("sample serializes"));
        out.push(b'\n');
    }
    out
}

/// Label index to class name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassManifest {
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub label: usize,
    pub name: String,
}

impl ClassManifest {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        Self {
            classes: names
                .into_iter()
                .enumerate()
                .map(|(label, name)| ClassEntry { label, name })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    fn validate(&self) -> Result<(), AstError> {
        for (i, c) in self.classes.iter().enumerate() {
            if c.label != i {
                return Err(AstError::Malformed(format!(
                    "class manifest entry {i} has label {}; labels must be 0..n in order",
                    c.label
                )));
            }
        }
        Ok(())
    }
}

pub fn read_class_manifest(path: &Path) -> Result<ClassManifest, AstError> {
    let bytes = std::fs::read(path)?;
    let manifest: ClassManifest = serde_json::from_slice(&bytes)
        .map_err(|e| AstError::Malformed(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_class_manifest(path: &Path, manifest: &ClassManifest) -> Result<(), AstError> {
    let mut json =
        serde_json::to_vec_pretty(manifest).map_err(|e| AstError::Malformed(e.to_string()))?;
    json.push(b'\n');
    crate::io::write_atomic(path, &json)?;
    Ok(())
}
