//! Dataset manifests: a JSON description of images, masks and classes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{ImageSample, DEFAULT_IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub image: PathBuf,
    pub label: PathBuf,
}

fn default_ignore() -> i64 {
    DEFAULT_IGNORE
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Base directory for entry paths; relative roots resolve against the
    /// manifest file's directory.
    pub root: PathBuf,
    pub classes: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_value: i64,
    pub split: Split,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            m.root = base.join(&m.root);
        }
        if m.classes.is_empty() {
            return Err(Error::Config(format!("{}: manifest lists no classes", path.display())));
        }
        for e in &m.entries {
            for p in [&e.image, &e.label] {
                let full = m.root.join(p);
                if !full.is_file() {
                    return Err(Error::Config(format!(
                        "{}: entry {} does not exist",
                        path.display(),
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads and validates every entry.
    pub fn samples(&self) -> Result<Vec<ImageSample>> {
        self.entries
            .iter()
            .map(|e| {
                let s = ImageSample::load(
                    &self.root.join(&e.image),
                    Some(&self.root.join(&e.label)),
                    self.ignore_value,
                )?;
                s.label
                    .as_ref()
                    .expect("label requested")
                    .validate(self.classes.len(), self.ignore_value)?;
                Ok(s)
            })
            .collect()
    }

    /// Writes `samples` as PNGs under `dir` together with `manifest.json`,
    /// returning the manifest path.
    pub fn write_fixture(
        dir: &Path,
        name: &str,
        classes: &[&str],
        split: Split,
        samples: &[ImageSample],
    ) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let image = PathBuf::from(format!("image_{i:03}.png"));
            let label = PathBuf::from(format!("label_{i:03}.png"));
            s.save(&dir.join(&image), Some(&dir.join(&label)))?;
            entries.push(Entry { image, label });
        }
        let m = DatasetManifest {
            name: name.to_string(),
            root: PathBuf::from("."),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            ignore_value: DEFAULT_IGNORE,
            split,
            entries,
        };
        let path = dir.join("manifest.json");
        m.save(&path)?;
        Ok(path)
    }
}
