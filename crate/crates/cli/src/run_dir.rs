//! Run directories: resolved config snapshot, logs, checkpoints, reports
//! and a content hash of everything that went in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taco_core::dataset::{episode_dirs, MANIFEST_FILE};

use crate::error::{CliError, Result, Tag};

pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";
/// Overrides the parent of default run directories.
pub const RUNS_DIR_ENV: &str = "TACO_RUNS_DIR";

/// SHA-256 over a git-style blob header plus the content.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub name: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub hash: String,
    pub config: String,
    pub inputs: Vec<InputHash>,
}

impl Provenance {
    pub fn compute(config_text: &str, inputs: Vec<InputHash>) -> Self {
        let config = blob_hash(config_text.as_bytes());
        let mut tree = format!("config {config}\n");
        for i in &inputs {
            tree.push_str(&format!("input {} {}\n", i.hash, i.name));
        }
        Self {
            hash: blob_hash(tree.as_bytes()),
            config,
            inputs,
        }
    }

    /// Recomputes the hash of a finished run from its snapshot and stored
    /// input hashes.
    pub fn verify(dir: &Path) -> Result<bool> {
        let stored: Provenance = serde_json::from_str(&fs::read_to_string(dir.join(PROVENANCE_FILE)).tag("io")?).tag("run_dir")?;
        let config = fs::read_to_string(dir.join(CONFIG_FILE)).tag("io")?;
        Ok(Provenance::compute(&config, stored.inputs.clone()) == stored)
    }
}

/// Manifest hashes of a dataset: the directory itself if it is an episode,
/// otherwise every episode directly below it. Names are `<label>/<dir>`.
pub fn manifest_inputs(label: &str, root: &Path) -> Result<Vec<InputHash>> {
    let dirs = if root.join(MANIFEST_FILE).is_file() {
        vec![root.to_path_buf()]
    } else {
        episode_dirs(root).map_err(|e| CliError::new("input", format!("{}: {e}", root.display())))?
    };
    dirs.iter()
        .map(|d| {
            let bytes = fs::read(d.join(MANIFEST_FILE)).tag("io")?;
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(InputHash {
                name: format!("{label}/{name}"),
                hash: blob_hash(&bytes),
            })
        })
        .collect()
}

pub fn file_input(label: &str, path: &Path) -> Result<InputHash> {
    let bytes = fs::read(path).map_err(|e| CliError::new("input", format!("{}: {e}", path.display())))?;
    Ok(InputHash {
        name: label.into(),
        hash: blob_hash(&bytes),
    })
}

/// `--out` if given, else `$TACO_RUNS_DIR/<command>-<hash prefix>`
/// (default parent `runs`).
pub fn location(out: Option<&Path>, command: &str, prov: &Provenance) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let parent = std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            parent.join(format!("{command}-{}", &prov.hash[..12]))
        }
    }
}

#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub provenance: Provenance,
}

impl RunDir {
    /// Creates a fresh run directory. Refuses to reuse a non-empty one.
    pub fn create(path: &Path, config_text: &str, provenance: Provenance) -> Result<Self> {
        if path.exists() && fs::read_dir(path).tag("io")?.next().is_some() {
            return Err(CliError::new("run_dir", format!("{} already exists and is not empty", path.display())));
        }
        for sub in ["logs", "checkpoints", "reports"] {
            fs::create_dir_all(path.join(sub)).tag("io")?;
        }
        fs::write(path.join(CONFIG_FILE), config_text).tag("io")?;
        fs::write(path.join(PROVENANCE_FILE), serde_json::to_string_pretty(&provenance).tag("io")?).tag("io")?;
        Ok(Self {
            root: path.to_path_buf(),
            provenance,
        })
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).tag("io")?;
        fs::write(self.root.join(rel), text).tag("io")
    }

    /// Marks every file read-only.
    pub fn finish(self) -> Result<PathBuf> {
        seal(&self.root)?;
        Ok(self.root)
    }
}

fn seal(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).tag("io")? {
        let path = entry.tag("io")?.path();
        if path.is_dir() {
            seal(&path)?;
        } else {
            let mut perm = fs::metadata(&path).tag("io")?.permissions();
            perm.set_readonly(true);
            fs::set_permissions(&path, perm).tag("io")?;
        }
    }
    Ok(())
}
