use std::path::{Path, PathBuf};

use taco_core::dataset::{compute_norm_stats, episode_dirs, load_episode, read_manifest, read_stream, Episode, MANIFEST_FILE};

use crate::error::{CliError, Result, Tag};

/// Episode directories of `root`: itself if it holds a manifest, else its
/// children.
pub fn dataset_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(CliError::new("input", format!("{} is not a directory", root.display())));
    }
    if root.join(MANIFEST_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let dirs = episode_dirs(root).tag("io")?;
    if dirs.is_empty() {
        return Err(CliError::new("input", format!("no episodes under {}", root.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Episode>> {
    dataset_dirs(root)?
        .iter()
        .map(|d| load_episode(d).map_err(|e| CliError::new("dataset", format!("{}: {e}", d.display()))))
        .collect()
}

fn range(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

/// Prints one episode; returns the number of failed checks.
fn inspect_one(dir: &Path) -> usize {
    println!("== {}", dir.display());
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            println!("check manifest: FAIL {e}");
            return 1;
        }
    };
    println!("id {}  format_version {}", manifest.id, manifest.format_version);
    if !manifest.metadata.is_empty() {
        println!("metadata {}", serde_json::to_string(&manifest.metadata).unwrap_or_default());
    }
    println!("{:<12} {:<8} {:>9} {:<12} {:>8} {:>10} {:>10} {:>12} {:>12}", "stream", "modality", "rate_hz", "shape", "samples", "t_first", "t_last", "min", "max");
    let mut failed = 0;
    for spec in &manifest.streams {
        match read_stream(dir, spec) {
            Ok(s) => {
                let (lo, hi) = range(s.values());
                let (t0, t1) = if s.is_empty() { (f64::NAN, f64::NAN) } else { (s.timestamp(0), s.timestamp(s.len() - 1)) };
                println!(
                    "{:<12} {:<8} {:>9.1} {:<12} {:>8} {:>10.4} {:>10.4} {:>12.5} {:>12.5}",
                    spec.name,
                    format!("{:?}", spec.modality).to_lowercase(),
                    spec.rate_hz,
                    format!("{:?}", spec.shape),
                    s.len(),
                    t0,
                    t1,
                    lo,
                    hi
                );
            }
            Err(e) => {
                println!("{:<12} FAIL {e}", spec.name);
                failed += 1;
            }
        }
    }
    match load_episode(dir) {
        Ok(ep) => println!("check invariants: ok (length_t {})", ep.length_t),
        Err(e) => {
            println!("check invariants: FAIL {e}");
            failed += 1;
        }
    }
    failed
}

pub fn inspect(dir: &Path) -> Result<()> {
    let dirs = dataset_dirs(dir)?;
    let failed: usize = dirs.iter().map(|d| inspect_one(d)).sum();
    if failed > 0 {
        return Err(CliError::new("dataset", format!("{failed} check(s) failed under {}", dir.display())));
    }
    Ok(())
}

pub fn norm_stats(data: &Path, out: Option<&Path>) -> Result<()> {
    let episodes = load_dataset(data)?;
    let stats = compute_norm_stats(&episodes).tag("dataset")?;
    match out {
        Some(path) => {
            stats.save(path).tag("io")?;
            println!("wrote {} ({} keys from {} episodes)", path.display(), stats.entries.len(), episodes.len());
        }
        None => println!("{}", serde_json::to_string_pretty(&stats).tag("io")?),
    }
    Ok(())
}
