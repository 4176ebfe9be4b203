use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetError, Episode, Modality, Result, Stream, StreamData, StreamManifest, StreamSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn read_manifest(dir: &Path) -> Result<StreamManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(DatasetError::MissingManifest(path));
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest {
        path,
        reason: e.to_string(),
    })
}

/// Reads one stream file as described by its manifest entry.
pub fn read_stream(dir: &Path, spec: &StreamSpec) -> Result<Stream> {
    let path = dir.join(&spec.file);
    if !path.is_file() {
        return Err(DatasetError::MissingStreamFile {
            stream: spec.name.clone(),
            path,
        });
    }
    let bytes = fs::read(&path)?;
    let data = if spec.modality == Modality::Audio {
        if bytes.len() < 8 || (bytes.len() - 8) % 4 != 0 {
            return Err(DatasetError::ShapeMismatch {
                stream: spec.name.clone(),
                reason: format!("audio file of {} bytes is not a start timestamp plus f32 samples", bytes.len()),
            });
        }
        let start = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        let samples = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        StreamData::Audio { start, samples }
    } else {
        let n = spec.sample_len();
        let rec = 8 + 4 * n;
        if bytes.len() % rec != 0 {
            return Err(DatasetError::ShapeMismatch {
                stream: spec.name.clone(),
                reason: format!(
                    "declared shape {:?} ({n} floats/sample, {rec}-byte records) but file holds {} bytes",
                    spec.shape,
                    bytes.len()
                ),
            });
        }
        let count = bytes.len() / rec;
        let mut timestamps = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * n);
        for r in bytes.chunks_exact(rec) {
            timestamps.push(f64::from_le_bytes(r[..8].try_into().unwrap()));
            values.extend(r[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        StreamData::Records { timestamps, values }
    };
    let stream = Stream { spec: spec.clone(), data };
    stream.validate()?;
    Ok(stream)
}

/// Loads and validates an episode directory.
pub fn load_episode(dir: &Path) -> Result<Episode> {
    let manifest = read_manifest(dir)?;
    let streams = manifest.streams.iter().map(|s| read_stream(dir, s)).collect::<Result<Vec<_>>>()?;
    let mut ep = Episode {
        id: manifest.id.clone(),
        streams,
        manifest,
        length_t: 0,
    };
    ep.validate()?;
    Ok(ep)
}

pub fn write_stream(dir: &Path, stream: &Stream) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(dir.join(&stream.spec.file))?);
    match &stream.data {
        StreamData::Audio { start, samples } => {
            w.write_all(&start.to_le_bytes())?;
            for s in samples {
                w.write_all(&s.to_le_bytes())?;
            }
        }
        StreamData::Records { timestamps, values } => {
            let n = stream.spec.sample_len();
            for (i, t) in timestamps.iter().enumerate() {
                w.write_all(&t.to_le_bytes())?;
                for v in &values[i * n..(i + 1) * n] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &StreamManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Writes `ep` into `dir` (created if needed).
pub fn write_episode(ep: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &ep.streams {
        write_stream(dir, s)?;
    }
    write_manifest(dir, &ep.manifest)
}

/// Sorted subdirectories of `root` that contain a manifest.
pub fn episode_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
