use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Episode, Modality, Result};

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Mean and std for one key. Statistic `j` applies to value `i` when
/// `(i / block) % mean.len() == j`, so `block == 1` is element-wise and
/// `block == H*W` is per-channel for channel-first images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub block: usize,
}

impl NormEntry {
    /// Population statistics of rows of width `width * block`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>, width: usize, block: usize) -> Self {
        let rows: Vec<&[f32]> = rows.into_iter().collect();
        let mut count = vec![0usize; width];
        let mut sum = vec![0.0f64; width];
        for r in &rows {
            for (i, v) in r.iter().enumerate() {
                let j = (i / block) % width;
                sum[j] += *v as f64;
                count[j] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect();
        let mut sq = vec![0.0f64; width];
        for r in &rows {
            for (i, v) in r.iter().enumerate() {
                let j = (i / block) % width;
                let d = *v as f64 - mean[j];
                sq[j] += d * d;
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, c)| if *c > 0 { (s / *c as f64).sqrt().max(STD_FLOOR) } else { 1.0 })
            .collect();
        Self { mean, std, block }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Per-key normalization statistics. Keys are stream names, with images
/// normalized per channel and everything else per element.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub entries: BTreeMap<String, NormEntry>,
}

impl NormStats {
    pub fn get(&self, key: &str) -> Option<&NormEntry> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: NormEntry) {
        self.entries.insert(key.into(), entry);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("stats serialize"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Normalizes (or denormalizes) `values` in place.
    pub fn apply(&self, key: &str, values: &mut [f64], dir: Direction) -> Result<()> {
        let e = self.get(key).ok_or_else(|| DatasetError::UnknownKey(key.into()))?;
        let w = e.width();
        if values.len() % (w * e.block) != 0 {
            return Err(DatasetError::NormShape {
                key: key.into(),
                len: values.len(),
                width: w * e.block,
            });
        }
        for (i, v) in values.iter_mut().enumerate() {
            let j = (i / e.block) % w;
            *v = match dir {
                Direction::Forward => (*v - e.mean[j]) / e.std[j],
                Direction::Inverse => *v * e.std[j] + e.mean[j],
            };
        }
        Ok(())
    }
}

/// Returns a normalized copy of `values`.
pub fn apply_normalization(stats: &NormStats, key: &str, values: &[f64], dir: Direction) -> Result<Vec<f64>> {
    let mut out = values.to_vec();
    stats.apply(key, &mut out, dir)?;
    Ok(out)
}

/// Statistics for every non-audio stream over all samples of all episodes.
pub fn compute_norm_stats(episodes: &[Episode]) -> Result<NormStats> {
    let first = episodes.first().ok_or(DatasetError::Empty)?;
    let mut stats = NormStats::default();
    for spec in &first.manifest.streams {
        if spec.modality == Modality::Audio {
            continue;
        }
        let mut streams = Vec::with_capacity(episodes.len());
        for ep in episodes {
            let s = ep.stream(&spec.name).ok_or_else(|| DatasetError::InconsistentKeys {
                key: spec.name.clone(),
                episode: ep.id.clone(),
            })?;
            if s.spec.shape != spec.shape {
                return Err(DatasetError::ShapeMismatch {
                    stream: spec.name.clone(),
                    reason: format!("shape {:?} in {} differs from {:?}", s.spec.shape, ep.id, spec.shape),
                });
            }
            streams.push(s);
        }
        let n = spec.sample_len();
        let (width, block) = if spec.modality == Modality::Image && spec.shape.len() == 3 {
            (spec.shape[0], spec.shape[1] * spec.shape[2])
        } else {
            (n, 1)
        };
        let rows = streams.iter().flat_map(|s| s.values().chunks_exact(n.max(1)));
        stats.insert(spec.name.clone(), NormEntry::fit(rows, width, block));
    }
    for ep in &episodes[1..] {
        for s in &ep.streams {
            if s.spec.modality != Modality::Audio && !stats.entries.contains_key(&s.spec.name) {
                return Err(DatasetError::InconsistentKeys {
                    key: s.spec.name.clone(),
                    episode: first.id.clone(),
                });
            }
        }
    }
    Ok(stats)
}
