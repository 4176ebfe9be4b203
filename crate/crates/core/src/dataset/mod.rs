//! Episodic multi-rate demonstration data.
//!
//! An episode is a directory holding `manifest.json` and one binary file per
//! stream. Record streams store `[f64 timestamp | f32 x prod(shape)]` records
//! back to back, little-endian. Audio streams store a single `f64` start
//! timestamp followed by a contiguous `f32` block at 44.1 kHz.

mod align;
mod io;
mod norm;
mod sensors;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{align_observations, observation_at, sample_chunk, ActionChunk, Frame, Observation};
pub use io::{episode_dirs, load_episode, read_manifest, read_stream, write_episode, MANIFEST_FILE};
pub use norm::{apply_normalization, compute_norm_stats, Direction, NormEntry, NormStats, STD_FLOOR};
pub use sensors::{SensorKind, SensorModality, SensorSpec};

pub const AUDIO_RATE_HZ: f64 = 44_100.0;
/// Trailing audio window handed to the policy: 0.5 s at 44.1 kHz.
pub const AUDIO_WINDOW: usize = 22_050;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("missing stream file for {stream}: {path}")]
    MissingStreamFile { stream: String, path: PathBuf },
    #[error("shape mismatch in {stream}: {reason}")]
    ShapeMismatch { stream: String, reason: String },
    #[error("non-monotone timestamps in {stream}")]
    NonMonotone { stream: String },
    #[error("rate mismatch in {stream}: declared {declared} Hz, observed {observed:.3} Hz")]
    RateMismatch { stream: String, declared: f64, observed: f64 },
    #[error("episode has no `actions` stream")]
    MissingActions,
    #[error("invalid stream {stream}: {reason}")]
    InvalidStream { stream: String, reason: String },
    #[error("stream {stream} has no sample at or before t={time}")]
    NoSampleBeforeTick { stream: String, time: f64 },
    #[error("tick {t} out of range for episode of length {len}")]
    TickOutOfRange { t: usize, len: usize },
    #[error("no episodes given")]
    Empty,
    #[error("key {key} present in some episodes but not in {episode}")]
    InconsistentKeys { key: String, episode: String },
    #[error("unknown normalization key {0}")]
    UnknownKey(String),
    #[error("normalization of {key}: {len} values is not a multiple of {width}")]
    NormShape { key: String, len: usize, width: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Proprio,
    Tactile,
    Audio,
    Action,
}

/// One entry of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub name: String,
    pub modality: Modality,
    pub rate_hz: f64,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

impl StreamSpec {
    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format_version: u32,
    pub id: String,
    pub streams: Vec<StreamSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StreamData {
    Records { timestamps: Vec<f64>, values: Vec<f32> },
    Audio { start: f64, samples: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub spec: StreamSpec,
    pub data: StreamData,
}

impl Stream {
    pub fn records(spec: StreamSpec, timestamps: Vec<f64>, values: Vec<f32>) -> Self {
        Self {
            spec,
            data: StreamData::Records { timestamps, values },
        }
    }

    pub fn audio(name: &str, file: &str, start: f64, samples: Vec<f32>) -> Self {
        Self {
            spec: StreamSpec {
                name: name.into(),
                modality: Modality::Audio,
                rate_hz: AUDIO_RATE_HZ,
                shape: vec![1],
                dtype: "float32".into(),
                file: file.into(),
            },
            data: StreamData::Audio { start, samples },
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        match &self.data {
            StreamData::Records { timestamps, .. } => timestamps.len(),
            StreamData::Audio { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        match &self.data {
            StreamData::Records { timestamps, .. } => timestamps[i],
            StreamData::Audio { start, .. } => start + i as f64 / AUDIO_RATE_HZ,
        }
    }

    /// Payload of record `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.spec.sample_len();
        match &self.data {
            StreamData::Records { values, .. } => &values[i * n..(i + 1) * n],
            StreamData::Audio { samples, .. } => &samples[i..i + 1],
        }
    }

    pub fn values(&self) -> &[f32] {
        match &self.data {
            StreamData::Records { values, .. } => values,
            StreamData::Audio { samples, .. } => samples,
        }
    }

    /// Index of the latest sample with timestamp `<= time`.
    pub fn latest_at(&self, time: f64) -> Option<usize> {
        let n = match &self.data {
            StreamData::Records { timestamps, .. } => timestamps.partition_point(|t| *t <= time + 1e-9),
            StreamData::Audio { start, samples } => {
                if time + 1e-9 < *start {
                    0
                } else {
                    (((time - start) * AUDIO_RATE_HZ + 1e-6).floor() as usize + 1).min(samples.len())
                }
            }
        };
        n.checked_sub(1)
    }

    /// Checks the per-stream invariants: shape, monotone timestamps, audio
    /// format and declared rate.
    pub fn validate(&self) -> Result<()> {
        let name = self.spec.name.clone();
        if self.spec.dtype != "float32" {
            return Err(DatasetError::InvalidStream {
                stream: name,
                reason: format!("unsupported dtype {}", self.spec.dtype),
            });
        }
        if !(self.spec.rate_hz > 0.0) {
            return Err(DatasetError::InvalidStream {
                stream: name,
                reason: "rate_hz must be positive".into(),
            });
        }
        match &self.data {
            StreamData::Audio { .. } => {
                if self.spec.modality != Modality::Audio {
                    return Err(DatasetError::InvalidStream {
                        stream: name,
                        reason: "contiguous block used for a non-audio stream".into(),
                    });
                }
            }
            StreamData::Records { timestamps, values } => {
                if self.spec.modality == Modality::Audio {
                    return Err(DatasetError::InvalidStream {
                        stream: name,
                        reason: "audio must be stored as a contiguous block".into(),
                    });
                }
                let n = self.spec.sample_len();
                if values.len() != timestamps.len() * n {
                    return Err(DatasetError::ShapeMismatch {
                        stream: name,
                        reason: format!("{} values for {} records of shape {:?}", values.len(), timestamps.len(), self.spec.shape),
                    });
                }
                if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(DatasetError::NonMonotone { stream: name });
                }
                if timestamps.len() >= 3 {
                    let observed = (timestamps.len() - 1) as f64 / (timestamps[timestamps.len() - 1] - timestamps[0]);
                    if (observed - self.spec.rate_hz).abs() > 0.05 * self.spec.rate_hz {
                        return Err(DatasetError::RateMismatch {
                            stream: name,
                            declared: self.spec.rate_hz,
                            observed,
                        });
                    }
                }
            }
        }
        if self.spec.modality == Modality::Audio && (self.spec.shape != [1] || self.spec.rate_hz != AUDIO_RATE_HZ) {
            return Err(DatasetError::InvalidStream {
                stream: name,
                reason: "audio streams must have shape [1] and rate 44100 Hz".into(),
            });
        }
        Ok(())
    }
}

/// A recorded demonstration. Immutable once built or loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub streams: Vec<Stream>,
    pub manifest: StreamManifest,
    pub length_t: usize,
}

impl Episode {
    /// Builds and validates an episode from in-memory streams.
    pub fn new(id: impl Into<String>, streams: Vec<Stream>, metadata: BTreeMap<String, serde_json::Value>) -> Result<Self> {
        let id = id.into();
        let manifest = StreamManifest {
            format_version: FORMAT_VERSION,
            id: id.clone(),
            streams: streams.iter().map(|s| s.spec.clone()).collect(),
            metadata,
        };
        let mut ep = Self {
            id,
            streams,
            manifest,
            length_t: 0,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&mut self) -> Result<()> {
        for s in &self.streams {
            s.validate()?;
        }
        for spec in &self.manifest.streams {
            let s = self.stream(&spec.name).ok_or_else(|| DatasetError::MissingStreamFile {
                stream: spec.name.clone(),
                path: PathBuf::from(&spec.file),
            })?;
            if &s.spec != spec {
                return Err(DatasetError::ShapeMismatch {
                    stream: spec.name.clone(),
                    reason: "stream does not match its manifest entry".into(),
                });
            }
        }
        let actions = self.actions().ok_or(DatasetError::MissingActions)?;
        if actions.spec.modality != Modality::Action {
            return Err(DatasetError::InvalidStream {
                stream: "actions".into(),
                reason: "`actions` must have modality action".into(),
            });
        }
        self.length_t = actions.len();
        Ok(())
    }

    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.spec.name == name)
    }

    pub fn actions(&self) -> Option<&Stream> {
        self.stream("actions")
    }

    pub fn action_dim(&self) -> usize {
        self.actions().map(|s| s.spec.sample_len()).unwrap_or(0)
    }

    pub fn streams_of(&self, m: Modality) -> impl Iterator<Item = &Stream> {
        self.streams.iter().filter(move |s| s.spec.modality == m)
    }

    pub fn metadata(&self, key: &str) -> Option<&serde_json::Value> {
        self.manifest.metadata.get(key)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn spec(name: &str, modality: Modality, rate: f64, shape: &[usize]) -> StreamSpec {
        StreamSpec {
            name: name.into(),
            modality,
            rate_hz: rate,
            shape: shape.to_vec(),
            dtype: "float32".into(),
            file: format!("{name}.bin"),
        }
    }

    /// Stream whose sample values are functions of their timestamps.
    pub fn ramp(name: &str, modality: Modality, rate: f64, shape: &[usize], n: usize, f: impl Fn(f64, usize) -> f32) -> Stream {
        let s = spec(name, modality, rate, shape);
        let len = s.sample_len();
        let ts: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();
        let vals = ts.iter().flat_map(|&t| (0..len).map(move |j| (t, j))).map(|(t, j)| f(t, j)).collect();
        Stream::records(s, ts, vals)
    }

    pub fn simple_episode(t_len: usize) -> Episode {
        let actions = ramp("actions", Modality::Action, 10.0, &[2], t_len, |t, j| (t as f32) * (j as f32 + 1.0));
        let proprio = ramp("proprio", Modality::Proprio, 10.0, &[3], t_len, |t, j| t as f32 + j as f32);
        Episode::new("ep", vec![actions, proprio], BTreeMap::new()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn audio_stream_must_be_mono_44k() {
        let mut s = Stream::audio("mic", "mic.bin", 0.0, vec![0.0; 10]);
        assert!(s.validate().is_ok());
        s.spec.rate_hz = 16_000.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn latest_at_is_nearest_past() {
        let s = ramp("x", Modality::Tactile, 20.0, &[1], 10, |t, _| t as f32);
        assert_eq!(s.latest_at(-0.01), None);
        assert_eq!(s.latest_at(0.0), Some(0));
        assert_eq!(s.latest_at(0.149), Some(2));
        assert_eq!(s.latest_at(0.15), Some(3));
        let a = Stream::audio("mic", "mic.bin", 0.0, vec![0.0; 100]);
        assert_eq!(a.latest_at(0.0), Some(0));
        assert_eq!(a.latest_at(10.0), Some(99));
    }

    #[test]
    fn episode_requires_actions() {
        let p = ramp("proprio", Modality::Proprio, 10.0, &[3], 5, |_, _| 0.0);
        assert!(matches!(Episode::new("e", vec![p], BTreeMap::new()), Err(DatasetError::MissingActions)));
    }

    #[test]
    fn rate_mismatch_detected() {
        let mut p = ramp("actions", Modality::Action, 10.0, &[1], 5, |_, _| 0.0);
        p.spec.rate_hz = 20.0;
        assert!(matches!(p.validate(), Err(DatasetError::RateMismatch { .. })));
    }
}
