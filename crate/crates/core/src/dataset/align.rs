use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Episode, Modality, Result, StreamData, AUDIO_WINDOW};

/// One sample of a stream with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Policy-rate observation assembled by zero-order hold.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub time: f64,
    pub images: BTreeMap<String, Frame>,
    /// Concatenation of all proprio streams in manifest order.
    pub proprio: Vec<f32>,
    pub tactile: BTreeMap<String, Frame>,
    /// Trailing [`AUDIO_WINDOW`] samples of the first audio stream,
    /// zero-padded at the front.
    pub audio_window: Option<Vec<f32>>,
}

/// Horizon-`H` block of actions; padded rows repeat the last real action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub action_dim: usize,
    /// Row-major `H x action_dim`.
    pub actions: Vec<f64>,
    pub pad_mask: Vec<bool>,
}

impl ActionChunk {
    pub fn new(action_dim: usize, actions: Vec<f64>, pad_mask: Vec<bool>) -> Self {
        assert_eq!(actions.len(), action_dim * pad_mask.len());
        Self {
            action_dim,
            actions,
            pad_mask,
        }
    }

    /// Unpadded chunk from a prediction.
    pub fn dense(action_dim: usize, actions: Vec<f64>) -> Self {
        let h = actions.len() / action_dim;
        Self::new(action_dim, actions, vec![false; h])
    }

    pub fn horizon(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn n_real(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }
}

/// Observation at tick `t` (time `time`): the latest sample at or before
/// `time` from every non-action stream.
pub fn observation_at(ep: &Episode, t: usize, time: f64) -> Result<Observation> {
    let mut obs = Observation {
        t,
        time,
        images: BTreeMap::new(),
        proprio: Vec::new(),
        tactile: BTreeMap::new(),
        audio_window: None,
    };
    for s in &ep.streams {
        if s.spec.modality == Modality::Action {
            continue;
        }
        let idx = s.latest_at(time).ok_or_else(|| DatasetError::NoSampleBeforeTick {
            stream: s.spec.name.clone(),
            time,
        })?;
        match s.spec.modality {
            Modality::Audio => {
                if obs.audio_window.is_some() {
                    continue;
                }
                let StreamData::Audio { samples, .. } = &s.data else { unreachable!() };
                let end = idx + 1;
                let begin = end.saturating_sub(AUDIO_WINDOW);
                let mut w = vec![0.0f32; AUDIO_WINDOW - (end - begin)];
                w.extend_from_slice(&samples[begin..end]);
                obs.audio_window = Some(w);
            }
            Modality::Proprio => obs.proprio.extend_from_slice(s.sample(idx)),
            Modality::Image | Modality::Tactile => {
                let frame = Frame {
                    shape: s.spec.shape.clone(),
                    values: s.sample(idx).to_vec(),
                };
                let target = if s.spec.modality == Modality::Image { &mut obs.images } else { &mut obs.tactile };
                target.insert(s.spec.name.clone(), frame);
            }
            Modality::Action => unreachable!(),
        }
    }
    Ok(obs)
}

/// One observation per policy tick, ticks spaced `1/rate_hz` from the first
/// action timestamp up to the last one.
pub fn align_observations(ep: &Episode, rate_hz: f64) -> Result<Vec<Observation>> {
    let actions = ep.actions().ok_or(DatasetError::MissingActions)?;
    if actions.is_empty() {
        return Ok(Vec::new());
    }
    let t0 = actions.timestamp(0);
    let t_end = actions.timestamp(actions.len() - 1);
    let n = ((t_end - t0) * rate_hz + 1e-6).floor() as usize + 1;
    (0..n).map(|k| observation_at(ep, k, t0 + k as f64 / rate_hz)).collect()
}

/// Observation at action tick `t` and the target chunk `a[t..t+h]`.
pub fn sample_chunk(ep: &Episode, t: usize, h: usize) -> Result<(Observation, ActionChunk)> {
    if t >= ep.length_t {
        return Err(DatasetError::TickOutOfRange { t, len: ep.length_t });
    }
    let actions = ep.actions().ok_or(DatasetError::MissingActions)?;
    let obs = observation_at(ep, t, actions.timestamp(t))?;
    Ok((obs, chunk_from(actions.values(), actions.spec.sample_len(), ep.length_t, t, h)))
}

/// Chunk starting at `t` from a flat `T x dim` action table.
pub(crate) fn chunk_from(values: &[f32], dim: usize, len: usize, t: usize, h: usize) -> ActionChunk {
    let mut actions = Vec::with_capacity(h * dim);
    let mut pad = Vec::with_capacity(h);
    for i in 0..h {
        let src = (t + i).min(len - 1);
        actions.extend(values[src * dim..(src + 1) * dim].iter().map(|v| *v as f64));
        pad.push(t + i >= len);
    }
    ActionChunk::new(dim, actions, pad)
}
