//! Synthetic tactile sensors driven by ground-truth contact forces.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Result, RolloutError};
use crate::dataset::AUDIO_RATE_HZ;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorModelKind {
    /// Normal force only, one channel.
    ScalarForce,
    /// Normal force spread over a `[rows, cols]` grid, centroid shifted by shear.
    TaxelArray,
    /// `[cells, 3]` readings of (shear x, shear z, normal).
    Force3Axis,
    /// Contact microphone: bursts on contact onsets and slips.
    AudioVibration,
}

/// Ground-truth contact at the sensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactForce {
    pub normal: f64,
    pub shear: [f64; 2],
}

impl ContactForce {
    pub fn normal(n: f64) -> Self {
        Self { normal: n, shear: [0.0; 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSensorModel {
    pub kind: SensorModelKind,
    /// Reading shape, e.g. `[1]`, `[12, 32]`, `[5, 3]`.
    pub shape: Vec<usize>,
    pub gain: f64,
    pub noise_std: f64,
    /// Additive reading drift per second.
    pub drift_rate: f64,
    /// Fraction of the peak load that remains on the unloading branch.
    pub hysteresis: f64,
    /// First-order time constant in seconds.
    pub tau: f64,
    /// Relative gain increase over the first episodes of a protocol.
    #[serde(default)]
    pub gain_ramp: f64,
    /// Episodes until the ramp settles.
    #[serde(default = "default_ramp_episodes")]
    pub ramp_episodes: usize,
}

fn default_ramp_episodes() -> usize {
    10
}

impl SyntheticSensorModel {
    pub fn first_order(kind: SensorModelKind, shape: Vec<usize>, gain: f64, tau: f64) -> Self {
        Self {
            kind,
            shape,
            gain,
            noise_std: 0.0,
            drift_rate: 0.0,
            hysteresis: 0.0,
            tau,
            gain_ramp: 0.0,
            ramp_episodes: default_ramp_episodes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(RolloutError::Model("noise_std must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(RolloutError::Model("tau must be positive".into()));
        }
        let want_rank = match self.kind {
            SensorModelKind::ScalarForce | SensorModelKind::AudioVibration => 1,
            SensorModelKind::TaxelArray | SensorModelKind::Force3Axis => 2,
        };
        if self.shape.len() != want_rank || self.shape.contains(&0) || (self.kind == SensorModelKind::Force3Axis && self.shape[1] != 3) {
            return Err(RolloutError::Model(format!("shape {:?} does not fit {:?}", self.shape, self.kind)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Gain multiplier for the `episode`-th repetition: rises linearly by
    /// `gain_ramp` over `ramp_episodes`, then stays.
    pub fn episode_gain(&self, episode: usize) -> f64 {
        let frac = (episode as f64 / self.ramp_episodes.max(1) as f64).min(1.0);
        self.gain * (1.0 + self.gain_ramp * frac)
    }

    /// Noise-free steady-state reading for a contact.
    pub fn ideal(&self, f: ContactForce, gain: f64) -> Vec<f64> {
        match self.kind {
            SensorModelKind::ScalarForce | SensorModelKind::AudioVibration => vec![gain * f.normal],
            SensorModelKind::Force3Axis => {
                let cells = self.shape[0];
                (0..cells)
                    .flat_map(|i| {
                        // Cells further from the contact center see less load.
                        let w = 1.0 - 0.5 * (i as f64 - (cells - 1) as f64 / 2.0).abs() / cells as f64;
                        [gain * w * f.shear[0], gain * w * f.shear[1], gain * w * f.normal]
                    })
                    .collect()
            }
            SensorModelKind::TaxelArray => {
                let (r, c) = (self.shape[0], self.shape[1]);
                let cy = (r as f64 - 1.0) / 2.0 + f.shear[1].clamp(-1.0, 1.0) * r as f64 / 4.0;
                let cx = (c as f64 - 1.0) / 2.0 + f.shear[0].clamp(-1.0, 1.0) * c as f64 / 4.0;
                let s2 = 2.0 * (r.min(c) as f64 / 4.0).powi(2);
                (0..r * c)
                    .map(|k| {
                        let (y, x) = ((k / c) as f64, (k % c) as f64);
                        gain * f.normal * (-((y - cy).powi(2) + (x - cx).powi(2)) / s2).exp()
                    })
                    .collect()
            }
        }
    }
}

/// Running state of one sensor instance.
#[derive(Clone, Debug)]
pub struct SensorState {
    model: SyntheticSensorModel,
    gain: f64,
    lagged: Vec<f64>,
    peak: ContactForce,
    time: f64,
    noise: Normal<f64>,
}

impl SensorState {
    pub fn new(model: &SyntheticSensorModel) -> Self {
        Self::with_gain(model, model.gain)
    }

    pub fn with_gain(model: &SyntheticSensorModel, gain: f64) -> Self {
        Self {
            model: model.clone(),
            gain,
            lagged: vec![0.0; model.channels()],
            peak: ContactForce::default(),
            time: 0.0,
            noise: Normal::new(0.0, model.noise_std.max(0.0)).expect("finite std"),
        }
    }

    /// Changes the gain from the next step on; lag, drift and peak state carry over.
    pub fn set_gain(&mut self, gain: f64) {
        self.gain = gain;
    }

    /// Advances by `dt` under contact `f` and returns the reading.
    pub fn step<R: Rng + ?Sized>(&mut self, f: ContactForce, dt: f64, rng: &mut R) -> Vec<f64> {
        self.time += dt;
        self.peak.normal = self.peak.normal.max(f.normal);
        for i in 0..2 {
            if f.shear[i].abs() > self.peak.shear[i].abs() {
                self.peak.shear[i] = f.shear[i];
            }
        }
        let h = self.model.hysteresis;
        let loaded = ContactForce {
            normal: f.normal + h * (self.peak.normal - f.normal),
            shear: [f.shear[0] + h * (self.peak.shear[0] - f.shear[0]), f.shear[1] + h * (self.peak.shear[1] - f.shear[1])],
        };
        let target = self.model.ideal(loaded, self.gain);
        let alpha = 1.0 - (-dt / self.model.tau).exp();
        for (y, t) in self.lagged.iter_mut().zip(&target) {
            *y += (t - *y) * alpha;
        }
        let drift = self.model.drift_rate * self.time;
        self.lagged
            .iter()
            .map(|y| y + drift + if self.model.noise_std > 0.0 { self.noise.sample(rng) } else { 0.0 })
            .collect()
    }
}

/// Readings for a force record sampled every `dt`, starting from rest.
pub fn synth_tactile<R: Rng + ?Sized>(record: &[ContactForce], model: &SyntheticSensorModel, dt: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    model.validate()?;
    if !(dt > 0.0) {
        return Err(RolloutError::Model("dt must be positive".into()));
    }
    let mut s = SensorState::new(model);
    Ok(record.iter().map(|f| s.step(*f, dt, rng)).collect())
}

/// Contact-microphone signal at the audio rate: a noise floor plus decaying
/// 2-5 kHz bursts at event times, amplitude proportional to event size.
#[derive(Clone, Debug)]
pub struct AudioSynth {
    pub gain: f64,
    pub noise_std: f64,
    /// Active bursts: (start sample, amplitude).
    bursts: Vec<(u64, f64)>,
    sample: u64,
    noise: Normal<f64>,
}

const BURST_DECAY_S: f64 = 0.01;
const BURST_FREQS: [f64; 3] = [2200.0, 3100.0, 4700.0];

impl AudioSynth {
    pub fn new(gain: f64, noise_std: f64) -> Self {
        Self {
            gain,
            noise_std,
            bursts: Vec::new(),
            sample: 0,
            noise: Normal::new(0.0, noise_std.max(0.0)).expect("finite std"),
        }
    }

    pub fn event(&mut self, magnitude: f64) {
        if magnitude > 0.0 {
            self.bursts.push((self.sample, self.gain * magnitude));
        }
    }

    /// Next `n` samples.
    pub fn render<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<f32> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = if self.noise_std > 0.0 { self.noise.sample(rng) } else { 0.0 };
            for &(start, amp) in &self.bursts {
                let t = (self.sample - start) as f64 / AUDIO_RATE_HZ;
                let env = amp * (-t / BURST_DECAY_S).exp();
                v += env * BURST_FREQS.iter().map(|f| (2.0 * std::f64::consts::PI * f * t).sin()).sum::<f64>() / 3.0;
            }
            out.push(v as f32);
            self.sample += 1;
        }
        let now = self.sample;
        self.bursts.retain(|&(s, _)| (now - s) as f64 / AUDIO_RATE_HZ < 20.0 * BURST_DECAY_S);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AUDIO_WINDOW;
    use crate::encoders::audio_to_melspec;
    use crate::encoders::{N_FRAMES, N_MELS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn step_response_is_first_order() {
        let m = SyntheticSensorModel::first_order(SensorModelKind::ScalarForce, vec![1], 2.0, 0.05);
        let dt = 0.01;
        let rec = vec![ContactForce::normal(3.0); 50];
        let out = synth_tactile(&rec, &m, dt, &mut rng()).unwrap();
        for (k, r) in out.iter().enumerate() {
            let t = (k + 1) as f64 * dt;
            let want = 2.0 * 3.0 * (1.0 - (-t / 0.05f64).exp());
            assert!((r[0] - want).abs() < 1e-12, "{t}: {} vs {want}", r[0]);
        }
    }

    #[test]
    fn zero_force_reads_pure_drift() {
        let mut m = SyntheticSensorModel::first_order(SensorModelKind::Force3Axis, vec![5, 3], 1.0, 0.1);
        m.drift_rate = 0.3;
        let out = synth_tactile(&vec![ContactForce::default(); 20], &m, 0.1, &mut rng()).unwrap();
        for (k, r) in out.iter().enumerate() {
            let want = 0.3 * (k + 1) as f64 * 0.1;
            assert!(r.iter().all(|v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn hysteresis_leaves_offset_after_release() {
        let mut m = SyntheticSensorModel::first_order(SensorModelKind::ScalarForce, vec![1], 1.0, 0.01);
        m.hysteresis = 0.1;
        let mut rec = vec![ContactForce::normal(5.0); 100];
        rec.extend(vec![ContactForce::normal(0.0); 100]);
        let out = synth_tactile(&rec, &m, 0.01, &mut rng()).unwrap();
        assert!((out[199][0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn invalid_models_rejected() {
        let mut m = SyntheticSensorModel::first_order(SensorModelKind::ScalarForce, vec![1], 1.0, 0.0);
        assert!(m.validate().is_err());
        m.tau = 0.1;
        m.noise_std = -1.0;
        assert!(m.validate().is_err());
        let m = SyntheticSensorModel::first_order(SensorModelKind::Force3Axis, vec![5, 2], 1.0, 0.1);
        assert!(m.validate().is_err());
    }

    #[test]
    fn taxel_centroid_follows_shear() {
        let m = SyntheticSensorModel::first_order(SensorModelKind::TaxelArray, vec![12, 32], 1.0, 0.1);
        let centroid = |f: ContactForce| {
            let v = m.ideal(f, 1.0);
            let s: f64 = v.iter().sum();
            v.iter().enumerate().map(|(k, x)| (k % 32) as f64 * x).sum::<f64>() / s
        };
        let c0 = centroid(ContactForce::normal(1.0));
        let c1 = centroid(ContactForce { normal: 1.0, shear: [0.5, 0.0] });
        assert!((c0 - 15.5).abs() < 1e-9 && c1 > c0 + 2.0);
    }

    #[test]
    fn slip_burst_raises_spectrogram_energy() {
        let mut a = AudioSynth::new(1.0, 1e-3);
        let mut r = rng();
        let quiet = a.render(AUDIO_WINDOW, &mut r);
        a.event(1.0);
        let loud = a.render(AUDIO_WINDOW, &mut r);
        // Peak per-frame mel energy.
        let energy = |w: &[f32]| {
            let m = audio_to_melspec(w).unwrap();
            (0..N_FRAMES).map(|f| (0..N_MELS).map(|b| m.values[b * N_FRAMES + f].exp()).sum::<f64>()).fold(0.0, f64::max)
        };
        assert!(energy(&loud) > 10.0 * energy(&quiet), "{} vs {}", energy(&loud), energy(&quiet));
    }
}
