//! Log-mel spectrogram of a 0.5 s contact-microphone window.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{EncoderError, Result};
use crate::dataset::{AUDIO_RATE_HZ, AUDIO_WINDOW};

pub const N_FFT: usize = 512;
pub const HOP: usize = 256;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = 1 + AUDIO_WINDOW / HOP;
/// Flattened spectrogram length, `N_MELS * N_FRAMES`.
pub const MEL_LEN: usize = N_MELS * N_FRAMES;
pub const LOG_EPS: f64 = 1e-10;

/// `[N_MELS, N_FRAMES]` log-mel magnitudes, row-major by mel bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub values: Vec<f64>,
}

impl MelSpec {
    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * N_FRAMES + frame]
    }

    pub fn shape(&self) -> (usize, usize) {
        (N_MELS, N_FRAMES)
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and triangular filterbank.
pub struct MelSpectrogram {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `[N_MELS][N_FFT/2 + 1]`
    filters: Vec<Vec<f64>>,
    centers: Vec<f64>,
}

impl Default for MelSpectrogram {
    fn default() -> Self {
        Self::new()
    }
}

impl MelSpectrogram {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
            .collect();
        let f_max = AUDIO_RATE_HZ / 2.0;
        let m_max = hz_to_mel(f_max);
        let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(m_max * i as f64 / (N_MELS + 1) as f64)).collect();
        let n_bins = N_FFT / 2 + 1;
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * AUDIO_RATE_HZ / N_FFT as f64;
                        ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let centers = edges[1..=N_MELS].to_vec();
        Self { fft, window, filters, centers }
    }

    /// Shared instance; the filterbank is immutable.
    pub fn global() -> &'static MelSpectrogram {
        static INSTANCE: OnceLock<MelSpectrogram> = OnceLock::new();
        INSTANCE.get_or_init(MelSpectrogram::new)
    }

    /// Center frequency of every mel filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.filters[m]
    }

    pub fn compute(&self, window: &[f32]) -> Result<MelSpec> {
        if window.len() != AUDIO_WINDOW {
            return Err(EncoderError::WindowLength {
                expected: AUDIO_WINDOW,
                got: window.len(),
            });
        }
        if window.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite("audio window".into()));
        }
        let pad = N_FFT / 2;
        let mut padded = vec![0.0f64; AUDIO_WINDOW + 2 * pad];
        for (d, s) in padded[pad..pad + AUDIO_WINDOW].iter_mut().zip(window) {
            *d = *s as f64;
        }
        let n_bins = N_FFT / 2 + 1;
        let mut values = vec![0.0; MEL_LEN];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut mag = vec![0.0; n_bins];
        for frame in 0..N_FRAMES {
            let start = frame * HOP;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (mi, f) in self.filters.iter().enumerate() {
                let e: f64 = f.iter().zip(&mag).map(|(w, a)| w * a).sum();
                values[mi * N_FRAMES + frame] = (e + LOG_EPS).ln();
            }
        }
        Ok(MelSpec { values })
    }
}

/// Log-mel spectrogram of exactly [`AUDIO_WINDOW`] samples.
pub fn audio_to_melspec(window: &[f32]) -> Result<MelSpec> {
    MelSpectrogram::global().compute(window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64) -> Vec<f32> {
        (0..AUDIO_WINDOW).map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / AUDIO_RATE_HZ).sin() as f32).collect()
    }

    #[test]
    fn shape_is_128_by_87() {
        let s = audio_to_melspec(&tone(440.0)).unwrap();
        assert_eq!(s.shape(), (128, 87));
        assert_eq!(s.flatten().len(), 11_136);
        assert!(s.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_is_uniform_floor() {
        let s = audio_to_melspec(&vec![0.0; AUDIO_WINDOW]).unwrap();
        let floor = LOG_EPS.ln();
        assert!(s.values.iter().all(|v| *v == floor));
    }

    #[test]
    fn bad_windows_rejected() {
        assert!(matches!(audio_to_melspec(&[0.0; 100]), Err(EncoderError::WindowLength { .. })));
        let mut w = vec![0.0; AUDIO_WINDOW];
        w[5] = f32::NAN;
        assert!(matches!(audio_to_melspec(&w), Err(EncoderError::NonFinite(_))));
    }

    fn nearest_center(mel: &MelSpectrogram, f: f64) -> usize {
        let c = mel.centers_hz();
        (0..N_MELS).min_by(|a, b| (c[*a] - f).abs().total_cmp(&(c[*b] - f).abs())).unwrap()
    }

    fn argmax_per_frame(s: &MelSpec) -> Vec<usize> {
        // Interior frames only: the edge frames see half a window of padding.
        (1..N_FRAMES - 1).map(|fr| (0..N_MELS).max_by(|a, b| s.at(*a, fr).total_cmp(&s.at(*b, fr))).unwrap()).collect()
    }

    #[test]
    fn bin_centred_tone_peaks_at_nearest_center() {
        let mel = MelSpectrogram::global();
        // FFT bin 12 of a 512-point transform.
        let f = 12.0 * AUDIO_RATE_HZ / N_FFT as f64;
        let want = nearest_center(mel, f);
        assert!(argmax_per_frame(&mel.compute(&tone(f)).unwrap()).iter().all(|a| *a == want));
    }

    #[test]
    fn one_khz_peak_constant_and_within_one_filter() {
        // Near 1 kHz the FFT bins are 86 Hz apart while mel centers are
        // about 46 Hz apart, so the peak may land on a neighbouring filter.
        let mel = MelSpectrogram::global();
        let want = nearest_center(mel, 1000.0);
        let args = argmax_per_frame(&mel.compute(&tone(1000.0)).unwrap());
        assert!(args.iter().all(|a| *a == args[0]));
        assert!(args[0].abs_diff(want) <= 1, "{} vs {want}", args[0]);
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 1000.0, 22_050.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9 * f.max(1.0));
        }
    }

    #[test]
    fn hop_shift_preserves_frame_energies() {
        let mut a = vec![0.0f32; AUDIO_WINDOW];
        a[40 * HOP] = 1.0;
        let mut b = vec![0.0f32; AUDIO_WINDOW];
        b[41 * HOP] = 1.0;
        let (sa, sb) = (audio_to_melspec(&a).unwrap(), audio_to_melspec(&b).unwrap());
        let energy = |s: &MelSpec, f: usize| -> f64 { (0..N_MELS).map(|m| s.at(m, f).exp()).sum() };
        for f in 1..N_FRAMES - 2 {
            let (ea, eb) = (energy(&sa, f), energy(&sb, f + 1));
            assert!((ea - eb).abs() <= 1e-9 * ea.max(1.0), "frame {f}: {ea} vs {eb}");
        }
    }
}
