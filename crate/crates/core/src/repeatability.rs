//! Press-release repeatability protocol: simulation, analysis and reporting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dataset::{DatasetError, Episode, Modality, Stream, StreamSpec};
use crate::rollout::{ContactForce, RolloutError, SensorModelKind, SensorState, SyntheticSensorModel};

/// Level a normalized reading must reach to count as responded.
pub const RESPONSE_LEVEL: f64 = 0.9;
/// Sample rate of simulated episodes.
pub const SIM_RATE_HZ: f64 = 100.0;
/// Sample rate of simulated contact-microphone envelopes.
pub const SIM_AUDIO_RATE_HZ: f64 = 1000.0;
/// Force applied during the press phase of simulated episodes.
pub const PRESS_FORCE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RepeatError {
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("need at least 2 episodes, got {0}")]
    TooFewEpisodes(usize),
    #[error("episode {index} covers {covered:.3} s, protocol needs {needed:.3} s")]
    ShortEpisode { index: usize, covered: f64, needed: f64 },
    #[error("malformed series: {0}")]
    Series(String),
    #[error(transparent)]
    Model(#[from] RolloutError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("plotting failed: {0}")]
    Plot(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RepeatError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub n_episodes: usize,
    pub press_s: f64,
    pub release_s: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self { n_episodes: 60, press_s: 30.0, release_s: 30.0 }
    }
}

impl ProtocolSpec {
    /// Short episodes for the contact microphone.
    pub fn acoustic() -> Self {
        Self { n_episodes: 60, press_s: 3.0, release_s: 3.0 }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "acoustic" => Some(Self::acoustic()),
            _ => None,
        }
    }

    pub fn duration(&self) -> f64 {
        self.press_s + self.release_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 || !(self.press_s > 0.0) || !(self.release_s >= 0.0) || !self.duration().is_finite() {
            return Err(RepeatError::Protocol(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One episode of raw readings, `values` row-major `[len, channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadingSeries {
    /// Seconds since the episode's first sample.
    pub times: Vec<f64>,
    pub channels: usize,
    pub values: Vec<f64>,
    /// Press onset, same clock as `times`.
    pub press_onset: f64,
}

impl ReadingSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.values.len() != self.times.len() * self.channels {
            return Err(RepeatError::Series(format!("{} values for {} samples x {} channels", self.values.len(), self.times.len(), self.channels)));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RepeatError::Series("timestamps must increase".into()));
        }
        Ok(())
    }

    /// Max over channels per sample.
    pub fn reduced(&self) -> Vec<f64> {
        self.values.chunks(self.channels).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }
}

fn sample_rate(kind: SensorModelKind) -> f64 {
    match kind {
        SensorModelKind::AudioVibration => SIM_AUDIO_RATE_HZ,
        _ => SIM_RATE_HZ,
    }
}

/// Runs the press-release protocol on one continuously running synthetic
/// sensor: drift and hysteresis carry across episodes, and the gain follows
/// the model's episode ramp.
pub fn simulate_protocol<R: Rng + ?Sized>(model: &SyntheticSensorModel, spec: &ProtocolSpec, rng: &mut R) -> Result<Vec<ReadingSeries>> {
    model.validate()?;
    spec.validate()?;
    let rate = sample_rate(model.kind);
    let dt = 1.0 / rate;
    let n = (spec.duration() * rate).round() as usize;
    let press_n = (spec.press_s * rate).round() as usize;
    let mut sensor = SensorState::new(model);
    let mut out = Vec::with_capacity(spec.n_episodes);
    for ep in 0..spec.n_episodes {
        sensor.set_gain(model.episode_gain(ep));
        let mut values = Vec::with_capacity(n * model.channels());
        // Sample k is read at k*dt; sample 0 is the resting reading.
        values.extend(sensor.step(ContactForce::default(), 0.0, rng));
        for k in 1..n {
            let f = if k - 1 < press_n { PRESS_FORCE } else { 0.0 };
            values.extend(sensor.step(ContactForce::normal(f), dt, rng));
        }
        out.push(ReadingSeries { times: (0..n).map(|k| k as f64 * dt).collect(), channels: model.channels(), values, press_onset: 0.0 });
    }
    Ok(out)
}

/// Wraps a series as a dataset episode: one tactile stream plus the
/// commanded press force as `actions`.
pub fn series_to_episode(series: &ReadingSeries, shape: &[usize], spec: &ProtocolSpec, id: &str) -> Result<Episode> {
    series.check()?;
    let rate = if series.len() > 1 { 1.0 / (series.times[1] - series.times[0]) } else { SIM_RATE_HZ };
    let mk = |name: &str, modality, shape: &[usize]| StreamSpec {
        name: name.into(),
        modality,
        rate_hz: rate,
        shape: shape.to_vec(),
        dtype: "float32".into(),
        file: format!("{name}.bin"),
    };
    let force: Vec<f32> = series
        .times
        .iter()
        .map(|t| if *t >= series.press_onset && *t < series.press_onset + spec.press_s { PRESS_FORCE as f32 } else { 0.0 })
        .collect();
    let streams = vec![
        Stream::records(mk("actions", Modality::Action, &[1]), series.times.clone(), force),
        Stream::records(mk("tactile", Modality::Tactile, shape), series.times.clone(), series.values.iter().map(|v| *v as f32).collect()),
    ];
    let mut meta = BTreeMap::new();
    meta.insert("press_onset_s".into(), json!(series.press_onset));
    meta.insert("protocol".into(), json!(spec));
    Ok(Episode::new(id, streams, meta)?)
}

/// Reads the single tactile (or audio-envelope) stream of a recorded episode.
pub fn series_from_episode(ep: &Episode) -> Result<ReadingSeries> {
    let mut candidates = ep.streams_of(Modality::Tactile).chain(ep.streams_of(Modality::Audio));
    let s = candidates.next().ok_or_else(|| RepeatError::Series(format!("episode {} has no tactile stream", ep.id)))?;
    if candidates.next().is_some() {
        return Err(RepeatError::Series(format!("episode {} has more than one tactile stream", ep.id)));
    }
    let t0 = if s.is_empty() { 0.0 } else { s.timestamp(0) };
    let times: Vec<f64> = (0..s.len()).map(|i| s.timestamp(i) - t0).collect();
    let values = s.values().iter().map(|v| *v as f64).collect();
    let onset = ep.metadata("press_onset_s").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let series = ReadingSeries { times, channels: s.spec.sample_len(), values, press_onset: onset };
    series.check()?;
    Ok(series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    /// Reduced reading at each episode's first sample.
    pub resting: Vec<f64>,
    /// Least-squares slope of `resting` against episode index.
    pub slope_per_episode: f64,
}

/// Cross-episode mean of normalized readings on the reference time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    /// Seconds since press onset.
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    /// `mean -/+ std`, clamped to `[0, 1]`.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityReport {
    pub sensor: String,
    pub n_episodes: usize,
    /// Per episode; `None` when the 90% level was never reached.
    pub response_times: Vec<Option<f64>>,
    pub response_time_mean_s: Option<f64>,
    pub response_time_std_s: Option<f64>,
    pub n_excluded: usize,
    /// Mean over matched times of the cross-episode std of normalized readings.
    pub episode_std: f64,
    pub drift: DriftSummary,
    pub curve: MeanCurve,
}

impl RepeatabilityReport {
    /// `mean±std` response time and the episode std, three decimals each.
    pub fn table_row(&self) -> (String, String) {
        let rt = match (self.response_time_mean_s, self.response_time_std_s) {
            (Some(m), Some(s)) => format!("{m:.3}±{s:.3}"),
            _ => "n/a".to_string(),
        };
        (rt, format!("{:.3}", self.episode_std))
    }
}

/// Sample mean and std (n - 1). Shifted by the first element so identical
/// inputs give exactly zero spread.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs[0] + xs.iter().map(|x| x - xs[0]).sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Min-max normalizes each episode over its whole run. A flat episode maps
/// to all zeros.
fn normalize(r: &[f64]) -> Vec<f64> {
    let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; r.len()];
    }
    r.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Index of the sample nearest to `t` in sorted `times`.
fn nearest(times: &[f64], t: f64) -> usize {
    match times.binary_search_by(|x| x.total_cmp(&t)) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i == times.len() => i - 1,
        Err(i) => {
            if t - times[i - 1] <= times[i] - t {
                i - 1
            } else {
                i
            }
        }
    }
}

pub fn analyze_repeatability(sensor: &str, episodes: &[ReadingSeries], spec: &ProtocolSpec) -> Result<RepeatabilityReport> {
    spec.validate()?;
    if episodes.len() < 2 {
        return Err(RepeatError::TooFewEpisodes(episodes.len()));
    }
    for (i, e) in episodes.iter().enumerate() {
        e.check()?;
        let covered = e.times.last().map_or(0.0, |t| t - e.press_onset);
        let period = if e.len() > 1 { e.times[1] - e.times[0] } else { 0.0 };
        if e.is_empty() || covered + period + 1e-9 < spec.duration() {
            return Err(RepeatError::ShortEpisode { index: i, covered, needed: spec.duration() });
        }
    }
    let reduced: Vec<Vec<f64>> = episodes.iter().map(ReadingSeries::reduced).collect();
    let norm: Vec<Vec<f64>> = reduced.iter().map(|r| normalize(r)).collect();
    let response_times: Vec<Option<f64>> = episodes
        .iter()
        .zip(&norm)
        .map(|(e, n)| {
            let peak = n.iter().copied().fold(0.0, f64::max);
            if !(peak > 0.0) {
                return None;
            }
            e.times.iter().zip(n).find(|(t, v)| **t >= e.press_onset && **v >= RESPONSE_LEVEL * peak).map(|(t, _)| t - e.press_onset)
        })
        .collect();
    let included: Vec<f64> = response_times.iter().flatten().copied().collect();
    let n_excluded = response_times.len() - included.len();
    if n_excluded > 0 {
        log::warn!("{sensor}: {n_excluded} episodes never reached {RESPONSE_LEVEL} of their maximum");
    }
    let (rt_mean, rt_std) = if included.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&included);
        (Some(m), Some(s))
    };

    // Reference grid: the first episode's samples inside the protocol window.
    let r0 = &episodes[0];
    let grid: Vec<f64> = r0.times.iter().map(|t| t - r0.press_onset).filter(|t| *t >= 0.0 && *t <= spec.duration() + 1e-9).collect();
    let rel: Vec<Vec<f64>> = episodes.iter().map(|e| e.times.iter().map(|t| t - e.press_onset).collect()).collect();
    let mut curve = MeanCurve { t: grid.clone(), mean: vec![], lo: vec![], hi: vec![] };
    let mut std_sum = 0.0;
    for &t in &grid {
        let col: Vec<f64> = rel.iter().zip(&norm).map(|(r, n)| n[nearest(r, t)]).collect();
        let (m, s) = mean_std(&col);
        std_sum += s;
        curve.mean.push(m);
        curve.lo.push((m - s).clamp(0.0, 1.0));
        curve.hi.push((m + s).clamp(0.0, 1.0));
    }
    let episode_std = std_sum / grid.len().max(1) as f64;

    let resting: Vec<f64> = reduced.iter().map(|r| r[0]).collect();
    let n = resting.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = resting.iter().sum::<f64>() / n;
    let sxy: f64 = resting.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let sxx: f64 = (0..resting.len()).map(|i| (i as f64 - xm).powi(2)).sum();

    Ok(RepeatabilityReport {
        sensor: sensor.to_string(),
        n_episodes: episodes.len(),
        response_times,
        response_time_mean_s: rt_mean,
        response_time_std_s: rt_std,
        n_excluded,
        episode_std,
        drift: DriftSummary { resting, slope_per_episode: sxy / sxx },
        curve,
    })
}

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Serialize)]
struct SummaryRow<'a> {
    sensor: &'a str,
    response_time_mean: Option<f64>,
    response_time_std: Option<f64>,
    std: f64,
    n_excluded: usize,
}

fn plot(report: &RepeatabilityReport, path: &Path) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| RepeatError::Plot(e.to_string());
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let c = &report.curve;
    let t_max = c.t.last().copied().unwrap_or(1.0).max(1e-9);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{}: mean normalized reading", report.sensor), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..t_max, 0.0..1.05)
        .map_err(|e| err(&e))?;
    chart.configure_mesh().x_desc("time since press onset (s)").y_desc("normalized reading").draw().map_err(|e| err(&e))?;
    let band: Vec<(f64, f64)> = c.t.iter().zip(&c.hi).map(|(t, v)| (*t, *v)).chain(c.t.iter().zip(&c.lo).rev().map(|(t, v)| (*t, *v))).collect();
    chart.draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2)))).map_err(|e| err(&e))?;
    chart.draw_series(LineSeries::new(c.t.iter().zip(&c.mean).map(|(t, v)| (*t, *v)), &BLUE)).map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Writes `<sensor>.svg` per report and one `summary.csv` with a row per
/// sensor. Returns the written paths.
pub fn emit_curves(reports: &[RepeatabilityReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for r in reports {
        let path = out_dir.join(format!("{}.svg", r.sensor));
        plot(r, &path)?;
        written.push(path);
    }
    let path = out_dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in reports {
        w.serialize(SummaryRow {
            sensor: &r.sensor,
            response_time_mean: r.response_time_mean_s,
            response_time_std: r.response_time_std_s,
            std: r.episode_std,
            n_excluded: r.n_excluded,
        })?;
    }
    w.flush()?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fsr(tau: f64) -> SyntheticSensorModel {
        SyntheticSensorModel::first_order(SensorModelKind::ScalarForce, vec![1], 1.0, tau)
    }

    fn short() -> ProtocolSpec {
        ProtocolSpec { n_episodes: 6, press_s: 2.0, release_s: 2.0 }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn defaults() {
        assert_eq!(ProtocolSpec::default(), ProtocolSpec { n_episodes: 60, press_s: 30.0, release_s: 30.0 });
        assert_eq!(ProtocolSpec::acoustic(), ProtocolSpec { n_episodes: 60, press_s: 3.0, release_s: 3.0 });
    }

    #[test]
    fn first_order_response_time_is_tau_ln10() {
        for tau in [0.02, 0.05, 0.2] {
            let eps = simulate_protocol(&fsr(tau), &short(), &mut rng()).unwrap();
            let r = analyze_repeatability("fsr", &eps, &short()).unwrap();
            let want = tau * 10f64.ln();
            let got = r.response_time_mean_s.unwrap();
            assert!(got >= want - 1e-12 && got < want + 1.0 / SIM_RATE_HZ, "tau {tau}: {got} vs {want}");
            assert_eq!(r.n_excluded, 0);
        }
    }

    #[test]
    fn identical_episodes_have_zero_std() {
        let eps = simulate_protocol(&fsr(0.05), &short(), &mut rng()).unwrap();
        let dup: Vec<ReadingSeries> = (0..60).map(|_| eps[0].clone()).collect();
        let r = analyze_repeatability("fsr", &dup, &short()).unwrap();
        assert_eq!(r.episode_std, 0.0);
        assert_eq!(r.response_time_std_s, Some(0.0));
    }

    #[test]
    fn noiseless_protocol_episodes_are_identical() {
        let eps = simulate_protocol(&fsr(0.05), &short(), &mut rng()).unwrap();
        assert_eq!(eps.len(), 6);
        // The lag state at episode start is the tail of the previous release.
        for e in &eps[1..] {
            for (a, b) in e.values.iter().zip(&eps[1].values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let r = analyze_repeatability("fsr", &eps[1..], &short()).unwrap();
        assert!(r.episode_std < 1e-12 && r.response_time_std_s.unwrap() < 1e-12);
    }

    #[test]
    fn drift_raises_resting_value() {
        let mut m = fsr(0.05);
        m.drift_rate = 0.001;
        let eps = simulate_protocol(&m, &short(), &mut rng()).unwrap();
        let r = analyze_repeatability("fsr", &eps, &short()).unwrap();
        assert!(r.drift.resting.windows(2).all(|w| w[1] > w[0]));
        assert!(r.drift.slope_per_episode > 0.0);
    }

    #[test]
    fn gain_ramp_peaks_rise_then_plateau() {
        let mut m = fsr(0.05);
        m.gain_ramp = 0.5;
        m.ramp_episodes = 3;
        let eps = simulate_protocol(&m, &short(), &mut rng()).unwrap();
        let peaks: Vec<f64> = eps.iter().map(|e| e.reduced().into_iter().fold(0.0, f64::max)).collect();
        assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2] && peaks[2] < peaks[3]);
        assert!((peaks[4] - peaks[3]).abs() < 1e-9 && (peaks[5] - peaks[4]).abs() < 1e-9);
    }

    #[test]
    fn acoustic_kind_samples_at_1khz() {
        let m = SyntheticSensorModel::first_order(SensorModelKind::AudioVibration, vec![1], 1.0, 0.005);
        let spec = ProtocolSpec { n_episodes: 2, ..ProtocolSpec::acoustic() };
        let eps = simulate_protocol(&m, &spec, &mut rng()).unwrap();
        assert_eq!(eps[0].len(), 6000);
        assert!((eps[0].times[1] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn flat_episode_is_excluded() {
        let mut eps = simulate_protocol(&fsr(0.05), &short(), &mut rng()).unwrap();
        eps[2].values.iter_mut().for_each(|v| *v = 0.3);
        let r = analyze_repeatability("fsr", &eps, &short()).unwrap();
        assert_eq!(r.n_excluded, 1);
        assert_eq!(r.response_times[2], None);
        assert!(r.response_time_mean_s.is_some());
    }

    #[test]
    fn errors() {
        let eps = simulate_protocol(&fsr(0.05), &short(), &mut rng()).unwrap();
        assert!(matches!(analyze_repeatability("x", &eps[..1], &short()), Err(RepeatError::TooFewEpisodes(1))));
        let long = ProtocolSpec { press_s: 10.0, ..short() };
        assert!(matches!(analyze_repeatability("x", &eps, &long), Err(RepeatError::ShortEpisode { .. })));
        assert!(simulate_protocol(&fsr(0.0), &short(), &mut rng()).is_err());
    }

    #[test]
    fn table_row_format() {
        let eps = simulate_protocol(&fsr(0.0074), &short(), &mut rng()).unwrap();
        let r = analyze_repeatability("fsr", &eps, &short()).unwrap();
        let (rt, std) = r.table_row();
        assert!(regex_like(&rt), "{rt}");
        assert_eq!(std.split('.').nth(1).unwrap().len(), 3);
    }

    fn regex_like(s: &str) -> bool {
        let parts: Vec<&str> = s.split('±').collect();
        parts.len() == 2 && parts.iter().all(|p| p.parse::<f64>().is_ok() && p.split('.').nth(1).map(str::len) == Some(3))
    }

    #[test]
    fn episode_round_trip() {
        let m = SyntheticSensorModel::first_order(SensorModelKind::Force3Axis, vec![5, 3], 1.0, 0.05);
        let eps = simulate_protocol(&m, &short(), &mut rng()).unwrap();
        let ep = series_to_episode(&eps[0], &m.shape, &short(), "rep0").unwrap();
        let back = series_from_episode(&ep).unwrap();
        assert_eq!(back.channels, 15);
        assert_eq!(back.times, eps[0].times);
        for (a, b) in back.values.iter().zip(&eps[0].values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn emits_one_plot_and_one_summary() {
        let dir = tempfile::tempdir().unwrap();
        let eps = simulate_protocol(&fsr(0.05), &short(), &mut rng()).unwrap();
        let r = analyze_repeatability("fsr", &eps, &short()).unwrap();
        let files = emit_curves(&[r], dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(std::fs::read_to_string(&files[0]).unwrap().contains("<svg"));
        let mut rd = csv::Reader::from_path(&files[1]).unwrap();
        let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["sensor", "response_time_mean", "response_time_std", "std", "n_excluded"]);
        assert_eq!(rd.records().count(), 1);
        assert!(emit_curves(&[], Path::new("/proc/nonexistent/dir")).is_err());
    }

    proptest! {
        #[test]
        fn scaling_leaves_report_unchanged(scale in 0.01f64..100.0, seed in 0u64..50) {
            let mut m = fsr(0.05);
            m.noise_std = 0.01;
            m.drift_rate = 0.002;
            let eps = simulate_protocol(&m, &short(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let scaled: Vec<ReadingSeries> = eps.iter().map(|e| ReadingSeries { values: e.values.iter().map(|v| v * scale).collect(), ..e.clone() }).collect();
            let a = analyze_repeatability("s", &eps, &short()).unwrap();
            let b = analyze_repeatability("s", &scaled, &short()).unwrap();
            prop_assert!((a.episode_std - b.episode_std).abs() < 1e-9);
            prop_assert_eq!(a.n_excluded, b.n_excluded);
            for (x, y) in a.curve.mean.iter().zip(&b.curve.mean) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn single_channel_reduction_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let s = ReadingSeries { times: (0..vals.len()).map(|i| i as f64).collect(), channels: 1, values: vals.clone(), press_onset: 0.0 };
            prop_assert_eq!(s.reduced(), vals);
        }

        #[test]
        fn curves_stay_in_unit_interval(seed in 0u64..30, noise in 0.0f64..0.2) {
            let mut m = fsr(0.05);
            m.noise_std = noise;
            m.hysteresis = 0.2;
            let eps = simulate_protocol(&m, &short(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let r = analyze_repeatability("s", &eps, &short()).unwrap();
            for v in r.curve.mean.iter().chain(&r.curve.lo).chain(&r.curve.hi) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            prop_assert!(r.response_times.iter().flatten().all(|t| *t >= 0.0));
        }

        #[test]
        fn recovers_tau_within_five_percent(tau in 0.09f64..0.5) {
            let spec = ProtocolSpec { n_episodes: 3, press_s: 8.0, release_s: 8.0 };
            let eps = simulate_protocol(&fsr(tau), &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let r = analyze_repeatability("s", &eps, &spec).unwrap();
            let est = r.response_time_mean_s.unwrap() / 10f64.ln();
            prop_assert!((est - tau).abs() <= 0.05 * tau, "{} vs {}", est, tau);
        }
    }
}
