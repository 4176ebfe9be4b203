//! Behavior-cloning training loop, offline evaluation and checkpoints.

mod augment;
mod checkpoint;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    compute_norm_stats, observation_at, sample_chunk, ActionChunk, DatasetError, Direction, Episode, Frame, NormEntry, NormStats, SensorKind,
};
use crate::encoders::{audio_to_melspec, fit_pca, EncoderError, PcaBasis, TokenSource};
use crate::nn::optim::AdamW;
use crate::nn::{Grads, Graph, ParamSet, Tensor};
use crate::par::par_map;
use crate::policy::{melspec_key, ObsConfig, Policy, PolicyConfig, PolicyError, PolicyInput, SensorMode};

pub use augment::{augment_image, crop_window, mask_proprio, AugConfig};
pub use checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint action_dim {checkpoint} does not match data action_dim {data}")]
    ActionDimMismatch { checkpoint: usize, data: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub mask_prob: f64,
    pub aug: AugConfig,
    pub seed: u64,
    /// Metrics are written every `log_every` steps and at the last step.
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Samples in the fixed probe batch.
    pub probe_size: usize,
    /// Train on the probe batch only.
    pub overfit_probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            steps: 50_000,
            mask_prob: 0.2,
            aug: AugConfig::default(),
            seed: 0,
            log_every: 100,
            checkpoint_every: 5_000,
            probe_size: 8,
            overfit_probe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) {
            return err("lr must be positive");
        }
        if !(self.aug.crop_keep > 0.0 && self.aug.crop_keep <= 1.0) {
            return err("aug.crop_keep must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return err("mask_prob must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.aug.jitter) || !(self.aug.rot_deg >= 0.0) {
            return err("aug.jitter must be in [0, 1) and aug.rot_deg non-negative");
        }
        if self.batch_size == 0 || self.probe_size == 0 || self.log_every == 0 {
            return err("batch_size, probe_size and log_every must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Batch means of the training objective.
    pub recon_l1: f64,
    pub kl: f64,
    pub total: f64,
    /// Clean (no augmentation, no masking, `z = mu`) reconstruction on the probe batch.
    pub probe_recon_l1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub initial_probe_recon_l1: f64,
    /// Union of token source tags over every training step.
    pub sources_seen: Vec<TokenSource>,
    pub out_dir: Option<PathBuf>,
}

/// Normalization statistics for a policy's inputs: every recorded stream
/// plus `<stream>.melspec` for contact-microphone encoders.
pub fn training_stats(episodes: &[Episode], obs: &ObsConfig) -> Result<NormStats> {
    let mut stats = compute_norm_stats(episodes)?;
    for t in obs.tactile.iter().filter(|t| t.sensor == SensorKind::ContactMic) {
        let mels = par_map(&tick_list(episodes), |_, &(e, tick)| -> Result<Vec<f32>> {
            let ep = &episodes[e];
            let obs = observation_at(ep, tick, action_time(ep, tick))?;
            let w = obs.audio_window.ok_or_else(|| PolicyError::MissingField(t.stream.clone()))?;
            Ok(audio_to_melspec(&w)?.values.into_iter().map(|v| v as f32).collect())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let width = mels.first().map(|m| m.len()).unwrap_or(0);
        stats.insert(melspec_key(&t.stream), NormEntry::fit(mels.iter().map(|m| m.as_slice()), width, 1));
    }
    Ok(stats)
}

/// PCA bases for every PCA-based tactile encoder, fit on normalized
/// training samples.
pub fn fit_tactile_bases(episodes: &[Episode], obs: &ObsConfig, stats: &NormStats) -> Result<BTreeMap<String, PcaBasis>> {
    let mut out = BTreeMap::new();
    for t in obs.tactile.iter().filter(|t| t.encoder.variant.uses_pca()) {
        let mut rows = Vec::new();
        for ep in episodes {
            let s = ep.stream(&t.stream).ok_or_else(|| PolicyError::MissingField(t.stream.clone()))?;
            for i in 0..s.len() {
                let mut v: Vec<f64> = s.sample(i).iter().map(|x| *x as f64).collect();
                stats.apply(&t.stream, &mut v, Direction::Forward)?;
                rows.push(v);
            }
        }
        out.insert(t.stream.clone(), fit_pca(&rows, t.encoder.pca_k)?);
    }
    Ok(out)
}

fn action_time(ep: &Episode, t: usize) -> f64 {
    ep.actions().map(|a| a.timestamp(t)).unwrap_or(0.0)
}

fn tick_list(episodes: &[Episode]) -> Vec<(usize, usize)> {
    episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.length_t).map(move |t| (e, t))).collect()
}

/// Precomputed, normalized per-tick training data. Camera frames stay in
/// the episodes and are augmented on the fly.
struct Sample {
    ep: usize,
    /// Per camera: (stream index, sample index).
    frames: Vec<(usize, usize)>,
    proprio: Vec<f64>,
    tactile: Vec<Tensor>,
    target: ActionChunk,
}

struct TrainingSet<'a> {
    episodes: &'a [Episode],
    samples: Vec<Sample>,
}

impl<'a> TrainingSet<'a> {
    fn build(policy: &Policy, episodes: &'a [Episode], stats: &NormStats) -> Result<Self> {
        let h = policy.cfg.chunk_len;
        let samples = par_map(&tick_list(episodes), |_, &(e, t)| -> Result<Sample> {
            let ep = &episodes[e];
            let (obs, mut target) = sample_chunk(ep, t, h)?;
            stats.apply("actions", &mut target.actions, Direction::Forward)?;
            let mut frames = Vec::with_capacity(policy.obs.cameras.len());
            for cam in &policy.obs.cameras {
                let si = ep.streams.iter().position(|s| s.spec.name == cam.name).ok_or_else(|| PolicyError::MissingField(cam.name.clone()))?;
                let idx = ep.streams[si].latest_at(obs.time).ok_or_else(|| DatasetError::NoSampleBeforeTick {
                    stream: cam.name.clone(),
                    time: obs.time,
                })?;
                frames.push((si, idx));
            }
            Ok(Sample {
                ep: e,
                frames,
                proprio: policy.prepare_proprio(&obs.proprio, stats)?,
                tactile: policy.prepare_tactile(&obs, stats)?,
                target,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { episodes, samples })
    }

    fn frame(&self, s: &Sample, cam: usize) -> Frame {
        let (si, idx) = s.frames[cam];
        let stream = &self.episodes[s.ep].streams[si];
        Frame {
            shape: stream.spec.shape.clone(),
            values: stream.sample(idx).to_vec(),
        }
    }

    fn input(&self, policy: &Policy, stats: &NormStats, idx: usize, aug: Option<(&TrainConfig, &mut ChaCha8Rng)>) -> Result<PolicyInput> {
        let s = &self.samples[idx];
        let mut images = Vec::with_capacity(s.frames.len());
        match aug {
            Some((cfg, rng)) => {
                for cam in 0..s.frames.len() {
                    let f = augment_image(&self.frame(s, cam), &cfg.aug, rng);
                    images.push(policy.prepare_camera(cam, &f, stats)?);
                }
                let proprio = mask_proprio(&s.proprio, cfg.mask_prob, rng);
                Ok(PolicyInput { images, proprio, tactile: s.tactile.clone() })
            }
            None => {
                for cam in 0..s.frames.len() {
                    images.push(policy.prepare_camera(cam, &self.frame(s, cam), stats)?);
                }
                Ok(PolicyInput { images, proprio: s.proprio.clone(), tactile: s.tactile.clone() })
            }
        }
    }
}

/// Per-sample generator keyed by (run seed, epoch, sample index) so that
/// augmentation does not depend on batching or worker count.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

/// Epoch-wise shuffled sample order.
struct Sampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut s = Self { seed, n, epoch: 0, order: Vec::new(), pos: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch + 1);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, b: usize) -> Vec<(usize, u64)> {
        (0..b)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.shuffle();
                }
                self.pos += 1;
                (self.order[self.pos - 1], self.epoch)
            })
            .collect()
    }
}

struct StepResult {
    grads: Grads,
    recon: f64,
    kl: f64,
    total: f64,
    sources: Vec<TokenSource>,
}

fn sample_step(policy: &Policy, ps: &ParamSet, set: &TrainingSet, stats: &NormStats, cfg: &TrainConfig, idx: usize, epoch: u64) -> Result<StepResult> {
    let mut rng = sample_rng(cfg.seed, epoch, idx as u64);
    let input = set.input(policy, stats, idx, Some((cfg, &mut rng)))?;
    let eps: Vec<f64> = (0..policy.cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut g = Graph::new(ps);
    let (loss, seq) = policy.training_loss(&mut g, &input, &set.samples[idx].target, &eps)?;
    let value = |v| g.value(v).data()[0];
    let (recon, kl, total) = (value(loss.recon_l1), value(loss.kl), value(loss.total));
    let grads = g.backward(loss.total).params;
    let mut sources = seq.sources;
    sources.dedup();
    Ok(StepResult { grads, recon, kl, total, sources })
}

/// Clean reconstruction and KL with `z = mu`, averaged over `indices`.
fn probe_loss(policy: &Policy, ps: &ParamSet, set: &TrainingSet, stats: &NormStats, indices: &[usize]) -> Result<(f64, f64)> {
    let parts = par_map(indices, |_, &idx| -> Result<(f64, f64)> {
        let input = set.input(policy, stats, idx, None)?;
        let eps = vec![0.0; policy.cfg.latent_dim];
        let mut g = Graph::new(ps);
        let (loss, _) = policy.training_loss(&mut g, &input, &set.samples[idx].target, &eps)?;
        Ok((g.value(loss.recon_l1).data()[0], g.value(loss.kl).data()[0]))
    });
    let mut r = 0.0;
    let mut k = 0.0;
    for p in parts {
        let (a, b) = p?;
        r += a;
        k += b;
    }
    Ok((r / indices.len() as f64, k / indices.len() as f64))
}

fn append_line(file: &mut Option<File>, line: &str) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Trains a policy from scratch. With `out_dir`, writes `metrics.jsonl`,
/// `timing.jsonl`, `norm_stats.json`, periodic `ckpt_<step>.bin`, `best.bin`
/// and `final.bin`. A non-finite loss aborts without touching existing
/// checkpoints.
pub fn train(
    cfg: &TrainConfig,
    episodes: &[Episode],
    policy_cfg: PolicyConfig,
    obs: ObsConfig,
    mode: SensorMode,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let data_dim = episodes[0].action_dim();
    if data_dim != policy_cfg.action_dim {
        return Err(TrainError::ActionDimMismatch { checkpoint: policy_cfg.action_dim, data: data_dim });
    }
    let stats = training_stats(episodes, &obs)?;
    let bases = match mode {
        SensorMode::Visuotactile => fit_tactile_bases(episodes, &obs, &stats)?,
        SensorMode::VisionOnly => BTreeMap::new(),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (policy, mut ps) = Policy::new(policy_cfg, obs, mode, &bases, &mut init_rng)?;
    let set = TrainingSet::build(&policy, episodes, &stats)?;
    let n = set.samples.len();
    if n == 0 {
        return Err(DatasetError::Empty.into());
    }
    let probe: Vec<usize> = (0..cfg.probe_size.min(n)).map(|i| i * n / cfg.probe_size.min(n)).collect();

    let (mut metrics_file, mut timing_file) = (None, None);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        stats.save(&dir.join("norm_stats.json"))?;
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        metrics_file = Some(open("metrics.jsonl")?);
        timing_file = Some(open("timing.jsonl")?);
    }

    let mut opt = AdamW::new(&ps, cfg.lr, cfg.weight_decay);
    let (initial_probe, _) = probe_loss(&policy, &ps, &set, &stats, &probe)?;
    let mut best = f64::INFINITY;
    let mut sampler = Sampler::new(cfg.seed, n);
    let mut overfit_epoch = 0;
    let mut metrics = Vec::new();
    let mut sources_seen: Vec<TokenSource> = Vec::new();
    let started = Instant::now();
    let snapshot = |ps: &ParamSet, step: u64| Checkpoint {
        policy: policy.clone(),
        params: ps.clone(),
        stats: stats.clone(),
        step,
    };

    for step in 1..=cfg.steps {
        let batch: Vec<(usize, u64)> = if cfg.overfit_probe {
            overfit_epoch += 1;
            probe.iter().map(|&i| (i, overfit_epoch)).collect()
        } else {
            sampler.next_batch(cfg.batch_size)
        };
        let results = par_map(&batch, |_, &(idx, epoch)| sample_step(&policy, &ps, &set, &stats, cfg, idx, epoch));
        let mut grads = ps.zero_grads();
        let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            grads.add_assign(&r.grads);
            recon += r.recon;
            kl += r.kl;
            total += r.total;
            for s in r.sources {
                if !sources_seen.contains(&s) {
                    sources_seen.push(s);
                }
            }
        }
        let b = batch.len() as f64;
        if !total.is_finite() || !grads.is_finite() {
            log::error!("non-finite loss at step {step}; keeping the last written checkpoint");
            return Err(TrainError::NonFiniteLoss { step });
        }
        grads.scale(1.0 / b);
        opt.step(&mut ps, &grads);

        if step % cfg.log_every == 0 || step == cfg.steps {
            let (probe_recon, _) = probe_loss(&policy, &ps, &set, &stats, &probe)?;
            let rec = MetricRecord {
                step,
                recon_l1: recon / b,
                kl: kl / b,
                total: total / b,
                probe_recon_l1: probe_recon,
            };
            log::info!("step {step}: total {:.5} recon {:.5} kl {:.5} probe {:.5}", rec.total, rec.recon_l1, rec.kl, probe_recon);
            append_line(&mut metrics_file, &serde_json::to_string(&rec)?)?;
            append_line(&mut timing_file, &format!("{{\"step\":{step},\"wall_time_s\":{:.3}}}", started.elapsed().as_secs_f64()))?;
            metrics.push(rec);
            if probe_recon < best {
                best = probe_recon;
                if let Some(dir) = out_dir {
                    snapshot(&ps, step).save(&dir.join("best.bin"))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                snapshot(&ps, step).save(&dir.join(format!("ckpt_{step:08}.bin")))?;
            }
        }
    }
    sources_seen.sort_by_key(|s| *s as u8);
    let checkpoint = snapshot(&ps, cfg.steps);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("final.bin"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        initial_probe_recon_l1: initial_probe,
        sources_seen,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute error per action dimension, denormalized, over all
    /// unpadded chunk rows.
    pub mean_l1: f64,
    /// Same, per chunk position.
    pub per_position: Vec<f64>,
    pub n_samples: usize,
}

/// Inference (`z = 0`) chunks at every `stride`-th tick of `heldout`,
/// compared with the recorded actions in original units.
pub fn evaluate_offline(ckpt: &Checkpoint, heldout: &[Episode], stride: usize) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let policy = &ckpt.policy;
    let (h, a) = (policy.cfg.chunk_len, policy.cfg.action_dim);
    for ep in heldout {
        if ep.action_dim() != a {
            return Err(TrainError::ActionDimMismatch { checkpoint: a, data: ep.action_dim() });
        }
    }
    let ticks: Vec<(usize, usize)> = tick_list(heldout).into_iter().filter(|(_, t)| t % stride.max(1) == 0).collect();
    let per_sample = par_map(&ticks, |_, &(e, t)| -> Result<(Vec<f64>, Vec<bool>)> {
        let (obs, chunk) = sample_chunk(&heldout[e], t, h)?;
        let input = policy.prepare(&obs, &ckpt.stats)?;
        let mut pred = policy.predict(&ckpt.params, &input)?;
        ckpt.stats.apply("actions", &mut pred, Direction::Inverse)?;
        let err = (0..h)
            .map(|i| (0..a).map(|j| (pred[i * a + j] - chunk.actions[i * a + j]).abs()).sum::<f64>() / a as f64)
            .collect();
        Ok((err, chunk.pad_mask))
    });
    let mut sums = vec![0.0; h];
    let mut counts = vec![0usize; h];
    for r in per_sample {
        let (err, pad) = r?;
        for i in 0..h {
            if !pad[i] {
                sums[i] += err[i];
                counts[i] += 1;
            }
        }
    }
    let total: f64 = sums.iter().sum();
    let count: usize = counts.iter().sum();
    Ok(EvalReport {
        mean_l1: total / count.max(1) as f64,
        per_position: sums.iter().zip(&counts).map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN }).collect(),
        n_samples: ticks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Modality, Stream, StreamSpec};
    use crate::nn::resnet::ResNetConfig;
    use crate::policy::{CameraSpec, ProprioSpec, TactileSpec};
    use crate::encoders::{EncoderConfig, EncoderVariant};

    fn spec(name: &str, modality: Modality, shape: &[usize]) -> StreamSpec {
        StreamSpec {
            name: name.into(),
            modality,
            rate_hz: 10.0,
            shape: shape.to_vec(),
            dtype: "float32".into(),
            file: format!("{name}.bin"),
        }
    }

    /// Camera brightness and a force reading both track the second action dim.
    fn episode(id: &str, len: usize, phase: f64) -> Episode {
        let ts: Vec<f64> = (0..len).map(|i| i as f64 / 10.0).collect();
        let act = |t: usize| [((t as f64) * 0.1 + phase).sin() as f32, ((t as f64) * 0.05 + phase).cos() as f32];
        let actions: Vec<f32> = (0..len).flat_map(act).collect();
        let proprio: Vec<f32> = (0..len).flat_map(|t| [act(t)[0] * 0.5, t as f32 / len as f32]).collect();
        let cam: Vec<f32> = (0..len).flat_map(|t| vec![(act(t)[1] * 0.4 + 0.5).clamp(0.0, 1.0); 3 * 8 * 8]).collect();
        let force: Vec<f32> = (0..len).map(|t| act(t)[1] * 2.0).collect();
        let streams = vec![
            Stream::records(spec("actions", Modality::Action, &[2]), ts.clone(), actions),
            Stream::records(spec("proprio", Modality::Proprio, &[2]), ts.clone(), proprio),
            Stream::records(spec("camera", Modality::Image, &[3, 8, 8]), ts.clone(), cam),
            Stream::records(spec("fsr", Modality::Tactile, &[1]), ts, force),
        ];
        Episode::new(id, streams, BTreeMap::new()).unwrap()
    }

    fn obs() -> ObsConfig {
        let mut e = EncoderConfig::new(EncoderVariant::ScalarLinear, vec![1]);
        e.hidden_sizes = vec![];
        ObsConfig {
            cameras: vec![CameraSpec { name: "camera".into(), shape: vec![3, 8, 8] }],
            backbone: ResNetConfig::tiny(),
            proprio: vec![ProprioSpec { name: "proprio".into(), dim: 2 }],
            tactile: vec![TactileSpec { stream: "fsr".into(), sensor: SensorKind::Fsr, encoder: e }],
        }
    }

    fn pcfg() -> PolicyConfig {
        PolicyConfig {
            hidden_dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ff_dim: 16,
            chunk_len: 4,
            exec_len: 2,
            latent_dim: 2,
            action_dim: 2,
            lambda_kl: 10.0,
            posterior_layers: 1,
            posterior_proprio: false,
        }
    }

    fn tcfg(steps: u64) -> TrainConfig {
        TrainConfig { lr: 3e-3, steps, log_every: 10, batch_size: 4, checkpoint_every: 20, ..Default::default() }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.mask_prob), (1e-5, 1e-4, 8, 0.2));
        assert_eq!(c.aug, AugConfig { crop_keep: 0.95, rot_deg: 5.0, jitter: 0.3 });
        assert!(c.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { mask_prob: 1.5, ..Default::default() },
            TrainConfig { aug: AugConfig { crop_keep: 0.0, ..Default::default() }, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: std::result::Result<TrainConfig, _> = toml::from_str("lr = 1e-4\nbogus = 1\n");
        assert!(parsed.is_err());
    }

    #[test]
    fn sample_rng_depends_on_each_key() {
        let draw = |s, e, i| sample_rng(s, e, i).random::<u64>();
        let base = draw(1, 2, 3);
        assert_eq!(base, draw(1, 2, 3));
        assert_ne!(base, draw(2, 2, 3));
        assert_ne!(base, draw(1, 3, 3));
        assert_ne!(base, draw(1, 2, 4));
    }

    #[test]
    fn sampler_visits_every_sample_each_epoch() {
        let mut s = Sampler::new(7, 10);
        let mut seen: Vec<usize> = s.next_batch(10).into_iter().map(|(i, e)| {
            assert_eq!(e, 0);
            i
        }).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(s.next_batch(3).iter().all(|(_, e)| *e == 1));
    }

    #[test]
    fn training_reduces_probe_loss_and_checkpoints_round_trip() {
        let eps = vec![episode("a", 30, 0.0), episode("b", 30, 1.0)];
        let dir = tempfile::tempdir().unwrap();
        let out = train(&tcfg(60), &eps, pcfg(), obs(), SensorMode::Visuotactile, Some(dir.path())).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.probe_recon_l1 < out.initial_probe_recon_l1, "{} vs {}", last.probe_recon_l1, out.initial_probe_recon_l1);
        assert!(out.sources_seen.contains(&TokenSource::Tactile));
        for name in ["final.bin", "best.bin", "ckpt_00000020.bin", "metrics.jsonl", "timing.jsonl", "norm_stats.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 6);
        let loaded = Checkpoint::load(&dir.path().join("final.bin")).unwrap();
        assert_eq!(loaded.params, out.checkpoint.params);
        assert_eq!(loaded.stats, out.checkpoint.stats);
        assert_eq!(loaded.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
        let mut bytes = out.checkpoint.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn identical_runs_give_identical_metrics() {
        let eps = vec![episode("a", 25, 0.3)];
        let a = train(&tcfg(20), &eps, pcfg(), obs(), SensorMode::Visuotactile, None).unwrap();
        let b = train(&tcfg(20), &eps, pcfg(), obs(), SensorMode::Visuotactile, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn vision_only_never_sees_tactile_tokens() {
        let eps = vec![episode("a", 20, 0.0)];
        let out = train(&tcfg(10), &eps, pcfg(), obs(), SensorMode::VisionOnly, None).unwrap();
        assert!(!out.sources_seen.contains(&TokenSource::Tactile));
        assert!(out.checkpoint.policy.tactile.is_empty());
    }

    #[test]
    fn nonfinite_loss_aborts_and_keeps_checkpoints() {
        let eps = vec![episode("a", 20, 0.0)];
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { lr: 1e300, ..tcfg(200) };
        let r = train(&cfg, &eps, pcfg(), obs(), SensorMode::Visuotactile, Some(dir.path()));
        assert!(matches!(r, Err(TrainError::NonFiniteLoss { .. })), "{r:?}");
    }

    #[test]
    fn action_dim_mismatch_is_reported() {
        let eps = vec![episode("a", 20, 0.0)];
        let cfg = PolicyConfig { action_dim: 3, ..pcfg() };
        assert!(matches!(train(&tcfg(1), &eps, cfg, obs(), SensorMode::VisionOnly, None), Err(TrainError::ActionDimMismatch { .. })));
        let out = train(&tcfg(1), &eps, pcfg(), obs(), SensorMode::VisionOnly, None).unwrap();
        let mut wide = episode("w", 10, 0.0);
        wide.streams[0].spec.shape = vec![1];
        wide.streams[0].data = crate::dataset::StreamData::Records {
            timestamps: (0..20).map(|i| i as f64 / 10.0).collect(),
            values: vec![0.0; 20],
        };
        wide.manifest.streams[0].shape = vec![1];
        wide.validate().unwrap();
        assert!(matches!(evaluate_offline(&out.checkpoint, &[wide], 1), Err(TrainError::ActionDimMismatch { .. })));
    }

    #[test]
    fn offline_eval_matches_brute_force_on_constant_actions() {
        let mut ep = episode("c", 12, 0.0);
        let c = [0.7f32, -1.2];
        if let crate::dataset::StreamData::Records { values, .. } = &mut ep.streams[0].data {
            for row in values.chunks_mut(2) {
                row.copy_from_slice(&c);
            }
        }
        let out = train(&tcfg(1), std::slice::from_ref(&ep), pcfg(), obs(), SensorMode::Visuotactile, None).unwrap();
        let ck = &out.checkpoint;
        let report = evaluate_offline(ck, std::slice::from_ref(&ep), 1).unwrap();
        // Oracle: average over every (tick, unpadded row) of the per-dim mean |pred - c|.
        let (mut sum, mut n) = (0.0, 0);
        for t in 0..12 {
            let (o, chunk) = sample_chunk(&ep, t, 4).unwrap();
            let input = ck.policy.prepare(&o, &ck.stats).unwrap();
            let mut pred = ck.policy.predict(&ck.params, &input).unwrap();
            ck.stats.apply("actions", &mut pred, Direction::Inverse).unwrap();
            for i in 0..4 {
                if !chunk.pad_mask[i] {
                    sum += ((pred[2 * i] - c[0] as f64).abs() + (pred[2 * i + 1] - c[1] as f64).abs()) / 2.0;
                    n += 1;
                }
            }
        }
        assert!((report.mean_l1 - sum / n as f64).abs() < 1e-12, "{} vs {}", report.mean_l1, sum / n as f64);
        assert_eq!(report.n_samples, 12);
    }
}
