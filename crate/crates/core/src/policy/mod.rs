//! Action-chunking transformer with a CVAE latent.

mod loss;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, Direction, Episode, Frame, Modality, NormStats, Observation, SensorKind, ActionChunk};
use crate::encoders::{
    audio_to_melspec, EncoderConfig, EncoderError, ImageEncoder, PcaBasis, ProprioEncoder, TactileEncoder, TactileFeature, TokenSource,
};
use crate::nn::layers::{sinusoidal_table, DecoderLayer, EncoderLayer, Linear};
use crate::nn::resnet::{concat_width, map_to_tokens, ResNetConfig};
use crate::nn::{Graph, ParamId, ParamSet, Tensor, Var};

pub use loss::{compute_loss, kl_divergence, loss_graph, recon_l1, LossBreakdown, LossVars};

/// Additive attention bias for hidden keys.
pub const MASK_BIAS: f64 = -1e9;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("cannot concatenate feature maps {0:?} and {1:?} along width")]
    ChannelMismatch(Vec<usize>, Vec<usize>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing observation field {0}")]
    MissingField(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("every row of the target chunk is padding")]
    AllPadded,
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub chunk_len: usize,
    pub exec_len: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub lambda_kl: f64,
    /// Encoder layers of the CVAE posterior.
    pub posterior_layers: usize,
    /// Adds a proprio token to the posterior input.
    pub posterior_proprio: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            enc_layers: 4,
            dec_layers: 7,
            heads: 8,
            ff_dim: 2048,
            chunk_len: 64,
            exec_len: 32,
            latent_dim: 32,
            action_dim: 0,
            lambda_kl: 10.0,
            posterior_layers: 4,
            posterior_proprio: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PolicyError::Config(m));
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return err(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.exec_len == 0 || self.exec_len > self.chunk_len {
            return err(format!("exec_len {} must be in 1..={}", self.exec_len, self.chunk_len));
        }
        if self.action_dim == 0 || self.latent_dim == 0 {
            return err("action_dim and latent_dim must be positive".into());
        }
        if !(self.lambda_kl >= 0.0) {
            return err("lambda_kl must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    VisionOnly,
    Visuotactile,
}

impl SensorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::VisionOnly => "vision_only",
            Self::Visuotactile => "visuotactile",
        }
    }
}

impl FromStr for SensorMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vision_only" => Ok(Self::VisionOnly),
            "visuotactile" => Ok(Self::Visuotactile),
            _ => Err(format!("unknown sensor mode `{s}` (expected vision_only or visuotactile)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub name: String,
    /// `[C, H, W]`
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProprioSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TactileSpec {
    pub stream: String,
    pub sensor: SensorKind,
    pub encoder: EncoderConfig,
}

/// Which observation streams the policy consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub cameras: Vec<CameraSpec>,
    #[serde(default = "ResNetConfig::desk")]
    pub backbone: ResNetConfig,
    pub proprio: Vec<ProprioSpec>,
    #[serde(default)]
    pub tactile: Vec<TactileSpec>,
}

impl ObsConfig {
    pub fn proprio_dim(&self) -> usize {
        self.proprio.iter().map(|p| p.dim).sum()
    }

    /// Streams of an episode. Tactile sensor kinds come from the manifest
    /// metadata object `sensors` (`{"<stream>": "FSR", ...}`); audio streams
    /// default to ContactMic.
    pub fn infer(ep: &Episode, backbone: ResNetConfig) -> Result<Self> {
        let kinds = ep.metadata("sensors").and_then(|v| v.as_object());
        let mut cfg = Self {
            cameras: Vec::new(),
            backbone,
            proprio: Vec::new(),
            tactile: Vec::new(),
        };
        for s in &ep.streams {
            let spec = &s.spec;
            match spec.modality {
                Modality::Image => cfg.cameras.push(CameraSpec {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                }),
                Modality::Proprio => cfg.proprio.push(ProprioSpec {
                    name: spec.name.clone(),
                    dim: spec.sample_len(),
                }),
                Modality::Tactile | Modality::Audio => {
                    let kind = kinds
                        .and_then(|k| k.get(&spec.name))
                        .and_then(|v| v.as_str())
                        .and_then(SensorKind::parse)
                        .or((spec.modality == Modality::Audio).then_some(SensorKind::ContactMic))
                        .ok_or_else(|| PolicyError::MissingField(format!("sensor kind for stream {}", spec.name)))?;
                    cfg.tactile.push(TactileSpec {
                        stream: spec.name.clone(),
                        sensor: kind,
                        encoder: EncoderConfig::default_for(kind, spec.shape.clone()),
                    });
                }
                Modality::Action => {}
            }
        }
        Ok(cfg)
    }
}

/// Normalized network inputs for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    /// One `[C, H, W]` tensor per camera.
    pub images: Vec<Tensor>,
    pub proprio: Vec<f64>,
    /// One prepared tensor per tactile encoder.
    pub tactile: Vec<Tensor>,
}

impl PolicyInput {
    pub fn is_finite(&self) -> bool {
        self.images.iter().chain(&self.tactile).all(|t| t.is_finite()) && self.proprio.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Train,
    Infer,
}

/// Reparameterized draw in training mode, the zero vector at inference.
pub fn sample_latent<R: Rng + ?Sized>(post: &PosteriorParams, mode: LatentMode, rng: &mut R) -> Vec<f64> {
    match mode {
        LatentMode::Infer => vec![0.0; post.mu.len()],
        LatentMode::Train => post
            .mu
            .iter()
            .zip(&post.logvar)
            .map(|(m, lv)| {
                let e: f64 = rng.sample(StandardNormal);
                m + (lv / 2.0).exp() * e
            })
            .collect(),
    }
}

/// Encoder input rows with their origin tags.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[n, D]`
    pub tokens: Var,
    pub sources: Vec<TokenSource>,
    /// Leading rows that carry learned slot embeddings.
    pub n_slots: usize,
    pub n_spatial: usize,
}

/// Orders tokens as `[latent, proprio, tactile tokens..., spatial tokens...]`.
/// Tactile feature maps are concatenated width-wise after the camera maps
/// and contribute spatial tokens instead of a standalone token.
pub fn build_tokens(g: &mut Graph, z_latent: Var, z_prop: Var, tactile: &[TactileFeature], image_maps: &[Var]) -> Result<TokenSequence> {
    let mut rows = vec![z_latent, z_prop];
    let mut sources = vec![TokenSource::Latent, TokenSource::Proprio];
    let mut tactile_maps = Vec::new();
    for f in tactile {
        match *f {
            TactileFeature::Token(v) => {
                rows.push(v);
                sources.push(TokenSource::Tactile);
            }
            TactileFeature::Map(m) => tactile_maps.push(m),
        }
    }
    let n_slots = rows.len();
    let mut n_spatial = 0;
    let mut combined: Option<Var> = None;
    let mut camera_w = 0;
    for (i, m) in image_maps.iter().chain(&tactile_maps).enumerate() {
        combined = Some(match combined {
            None => *m,
            Some(c) => concat_width(g, c, *m).map_err(|(a, b)| PolicyError::ChannelMismatch(a, b))?,
        });
        if i < image_maps.len() {
            camera_w = g.shape(combined.unwrap())[2];
        }
    }
    if let Some(c) = combined {
        let s = g.shape(c).to_vec();
        n_spatial = s[1] * s[2];
        for idx in 0..n_spatial {
            sources.push(if idx % s[2] < camera_w { TokenSource::Image } else { TokenSource::Tactile });
        }
        rows.push(map_to_tokens(g, c));
    }
    let tokens = g.concat_rows(&rows);
    Ok(TokenSequence { tokens, sources, n_slots, n_spatial })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub obs: ObsConfig,
    pub mode: SensorMode,
    pub cameras: Vec<ImageEncoder>,
    pub proprio: ProprioEncoder,
    pub tactile: Vec<TactileEncoder>,
    pub latent_proj: Linear,
    /// Learned position embeddings of the non-spatial slots, `[n_slots, D]`.
    pub slots: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    pub post_cls: ParamId,
    pub post_action: Linear,
    pub post_proprio: Option<Linear>,
    pub post_layers: Vec<EncoderLayer>,
    pub post_out: Linear,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[H, action_dim]` normalized actions.
    pub pred: Var,
    pub sequence: TokenSequence,
}

impl Policy {
    /// Builds a freshly initialized policy. In vision-only mode the tactile
    /// streams listed in `obs` are ignored. `pca` maps tactile stream names
    /// to fitted bases for the PCA variants.
    pub fn new<R: Rng + ?Sized>(
        cfg: PolicyConfig,
        obs: ObsConfig,
        mode: SensorMode,
        pca: &BTreeMap<String, PcaBasis>,
        rng: &mut R,
    ) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        if obs.cameras.is_empty() {
            return Err(PolicyError::Config("at least one camera is required".into()));
        }
        let d = cfg.hidden_dim;
        let mut ps = ParamSet::new();
        let mut cameras = Vec::new();
        let mut map_hw = None;
        for cam in &obs.cameras {
            if cam.shape.len() != 3 {
                return Err(PolicyError::Config(format!("camera {} shape must be [C, H, W]", cam.name)));
            }
            let hw = obs.backbone.output_hw(cam.shape[1], cam.shape[2]);
            if map_hw.is_some_and(|(h, _): (usize, usize)| h != hw.0) {
                return Err(PolicyError::ChannelMismatch(vec![d, map_hw.unwrap().0], vec![d, hw.0]));
            }
            map_hw = Some(hw);
            cameras.push(ImageEncoder::new(&mut ps, &format!("camera.{}", cam.name), &obs.backbone, cam.shape[0], d, rng));
        }
        let proprio = ProprioEncoder::new(&mut ps, "proprio", obs.proprio_dim(), d, rng);
        let mut tactile = Vec::new();
        if mode == SensorMode::Visuotactile {
            for t in &obs.tactile {
                let mut ecfg = t.encoder.clone();
                ecfg.output_dim = d;
                if t.sensor == SensorKind::Daimon && ecfg.variant == crate::encoders::EncoderVariant::TactileImageCnn {
                    let (h, w) = (ecfg.input_shape[0], ecfg.input_shape[1]);
                    let th = ecfg.cnn.output_hw(h, w).0;
                    if map_hw.is_some_and(|(ch, _)| ch != th) {
                        return Err(PolicyError::ChannelMismatch(vec![d, map_hw.unwrap().0], vec![d, th]));
                    }
                }
                let enc = TactileEncoder::new(&mut ps, &format!("tactile.{}", t.stream), t.sensor, ecfg, pca.get(&t.stream).cloned(), rng)?;
                tactile.push(enc);
            }
        }
        let n_tokens = tactile.iter().filter(|t| !(t.kind == SensorKind::Daimon && matches!(t.net, crate::encoders::TactileNet::Cnn(_)))).count();
        let latent_proj = Linear::new(&mut ps, "latent_proj", cfg.latent_dim, d, rng);
        let slots = ps.add("slots", Tensor::uniform(&[2 + n_tokens, d], 0.1, rng));
        let encoder = (0..cfg.enc_layers).map(|i| EncoderLayer::new(&mut ps, &format!("encoder.{i}"), d, cfg.heads, cfg.ff_dim, rng)).collect();
        let decoder = (0..cfg.dec_layers).map(|i| DecoderLayer::new(&mut ps, &format!("decoder.{i}"), d, cfg.heads, cfg.ff_dim, rng)).collect();
        let head = Linear::new(&mut ps, "head", d, cfg.action_dim, rng);
        let post_cls = ps.add("posterior.cls", Tensor::uniform(&[1, d], 0.1, rng));
        let post_action = Linear::new(&mut ps, "posterior.action", cfg.action_dim, d, rng);
        let post_proprio = cfg.posterior_proprio.then(|| Linear::new(&mut ps, "posterior.proprio", obs.proprio_dim(), d, rng));
        let post_layers = (0..cfg.posterior_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("posterior.{i}"), d, cfg.heads, cfg.ff_dim, rng))
            .collect();
        let post_out = Linear::new(&mut ps, "posterior.out", d, 2 * cfg.latent_dim, rng);
        let policy = Self {
            cfg,
            obs,
            mode,
            cameras,
            proprio,
            tactile,
            latent_proj,
            slots,
            encoder,
            decoder,
            head,
            post_cls,
            post_action,
            post_proprio,
            post_layers,
            post_out,
        };
        Ok((policy, ps))
    }

    /// Normalizes one camera frame into a `[C, H, W]` tensor.
    pub fn prepare_camera(&self, idx: usize, frame: &Frame, stats: &NormStats) -> Result<Tensor> {
        let cam = &self.obs.cameras[idx];
        if frame.shape != cam.shape {
            return Err(PolicyError::Shape(format!("camera {}: {:?} vs configured {:?}", cam.name, frame.shape, cam.shape)));
        }
        let mut v: Vec<f64> = frame.values.iter().map(|x| *x as f64).collect();
        stats.apply(&cam.name, &mut v, Direction::Forward)?;
        Ok(Tensor::new(cam.shape.clone(), v))
    }

    /// Normalized proprio vector.
    pub fn prepare_proprio(&self, proprio: &[f32], stats: &NormStats) -> Result<Vec<f64>> {
        if proprio.len() != self.obs.proprio_dim() {
            return Err(PolicyError::Shape(format!("proprio has {} values, policy expects {}", proprio.len(), self.obs.proprio_dim())));
        }
        let mut out = Vec::with_capacity(proprio.len());
        let mut off = 0;
        for p in &self.obs.proprio {
            let mut v: Vec<f64> = proprio[off..off + p.dim].iter().map(|x| *x as f64).collect();
            stats.apply(&p.name, &mut v, Direction::Forward)?;
            out.extend(v);
            off += p.dim;
        }
        Ok(out)
    }

    /// Normalized, encoder-ready tactile inputs.
    pub fn prepare_tactile(&self, obs: &Observation, stats: &NormStats) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.tactile.len());
        for (enc, spec) in self.tactile.iter().zip(self.obs.tactile.iter()) {
            let values = if enc.kind == SensorKind::ContactMic {
                let w = obs.audio_window.as_ref().ok_or_else(|| PolicyError::MissingField("audio_window".into()))?;
                let mut m = audio_to_melspec(w)?.values;
                stats.apply(&melspec_key(&spec.stream), &mut m, Direction::Forward)?;
                m
            } else {
                let f = obs.tactile.get(&spec.stream).ok_or_else(|| PolicyError::MissingField(spec.stream.clone()))?;
                let mut v: Vec<f64> = f.values.iter().map(|x| *x as f64).collect();
                stats.apply(&spec.stream, &mut v, Direction::Forward)?;
                v
            };
            out.push(enc.prepare(&values)?);
        }
        Ok(out)
    }

    pub fn prepare(&self, obs: &Observation, stats: &NormStats) -> Result<PolicyInput> {
        let images = self
            .obs
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = obs.images.get(&c.name).ok_or_else(|| PolicyError::MissingField(c.name.clone()))?;
                self.prepare_camera(i, f, stats)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyInput {
            images,
            proprio: self.prepare_proprio(&obs.proprio, stats)?,
            tactile: self.prepare_tactile(obs, stats)?,
        })
    }

    /// Encodes the observation, assembles tokens and decodes a chunk.
    /// `z` is `[1, latent_dim]`.
    pub fn forward(&self, g: &mut Graph, input: &PolicyInput, z: Var) -> Result<ForwardVars> {
        if !input.is_finite() {
            return Err(PolicyError::NonFinite("policy input".into()));
        }
        if input.images.len() != self.cameras.len() || input.tactile.len() != self.tactile.len() {
            return Err(PolicyError::Shape(format!(
                "input has {} images and {} tactile tensors, policy expects {} and {}",
                input.images.len(),
                input.tactile.len(),
                self.cameras.len(),
                self.tactile.len()
            )));
        }
        self.proprio.check(&input.proprio)?;
        for (enc, img) in self.cameras.iter().zip(&input.images) {
            enc.check(img)?;
        }
        let zl = self.latent_proj.forward(g, z);
        let p = g.input(Tensor::row(input.proprio.clone()));
        let zp = self.proprio.forward(g, p);
        let mut feats = Vec::with_capacity(self.tactile.len());
        for (enc, x) in self.tactile.iter().zip(&input.tactile) {
            let xv = g.input(x.clone());
            feats.push(enc.forward(g, xv));
        }
        let mut maps = Vec::with_capacity(self.cameras.len());
        for (enc, img) in self.cameras.iter().zip(&input.images) {
            let x = g.input(img.clone());
            maps.push(enc.forward(g, x).feature_map);
        }
        let sequence = build_tokens(g, zl, zp, &feats, &maps)?;
        let pred = self.decode(g, &sequence);
        Ok(ForwardVars { pred, sequence })
    }

    /// Adds position embeddings, runs the encoder stack, and decodes
    /// `chunk_len` positional queries into actions.
    pub fn decode(&self, g: &mut Graph, seq: &TokenSequence) -> Var {
        let d = self.cfg.hidden_dim;
        let slots = g.param(self.slots);
        let pos = if seq.n_spatial > 0 {
            let sin = g.input(sinusoidal_table(seq.n_spatial, d));
            g.concat_rows(&[slots, sin])
        } else {
            slots
        };
        let mut x = g.add(seq.tokens, pos);
        for l in &self.encoder {
            x = l.forward(g, x, None);
        }
        let mut q = g.input(sinusoidal_table(self.cfg.chunk_len, d));
        for l in &self.decoder {
            q = l.forward(g, q, x);
        }
        self.head.forward(g, q)
    }

    /// CVAE posterior over a normalized target chunk; padded rows are
    /// hidden from attention. Returns `[1, L]` mean and clamped log-variance.
    pub fn posterior_graph(&self, g: &mut Graph, target: &ActionChunk, proprio: Option<&[f64]>) -> Result<(Var, Var)> {
        let (h, a) = (self.cfg.chunk_len, self.cfg.action_dim);
        if target.horizon() != h || target.action_dim != a {
            return Err(PolicyError::Shape(format!("chunk {}x{} vs policy {h}x{a}", target.horizon(), target.action_dim)));
        }
        let d = self.cfg.hidden_dim;
        let acts = g.input(Tensor::new(vec![h, a], target.actions.clone()));
        let acts = self.post_action.forward(g, acts);
        let cls = g.param(self.post_cls);
        let mut rows = vec![cls];
        if let Some(lin) = &self.post_proprio {
            let p = proprio.ok_or_else(|| PolicyError::MissingField("posterior proprio".into()))?;
            let pv = g.input(Tensor::row(p.to_vec()));
            rows.push(lin.forward(g, pv));
        }
        let lead = rows.len();
        rows.push(acts);
        let x = g.concat_rows(&rows);
        let pos = g.input(sinusoidal_table(lead + h, d));
        let mut x = g.add(x, pos);
        let mut mask = vec![0.0; lead];
        mask.extend(target.pad_mask.iter().map(|p| if *p { MASK_BIAS } else { 0.0 }));
        let mask = g.input(Tensor::row(mask));
        for l in &self.post_layers {
            x = l.forward(g, x, Some(mask));
        }
        let c = g.slice_rows(x, 0, 1);
        let o = self.post_out.forward(g, c);
        let l = self.cfg.latent_dim;
        let mu = g.slice_cols(o, 0, l);
        let lv = g.slice_cols(o, l, l);
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    /// Full training objective for one sample with a fixed noise draw `eps`.
    pub fn training_loss(&self, g: &mut Graph, input: &PolicyInput, target: &ActionChunk, eps: &[f64]) -> Result<(LossVars, TokenSequence)> {
        let proprio = self.post_proprio.as_ref().map(|_| input.proprio.as_slice());
        let (mu, lv) = self.posterior_graph(g, target, proprio)?;
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let e = g.input(Tensor::row(eps.to_vec()));
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        let fwd = self.forward(g, input, z)?;
        let loss = loss_graph(g, fwd.pred, target, mu, lv, self.cfg.lambda_kl)?;
        Ok((loss, fwd.sequence))
    }

    pub fn posterior(&self, ps: &ParamSet, target: &ActionChunk, proprio: Option<&[f64]>) -> Result<PosteriorParams> {
        let mut g = Graph::new(ps);
        let (mu, lv) = self.posterior_graph(&mut g, target, proprio)?;
        Ok(PosteriorParams {
            mu: g.value(mu).data().to_vec(),
            logvar: g.value(lv).data().to_vec(),
        })
    }

    /// Inference chunk (`z = 0`) in normalized action units, `[H, A]` row-major.
    pub fn predict(&self, ps: &ParamSet, input: &PolicyInput) -> Result<Vec<f64>> {
        self.predict_with_latent(ps, input, &vec![0.0; self.cfg.latent_dim])
    }

    pub fn predict_with_latent(&self, ps: &ParamSet, input: &PolicyInput, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(ps);
        let zv = g.input(Tensor::row(z.to_vec()));
        let fwd = self.forward(&mut g, input, zv)?;
        let out = g.value(fwd.pred).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("predicted actions".into()));
        }
        Ok(out)
    }

    /// Token origin tags for a given input (no gradients).
    pub fn token_sources(&self, ps: &ParamSet, input: &PolicyInput) -> Result<Vec<TokenSource>> {
        let mut g = Graph::new(ps);
        let zv = g.input(Tensor::zeros(&[1, self.cfg.latent_dim]));
        Ok(self.forward(&mut g, input, zv)?.sequence.sources)
    }
}

/// Normalization key for the mel spectrogram of an audio stream.
pub fn melspec_key(stream: &str) -> String {
    format!("{stream}.melspec")
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::encoders::EncoderVariant;
    use crate::nn::gradcheck::check_param_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(mode: SensorMode, tactile: Vec<TactileSpec>, seed: u64) -> (Policy, ParamSet) {
        Policy::new(tiny_cfg(2), tiny_obs(tactile), mode, &BTreeMap::new(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn token_counts_for_array_sensor_and_daimon() {
        // 7x7 camera map: a backbone that maps 14x14 to 7x7.
        let backbone = ResNetConfig {
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 2,
            stage_channels: vec![4],
            stage_blocks: vec![1],
            stage_strides: vec![1],
            groups: 2,
        };
        let mut obs = tiny_obs(vec![fsr()]);
        obs.cameras[0].shape = vec![3, 14, 14];
        obs.backbone = backbone.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, ps) = Policy::new(tiny_cfg(2), obs.clone(), SensorMode::Visuotactile, &BTreeMap::new(), &mut rng).unwrap();
        let mut inp = input(&mut rng, 1);
        inp.images[0] = Tensor::uniform(&[3, 14, 14], 1.0, &mut rng);
        let src = p.token_sources(&ps, &inp).unwrap();
        assert_eq!(src.len(), 52);
        assert_eq!(&src[..3], &[TokenSource::Latent, TokenSource::Proprio, TokenSource::Tactile]);

        let mut e = EncoderConfig::new(EncoderVariant::TactileImageCnn, vec![14, 14, 3]);
        e.cnn = backbone;
        obs.tactile = vec![TactileSpec {
            stream: "daimon".into(),
            sensor: SensorKind::Daimon,
            encoder: e,
        }];
        let (p, ps) = Policy::new(tiny_cfg(2), obs, SensorMode::Visuotactile, &BTreeMap::new(), &mut rng).unwrap();
        inp.tactile = vec![Tensor::uniform(&[3, 14, 14], 1.0, &mut rng)];
        let src = p.token_sources(&ps, &inp).unwrap();
        assert_eq!(src.len(), 2 + 98);
        assert_eq!(src.iter().filter(|s| **s == TokenSource::Tactile).count(), 49);
        assert_eq!(src[2], TokenSource::Image);
    }

    #[test]
    fn width_concat_rejects_height_mismatch() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let zl = g.input(Tensor::zeros(&[1, 4]));
        let zp = g.input(Tensor::zeros(&[1, 4]));
        let cam = g.input(Tensor::zeros(&[4, 2, 2]));
        let tac = g.input(Tensor::zeros(&[4, 3, 2]));
        let r = build_tokens(&mut g, zl, zp, &[TactileFeature::Map(tac)], &[cam]);
        assert!(matches!(r, Err(PolicyError::ChannelMismatch(_, _))));
    }

    #[test]
    fn vision_only_has_no_tactile_tokens() {
        let (p, ps) = build(SensorMode::VisionOnly, vec![fsr()], 1);
        assert!(p.tactile.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = p.token_sources(&ps, &input(&mut rng, 0)).unwrap();
        assert!(!src.contains(&TokenSource::Tactile));
        assert_eq!(src.len(), 2 + 4);
    }

    #[test]
    fn forward_is_pure_and_shaped() {
        let (p, ps) = build(SensorMode::Visuotactile, vec![fsr()], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inp = input(&mut rng, 1);
        let a = p.predict(&ps, &inp).unwrap();
        assert_eq!(a.len(), 6 * 2);
        assert_eq!(a, p.predict(&ps, &inp).unwrap());
        let mut bad = inp.clone();
        bad.proprio[0] = f64::NAN;
        assert!(matches!(p.predict(&ps, &bad), Err(PolicyError::NonFinite(_))));
        let mut short = inp;
        short.proprio.pop();
        assert!(p.predict(&ps, &short).is_err());
    }

    #[test]
    fn posterior_ignores_padded_rows() {
        let (p, ps) = build(SensorMode::Visuotactile, vec![fsr()], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = target(&mut rng, 6, 2, 4);
        let a = p.posterior(&ps, &t, None).unwrap();
        let mut t2 = t.clone();
        t2.actions[5 * 2] += 3.0;
        t2.actions[4 * 2 + 1] -= 1.0;
        assert_eq!(a, p.posterior(&ps, &t2, None).unwrap());
        let mut t3 = t;
        t3.actions[0] += 1.0;
        assert_ne!(a, p.posterior(&ps, &t3, None).unwrap());
        assert!(a.logvar.iter().all(|v| (LOGVAR_MIN..=LOGVAR_MAX).contains(v)));
    }

    #[test]
    fn latent_sampling_modes() {
        let post = PosteriorParams { mu: vec![0.5, -1.0], logvar: vec![LOGVAR_MIN, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_latent(&post, LatentMode::Infer, &mut rng), vec![0.0, 0.0]);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = sample_latent(&post, LatentMode::Train, &mut rng);
            assert!((z[0] - 0.5).abs() < 10.0 * (-5f64).exp());
            sum[0] += z[0];
            sum[1] += z[1];
        }
        let m1 = sum[1] / n as f64;
        assert!((m1 + 1.0).abs() < 3.0 / (n as f64).sqrt(), "{m1}");
    }

    #[test]
    fn swapping_proprio_and_tactile_tokens_changes_output() {
        let (p, ps) = build(SensorMode::Visuotactile, vec![fsr()], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inp = input(&mut rng, 1);
        let mut g = Graph::new(&ps);
        let z = g.input(Tensor::zeros(&[1, 3]));
        let fwd = p.forward(&mut g, &inp, z).unwrap();
        let base = g.value(fwd.pred).clone();
        let t = fwd.sequence.tokens;
        let r0 = g.slice_rows(t, 0, 1);
        let r1 = g.slice_rows(t, 1, 1);
        let r2 = g.slice_rows(t, 2, 1);
        let n = g.shape(t)[0];
        let rest = g.slice_rows(t, 3, n - 3);
        let swapped = g.concat_rows(&[r0, r2, r1, rest]);
        let seq = TokenSequence { tokens: swapped, ..fwd.sequence.clone() };
        let out = p.decode(&mut g, &seq);
        assert!(g.value(out).max_abs_diff(&base) > 1e-6);
    }

    #[test]
    fn tiny_policy_gradient_check() {
        let (p, ps) = build(SensorMode::Visuotactile, vec![fsr()], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inp = input(&mut rng, 1);
        let t = target(&mut rng, 6, 2, 4);
        let eps = vec![0.3, -0.7, 1.1];
        let build = |g: &mut Graph| p.training_loss(g, &inp, &t, &eps).unwrap().0.total;
        let r = check_param_grads(&ps, build, 50, 1e-6, &mut rng);
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn gradient_wrt_token_entry() {
        let (p, ps) = build(SensorMode::Visuotactile, vec![fsr()], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inp = input(&mut rng, 1);
        let t = target(&mut rng, 6, 2, 6);
        let z = vec![0.1, 0.2, -0.3];
        // Loss as a function of the proprio token row, fed as an input.
        let run = |tok: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new(&ps);
            let zv = g.input(Tensor::row(z.clone()));
            let zl = p.latent_proj.forward(&mut g, zv);
            let zp = g.input(tok.clone());
            let x = g.input(inp.tactile[0].clone());
            let TactileFeature::Token(tt) = p.tactile[0].forward(&mut g, x) else { unreachable!() };
            let img = g.input(inp.images[0].clone());
            let map = p.cameras[0].forward(&mut g, img).feature_map;
            let seq = build_tokens(&mut g, zl, zp, &[TactileFeature::Token(tt)], &[map]).unwrap();
            let pred = p.decode(&mut g, &seq);
            let mu = g.input(Tensor::row(vec![0.0; 3]));
            let lv = g.input(Tensor::row(vec![0.0; 3]));
            let l = loss_graph(&mut g, pred, &t, mu, lv, 10.0).unwrap();
            let grads = g.backward(l.total);
            (g.value(l.total).data()[0], grads.wrt(zp, 8))
        };
        let tok = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let (_, grad) = run(&tok);
        let h = 1e-6;
        for i in 0..8 {
            let mut up = tok.clone();
            up.data_mut()[i] += h;
            let mut dn = tok.clone();
            dn.data_mut()[i] -= h;
            let num = (run(&up).0 - run(&dn).0) / (2.0 * h);
            assert!(crate::nn::gradcheck::rel_err(grad[i], num) < 1e-3, "{i}: {} vs {num}", grad[i]);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg(2);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(2);
        c.exec_len = 7;
        assert!(c.validate().is_err());
        let d = PolicyConfig { action_dim: 4, ..Default::default() };
        assert!(d.validate().is_ok());
        assert_eq!((d.hidden_dim, d.enc_layers, d.dec_layers, d.heads, d.chunk_len, d.exec_len), (512, 4, 7, 8, 64, 32));
        assert_eq!(d.lambda_kl, 10.0);
    }
}
