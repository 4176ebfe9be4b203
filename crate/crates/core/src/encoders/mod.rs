//! Modality-specific encoders that map observations to hidden-size tokens.

mod melspec;
mod pca;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SensorKind;
use crate::nn::layers::{Linear, Mlp};
use crate::nn::resnet::{ResNet, ResNetConfig, ResNetOutput};
use crate::nn::{Graph, ParamSet, Tensor, Var};

pub use melspec::{audio_to_melspec, hz_to_mel, mel_to_hz, MelSpec, MelSpectrogram, HOP, LOG_EPS, MEL_LEN, N_FFT, N_FRAMES, N_MELS};
pub use pca::{fit_pca, PcaBasis};

/// Default token width.
pub const TOKEN_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("audio window must hold {expected} samples, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { what: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("pca: k={k} needs 1 <= k <= min(n-1, dim) with n={n}, dim={dim}")]
    PcaRank { k: usize, n: usize, dim: usize },
    #[error("encoder {variant:?} is not admissible for {sensor}")]
    Inadmissible { variant: EncoderVariant, sensor: &'static str },
    #[error("{0}")]
    BadFile(String),
    #[error("variant {0:?} needs a fitted pca basis")]
    MissingBasis(EncoderVariant),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Image,
    Proprio,
    Tactile,
    Latent,
}

/// A single encoded feature vector with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureToken {
    pub vector: Vec<f64>,
    pub source: TokenSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    ScalarLinear,
    ArrayMlp,
    TactileImageCnn,
    Pca,
    PcaMlp,
    MelspecMlp,
}

impl EncoderVariant {
    /// Variants each sensor may be paired with.
    pub fn admissible(kind: SensorKind) -> &'static [EncoderVariant] {
        use EncoderVariant::*;
        match kind {
            SensorKind::Fsr => &[ScalarLinear, ArrayMlp],
            SensorKind::FlexiTac => &[ArrayMlp, TactileImageCnn, Pca, PcaMlp],
            SensorKind::EGain | SensorKind::EFlesh => &[ArrayMlp, Pca, PcaMlp],
            SensorKind::Daimon => &[TactileImageCnn, Pca, PcaMlp],
            SensorKind::ContactMic => &[MelspecMlp],
        }
    }

    /// The encoder each sensor uses unless configured otherwise.
    pub fn default_for(kind: SensorKind) -> Self {
        match kind {
            SensorKind::Fsr => Self::ScalarLinear,
            SensorKind::FlexiTac | SensorKind::EGain | SensorKind::EFlesh => Self::ArrayMlp,
            SensorKind::Daimon => Self::TactileImageCnn,
            SensorKind::ContactMic => Self::MelspecMlp,
        }
    }

    pub fn uses_pca(self) -> bool {
        matches!(self, Self::Pca | Self::PcaMlp)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}

fn default_output_dim() -> usize {
    TOKEN_DIM
}

fn default_pca_k() -> usize {
    64
}

fn default_cnn() -> ResNetConfig {
    ResNetConfig::desk()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Raw per-sample sensor shape (`[1]` for audio).
    pub input_shape: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    /// Requested component count, clamped to the corpus rank when fitting.
    #[serde(default = "default_pca_k")]
    pub pca_k: usize,
    #[serde(default = "default_cnn")]
    pub cnn: ResNetConfig,
}

impl EncoderConfig {
    pub fn new(variant: EncoderVariant, input_shape: Vec<usize>) -> Self {
        Self {
            variant,
            input_shape,
            hidden_sizes: default_hidden(),
            output_dim: TOKEN_DIM,
            pca_k: default_pca_k(),
            cnn: default_cnn(),
        }
    }

    pub fn default_for(kind: SensorKind, input_shape: Vec<usize>) -> Self {
        Self::new(EncoderVariant::default_for(kind), input_shape)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self, kind: SensorKind) -> Result<()> {
        if !EncoderVariant::admissible(kind).contains(&self.variant) {
            return Err(EncoderError::Inadmissible {
                variant: self.variant,
                sensor: kind.name(),
            });
        }
        Ok(())
    }
}

/// Converts an `[H, W, C]` or `[H, W]` tactile image to `[C, H, W]`.
pub fn tactile_image_chw(shape: &[usize], values: &[f64]) -> Result<Tensor> {
    let (h, w, c) = match *shape {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => {
            return Err(EncoderError::ShapeMismatch {
                what: "tactile image".into(),
                expected: vec![0, 0, 0],
                got: shape.to_vec(),
            })
        }
    };
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = values[(y * w + x) * c + ch];
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out))
}

/// Output of a tactile encoder: a standalone token or a spatial map that is
/// concatenated width-wise with the camera map.
#[derive(Clone, Copy, Debug)]
pub enum TactileFeature {
    Token(Var),
    Map(Var),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TactileNet {
    Linear(Linear),
    Mlp(Mlp),
    Cnn(ResNet),
}

/// Learned tactile encoder for one sensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TactileEncoder {
    pub kind: SensorKind,
    pub cfg: EncoderConfig,
    pub net: TactileNet,
    pub pca: Option<PcaBasis>,
}

impl TactileEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, kind: SensorKind, cfg: EncoderConfig, pca: Option<PcaBasis>, rng: &mut R) -> Result<Self> {
        cfg.validate(kind)?;
        let d = cfg.output_dim;
        let net = match cfg.variant {
            EncoderVariant::ScalarLinear => {
                if cfg.input_len() != 1 {
                    return Err(EncoderError::Inadmissible {
                        variant: cfg.variant,
                        sensor: kind.name(),
                    });
                }
                TactileNet::Linear(Linear::new(ps, name, 1, d, rng))
            }
            EncoderVariant::ArrayMlp => TactileNet::Mlp(Mlp::new(ps, name, cfg.input_len(), &cfg.hidden_sizes, d, rng)),
            EncoderVariant::MelspecMlp => TactileNet::Mlp(Mlp::new(ps, name, MEL_LEN, &cfg.hidden_sizes, d, rng)),
            EncoderVariant::Pca | EncoderVariant::PcaMlp => {
                let basis = pca.as_ref().ok_or(EncoderError::MissingBasis(cfg.variant))?;
                if basis.dim() != cfg.input_len() {
                    return Err(EncoderError::ShapeMismatch {
                        what: "pca basis".into(),
                        expected: vec![cfg.input_len()],
                        got: vec![basis.dim()],
                    });
                }
                if cfg.variant == EncoderVariant::Pca {
                    TactileNet::Linear(Linear::new(ps, name, basis.k(), d, rng))
                } else {
                    TactileNet::Mlp(Mlp::new(ps, name, basis.k(), &cfg.hidden_sizes, d, rng))
                }
            }
            EncoderVariant::TactileImageCnn => {
                let channels = if cfg.input_shape.len() == 3 { cfg.input_shape[2] } else { 1 };
                TactileNet::Cnn(ResNet::new(ps, name, &cfg.cnn, channels, d, rng))
            }
        };
        Ok(Self { kind, cfg, net, pca })
    }

    /// Turns a normalized, flattened reading (or a normalized mel
    /// spectrogram for acoustic sensors) into the network input.
    pub fn prepare(&self, values: &[f64]) -> Result<Tensor> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite(format!("{} reading", self.kind.name())));
        }
        let expected = if self.cfg.variant == EncoderVariant::MelspecMlp { MEL_LEN } else { self.cfg.input_len() };
        if values.len() != expected {
            return Err(EncoderError::ShapeMismatch {
                what: format!("{} reading", self.kind.name()),
                expected: if expected == MEL_LEN { vec![N_MELS, N_FRAMES] } else { self.cfg.input_shape.clone() },
                got: vec![values.len()],
            });
        }
        Ok(match self.cfg.variant {
            EncoderVariant::Pca | EncoderVariant::PcaMlp => {
                let c = self.pca.as_ref().expect("validated at construction").project(values)?;
                Tensor::row(c)
            }
            EncoderVariant::TactileImageCnn => tactile_image_chw(&self.cfg.input_shape, values)?,
            _ => Tensor::row(values.to_vec()),
        })
    }

    /// `input` comes from [`TactileEncoder::prepare`].
    pub fn forward(&self, g: &mut Graph, input: Var) -> TactileFeature {
        match &self.net {
            TactileNet::Linear(l) => TactileFeature::Token(l.forward(g, input)),
            TactileNet::Mlp(m) => TactileFeature::Token(m.forward(g, input)),
            TactileNet::Cnn(net) => {
                let out = net.forward(g, input);
                if self.kind == SensorKind::Daimon {
                    TactileFeature::Map(out.feature_map)
                } else {
                    TactileFeature::Token(out.pooled)
                }
            }
        }
    }

    /// Inference-mode token for a raw flattened reading. Image-type outputs
    /// are reduced to their pooled token.
    pub fn encode(&self, ps: &ParamSet, values: &[f64]) -> Result<FeatureToken> {
        let x = self.prepare(values)?;
        let mut g = Graph::new(ps);
        let xv = g.input(x);
        let v = match self.forward(&mut g, xv) {
            TactileFeature::Token(v) => v,
            TactileFeature::Map(m) => {
                let s = g.shape(m).to_vec();
                let flat = g.reshape(m, &[s[0], s[1] * s[2]]);
                g.mean_cols(flat)
            }
        };
        Ok(FeatureToken {
            vector: g.value(v).data().to_vec(),
            source: TokenSource::Tactile,
        })
    }
}

/// Residual backbone for camera images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub net: ResNet,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &ResNetConfig, channels: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            net: ResNet::new(ps, name, cfg, channels, dim, rng),
        }
    }

    pub fn check(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.net.in_channels {
            return Err(EncoderError::ShapeMismatch {
                what: "camera image".into(),
                expected: vec![self.net.in_channels, 0, 0],
                got: s.to_vec(),
            });
        }
        if !image.is_finite() {
            return Err(EncoderError::NonFinite("camera image".into()));
        }
        Ok(())
    }

    /// `image` is `[C, H, W]`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> ResNetOutput {
        self.net.forward(g, image)
    }

    pub fn encode(&self, ps: &ParamSet, image: &Tensor) -> Result<(Tensor, FeatureToken)> {
        self.check(image)?;
        let mut g = Graph::new(ps);
        let x = g.input(image.clone());
        let out = self.forward(&mut g, x);
        Ok((
            g.value(out.feature_map).clone(),
            FeatureToken {
                vector: g.value(out.pooled).data().to_vec(),
                source: TokenSource::Image,
            },
        ))
    }
}

/// Single linear projection of the proprio vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProprioEncoder {
    pub lin: Linear,
}

impl ProprioEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, proprio_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(ps, name, proprio_dim, dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lin.in_dim
    }

    pub fn check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.input_dim() {
            return Err(EncoderError::ShapeMismatch {
                what: "proprio".into(),
                expected: vec![self.input_dim()],
                got: vec![p.len()],
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite("proprio".into()));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: Var) -> Var {
        self.lin.forward(g, p)
    }

    pub fn encode(&self, ps: &ParamSet, p: &[f64]) -> Result<FeatureToken> {
        self.check(p)?;
        let mut g = Graph::new(ps);
        let x = g.input(Tensor::row(p.to_vec()));
        let y = self.forward(&mut g, x);
        Ok(FeatureToken {
            vector: g.value(y).data().to_vec(),
            source: TokenSource::Proprio,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn admissibility_matrix() {
        use EncoderVariant::*;
        for kind in SensorKind::ALL {
            let ok = EncoderConfig::new(MelspecMlp, vec![1]).validate(kind).is_ok();
            assert_eq!(ok, kind == SensorKind::ContactMic, "{kind:?}");
            if kind.is_multichannel() {
                assert!(EncoderConfig::new(ScalarLinear, vec![1]).validate(kind).is_err());
            }
            assert!(EncoderConfig::default_for(kind, vec![1]).validate(kind).is_ok());
        }
        for v in [ArrayMlp, TactileImageCnn, Pca, PcaMlp] {
            assert!(EncoderConfig::new(v, vec![12, 32]).validate(SensorKind::FlexiTac).is_ok());
        }
        for v in [TactileImageCnn, Pca, PcaMlp] {
            assert!(EncoderConfig::new(v, vec![240, 320, 3]).validate(SensorKind::Daimon).is_ok());
        }
        assert!(EncoderConfig::new(ArrayMlp, vec![240, 320, 3]).validate(SensorKind::Daimon).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: std::result::Result<EncoderConfig, _> = toml::from_str("variant = \"array_mlp\"\ninput_shape = [2, 3]\n");
        assert_eq!(ok.unwrap().hidden_sizes, vec![256, 256]);
        let bad: std::result::Result<EncoderConfig, _> = toml::from_str("variant = \"array_mlp\"\ninput_shape = [2, 3]\nhiden = [1]\n");
        assert!(bad.is_err());
    }

    #[test]
    fn scalar_linear_is_affine() {
        let mut ps = ParamSet::new();
        let enc = TactileEncoder::new(&mut ps, "fsr", SensorKind::Fsr, EncoderConfig::default_for(SensorKind::Fsr, vec![1]), None, &mut rng()).unwrap();
        let TactileNet::Linear(l) = &enc.net else { panic!() };
        ps.get_mut(l.bias).data_mut().iter_mut().for_each(|b| *b = 0.0);
        let e0 = enc.encode(&ps, &[0.0]).unwrap();
        assert_eq!(e0.vector.len(), TOKEN_DIM);
        assert!(e0.vector.iter().all(|v| *v == 0.0));
        let (a, b) = (enc.encode(&ps, &[0.7]).unwrap(), enc.encode(&ps, &[-1.9]).unwrap());
        let ab = enc.encode(&ps, &[0.7 - 1.9]).unwrap();
        for i in 0..TOKEN_DIM {
            assert!((a.vector[i] + b.vector[i] - ab.vector[i]).abs() < 1e-12);
        }
        assert!(matches!(enc.encode(&ps, &[f64::NAN]), Err(EncoderError::NonFinite(_))));
    }

    #[test]
    fn array_mlp_shapes() {
        for (kind, shape) in [(SensorKind::FlexiTac, vec![12, 32]), (SensorKind::EGain, vec![2, 3]), (SensorKind::EFlesh, vec![5, 3])] {
            let mut ps = ParamSet::new();
            let cfg = EncoderConfig::default_for(kind, shape.clone());
            let n = cfg.input_len();
            let enc = TactileEncoder::new(&mut ps, "t", kind, cfg, None, &mut rng()).unwrap();
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
            let t1 = enc.encode(&ps, &x).unwrap();
            assert_eq!(t1.vector.len(), TOKEN_DIM);
            assert_eq!(t1, enc.encode(&ps, &x).unwrap());
            assert!(matches!(enc.encode(&ps, &x[1..]), Err(EncoderError::ShapeMismatch { .. })));
        }
    }

    #[test]
    fn melspec_mlp_sensitive_to_single_cell() {
        let mut ps = ParamSet::new();
        let mut cfg = EncoderConfig::default_for(SensorKind::ContactMic, vec![1]);
        cfg.hidden_sizes = vec![16];
        let enc = TactileEncoder::new(&mut ps, "mic", SensorKind::ContactMic, cfg, None, &mut rng()).unwrap();
        let spec = audio_to_melspec(&vec![0.0; crate::dataset::AUDIO_WINDOW]).unwrap();
        let mut x: Vec<f64> = spec.flatten().iter().map(|v| v / 23.0).collect();
        let a = enc.encode(&ps, &x).unwrap();
        assert_eq!(a, enc.encode(&ps, &x).unwrap());
        x[5000] += 1.0;
        assert_ne!(a, enc.encode(&ps, &x).unwrap());
    }

    #[test]
    fn pca_encoders_project_then_map() {
        let mut r = rng();
        let samples: Vec<Vec<f64>> = (0..20).map(|_| (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let basis = fit_pca(&samples, 5).unwrap();
        for v in [EncoderVariant::Pca, EncoderVariant::PcaMlp] {
            let mut ps = ParamSet::new();
            let enc = TactileEncoder::new(&mut ps, "d", SensorKind::Daimon, EncoderConfig::new(v, vec![4, 2, 3]), Some(basis.clone()), &mut r).unwrap();
            let x = enc.prepare(&basis.mean).unwrap();
            assert!(x.data().iter().all(|c| c.abs() < 1e-12));
            assert_eq!(enc.encode(&ps, &samples[0]).unwrap().vector.len(), TOKEN_DIM);
        }
        let mut ps = ParamSet::new();
        assert!(matches!(
            TactileEncoder::new(&mut ps, "d", SensorKind::Daimon, EncoderConfig::new(EncoderVariant::Pca, vec![4, 2, 3]), None, &mut r),
            Err(EncoderError::MissingBasis(_))
        ));
    }

    #[test]
    fn daimon_cnn_yields_map_flexitac_cnn_yields_token() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let mut cfg = EncoderConfig::new(EncoderVariant::TactileImageCnn, vec![16, 16, 2]);
        cfg.output_dim = 8;
        cfg.cnn = ResNetConfig::tiny();
        let daimon = TactileEncoder::new(&mut ps, "d", SensorKind::Daimon, cfg.clone(), None, &mut r).unwrap();
        cfg.input_shape = vec![12, 32];
        let flexi = TactileEncoder::new(&mut ps, "f", SensorKind::FlexiTac, cfg, None, &mut r).unwrap();
        let mut g = Graph::new(&ps);
        let xd = g.input(daimon.prepare(&vec![0.5; 512]).unwrap());
        assert!(matches!(daimon.forward(&mut g, xd), TactileFeature::Map(_)));
        let xf = g.input(flexi.prepare(&vec![0.5; 384]).unwrap());
        let TactileFeature::Token(t) = flexi.forward(&mut g, xf) else { panic!() };
        assert_eq!(g.shape(t), &[1, 8]);
    }

    #[test]
    fn hwc_to_chw_layout() {
        let vals: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = tactile_image_chw(&[2, 3, 2], &vals).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.data()[..6], [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn image_encoder_contract() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let enc = ImageEncoder::new(&mut ps, "cam", &ResNetConfig::desk(), 3, TOKEN_DIM, &mut r);
        let img = Tensor::uniform(&[3, 64, 64], 1.0, &mut r);
        let (map, tok) = enc.encode(&ps, &img).unwrap();
        assert_eq!(map.shape(), &[TOKEN_DIM, 4, 4]);
        assert_eq!(tok.vector.len(), TOKEN_DIM);
        assert_eq!(tok, enc.encode(&ps, &img).unwrap().1);
        assert!(enc.encode(&ps, &Tensor::zeros(&[1, 64, 64])).is_err());
    }

    #[test]
    fn image_backbone_gradient_check() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let enc = ImageEncoder::new(&mut ps, "cam", &ResNetConfig::tiny(), 3, 4, &mut r);
        let img = Tensor::uniform(&[3, 8, 8], 1.0, &mut r);
        let w = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let build = |g: &mut Graph| {
            let x = g.input(img.clone());
            let out = enc.forward(g, x);
            let wv = g.input(w.clone());
            let s = g.mul(out.pooled, wv);
            g.sum(s)
        };
        let rep = check_param_grads(&ps, build, 40, 1e-5, &mut r);
        assert!(rep.max_rel_err < 1e-3, "{rep:?}");
    }

    #[test]
    fn proprio_encoder_contract() {
        let mut ps = ParamSet::new();
        let enc = ProprioEncoder::new(&mut ps, "p", 8, TOKEN_DIM, &mut rng());
        let p: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let b = ps.get(enc.lin.bias).data().to_vec();
        let e1 = enc.encode(&ps, &p).unwrap();
        let e2 = enc.encode(&ps, &p.iter().map(|v| 2.5 * v).collect::<Vec<_>>()).unwrap();
        for i in 0..TOKEN_DIM {
            assert!((e2.vector[i] - (2.5 * (e1.vector[i] - b[i]) + b[i])).abs() < 1e-9);
        }
        assert!(matches!(enc.encode(&ps, &p[..7]), Err(EncoderError::ShapeMismatch { .. })));
    }
}
