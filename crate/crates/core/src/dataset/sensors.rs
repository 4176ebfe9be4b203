use serde::{Deserialize, Serialize};

/// Benchmarked tactile sensor families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorKind {
    #[serde(rename = "FSR")]
    Fsr,
    FlexiTac,
    #[serde(rename = "eGain")]
    EGain,
    #[serde(rename = "eFlesh")]
    EFlesh,
    Daimon,
    ContactMic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorModality {
    Resistive,
    Magnetic,
    Visual,
    Acoustic,
}

/// Static description of a sensor: layout, rate and catalogue metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub kind: SensorKind,
    pub modality: SensorModality,
    /// Per-sample shape. Audio sensors use `[1]` at 44.1 kHz.
    pub channel_shape: Vec<usize>,
    /// `None` means sampled on demand.
    pub rate_hz: Option<(f64, f64)>,
    pub normal_force_n: Option<(f64, f64)>,
    pub shear_force_n: Option<(f64, f64)>,
    pub price_usd: f64,
    pub high_friction: bool,
}

impl SensorKind {
    pub const ALL: [SensorKind; 6] = [Self::Fsr, Self::FlexiTac, Self::EGain, Self::EFlesh, Self::Daimon, Self::ContactMic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fsr => "FSR",
            Self::FlexiTac => "FlexiTac",
            Self::EGain => "eGain",
            Self::EFlesh => "eFlesh",
            Self::Daimon => "Daimon",
            Self::ContactMic => "ContactMic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    pub fn modality(self) -> SensorModality {
        match self {
            Self::Fsr | Self::FlexiTac | Self::EGain => SensorModality::Resistive,
            Self::EFlesh => SensorModality::Magnetic,
            Self::Daimon => SensorModality::Visual,
            Self::ContactMic => SensorModality::Acoustic,
        }
    }

    /// Number of scalars per reading (Daimon counted with `channels`).
    pub fn is_multichannel(self) -> bool {
        !matches!(self, Self::Fsr | Self::ContactMic)
    }

    pub fn is_image(self) -> bool {
        self == Self::Daimon
    }

    /// Catalogue entry; `daimon_channels` is only used for Daimon.
    pub fn spec(self, daimon_channels: usize) -> SensorSpec {
        let (shape, rate, normal, shear, price, high_friction) = match self {
            Self::Fsr => (vec![1], None, Some((0.2, 20.0)), None, 5.0, false),
            Self::FlexiTac => (vec![12, 32], Some((20.0, 100.0)), Some((0.2, 10.0)), None, 35.0, false),
            Self::EGain => (vec![2, 3], None, Some((0.0, 27.5)), None, 5.0, false),
            Self::EFlesh => (vec![5, 3], Some((100.0, 100.0)), Some((0.0, 30.0)), Some((0.0, 17.5)), 35.0, true),
            Self::Daimon => (vec![240, 320, daimon_channels], Some((60.0, 120.0)), Some((0.3, 30.0)), Some((0.1, 8.0)), 965.0, true),
            Self::ContactMic => (vec![1], Some((44_100.0, 44_100.0)), None, None, 27.0, true),
        };
        SensorSpec {
            kind: self,
            modality: self.modality(),
            channel_shape: shape,
            rate_hz: rate,
            normal_force_n: normal,
            shear_force_n: shear,
            price_usd: price,
            high_friction,
        }
    }
}

impl SensorSpec {
    pub fn sample_len(&self) -> usize {
        self.channel_shape.iter().product()
    }
}
