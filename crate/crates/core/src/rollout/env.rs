//! 2-D kinematic surrogates: mass-ambiguous pick-and-place, occluded peg
//! insertion, and force-window reorientation.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sensor_model::{AudioSynth, ContactForce, SensorModelKind, SensorState, SyntheticSensorModel};
use crate::dataset::{Frame, Observation, SensorKind, AUDIO_RATE_HZ, AUDIO_WINDOW};

/// Control period in seconds.
pub const DT: f64 = 0.1;
pub const IMAGE_SIZE: usize = 64;
pub const CAMERA: &str = "camera";
pub const PROPRIO: &str = "proprio";
pub const TACTILE: &str = "tactile";
pub const MIC: &str = "mic";
/// Audio samples per control tick.
pub const AUDIO_PER_TICK: usize = (AUDIO_RATE_HZ * DT) as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[serde(rename = "pickplace")]
    PickPlace,
    Insertion,
    Reorient,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PickPlace => "pickplace",
            Self::Insertion => "insertion",
            Self::Reorient => "reorient",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Self::PickPlace => 3,
            Self::Insertion | Self::Reorient => 2,
        }
    }

    pub fn proprio_dim(self) -> usize {
        match self {
            Self::PickPlace => 3,
            Self::Insertion => 2,
            Self::Reorient => 1,
        }
    }

    pub fn max_ticks(self) -> usize {
        match self {
            Self::PickPlace => 200,
            Self::Insertion => 120,
            Self::Reorient => 80,
        }
    }

    /// Tactile sensor the environment is instrumented with.
    pub fn tactile_kind(self) -> SensorKind {
        match self {
            Self::Insertion => SensorKind::Fsr,
            Self::PickPlace | Self::Reorient => SensorKind::EFlesh,
        }
    }
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pickplace" => Ok(Self::PickPlace),
            "insertion" => Ok(Self::Insertion),
            "reorient" => Ok(Self::Reorient),
            _ => Err(format!("unknown env `{s}` (expected pickplace, insertion or reorient)")),
        }
    }
}

/// Hidden object condition. In the reorientation task `Heavy` stands for
/// the low-friction object, which needs a larger pressing force.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Light,
    Heavy,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Light => "light",
            Self::Heavy => "heavy",
        }
    }

    /// Alternating schedule: even indices light, odd heavy.
    pub fn alternating(i: usize) -> Self {
        if i % 2 == 0 {
            Self::Light
        } else {
            Self::Heavy
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreGrasp,
    Grasped,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub class: ObjectClass,
    pub mass: f64,
    pub friction_mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    /// (x, z); z is the fingertip height above the table.
    pub position: [f64; 2],
    pub width: f64,
    pub grip_force: f64,
    /// Wrist angle (reorientation only).
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvState {
    pub kind: EnvKind,
    /// Object (or peg) position and angle.
    pub object_pos: [f64; 2],
    pub object_angle: f64,
    pub latent: ObjectLatent,
    pub gripper: Gripper,
    pub phase: Phase,
    pub success: bool,
    /// Insertion reached half depth.
    pub partial: bool,
    pub tick: usize,
    /// Placement target (pick-and-place) or slot center (insertion).
    pub target_x: f64,
    pub grasp_tick: Option<usize>,
    /// Object left the gripper above the table.
    pub dropped: bool,
    /// Pressing force outside the rotation window on the high side.
    pub lifted_without_rotation: bool,
}

/// Declared toy constants; not estimates of any physical setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    pub gravity: f64,
    /// Safety factor in the slip condition `grip * mu >= k * frac * m * g`.
    pub slip_k: f64,
    pub light_mass: f64,
    pub heavy_mass: f64,
    pub friction_mu: f64,
    /// Max gripper travel per tick along each axis.
    pub speed: f64,
    pub grip_max: f64,
    /// Grip below this opens the fingers.
    pub grip_contact: f64,
    pub grasp_tol: f64,
    /// Lift height over which the object's weight moves onto the fingers.
    pub load_transfer_height: f64,
    /// Losing the object above this height counts as a drop.
    pub drop_height: f64,
    pub object_width: f64,
    pub place_tol: f64,
    pub start_x: f64,
    pub object_x: f64,
    pub object_jitter: f64,
    pub place_x: f64,
    pub carry_z: f64,
    // insertion
    pub surface_z: f64,
    pub slot_jitter: f64,
    pub full_tol: f64,
    pub half_tol: f64,
    pub contact_stiffness: f64,
    // reorientation
    pub rotate_load: f64,
    pub grippy_mu: f64,
    pub slippery_mu: f64,
    pub force_max: f64,
    pub omega_max: f64,
    pub target_angle: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            slip_k: 1.0,
            light_mass: 0.1,
            heavy_mass: 0.5,
            friction_mu: 1.0,
            speed: 0.04,
            grip_max: 10.0,
            grip_contact: 0.2,
            grasp_tol: 0.04,
            load_transfer_height: 0.05,
            drop_height: 0.02,
            object_width: 0.05,
            place_tol: 0.05,
            start_x: 0.1,
            object_x: 0.3,
            object_jitter: 0.03,
            place_x: 0.75,
            carry_z: 0.15,
            surface_z: 0.1,
            slot_jitter: 0.05,
            full_tol: 0.01,
            half_tol: 0.025,
            contact_stiffness: 50.0,
            rotate_load: 2.0,
            grippy_mu: 1.2,
            slippery_mu: 0.4,
            force_max: 20.0,
            omega_max: 0.3,
            target_angle: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl EnvParams {
    pub fn mass(&self, c: ObjectClass) -> f64 {
        match c {
            ObjectClass::Light => self.light_mass,
            ObjectClass::Heavy => self.heavy_mass,
        }
    }

    /// Fraction of the weight carried by the fingers at fingertip height `z`.
    pub fn load_fraction(&self, z: f64) -> f64 {
        (z / self.load_transfer_height).clamp(0.0, 1.0)
    }

    /// Minimum grip that holds mass `m` at load fraction `frac`.
    pub fn slip_threshold(&self, mass: f64, frac: f64, mu: f64) -> f64 {
        self.slip_k * frac * mass * self.gravity / mu
    }

    /// Pressing-force window `[lift_min, slide_max]` that rotates an object
    /// with friction `mu`.
    pub fn rotation_window(&self, mu: f64) -> (f64, f64) {
        (self.rotate_load / mu, 2.0 * self.rotate_load / mu)
    }
}

/// Side effects of one transition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepEvents {
    pub contact: ContactForce,
    pub slip: bool,
    pub contact_onset: bool,
    pub clipped: bool,
}

fn approach(from: f64, to: f64, step: f64) -> f64 {
    from + (to - from).clamp(-step, step)
}

fn clip(v: f64, lo: f64, hi: f64, clipped: &mut bool) -> f64 {
    let c = if v.is_nan() { lo } else { v.clamp(lo, hi) };
    if c != v {
        *clipped = true;
    }
    c
}

/// Initial state for `kind`, with per-seed object placement.
pub fn reset(kind: EnvKind, class: ObjectClass, params: &EnvParams, rng: &mut impl Rng) -> ToyEnvState {
    let mu = match (kind, class) {
        (EnvKind::Reorient, ObjectClass::Light) => params.grippy_mu,
        (EnvKind::Reorient, ObjectClass::Heavy) => params.slippery_mu,
        _ => params.friction_mu,
    };
    let (object_pos, gripper_pos, target_x) = match kind {
        EnvKind::PickPlace => {
            let ox = params.object_x + rng.random_range(-params.object_jitter..=params.object_jitter);
            ([ox, 0.0], [params.start_x, params.carry_z], params.place_x)
        }
        EnvKind::Insertion => {
            let slot = 0.5 + rng.random_range(-params.slot_jitter..=params.slot_jitter);
            ([params.start_x, 0.25], [params.start_x, 0.25], slot)
        }
        EnvKind::Reorient => ([0.5, 0.0], [0.5, 0.05], 0.5),
    };
    ToyEnvState {
        kind,
        object_pos,
        object_angle: 0.0,
        latent: ObjectLatent { class, mass: params.mass(class), friction_mu: mu },
        gripper: Gripper { position: gripper_pos, width: 0.1, grip_force: 0.0, angle: 0.0 },
        phase: if kind == EnvKind::PickPlace { Phase::PreGrasp } else { Phase::Grasped },
        success: false,
        partial: false,
        tick: 0,
        target_x,
        grasp_tick: None,
        dropped: false,
        lifted_without_rotation: false,
    }
}

/// One kinematic transition. Out-of-range actions are clipped.
pub fn env_step(state: &ToyEnvState, action: &[f64], p: &EnvParams) -> (ToyEnvState, StepEvents) {
    let mut s = state.clone();
    let mut ev = StepEvents::default();
    s.tick += 1;
    if s.phase == Phase::Done {
        return (s, ev);
    }
    let a = |i: usize| action.get(i).copied().unwrap_or(f64::NAN);
    match s.kind {
        EnvKind::PickPlace => {
            let x = clip(a(0), 0.0, 1.0, &mut ev.clipped);
            let z = clip(a(1), 0.0, 0.3, &mut ev.clipped);
            let grip = clip(a(2), 0.0, p.grip_max, &mut ev.clipped);
            let g = &mut s.gripper;
            g.position = [approach(g.position[0], x, p.speed), approach(g.position[1], z, p.speed)];
            g.grip_force = grip;
            let (gx, gz) = (g.position[0], g.position[1]);
            let closed = grip >= p.grip_contact;
            if s.phase == Phase::Grasped {
                let frac = p.load_fraction(gz);
                let holds = grip * s.latent.friction_mu >= p.slip_k * frac * s.latent.mass * p.gravity;
                if closed && holds {
                    s.object_pos = [gx, gz];
                    ev.contact = ContactForce { normal: grip, shear: [0.0, frac * s.latent.mass * p.gravity] };
                } else {
                    ev.slip = closed;
                    if s.object_pos[1] > p.drop_height {
                        s.dropped = true;
                    }
                    s.object_pos[1] = 0.0;
                    s.phase = Phase::PreGrasp;
                }
            } else if closed && !s.dropped && (gx - s.object_pos[0]).abs() < p.grasp_tol && gz < 0.01 && s.object_pos[1] == 0.0 {
                s.phase = Phase::Grasped;
                s.grasp_tick = Some(s.tick);
                s.object_pos = [gx, gz];
                ev.contact_onset = true;
                ev.contact = ContactForce::normal(grip);
            }
            s.gripper.width = if s.phase == Phase::Grasped {
                p.object_width
            } else if closed {
                0.0
            } else {
                0.1
            };
            let placed = s.phase == Phase::PreGrasp && s.object_pos[1] == 0.0 && (s.object_pos[0] - s.target_x).abs() < p.place_tol;
            if placed && !s.dropped && gz > 0.05 {
                s.success = true;
                s.phase = Phase::Done;
            }
        }
        EnvKind::Insertion => {
            let x = clip(a(0), 0.0, 1.0, &mut ev.clipped);
            let z = clip(a(1), 0.0, 0.3, &mut ev.clipped);
            let [gx, gz] = s.gripper.position;
            let off = (gx - s.target_x).abs();
            let floor = if off <= p.full_tol {
                0.0
            } else if off <= p.half_tol {
                p.surface_z / 2.0
            } else {
                p.surface_z
            };
            // Lateral motion only above the board.
            let nx = if gz >= p.surface_z - 1e-9 { approach(gx, x, p.speed) } else { gx };
            let nz = approach(gz, z, p.speed).max(if gz >= p.surface_z - 1e-9 && nx != gx {
                let off2 = (nx - s.target_x).abs();
                if off2 <= p.full_tol {
                    0.0
                } else if off2 <= p.half_tol {
                    p.surface_z / 2.0
                } else {
                    p.surface_z
                }
            } else {
                floor
            });
            s.gripper.position = [nx, nz];
            s.object_pos = [nx, nz];
            let pressing = (approach(gz, z, p.speed) < nz - 1e-12) as u8 as f64;
            let in_slot = nz < p.surface_z - 1e-9;
            let normal = pressing * p.contact_stiffness * (nz - z).max(0.0) + if in_slot { 0.5 } else { 0.0 };
            let was_touching = state.object_pos[1] <= p.surface_z + 1e-9;
            ev.contact_onset = !was_touching && nz <= p.surface_z + 1e-9;
            ev.contact = ContactForce::normal(normal);
            if nz <= p.surface_z / 2.0 + 1e-9 {
                s.partial = true;
            }
            if nz <= 0.005 {
                s.success = true;
                s.phase = Phase::Done;
            }
        }
        EnvKind::Reorient => {
            let f = clip(a(0), 0.0, p.force_max, &mut ev.clipped);
            let w = clip(a(1), -p.omega_max, p.omega_max, &mut ev.clipped);
            s.gripper.grip_force = f;
            s.gripper.angle += w;
            let mu = s.latent.friction_mu;
            let (lo, hi) = p.rotation_window(mu);
            if f > hi {
                s.lifted_without_rotation = true;
            }
            if f >= lo && f <= hi {
                s.object_angle += w;
                ev.contact = ContactForce { normal: f, shear: [w * mu * f, 0.0] };
            } else {
                ev.slip = f > 0.0 && f < lo && w != 0.0;
                ev.contact = ContactForce { normal: f, shear: [mu * f * w.signum() * (f < lo) as u8 as f64, 0.0] };
            }
            if ev.contact.normal > 0.0 && state.gripper.grip_force == 0.0 {
                ev.contact_onset = true;
            }
            if s.object_angle >= p.target_angle - 0.05 {
                s.success = true;
                s.phase = Phase::Done;
            }
        }
    }
    if ev.clipped {
        log::debug!("tick {}: action {:?} clipped", s.tick, action);
    }
    (s, ev)
}

/// `[3, 64, 64]` RGB render in `[0, 1]`. Depends only on geometry, never on
/// the object's mass or friction.
pub fn render(s: &ToyEnvState, p: &EnvParams) -> Frame {
    let n = IMAGE_SIZE;
    let mut img = vec![0.15f32; 3 * n * n];
    let mut fill = |r0: i64, r1: i64, c0: i64, c1: i64, rgb: [f32; 3]| {
        for r in r0.max(0)..r1.min(n as i64) {
            for c in c0.max(0)..c1.min(n as i64) {
                for (ch, v) in rgb.iter().enumerate() {
                    img[ch * n * n + r as usize * n + c as usize] = *v;
                }
            }
        }
    };
    let col = |x: f64| (4.0 + x * 56.0).round() as i64;
    let row = |z: f64| (56.0 - z * 160.0).round() as i64;
    fill(57, 64, 0, 64, [0.4, 0.3, 0.2]);
    match s.kind {
        EnvKind::PickPlace => {
            let t = col(s.target_x);
            fill(57, 58, t - 3, t + 4, [0.1, 0.8, 0.2]);
            let (ox, oz) = (col(s.object_pos[0]), row(s.object_pos[1]));
            fill(oz - 4, oz + 1, ox - 2, ox + 3, [0.85, 0.15, 0.1]);
            let (gx, gz) = (col(s.gripper.position[0]), row(s.gripper.position[1]));
            let half = (s.gripper.width * 28.0).round() as i64 + 1;
            fill(gz - 6, gz + 1, gx - half - 1, gx - half, [0.2, 0.3, 0.9]);
            fill(gz - 6, gz + 1, gx + half, gx + half + 1, [0.2, 0.3, 0.9]);
            fill(gz - 8, gz - 6, gx - half - 1, gx + half + 1, [0.2, 0.3, 0.9]);
        }
        EnvKind::Insertion => {
            let surf = row(p.surface_z);
            fill(surf, 57, 0, 64, [0.5, 0.5, 0.55]);
            let t = col(s.target_x);
            fill(surf, surf + 1, t - 1, t + 2, [0.05, 0.05, 0.05]);
            let (gx, gz) = (col(s.gripper.position[0]), row(s.gripper.position[1]));
            // The hand occludes the peg once descent toward the board begins.
            if s.gripper.position[1] > p.surface_z + 0.05 {
                fill(gz - 6, gz + 1, gx - 1, gx + 2, [0.85, 0.6, 0.1]);
            }
            fill(gz - 14, gz - 6, gx - 4, gx + 5, [0.2, 0.3, 0.9]);
        }
        EnvKind::Reorient => {
            let (c, sn) = (s.object_angle.cos(), s.object_angle.sin());
            for k in -12i64..=12 {
                let (dx, dz) = (k as f64 * c, k as f64 * sn);
                let (cx, cz) = (32 + dx.round() as i64, 40 - dz.round() as i64);
                fill(cz - 1, cz + 2, cx - 1, cx + 2, [0.85, 0.15, 0.1]);
            }
            let gz = row(0.05 + 0.002 * s.gripper.grip_force);
            fill(gz - 20, gz - 16, 28, 37, [0.2, 0.3, 0.9]);
        }
    }
    Frame { shape: vec![3, n, n], values: img }
}

pub fn proprio(s: &ToyEnvState) -> Vec<f32> {
    let g = &s.gripper;
    match s.kind {
        EnvKind::PickPlace => vec![g.position[0] as f32, g.position[1] as f32, g.width as f32],
        EnvKind::Insertion => vec![g.position[0] as f32, g.position[1] as f32],
        EnvKind::Reorient => vec![g.angle as f32],
    }
}

/// Tactile model attached to an environment's fingers.
pub fn default_tactile_model(kind: EnvKind) -> SyntheticSensorModel {
    let mut m = match kind.tactile_kind() {
        SensorKind::Fsr => SyntheticSensorModel::first_order(SensorModelKind::ScalarForce, vec![1], 1.0, 0.05),
        _ => SyntheticSensorModel::first_order(SensorModelKind::Force3Axis, vec![5, 3], 1.0, 0.05),
    };
    m.noise_std = 0.02;
    m
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvOptions {
    /// Also record a contact microphone.
    pub with_mic: bool,
}

/// Environment plus its synthetic sensors and camera.
#[derive(Clone, Debug)]
pub struct ToyEnv {
    pub state: ToyEnvState,
    pub params: EnvParams,
    pub options: EnvOptions,
    pub tactile_model: SyntheticSensorModel,
    tactile: SensorState,
    reading: Vec<f64>,
    audio: Option<(AudioSynth, Vec<f32>)>,
    rng: ChaCha8Rng,
    pub clip_events: usize,
}

impl ToyEnv {
    pub fn new(kind: EnvKind, seed: u64, class: ObjectClass, options: EnvOptions) -> Self {
        Self::with_params(kind, seed, class, options, EnvParams::default())
    }

    pub fn with_params(kind: EnvKind, seed: u64, class: ObjectClass, options: EnvOptions, params: EnvParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = reset(kind, class, &params, &mut rng);
        let tactile_model = default_tactile_model(kind);
        let tactile = SensorState::new(&tactile_model);
        let reading = vec![0.0; tactile_model.channels()];
        let audio = options.with_mic.then(|| {
            let mut a = AudioSynth::new(0.5, 1e-3);
            let first = a.render(1, &mut rng);
            (a, first)
        });
        Self { state, params, options, tactile_model, tactile, reading, audio, rng, clip_events: 0 }
    }

    pub fn kind(&self) -> EnvKind {
        self.state.kind
    }

    pub fn action_dim(&self) -> usize {
        self.kind().action_dim()
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn time(&self) -> f64 {
        self.state.tick as f64 * DT
    }

    /// Current observation; the audio window ends at the current time.
    pub fn observation(&self) -> Observation {
        let mut images = BTreeMap::new();
        images.insert(CAMERA.to_string(), render(&self.state, &self.params));
        let mut tactile = BTreeMap::new();
        tactile.insert(
            TACTILE.to_string(),
            Frame { shape: self.tactile_model.shape.clone(), values: self.reading.iter().map(|v| *v as f32).collect() },
        );
        let audio_window = self.audio.as_ref().map(|(_, buf)| {
            let begin = buf.len().saturating_sub(AUDIO_WINDOW);
            let mut w = vec![0.0f32; AUDIO_WINDOW - (buf.len() - begin)];
            w.extend_from_slice(&buf[begin..]);
            w
        });
        Observation { t: self.state.tick, time: self.time(), images, proprio: proprio(&self.state), tactile, audio_window }
    }

    pub fn tactile_reading(&self) -> &[f64] {
        &self.reading
    }

    /// Full microphone recording so far.
    pub fn audio(&self) -> Option<&[f32]> {
        self.audio.as_ref().map(|(_, b)| b.as_slice())
    }

    pub fn step(&mut self, action: &[f64]) -> StepEvents {
        let (next, ev) = env_step(&self.state, action, &self.params);
        self.state = next;
        if ev.clipped {
            self.clip_events += 1;
        }
        self.reading = self.tactile.step(ev.contact, DT, &mut self.rng);
        if let Some((synth, buf)) = &mut self.audio {
            if ev.slip {
                synth.event(1.0);
            }
            if ev.contact_onset {
                synth.event(0.3 * ev.contact.normal.max(1.0));
            }
            buf.extend(synth.render(AUDIO_PER_TICK, &mut self.rng));
        }
        ev
    }
}
