//! Toy environments, synthetic sensors, scripted demonstrations and
//! receding-horizon execution of chunked policies.

mod env;
mod expert;
mod sensor_model;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dataset::{sample_chunk, DatasetError, Direction, Episode, Modality, Observation, Stream, StreamSpec};
use crate::par::par_map;
use crate::policy::PolicyError;
use crate::trainer::{Checkpoint, TrainError};

pub use env::{
    default_tactile_model, env_step, proprio, render, reset, EnvKind, EnvOptions, EnvParams, Gripper, ObjectClass, ObjectLatent, Phase, StepEvents,
    ToyEnv, ToyEnvState, AUDIO_PER_TICK, CAMERA, DT, IMAGE_SIZE, MIC, PROPRIO, TACTILE,
};
pub use expert::{carry_grip, expert_action, HEAVY_GRIP, HEFT_TICKS, HEFT_Z, LIGHT_GRIP};
pub use sensor_model::{synth_tactile, AudioSynth, ContactForce, SensorModelKind, SensorState, SyntheticSensorModel};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid sensor model: {0}")]
    Model(String),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("policy action_dim {policy} does not match env action_dim {env}")]
    ActionDimMismatch { policy: usize, env: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = RolloutError> = std::result::Result<T, E>;

/// Whether a tick counts toward carry-grip statistics: the object is held
/// and has been lifted past the heft height.
pub fn is_carrying(s: &ToyEnvState) -> bool {
    s.kind == EnvKind::PickPlace && s.phase == Phase::Grasped && s.gripper.position[1] > HEFT_Z + 1e-9
}

/// Seed of the environment used for episode `index` of a run seeded `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn record_spec(name: &str, modality: Modality, shape: &[usize]) -> StreamSpec {
    StreamSpec {
        name: name.into(),
        modality,
        rate_hz: 1.0 / DT,
        shape: shape.to_vec(),
        dtype: "float32".into(),
        file: format!("{name}.bin"),
    }
}

/// Runs the scripted expert once and records the episode.
pub fn record_expert_episode(kind: EnvKind, seed: u64, class: ObjectClass, options: &EnvOptions, id: &str) -> Result<Episode> {
    let mut env = ToyEnv::new(kind, seed, class, options.clone());
    let (mut actions, mut camera, mut prop, mut tact, mut ts) = (vec![], vec![], vec![], vec![], vec![]);
    let mut grips = vec![];
    while !env.is_done() && env.state.tick < kind.max_ticks() {
        let obs = env.observation();
        let a = expert_action(&env);
        ts.push(obs.time);
        camera.extend_from_slice(&obs.images[CAMERA].values);
        prop.extend_from_slice(&obs.proprio);
        tact.extend_from_slice(&obs.tactile[TACTILE].values);
        actions.extend(a.iter().map(|v| *v as f32));
        if is_carrying(&env.state) {
            grips.push(a[2]);
        }
        env.step(&a);
    }
    let mut streams = vec![
        Stream::records(record_spec("actions", Modality::Action, &[kind.action_dim()]), ts.clone(), actions),
        Stream::records(record_spec(CAMERA, Modality::Image, &[3, IMAGE_SIZE, IMAGE_SIZE]), ts.clone(), camera),
        Stream::records(record_spec(PROPRIO, Modality::Proprio, &[kind.proprio_dim()]), ts.clone(), prop),
        Stream::records(record_spec(TACTILE, Modality::Tactile, &env.tactile_model.shape), ts, tact),
    ];
    if let Some(audio) = env.audio() {
        let n = (env.state.tick - 1) * AUDIO_PER_TICK + 1;
        streams.push(Stream::audio(MIC, "mic.bin", 0.0, audio[..n].to_vec()));
    }
    let mut sensors = serde_json::Map::new();
    sensors.insert(TACTILE.into(), json!(kind.tactile_kind().name()));
    if options.with_mic {
        sensors.insert(MIC.into(), json!("contact_mic"));
    }
    let mut meta = BTreeMap::new();
    meta.insert("env".into(), json!(kind.as_str()));
    meta.insert("class".into(), json!(class.as_str()));
    meta.insert("seed".into(), json!(seed));
    meta.insert("success".into(), json!(env.state.success));
    meta.insert("sensors".into(), serde_json::Value::Object(sensors));
    if !grips.is_empty() {
        meta.insert("mean_carry_grip".into(), json!(grips.iter().sum::<f64>() / grips.len() as f64));
    }
    Ok(Episode::new(id, streams, meta)?)
}

/// `n` expert demonstrations alternating light and heavy objects.
pub fn collect_demos(kind: EnvKind, n: usize, seed: u64, options: &EnvOptions) -> Result<Vec<Episode>> {
    let idx: Vec<usize> = (0..n).collect();
    par_map(&idx, |_, &i| record_expert_episode(kind, episode_seed(seed, i), ObjectClass::alternating(i), options, &format!("ep{i:04}")))
        .into_iter()
        .collect()
}

/// Anything that maps the current observation to an `[H, A]` chunk in
/// environment action units.
pub trait ChunkPolicy {
    fn chunk(&mut self, env: &ToyEnv, obs: &Observation) -> Result<Vec<Vec<f64>>>;
    fn action_dim(&self) -> usize;
}

/// Trained policy; queries use `z = 0` and denormalize with frozen stats.
pub struct CheckpointPolicy<'a> {
    pub ckpt: &'a Checkpoint,
}

impl ChunkPolicy for CheckpointPolicy<'_> {
    fn chunk(&mut self, _env: &ToyEnv, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let p = &self.ckpt.policy;
        let input = p.prepare(obs, &self.ckpt.stats)?;
        let mut flat = p.predict(&self.ckpt.params, &input)?;
        self.ckpt.stats.apply("actions", &mut flat, Direction::Inverse)?;
        Ok(flat.chunks(p.cfg.action_dim).map(<[f64]>::to_vec).collect())
    }

    fn action_dim(&self) -> usize {
        self.ckpt.policy.cfg.action_dim
    }
}

/// Predicts chunks by simulating the scripted expert on a clone of the env.
pub struct ExpertChunks {
    pub horizon: usize,
}

impl ChunkPolicy for ExpertChunks {
    fn chunk(&mut self, env: &ToyEnv, _obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let mut sim = env.clone();
        Ok((0..self.horizon)
            .map(|_| {
                let a = expert_action(&sim);
                sim.step(&a);
                a
            })
            .collect())
    }

    fn action_dim(&self) -> usize {
        0
    }
}

/// Replays a recorded episode's actions chunk by chunk, reading them through
/// `sample_chunk` exactly as training does.
pub struct ReplayChunks<'a> {
    pub episode: &'a Episode,
    pub horizon: usize,
}

impl ChunkPolicy for ReplayChunks<'_> {
    fn chunk(&mut self, _env: &ToyEnv, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        let (_, c) = sample_chunk(self.episode, obs.t.min(self.episode.length_t.saturating_sub(1)), self.horizon)?;
        Ok(c.actions.chunks(c.action_dim).map(<[f64]>::to_vec).collect())
    }

    fn action_dim(&self) -> usize {
        self.episode.action_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Actions executed per query before re-planning.
    pub exec_len: usize,
    pub max_ticks: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { exec_len: 32, max_ticks: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub tick: usize,
    pub query: usize,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub success: bool,
    pub partial: bool,
    pub dropped: bool,
    pub query_count: usize,
    pub executed: usize,
    pub clip_events: usize,
    /// Set when the policy returned a non-finite or malformed chunk.
    pub aborted: Option<String>,
    /// Mean commanded grip over ticks where [`is_carrying`] held.
    pub mean_grip: Option<f64>,
    pub trajectory: Vec<TrajectoryStep>,
}

/// Receding-horizon loop: query a chunk, execute its first `exec_len`
/// actions, repeat until the task ends or `max_ticks` actions ran.
pub fn run_receding_horizon(env: &mut ToyEnv, policy: &mut dyn ChunkPolicy, cfg: &RolloutConfig) -> Result<RolloutResult> {
    if cfg.exec_len == 0 {
        return Err(RolloutError::Config("exec_len must be positive".into()));
    }
    let pd = policy.action_dim();
    if pd != 0 && pd != env.action_dim() {
        return Err(RolloutError::ActionDimMismatch { policy: pd, env: env.action_dim() });
    }
    let mut out = RolloutResult {
        success: false,
        partial: false,
        dropped: false,
        query_count: 0,
        executed: 0,
        clip_events: 0,
        aborted: None,
        mean_grip: None,
        trajectory: vec![],
    };
    let (mut grip_sum, mut grip_n) = (0.0, 0usize);
    'outer: while out.executed < cfg.max_ticks && !env.is_done() {
        let obs = env.observation();
        let chunk = policy.chunk(env, &obs)?;
        let query = out.query_count;
        out.query_count += 1;
        let bad = chunk.is_empty() || chunk.iter().any(|a| a.len() != env.action_dim() || a.iter().any(|v| !v.is_finite()));
        if bad {
            log::warn!("query {query}: malformed or non-finite chunk, aborting rollout");
            out.aborted = Some(format!("query {query} returned a malformed or non-finite chunk"));
            break;
        }
        for a in chunk.iter().take(cfg.exec_len) {
            if out.executed >= cfg.max_ticks || env.is_done() {
                break 'outer;
            }
            if is_carrying(&env.state) {
                grip_sum += a[2];
                grip_n += 1;
            }
            out.trajectory.push(TrajectoryStep { tick: env.state.tick, query, action: a.clone() });
            env.step(a);
            out.executed += 1;
        }
    }
    out.success = env.state.success;
    out.partial = env.state.partial;
    out.dropped = env.state.dropped;
    out.clip_events = env.clip_events;
    out.mean_grip = (grip_n > 0).then(|| grip_sum / grip_n as f64);
    Ok(out)
}

/// Per-condition rollout summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_grip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: EnvKind,
    pub by_class: BTreeMap<String, ConditionSummary>,
    pub aborted: usize,
    pub results: Vec<RolloutResult>,
}

/// Rolls out a checkpoint on `n` fresh environments alternating light and
/// heavy objects. Episodes are independent and run in parallel.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, kind: EnvKind, n: usize, seed: u64, cfg: &RolloutConfig, options: &EnvOptions) -> Result<EvalSummary> {
    let idx: Vec<usize> = (0..n).collect();
    let results: Vec<RolloutResult> = par_map(&idx, |_, &i| {
        let mut env = ToyEnv::new(kind, episode_seed(seed, i), ObjectClass::alternating(i), options.clone());
        run_receding_horizon(&mut env, &mut CheckpointPolicy { ckpt }, cfg)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(summarize(kind, results))
}

pub fn summarize(kind: EnvKind, results: Vec<RolloutResult>) -> EvalSummary {
    let mut by_class = BTreeMap::new();
    for class in [ObjectClass::Light, ObjectClass::Heavy] {
        let rs: Vec<&RolloutResult> = results.iter().enumerate().filter(|(i, _)| ObjectClass::alternating(*i) == class).map(|(_, r)| r).collect();
        let successes = rs.iter().filter(|r| r.success).count();
        let grips: Vec<f64> = rs.iter().filter_map(|r| r.mean_grip).collect();
        by_class.insert(
            class.as_str().to_string(),
            ConditionSummary {
                episodes: rs.len(),
                successes,
                success_rate: successes as f64 / rs.len().max(1) as f64,
                mean_grip: (!grips.is_empty()).then(|| grips.iter().sum::<f64>() / grips.len() as f64),
            },
        );
    }
    let aborted = results.iter().filter(|r| r.aborted.is_some()).count();
    EvalSummary { env: kind, by_class, aborted, results }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::observation_at;

    fn opts() -> EnvOptions {
        EnvOptions::default()
    }

    #[test]
    fn expert_solves_every_seed() {
        for kind in [EnvKind::PickPlace, EnvKind::Insertion, EnvKind::Reorient] {
            for i in 0..20 {
                let class = ObjectClass::alternating(i);
                let mut env = ToyEnv::new(kind, episode_seed(9, i), class, opts());
                let r = run_receding_horizon(&mut env, &mut ExpertChunks { horizon: 16 }, &RolloutConfig { exec_len: 8, max_ticks: kind.max_ticks() }).unwrap();
                assert!(r.success, "{kind:?} {class:?} episode {i}");
                assert!(!r.dropped);
                assert_eq!(r.clip_events, 0);
            }
        }
    }

    #[test]
    fn demos_alternate_and_grip_tracks_mass() {
        let eps = collect_demos(EnvKind::PickPlace, 6, 1, &opts()).unwrap();
        for (i, ep) in eps.iter().enumerate() {
            assert_eq!(ep.metadata("class").unwrap(), ObjectClass::alternating(i).as_str());
            assert_eq!(ep.metadata("success").unwrap(), true);
            assert_eq!(ep.metadata("sensors").unwrap()["tactile"], "eFlesh");
            ep.clone().validate().unwrap();
        }
        for pair in eps.chunks(2) {
            let g = |e: &Episode| e.metadata("mean_carry_grip").unwrap().as_f64().unwrap();
            assert!(g(&pair[1]) > g(&pair[0]));
        }
    }

    #[test]
    fn recorded_observations_match_live_ones() {
        let ep = record_expert_episode(EnvKind::PickPlace, 5, ObjectClass::Heavy, &EnvOptions { with_mic: true }, "e").unwrap();
        let mut env = ToyEnv::new(EnvKind::PickPlace, 5, ObjectClass::Heavy, EnvOptions { with_mic: true });
        for t in 0..ep.length_t {
            let live = env.observation();
            let rec = observation_at(&ep, t, t as f64 * DT).unwrap();
            assert_eq!(rec.images, live.images, "t={t}");
            assert_eq!(rec.proprio, live.proprio);
            assert_eq!(rec.tactile, live.tactile);
            assert_eq!(rec.audio_window, live.audio_window, "t={t}");
            let a = expert_action(&env);
            env.step(&a);
        }
    }

    #[test]
    fn replaying_demo_reproduces_success() {
        let ep = record_expert_episode(EnvKind::PickPlace, 11, ObjectClass::Heavy, &opts(), "e").unwrap();
        let mut env = ToyEnv::new(EnvKind::PickPlace, 11, ObjectClass::Heavy, opts());
        let r = run_receding_horizon(&mut env, &mut ReplayChunks { episode: &ep, horizon: 20 }, &RolloutConfig { exec_len: 10, max_ticks: 300 }).unwrap();
        assert!(r.success);
        assert_eq!(r.executed, ep.length_t);
    }

    struct Const(Vec<f64>, usize);
    impl ChunkPolicy for Const {
        fn chunk(&mut self, _: &ToyEnv, _: &Observation) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); self.1])
        }
        fn action_dim(&self) -> usize {
            self.0.len()
        }
    }

    #[test]
    fn query_count_is_ceiling() {
        for (t, exec, want) in [(100, 32, 4), (1, 32, 1), (32, 32, 1), (33, 32, 2), (640, 32, 20), (7, 1, 7)] {
            let mut env = ToyEnv::new(EnvKind::PickPlace, 0, ObjectClass::Light, opts());
            let r = run_receding_horizon(&mut env, &mut Const(vec![0.1, 0.15, 0.0], 64), &RolloutConfig { exec_len: exec, max_ticks: t }).unwrap();
            assert_eq!((r.executed, r.query_count), (t, want), "T={t}");
        }
    }

    #[test]
    fn non_finite_chunk_aborts() {
        let mut env = ToyEnv::new(EnvKind::PickPlace, 0, ObjectClass::Light, opts());
        let r = run_receding_horizon(&mut env, &mut Const(vec![0.1, f64::NAN, 0.0], 8), &RolloutConfig::default()).unwrap();
        assert!(r.aborted.is_some());
        assert_eq!(r.executed, 0);
        assert!(!r.success);
    }

    #[test]
    fn action_dim_mismatch_is_an_error() {
        let mut env = ToyEnv::new(EnvKind::Insertion, 0, ObjectClass::Light, opts());
        let e = run_receding_horizon(&mut env, &mut Const(vec![0.0; 3], 8), &RolloutConfig::default());
        assert!(matches!(e, Err(RolloutError::ActionDimMismatch { policy: 3, env: 2 })));
    }

    #[test]
    fn fixed_average_grip_drops_heavy_objects() {
        // Expert everywhere except a mass-blind carry grip.
        struct Blind;
        impl ChunkPolicy for Blind {
            fn chunk(&mut self, env: &ToyEnv, _: &Observation) -> Result<Vec<Vec<f64>>> {
                let mut a = expert_action(env);
                if env.state.phase == Phase::Grasped && a[2] > LIGHT_GRIP {
                    a[2] = (LIGHT_GRIP + HEAVY_GRIP) / 2.0;
                }
                Ok(vec![a])
            }
            fn action_dim(&self) -> usize {
                3
            }
        }
        for i in 0..10 {
            let class = ObjectClass::alternating(i);
            let mut env = ToyEnv::new(EnvKind::PickPlace, episode_seed(3, i), class, opts());
            let r = run_receding_horizon(&mut env, &mut Blind, &RolloutConfig { exec_len: 1, max_ticks: 200 }).unwrap();
            assert_eq!(r.success, class == ObjectClass::Light, "{class:?}");
        }
    }
}
