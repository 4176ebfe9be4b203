use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use taco_core::dataset::{write_episode, SensorKind};
use taco_core::par::par_map;
use taco_core::rollout::{
    collect_demos, episode_seed, evaluate_checkpoint, run_receding_horizon, summarize, EnvKind, EnvOptions, ExpertChunks, ObjectClass,
    RolloutConfig, RolloutResult, ToyEnv,
};
use taco_core::trainer::Checkpoint;

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, Result, Tag};
use crate::run_dir::{file_input, location, Provenance, RunDir};

pub struct RolloutArgs {
    pub checkpoint: Option<PathBuf>,
    pub env: EnvKind,
    pub episodes: usize,
    pub seed: u64,
    pub exec_len: Option<usize>,
    pub max_ticks: Option<usize>,
    pub mic: bool,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RolloutSnapshot<'a> {
    schema_version: u32,
    /// Checkpoint path, or "expert".
    policy: String,
    env: &'a str,
    episodes: usize,
    seed: u64,
    exec_len: usize,
    max_ticks: usize,
    mic: bool,
}

#[derive(Serialize)]
struct ResultRow<'a> {
    episode: usize,
    class: &'a str,
    success: bool,
    partial: bool,
    query_count: usize,
    dropped: bool,
    executed: usize,
    clip_events: usize,
    aborted: bool,
    mean_grip: Option<f64>,
}

#[derive(Serialize)]
struct AggregateReport<'a> {
    provenance: &'a str,
    episodes: usize,
    successes: usize,
    success_rate: f64,
    aborted: usize,
    by_class: &'a std::collections::BTreeMap<String, taco_core::rollout::ConditionSummary>,
}

fn uses_mic(ckpt: &Checkpoint) -> bool {
    ckpt.policy.obs.tactile.iter().any(|t| t.sensor == SensorKind::ContactMic)
}

pub fn run_rollout(args: RolloutArgs) -> Result<PathBuf> {
    if args.episodes == 0 {
        return Err(CliError::new("config", "--episodes must be positive"));
    }
    let ckpt = args
        .checkpoint
        .as_deref()
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::new("input", format!("{}: {e}", p.display()))))
        .transpose()?;
    let exec_len = args.exec_len.or(ckpt.as_ref().map(|c| c.policy.cfg.exec_len)).unwrap_or(RolloutConfig::default().exec_len);
    let cfg = RolloutConfig {
        exec_len,
        max_ticks: args.max_ticks.unwrap_or(args.env.max_ticks()),
    };
    if cfg.exec_len == 0 {
        return Err(CliError::new("config", "--exec-len must be positive"));
    }
    let options = EnvOptions {
        with_mic: args.mic || ckpt.as_ref().is_some_and(uses_mic),
    };
    let snapshot = toml::to_string(&RolloutSnapshot {
        schema_version: SCHEMA_VERSION,
        policy: args.checkpoint.as_deref().map_or("expert".into(), |p| p.display().to_string()),
        env: args.env.as_str(),
        episodes: args.episodes,
        seed: args.seed,
        exec_len: cfg.exec_len,
        max_ticks: cfg.max_ticks,
        mic: options.with_mic,
    })
    .tag("config")?;
    let inputs = match &args.checkpoint {
        Some(p) => vec![file_input("checkpoint", p)?],
        None => Vec::new(),
    };
    let prov = Provenance::compute(&snapshot, inputs);
    let run = RunDir::create(&location(args.out.as_deref(), "rollout", &prov), &snapshot, prov)?;

    let summary = match &ckpt {
        Some(ckpt) => evaluate_checkpoint(ckpt, args.env, args.episodes, args.seed, &cfg, &options).tag("rollout")?,
        None => {
            let idx: Vec<usize> = (0..args.episodes).collect();
            let results = par_map(&idx, |_, &i| {
                let mut env = ToyEnv::new(args.env, episode_seed(args.seed, i), ObjectClass::alternating(i), options.clone());
                let horizon = cfg.exec_len.max(1);
                run_receding_horizon(&mut env, &mut ExpertChunks { horizon }, &cfg)
            })
            .into_iter()
            .collect::<std::result::Result<Vec<RolloutResult>, _>>()
            .tag("rollout")?;
            summarize(args.env, results)
        }
    };

    let traj_dir = run.logs().join("trajectories");
    fs::create_dir_all(&traj_dir).tag("io")?;
    let mut csv = csv::Writer::from_path(run.reports().join("results.csv")).tag("io")?;
    println!("{:>7} {:<6} {:>7} {:>7} {:>11}", "episode", "class", "success", "partial", "query_count");
    for (i, r) in summary.results.iter().enumerate() {
        let class = ObjectClass::alternating(i).as_str();
        println!("{:>7} {:<6} {:>7} {:>7} {:>11}", i, class, r.success as u8, r.partial as u8, r.query_count);
        csv.serialize(ResultRow {
            episode: i,
            class,
            success: r.success,
            partial: r.partial,
            query_count: r.query_count,
            dropped: r.dropped,
            executed: r.executed,
            clip_events: r.clip_events,
            aborted: r.aborted.is_some(),
            mean_grip: r.mean_grip,
        })
        .tag("io")?;
        let mut f = std::io::BufWriter::new(fs::File::create(traj_dir.join(format!("episode_{i:04}.jsonl"))).tag("io")?);
        for step in &r.trajectory {
            writeln!(f, "{}", serde_json::to_string(step).tag("io")?).tag("io")?;
        }
        f.flush().tag("io")?;
        if let Some(why) = &r.aborted {
            log::warn!("episode {i} aborted: {why}");
        }
    }
    csv.flush().tag("io")?;
    let successes = summary.results.iter().filter(|r| r.success).count();
    let n = summary.results.len();
    let aggregate = AggregateReport {
        provenance: &run.provenance.hash,
        episodes: n,
        successes,
        success_rate: successes as f64 / n as f64,
        aborted: summary.aborted,
        by_class: &summary.by_class,
    };
    run.write_json("reports/summary.json", &aggregate)?;
    for (class, c) in &summary.by_class {
        println!("{class}: {}/{} success", c.successes, c.episodes);
    }
    println!("success_rate {:.3} ({successes}/{n})", aggregate.success_rate);
    let root = run.finish()?;
    println!("run {}", root.display());
    Ok(root)
}

pub fn run_collect(env: EnvKind, episodes: usize, seed: u64, mic: bool, out: &Path) -> Result<()> {
    if episodes == 0 {
        return Err(CliError::new("config", "--episodes must be positive"));
    }
    if out.exists() && fs::read_dir(out).tag("io")?.next().is_some() {
        return Err(CliError::new("run_dir", format!("{} already exists and is not empty", out.display())));
    }
    let demos = collect_demos(env, episodes, seed, &EnvOptions { with_mic: mic }).tag("rollout")?;
    for ep in &demos {
        write_episode(ep, &out.join(&ep.id)).tag("io")?;
    }
    let ok = demos.iter().filter(|e| e.metadata("success").and_then(|v| v.as_bool()) == Some(true)).count();
    println!("wrote {} {} episodes to {} ({ok} successful)", demos.len(), env.as_str(), out.display());
    Ok(())
}
