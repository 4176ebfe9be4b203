use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use taco_core::policy::{ObsConfig, SensorMode};
use taco_core::trainer::{evaluate_offline, train, Checkpoint, EvalReport, MetricRecord};

use super::dataset::load_dataset;
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{CliError, Result, Tag};
use crate::run_dir::{file_input, location, manifest_inputs, Provenance, RunDir};

pub struct TrainArgs {
    pub config: PathBuf,
    pub mode: Option<SensorMode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    provenance: &'a str,
    mode: SensorMode,
    seed: u64,
    episodes: usize,
    initial_probe_recon_l1: f64,
    last: Option<&'a MetricRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout: Option<EvalReport>,
}

pub fn run_train(args: TrainArgs) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let mode = args
        .mode
        .or(cfg.mode)
        .ok_or_else(|| CliError::new("config", "no sensor mode: pass --mode or set `mode` in the config"))?;
    cfg.mode = Some(mode);
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let episodes = load_dataset(&cfg.data.train)?;
    let heldout = cfg.data.heldout.as_deref().map(load_dataset).transpose()?;
    let data_dim = episodes[0].action_dim();
    if cfg.policy.action_dim == 0 {
        cfg.policy.action_dim = data_dim;
    }
    cfg.policy.validate().tag("config")?;
    let mut obs = ObsConfig::infer(&episodes[0], cfg.observations.backbone.config()).tag("dataset")?;
    if let Some(hidden) = &cfg.observations.tactile_hidden {
        for t in &mut obs.tactile {
            t.encoder.hidden_sizes = hidden.clone();
        }
    }

    let snapshot = cfg.to_toml()?;
    let mut inputs = manifest_inputs("train", &cfg.data.train)?;
    if let Some(h) = &cfg.data.heldout {
        inputs.extend(manifest_inputs("heldout", h)?);
    }
    let prov = Provenance::compute(&snapshot, inputs);
    let run = RunDir::create(&location(args.out.as_deref(), "train", &prov), &snapshot, prov)?;
    log::info!("training {} on {} episodes into {}", mode.as_str(), episodes.len(), run.root.display());

    let ckpt_dir = run.checkpoints();
    let outcome = train(&cfg.train, &episodes, cfg.policy.clone(), obs, mode, Some(&ckpt_dir)).tag("train")?;
    for log in ["metrics.jsonl", "timing.jsonl"] {
        fs::rename(ckpt_dir.join(log), run.logs().join(log)).tag("io")?;
    }
    let heldout = heldout.map(|h| evaluate_offline(&outcome.checkpoint, &h, 1)).transpose().tag("train")?;
    let summary = TrainSummary {
        provenance: &run.provenance.hash,
        mode,
        seed: cfg.train.seed,
        episodes: episodes.len(),
        initial_probe_recon_l1: outcome.initial_probe_recon_l1,
        last: outcome.metrics.last(),
        heldout,
    };
    run.write_json("reports/train_summary.json", &summary)?;
    if let Some(m) = outcome.metrics.last() {
        println!("step {} total {:.6} recon_l1 {:.6} kl {:.6} probe_recon_l1 {:.6}", m.step, m.total, m.recon_l1, m.kl, m.probe_recon_l1);
    }
    let root = run.finish()?;
    println!("run {}", root.display());
    Ok(root)
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    schema_version: u32,
    checkpoint: &'a Path,
    data: &'a Path,
    stride: usize,
}

pub fn run_eval(checkpoint: &Path, data: &Path, stride: usize, out: Option<&Path>) -> Result<PathBuf> {
    if stride == 0 {
        return Err(CliError::new("config", "--stride must be positive"));
    }
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| CliError::new("input", format!("{}: {e}", checkpoint.display())))?;
    let episodes = load_dataset(data)?;
    let snapshot = toml::to_string(&EvalSnapshot {
        schema_version: SCHEMA_VERSION,
        checkpoint,
        data,
        stride,
    })
    .tag("config")?;
    let mut inputs = vec![file_input("checkpoint", checkpoint)?];
    inputs.extend(manifest_inputs("data", data)?);
    let prov = Provenance::compute(&snapshot, inputs);
    let run = RunDir::create(&location(out, "eval", &prov), &snapshot, prov)?;
    let report = evaluate_offline(&ckpt, &episodes, stride).tag("train")?;
    run.write_json("reports/eval.json", &report)?;
    println!("samples {} mean_l1 {:.6}", report.n_samples, report.mean_l1);
    let root = run.finish()?;
    println!("run {}", root.display());
    Ok(root)
}
