use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use taco_core::dataset::write_episode;
use taco_core::repeatability::{analyze_repeatability, emit_curves, series_from_episode, series_to_episode, simulate_protocol, ProtocolSpec};

use super::dataset::load_dataset;
use crate::config::{SensorModelFile, SCHEMA_VERSION};
use crate::error::{CliError, Result, Tag};
use crate::run_dir::{file_input, location, manifest_inputs, Provenance, RunDir};

fn protocol(name: &str, episodes: Option<usize>) -> Result<ProtocolSpec> {
    let mut spec = ProtocolSpec::by_name(name).ok_or_else(|| CliError::new("config", format!("unknown protocol `{name}` (expected default or acoustic)")))?;
    if let Some(n) = episodes {
        spec.n_episodes = n;
    }
    spec.validate().tag("config")?;
    Ok(spec)
}

#[derive(Serialize)]
struct SimulateSnapshot<'a> {
    schema_version: u32,
    model: &'a Path,
    protocol: &'a str,
    episodes: usize,
    seed: u64,
}

pub fn run_simulate(model: &Path, protocol_name: &str, episodes: Option<usize>, seed: u64, out: Option<&Path>) -> Result<PathBuf> {
    let file = SensorModelFile::load(model)?;
    let spec = protocol(protocol_name, episodes)?;
    let snapshot = toml::to_string(&SimulateSnapshot {
        schema_version: SCHEMA_VERSION,
        model,
        protocol: protocol_name,
        episodes: spec.n_episodes,
        seed,
    })
    .tag("config")?;
    let prov = Provenance::compute(&snapshot, vec![file_input("model", model)?]);
    let run = RunDir::create(&location(out, "repeat-simulate", &prov), &snapshot, prov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = simulate_protocol(&file.model, &spec, &mut rng).tag("repeat")?;
    let ep_root = run.root.join("episodes");
    for (i, s) in series.iter().enumerate() {
        let mut ep = series_to_episode(s, &file.model.shape, &spec, &format!("ep{i:04}")).tag("repeat")?;
        ep.manifest.metadata.insert("sensor".into(), serde_json::json!(file.sensor));
        write_episode(&ep, &ep_root.join(&ep.id)).tag("io")?;
    }
    println!("simulated {} {} episodes of {:.1} s into {}", series.len(), file.sensor, spec.duration(), ep_root.display());
    let root = run.finish()?;
    println!("run {}", root.display());
    Ok(root)
}

#[derive(Serialize)]
struct AnalyzeSnapshot<'a> {
    schema_version: u32,
    input: &'a Path,
    protocol: &'a str,
    sensor: &'a str,
}

pub fn run_analyze(input: &Path, protocol_name: &str, sensor: Option<&str>, out: Option<&Path>) -> Result<PathBuf> {
    let episodes = load_dataset(input)?;
    let spec = protocol(protocol_name, Some(episodes.len()))?;
    let name = sensor
        .map(str::to_string)
        .or_else(|| episodes[0].metadata("sensor").and_then(|v| v.as_str()).map(str::to_string))
        .or_else(|| input.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "sensor".into());
    let series = episodes.iter().map(series_from_episode).collect::<std::result::Result<Vec<_>, _>>().tag("repeat")?;
    let snapshot = toml::to_string(&AnalyzeSnapshot {
        schema_version: SCHEMA_VERSION,
        input,
        protocol: protocol_name,
        sensor: &name,
    })
    .tag("config")?;
    let prov = Provenance::compute(&snapshot, manifest_inputs("input", input)?);
    let run = RunDir::create(&location(out, "repeat-analyze", &prov), &snapshot, prov)?;
    let report = analyze_repeatability(&name, &series, &spec).tag("repeat")?;
    emit_curves(std::slice::from_ref(&report), &run.reports()).tag("repeat")?;
    run.write_json("reports/report.json", &report)?;
    let (rt, std) = report.table_row();
    println!("{:<12} {:>16} {:>8} {:>10}", "sensor", "response_time_s", "std", "excluded");
    println!("{:<12} {:>16} {:>8} {:>10}", report.sensor, rt, std, report.n_excluded);
    let root = run.finish()?;
    println!("run {}", root.display());
    Ok(root)
}
