//! Running a loaded configuration: worker pool, staging directory, results
//! and manifest files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::LoadedConfig;
use crate::error::{LabError, Result};
use crate::experiments::{execute, validate, Outputs};

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub experiment: String,
    pub seed: u64,
    pub replications: usize,
    pub workers: usize,
    pub versions: Versions,
    pub wall_time_seconds: f64,
    pub files: Vec<String>,
    pub config: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub rwre_core: String,
    pub rwre_lab: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub manifest: Manifest,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The `results.json` document: experiment, config hash, seed and payload.
pub fn results_document(loaded: &LoadedConfig, outputs: &Outputs) -> Result<String> {
    let doc = json!({
        "experiment": loaded.config.experiment.name(),
        "config_hash": loaded.hash,
        "seed": loaded.config.seeds.master,
        "results": outputs.results,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Validates, runs inside a pool of `workers` threads, and writes the
/// outputs. Files are staged in a temporary directory next to the target
/// and moved in only after the experiment succeeds, so a failed run leaves
/// nothing behind.
pub fn run(loaded: &LoadedConfig) -> Result<RunSummary> {
    let cfg = &loaded.config;
    let plan = validate(cfg)?;
    let out_dir = cfg.output_dir();
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(io(&parent))?;
    let staging = tempfile::Builder::new()
        .prefix(".rwre-lab-partial-")
        .tempdir_in(&parent)
        .map_err(io(&parent))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| LabError::config("workers", e.to_string()))?;
    let start = Instant::now();
    let outputs = pool.install(|| execute(cfg, &plan))?;
    let wall = start.elapsed().as_secs_f64();

    let mut files = vec!["results.json".to_string()];
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = staging.path().join(name);
        std::fs::write(&p, bytes).map_err(io(&p))
    };
    write("results.json", results_document(loaded, &outputs)?.as_bytes())?;
    for (name, bytes) in &outputs.csvs {
        write(name, bytes)?;
        files.push(name.clone());
    }
    files.push("manifest.json".into());
    let manifest = Manifest {
        config_hash: loaded.hash.clone(),
        experiment: cfg.experiment.name().into(),
        seed: cfg.seeds.master,
        replications: cfg.seeds.replications,
        workers: cfg.workers,
        versions: Versions {
            rwre_core: rwre_core::VERSION.into(),
            rwre_lab: env!("CARGO_PKG_VERSION").into(),
        },
        wall_time_seconds: wall,
        files: files.clone(),
        config: serde_json::to_value(&loaded.table)?,
    };
    write("manifest.json", (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;

    std::fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    for name in &files {
        let from = staging.path().join(name);
        let to = out_dir.join(name);
        std::fs::rename(&from, &to).map_err(io(&to))?;
    }
    Ok(RunSummary {
        output_dir: out_dir,
        files,
        manifest,
    })
}
