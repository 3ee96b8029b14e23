//! Run artifacts on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::error::{HarnessError, Result};
use crate::run::{run, RunOutput};

/// Overrides every output directory when set.
pub const OUT_DIR_ENV: &str = "BLENDNET_OUT_DIR";

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const FUNNEL_FILE: &str = "funnel.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn resolve_out_dir(configured: Option<&Path>, default_name: &str) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured
            .map(Path::to_path_buf)
            .unwrap_or_else(|| Path::new("runs").join(default_name)),
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| HarnessError::Csv {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn csv_row<I, T>(w: &mut csv::Writer<fs::File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| HarnessError::Csv {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn csv_finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| HarnessError::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Long-form `t,agent,component,value` rows; an observed plant is agent 0.
pub fn write_trajectory(out: &RunOutput, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_row(&mut w, path, ["t", "agent", "component", "value"])?;
    for seg in &out.segments {
        for (t, x) in seg.traj.times.iter().zip(&seg.traj.states) {
            let t = t.to_string();
            let blocks = seg
                .plant
                .iter()
                .map(|r| (0, r))
                .chain(seg.ids.iter().copied().zip(&seg.slices));
            for (id, range) in blocks {
                let id = id.to_string();
                for (c, v) in x[range.clone()].iter().enumerate() {
                    csv_row(&mut w, path, [t.as_str(), id.as_str(), &c.to_string(), &v.to_string()])?;
                }
            }
        }
    }
    csv_finish(w, path)
}

pub fn write_funnel(out: &RunOutput, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_row(&mut w, path, ["t", "location", "nu", "psi"])?;
    for s in out.segments.iter().flat_map(|s| &s.funnel) {
        csv_row(
            &mut w,
            path,
            [s.t.to_string(), s.location.clone(), s.nu.to_string(), s.psi.to_string()],
        )?;
    }
    csv_finish(w, path)
}

/// Writes the summary and, as configured, the trajectory and funnel files.
pub fn write_artifacts(cfg: &ScenarioConfig, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    if cfg.output.trajectory {
        let p = dir.join(TRAJECTORY_FILE);
        write_trajectory(out, &p)?;
        written.push(p);
    }
    if out.segments.iter().any(|s| !s.funnel.is_empty()) {
        let p = dir.join(FUNNEL_FILE);
        write_funnel(out, &p)?;
        written.push(p);
    }
    let p = dir.join(SUMMARY_FILE);
    write_json(&p, &out.summary)?;
    written.push(p);
    Ok(written)
}

/// Loads, runs and writes a scenario file. Returns the run and its
/// output directory.
pub fn run_scenario(path: &Path) -> Result<(RunOutput, PathBuf)> {
    let cfg = ScenarioConfig::load(path)?;
    let out = run(&cfg)?;
    let dir = resolve_out_dir(cfg.output.dir.as_deref(), &cfg.name());
    write_artifacts(&cfg, &out, &dir)?;
    if cfg.output.plots {
        crate::plot::emit_plots(&dir)?;
    }
    Ok((out, dir))
}
