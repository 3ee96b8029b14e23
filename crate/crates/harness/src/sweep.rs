//! Coupling-gain sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::error::{HarnessError, Result};
use crate::output::{csv_finish, csv_row, csv_writer};
use crate::run::run;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: f64,
    pub oracle_error: f64,
    pub sync_error: f64,
}

/// One independent run per gain, in the order given.
pub fn sweep_gain(cfg: &ScenarioConfig, k_values: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.coupling.gain().is_none() {
        return Err(HarnessError::Config(format!(
            "coupling '{}' has no gain to sweep",
            cfg.coupling.label()
        )));
    }
    if k_values.is_empty() {
        return Err(HarnessError::Config("no gains to sweep".into()));
    }
    k_values
        .par_iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.coupling = cfg.coupling.with_gain(k).expect("gain presence checked above");
            let out = run(&c)?;
            let oracle = out.summary.oracle.ok_or_else(|| {
                HarnessError::Config(format!(
                    "recipe '{}' has no oracle to compare against",
                    cfg.recipe.label()
                ))
            })?;
            Ok(SweepRow {
                k,
                oracle_error: oracle.error,
                sync_error: out.summary.sync_error,
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_row(&mut w, path, ["k", "oracle_error", "sync_error"])?;
    for r in rows {
        csv_row(
            &mut w,
            path,
            [r.k.to_string(), r.oracle_error.to_string(), r.sync_error.to_string()],
        )?;
    }
    csv_finish(w, path)
}

/// Parses `50,100,200`.
pub fn parse_gains(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|k| *k > 0.0 && k.is_finite())
                .ok_or_else(|| HarnessError::Config(format!("invalid gain '{s}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_lists() {
        assert_eq!(parse_gains("50, 100,200").unwrap(), vec![50.0, 100.0, 200.0]);
        assert!(parse_gains("50,-1").is_err());
        assert!(parse_gains("x").is_err());
    }
}
