//! One run per value of a single configuration key.

use std::path::{Path, PathBuf};

use crate::config::SpecBuilder;
use crate::error::{HarnessError, Result};
use crate::experiment::{run_experiment, RunOptions, RunOutcome};

/// Directory name of a sweep point.
pub fn point_dir(root: &Path, param: &str, value: &str) -> PathBuf {
    root.join(format!("{param}={value}"))
}

/// Builds every point first so that a bad value fails before any training.
pub fn sweep(base: &SpecBuilder, param: &str, values: &[String], root: &Path) -> Result<Vec<RunOutcome>> {
    if values.is_empty() {
        return Err(HarnessError::Config("a sweep needs at least one value".into()));
    }
    let specs = values
        .iter()
        .map(|v| {
            let mut b = base.clone();
            b.set(&format!("{param}={v}"))?;
            b.build()
        })
        .collect::<Result<Vec<_>>>()?;
    specs
        .iter()
        .zip(values)
        .map(|(spec, v)| run_experiment(spec, &point_dir(root, param, v), RunOptions::default()))
        .collect()
}
