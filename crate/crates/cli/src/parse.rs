//! Parsers for the small flag grammars: per-scale thresholds, sweep grids
//! and per-subtype slide counts.

use anyhow::{anyhow, bail, Context, Result};
use histokind_core::{Scale, Thresholds};

/// A `--threshold` argument: either one value for all scales or `s=value`
/// for a single scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdArg {
    All(f64),
    One(Scale, f64),
}

pub fn parse_threshold(s: &str) -> Result<ThresholdArg> {
    if let Some((scale, value)) = s.split_once('=') {
        let scale: u8 = scale
            .trim()
            .parse()
            .with_context(|| format!("invalid scale in threshold `{s}`"))?;
        let scale = Scale::new(scale).map_err(|e| anyhow!("{e}"))?;
        let value: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("invalid value in threshold `{s}`"))?;
        Ok(ThresholdArg::One(scale, value))
    } else {
        let value: f64 = s
            .trim()
            .parse()
            .with_context(|| format!("invalid threshold `{s}`"))?;
        Ok(ThresholdArg::All(value))
    }
}

/// Fold repeated `--threshold` arguments onto the 0.5 defaults, last writer
/// wins per scale.
pub fn apply_thresholds(args: &[ThresholdArg]) -> Result<Thresholds> {
    let mut thresholds = Thresholds::default();
    for arg in args {
        match *arg {
            ThresholdArg::All(v) => {
                thresholds = Thresholds::uniform(v).map_err(|e| anyhow!("{e}"))?;
            }
            ThresholdArg::One(scale, v) => {
                thresholds.set(scale, v).map_err(|e| anyhow!("{e}"))?;
            }
        }
    }
    Ok(thresholds)
}

/// Grid spec: `start:end:step` or a comma-separated list of values.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, step] = parts[..] else {
            bail!("grid `{s}` must be start:end:step");
        };
        let (start, end, step): (f64, f64, f64) = (
            start.parse().with_context(|| format!("invalid grid start in `{s}`"))?,
            end.parse().with_context(|| format!("invalid grid end in `{s}`"))?,
            step.parse().with_context(|| format!("invalid grid step in `{s}`"))?,
        );
        if step <= 0.0 || !step.is_finite() {
            bail!("grid step must be positive");
        }
        let mut values = Vec::new();
        let mut i = 0u32;
        loop {
            let v = start + step * i as f64;
            if v > end + 1e-12 {
                break;
            }
            values.push(v);
            i += 1;
        }
        values
    } else {
        s.split(',')
            .map(|part| {
                part.trim()
                    .parse::<f64>()
                    .with_context(|| format!("invalid grid value `{part}`"))
            })
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        bail!("grid `{s}` is empty");
    }
    for &v in &values {
        if !(v > 0.0 && v < 1.0) {
            bail!("grid value {v} lies outside (0, 1)");
        }
    }
    Ok(values)
}

pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Per-subtype counts: `NAME=COUNT,NAME=COUNT,...`
pub fn parse_counts(s: &str) -> Result<Vec<(String, usize)>> {
    s.split(',')
        .map(|pair| {
            let (name, count) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("count `{pair}` must be NAME=N"))?;
            let count: usize = count
                .trim()
                .parse()
                .with_context(|| format!("invalid count in `{pair}`"))?;
            Ok((name.trim().to_owned(), count))
        })
        .collect()
}
