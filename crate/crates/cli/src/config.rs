//! Config resolution: defaults < `--config` file < command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dphelmet::{Hyperparams, LossKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Reads a config file. A run manifest is accepted too; its `config` entry
/// is used.
pub fn read_config(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(dphelmet::Error::from)?;
    let value = match value {
        Value::Object(mut m) if m.get("config").is_some_and(Value::is_object) => m.remove("config").unwrap(),
        other => other,
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(dphelmet::Error::Parameter(format!("config {} is not a JSON object", path.display())).into()),
    }
}

/// Overlays the flags that were given on top of the config file and
/// deserializes the result; missing keys take the type's defaults.
pub fn resolve<T: DeserializeOwned>(flags: &impl Serialize, config: Option<&PathBuf>) -> Result<T> {
    let mut merged = match config {
        Some(path) => read_config(path)?,
        None => Map::new(),
    };
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| dphelmet::Error::Parameter(format!("invalid configuration: {e}")).into())
}

/// `DPHELMET_SEED` wins over both the flag and the config file.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var("DPHELMET_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| dphelmet::Error::Parameter(format!("DPHELMET_SEED={v:?} is not an integer")).into()),
        Err(_) => Ok(None),
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: dphelmet::Error| e.to_string())
}

/// Training flags shared by every command that trains.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct HyperArgs {
    /// Huber smoothness h [default: 0.1]
    #[arg(long)]
    pub huber_h: Option<f64>,
    /// Input clipping bound c [default: 1]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Regularization strength [default: 10]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Model clipping radius R [default: 0.07]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Total SGD steps M [default: 1500]
    #[arg(long, conflicts_with = "iters_epochs")]
    pub iters: Option<usize>,
    /// Epochs over the local data, converted to ceil(N/batch) steps each
    #[arg(long)]
    pub iters_epochs: Option<usize>,
    /// Mini-batch size [default: 20]
    #[arg(long)]
    pub batch: Option<usize>,
    /// huber_hinge or logistic [default: huber_hinge]
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub huber_h: f64,
    pub clip: f64,
    pub lambda: f64,
    pub radius: f64,
    pub iters: Option<usize>,
    pub iters_epochs: Option<usize>,
    pub batch: usize,
    pub loss: LossKind,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let d = Hyperparams::default();
        HyperConfig {
            huber_h: d.h,
            clip: d.c,
            lambda: d.lambda,
            radius: d.radius,
            iters: None,
            iters_epochs: None,
            batch: d.batch_size,
            loss: d.loss,
        }
    }
}

impl HyperConfig {
    /// Hyperparameters for local datasets of `local_size` points.
    pub fn hyperparams(&self, local_size: usize) -> Result<Hyperparams> {
        let iterations = match (self.iters, self.iters_epochs) {
            (Some(_), Some(_)) => {
                return Err(dphelmet::Error::Parameter("give either iters or iters_epochs, not both".into()).into())
            }
            (Some(m), None) => m,
            (None, Some(e)) => Hyperparams::steps_for_epochs(e, local_size, self.batch),
            (None, None) => Hyperparams::default().iterations,
        };
        let xi = Hyperparams {
            h: self.huber_h,
            c: self.clip,
            lambda: self.lambda,
            radius: self.radius,
            iterations,
            batch_size: self.batch,
            loss: self.loss,
        };
        xi.validate()?;
        Ok(xi)
    }
}

/// Privacy flags.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct PrivacyArgs {
    /// Noise multiplier sigma; 0 disables noise [default: 8]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Target delta [default: 1e-5]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Assumed fraction t of honest users [default: 0.5]
    #[arg(long)]
    pub honest_frac: Option<f64>,
    /// Group size for the group-privacy row [default: 1]
    #[arg(long)]
    pub upsilon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacyConfig {
    pub sigma: f64,
    pub delta: f64,
    pub honest_frac: f64,
    pub upsilon: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let d = dphelmet::PrivacySpec::default();
        PrivacyConfig {
            sigma: d.sigma,
            delta: d.delta,
            honest_frac: d.honest_fraction,
            upsilon: d.group_size,
        }
    }
}

impl PrivacyConfig {
    pub fn spec(&self) -> dphelmet::PrivacySpec {
        dphelmet::PrivacySpec {
            sigma: self.sigma,
            delta: self.delta,
            honest_fraction: self.honest_frac,
            group_size: self.upsilon,
        }
    }
}
