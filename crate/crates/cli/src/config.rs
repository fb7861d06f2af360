//! Resolved pipeline settings: defaults, then an optional JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use evpose_core::edge::{Border, EdgeParams};
use evpose_core::WindowMode;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Count,
    TimeUs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub mode: WindowKind,
    pub value: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    #[default]
    Replicate,
    Zero,
}

impl From<BorderMode> for Border {
    fn from(b: BorderMode) -> Self {
        match b {
            BorderMode::Replicate => Border::Replicate,
            BorderMode::Zero => Border::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sensor_width: u16,
    pub sensor_height: u16,
    pub window: WindowConfig,
    pub k: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub border: BorderMode,
    pub sample_n: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sensor_width: evpose_core::DEFAULT_SENSOR_WIDTH,
            sensor_height: evpose_core::DEFAULT_SENSOR_HEIGHT,
            window: WindowConfig {
                mode: WindowKind::Count,
                value: evpose_core::DEFAULT_WINDOW_EVENTS as u64,
            },
            k: evpose_core::DEFAULT_SLICES,
            alpha: 0.5,
            epsilon: 1e-8,
            border: BorderMode::Replicate,
            sample_n: evpose_core::DEFAULT_SAMPLE_POINTS,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        let fail = |m: &str| Err(UsageError(m.to_string()));
        if self.sensor_width == 0 || self.sensor_height == 0 {
            return fail("sensor dimensions must be positive");
        }
        if self.window.value == 0 {
            return fail("window value must be positive");
        }
        if self.k == 0 {
            return fail("k must be >= 1");
        }
        if self.sample_n == 0 {
            return fail("sample_n must be >= 1");
        }
        self.edge_params().map(|_| ())
    }

    pub fn window_mode(&self) -> WindowMode {
        match self.window.mode {
            WindowKind::Count => WindowMode::Count(self.window.value as usize),
            WindowKind::TimeUs => WindowMode::Time(self.window.value),
        }
    }

    pub fn edge_params(&self) -> Result<EdgeParams, UsageError> {
        EdgeParams::new(self.alpha, self.epsilon, self.border.into()).map_err(|e| UsageError(e.to_string()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Flags shared by every pipeline subcommand. Anything given here wins
/// over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub height: Option<u16>,
    /// Fixed-count windows of this many events.
    #[arg(long, conflicts_with = "time_us")]
    pub count: Option<u64>,
    /// Fixed-duration windows of this many microseconds.
    #[arg(long)]
    pub time_us: Option<u64>,
    /// Temporal slices per window.
    #[arg(long)]
    pub k: Option<usize>,
    /// Edge enhancement strength in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub border: Option<BorderMode>,
    /// Points sampled per cloud before the network.
    #[arg(long)]
    pub sample_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl PipelineArgs {
    pub fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! over {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        over!(width => sensor_width, height => sensor_height, k => k, alpha => alpha,
              epsilon => epsilon, border => border, sample_n => sample_n, seed => seed,
              precision => precision);
        if let Some(v) = self.count {
            c.window = WindowConfig {
                mode: WindowKind::Count,
                value: v,
            };
        }
        if let Some(v) = self.time_us {
            c.window = WindowConfig {
                mode: WindowKind::TimeUs,
                value: v,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_partial_files() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        let partial: PipelineConfig =
            serde_json::from_str(r#"{"k": 8, "window": {"mode": "time_us", "value": 50000}}"#).unwrap();
        assert_eq!(partial.k, 8);
        assert_eq!(partial.window_mode(), WindowMode::Time(50_000));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 1}"#).is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"k": 8, "alpha": 0.25}"#).unwrap();
        let args = PipelineArgs {
            config: Some(path),
            k: Some(2),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.k, c.alpha), (2, 0.25));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for args in [
            PipelineArgs {
                k: Some(0),
                ..Default::default()
            },
            PipelineArgs {
                alpha: Some(1.5),
                ..Default::default()
            },
            PipelineArgs {
                sample_n: Some(0),
                ..Default::default()
            },
        ] {
            let e = args.resolve().unwrap_err();
            assert!(e.downcast_ref::<UsageError>().is_some());
        }
    }
}
