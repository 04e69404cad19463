use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajspec::changepoint::ShiftMethod;
use trajspec::synth::SpikePlan;
use trajspec::timeseries::SegmentMethod;

/// A problem with the configuration or flags (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub store_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub loss_csv: Option<PathBuf>,
    pub windows: Vec<usize>,
    pub sketch: SketchSettings,
    pub groups: Vec<GroupRule>,
    pub stats: StatSettings,
    pub synth: Option<SynthSettings>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store_dir: None,
            out_dir: PathBuf::from("runs"),
            run_id: "run".into(),
            loss_csv: None,
            windows: vec![10],
            sketch: SketchSettings::default(),
            groups: Vec::new(),
            stats: StatSettings::default(),
            synth: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchSettings {
    pub enabled: bool,
    /// Defaults to 10 × the largest window.
    pub d: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRule {
    pub name: String,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatSettings {
    /// Lag-scan half width; defaults to min(10, ⌊T/4⌋).
    pub max_lag: Option<usize>,
    pub sliding_window: usize,
    pub granger_lags: usize,
    pub resid_lags: usize,
    pub segmentation: Vec<SegmentMethod>,
    pub shift: Vec<ShiftMethod>,
    /// Known shift step, for scoring detections.
    pub true_shift_step: Option<u64>,
    pub null_trials: usize,
    pub null_seed: u64,
    /// Ambient dimension cap for the Monte Carlo null.
    pub null_max_p: usize,
}

impl Default for StatSettings {
    fn default() -> Self {
        Self {
            max_lag: None,
            sliding_window: 7,
            granger_lags: 1,
            resid_lags: 1,
            segmentation: vec![
                SegmentMethod::peak(),
                SegmentMethod::derivative(),
                SegmentMethod::threshold(),
            ],
            shift: vec![
                ShiftMethod::MaxDerivative,
                ShiftMethod::cusum(),
                ShiftMethod::ttest(),
            ],
            true_shift_step: None,
            null_trials: 200,
            null_seed: 0,
            null_max_p: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default)]
    pub first_step: u64,
    pub plan: SpikePlan,
    #[serde(default)]
    pub loss: Option<LossSettings>,
}

fn default_stride() -> u64 {
    200
}

/// Coupled loss derived from the generated trajectory's gap series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub lag: i64,
    #[serde(default = "default_sign")]
    pub sign: f64,
    /// In units of the standard deviation of the detrended gap series.
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Window of the gap series; defaults to the plan's window.
    #[serde(default)]
    pub window: Option<usize>,
}

fn default_sign() -> f64 {
    1.0
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.windows.is_empty() {
            return Err(config_error("window list is empty"));
        }
        if let Some(w) = self.windows.iter().find(|&&w| !(3..=64).contains(&w)) {
            return Err(config_error(format!("window {w} outside 3..=64")));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(config_error(format!("invalid run id `{}`", self.run_id)));
        }
        if self.sketch.d == Some(0) {
            return Err(config_error("sketch dimension must be positive"));
        }
        if self.stats.granger_lags == 0 {
            return Err(config_error("granger_lags must be at least 1"));
        }
        if self.stats.null_trials < 100 {
            return Err(config_error("null_trials must be at least 100"));
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_error("duplicate group names"));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(10)
    }

    pub fn sketch_d(&self) -> usize {
        self.sketch.d.unwrap_or(10 * self.max_window())
    }

    /// Configured store, or the one `synth` writes under the run directory.
    pub fn store_path(&self) -> Option<PathBuf> {
        self.store_dir
            .clone()
            .or_else(|| self.synth.as_ref().map(|_| self.run_dir().join("store")))
    }

    /// Configured loss series, or the one `synth` derives for the run.
    pub fn loss_path(&self) -> Option<PathBuf> {
        self.loss_csv.clone().or_else(|| {
            self.synth
                .as_ref()
                .and_then(|s| s.loss.as_ref())
                .map(|_| self.run_dir().join("loss.csv"))
        })
    }

    pub fn store_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self
            .store_path()
            .ok_or_else(|| config_error("no store directory configured (store_dir or --store)"))?;
        if !dir.is_dir() {
            return Err(config_error(format!("store directory {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    pub fn loss_csv(&self) -> anyhow::Result<PathBuf> {
        let path = self
            .loss_path()
            .ok_or_else(|| config_error("no loss series configured (loss_csv or --loss)"))?;
        if !path.is_file() {
            return Err(config_error(format!("loss file {} does not exist", path.display())));
        }
        Ok(path)
    }
}
