//! Run configuration file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lefo_core::bound_analysis::BoundConfig;
use lefo_core::info_metrics::{HistogramKlConfig, KsgConfig};
use lefo_core::lefo_game::{GameConfig, UtilityConfig};
use lefo_core::predictor::{NetworkConfig, SgdConfig};
use lefo_core::sim_harness::ChannelConfig;
use lefo_core::trace_io::DeadbandConfig;
use serde::{Deserialize, Serialize};

/// Every section is optional and falls back to its defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub game: GameConfig,
    pub sgd: SgdConfig,
    pub ksg: KsgConfig,
    pub kl: HistogramKlConfig,
    /// Filter applied to the trace before splitting; none when absent.
    pub deadband: Option<DeadbandConfig>,
    pub channel: ChannelConfig,
    pub network: NetworkConfig,
    pub bound: BoundConfig,
    /// Leading fraction of the trace used for training; the rest is holdout.
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            game: GameConfig::default(),
            sgd: SgdConfig::default(),
            ksg: KsgConfig::default(),
            kl: HistogramKlConfig::default(),
            deadband: None,
            channel: ChannelConfig::default(),
            network: NetworkConfig::default(),
            bound: BoundConfig::default(),
            train_fraction: 0.7,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn utility(&self) -> UtilityConfig {
        UtilityConfig {
            ksg: self.ksg,
            kl: self.kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.sgd.validate()?;
        self.kl.validate()?;
        self.channel.validate()?;
        self.bound.power.validate()?;
        if self.ksg.k == 0 {
            bail!("ksg.k must be at least 1");
        }
        if let Some(d) = &self.deadband {
            if !d.is_valid() {
                bail!("deadband fractions must be in [0, 1]");
            }
        }
        let n = &self.network;
        if n.window == 0 || n.leader_depth == 0 || n.follower_depth == 0 || n.width == 0 {
            bail!("network window, depths and width must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            );
        }
        Ok(())
    }
}
