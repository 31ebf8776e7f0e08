use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ihb_core::inference::AnalysisConfig;
use ihb_core::observer::StoreConfig;
use ihb_core::sender::SenderConfig;
use ihb_core::wire::DEFAULT_UDP_PORT;
use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    pub lens: Option<Ipv4Net>,
    pub capacity: Option<usize>,
    pub ring: Option<usize>,
    pub window_s: Option<u64>,
    pub max_windows: Option<usize>,
    pub ttl_jump: Option<u16>,
    pub udp_port: Option<u16>,
}

impl ObserverSection {
    pub fn udp_port(&self) -> u16 {
        self.udp_port.unwrap_or(DEFAULT_UDP_PORT)
    }

    /// `lens` overrides the configured lens.
    pub fn store_config(&self, lens: Option<Ipv4Net>) -> Result<StoreConfig> {
        let Some(lens) = lens.or(self.lens) else {
            bail!("no lens: set observer.lens or pass --lens");
        };
        let mut c = StoreConfig::new(lens.trunc());
        if let Some(v) = self.capacity {
            c.capacity = v;
        }
        if let Some(v) = self.ring {
            c.ring = v;
        }
        if let Some(v) = self.window_s {
            c.window_s = v;
        }
        if let Some(v) = self.max_windows {
            c.max_windows = v;
        }
        if let Some(v) = self.ttl_jump {
            c.ttl_jump = v;
        }
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("capacity", self.capacity), ("ring", self.ring), ("max_windows", self.max_windows)] {
            if v == Some(0) {
                bail!("observer.{name} must be positive");
            }
        }
        if self.window_s == Some(0) {
            bail!("observer.window_s must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub state_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub sender: Option<SenderConfig>,
    #[serde(default)]
    pub observer: ObserverSection,
    #[serde(default)]
    pub inference: AnalysisConfig,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Config::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.sender {
            s.validate()?;
        }
        self.observer.validate()?;
        self.inference.validate().map_err(|e| anyhow::anyhow!("inference: {e}"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
        [sender]
        host_id = 42
        hostid_rotation_period_s = 86400

        [[sender.interfaces]]
        name = "eth0"
        src_addr = "192.0.2.10"
        transport = { kind = "udp", port = 48000 }

        [[sender.interfaces.streams]]
        rate_uhz = 1000000
        schedule = { pool = { kind = "full-v4" }, order = { kind = "permutation", key = 7 } }

        [observer]
        lens = "44.0.0.0/8"
        window_s = 600

        [inference]
        outage_threshold = 0.05
        tau_s = 60

        [inference.spoof]
        margin = 3

        [paths]
        state_dir = "state"
    "#;

    #[test]
    fn full_example_parses() {
        let c = Config::parse(FULL).unwrap();
        assert_eq!(c.sender.unwrap().interfaces[0].streams[0].rate_uhz, 1_000_000);
        assert_eq!(c.observer.store_config(None).unwrap().lens.prefix_len(), 8);
    }

    #[test]
    fn unknown_keys_and_bad_thresholds_rejected() {
        assert!(Config::parse(&FULL.replace("tau_s", "tau")).is_err());
        assert!(Config::parse("[observer]\nlense = \"1.0.0.0/8\"").is_err());
        assert!(Config::parse("[inference]\noutage_threshold = 2.0").is_err());
        assert!(Config::parse("[observer]\nwindow_s = 0").is_err());
    }
}
