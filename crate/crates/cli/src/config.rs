//! Shared `key = value` configuration. Defaults are overridden by the config
//! file, which is in turn overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use dfw_core::chain::DEFAULT_DIFFICULTY;
use dfw_core::consensus::{TrustParams, DEFAULT_ALPHA, DEFAULT_THRESHOLD, DEFAULT_TRUST_FLOOR};
use dfw_core::dbn::DbnArch;
use dfw_core::netsim::{FaultModel, NetworkConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub arch: Vec<usize>,
    pub pretrain_epochs: u32,
    pub finetune_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub difficulty: u32,
    pub threshold: f64,
    pub trust_alpha: f64,
    pub trust_floor: f64,
    pub n_nodes: usize,
    /// labelled corpus for provisioning node engines; synthetic data when absent
    pub train_manifest: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub faults: Vec<(usize, FaultModel)>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            arch: vec![4096, 3000, 3000],
            pretrain_epochs: 10,
            finetune_epochs: 10,
            batch_size: 10,
            seed: 0,
            difficulty: DEFAULT_DIFFICULTY,
            threshold: DEFAULT_THRESHOLD,
            trust_alpha: DEFAULT_ALPHA,
            trust_floor: DEFAULT_TRUST_FLOOR,
            n_nodes: 10,
            train_manifest: None,
            synthetic_per_class: 100,
            faults: Vec::new(),
        }
    }
}

/// A config problem, always naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_owned(), message: message.into() }
}

pub fn parse_arch(s: &str) -> Result<Vec<usize>, ConfigError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| field_err("arch", format!("bad layer size {p:?}"))))
        .collect()
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| field_err(field, format!("cannot parse {value:?}")))
}

impl AppConfig {
    /// Applies `key = value` lines on top of `self`. Relative paths resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| field_err(&format!("line {}", n + 1), "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "arch" => self.arch = parse_arch(value)?,
                "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value)?,
                "finetune_epochs" => self.finetune_epochs = parse_num(key, value)?,
                "batch_size" => self.batch_size = parse_num(key, value)?,
                "seed" => self.seed = parse_num(key, value)?,
                "difficulty" => self.difficulty = parse_num(key, value)?,
                "threshold" => self.threshold = parse_num(key, value)?,
                "trust_alpha" => self.trust_alpha = parse_num(key, value)?,
                "trust_floor" => self.trust_floor = parse_num(key, value)?,
                "n_nodes" => self.n_nodes = parse_num(key, value)?,
                "synthetic_per_class" => self.synthetic_per_class = parse_num(key, value)?,
                "train_manifest" => {
                    let p = PathBuf::from(value);
                    self.train_manifest = Some(match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p,
                    });
                }
                _ => {
                    let idx = key
                        .strip_prefix("fault.")
                        .ok_or_else(|| field_err(key, "unknown key"))?;
                    let idx: usize = parse_num(key, idx)?;
                    let fault = value.parse::<FaultModel>().map_err(|m| field_err(key, m))?;
                    self.faults.push((idx, fault));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| field_err("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path.parent())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.arch.len() < 2 || self.arch.contains(&0) {
            return Err(field_err("arch", "need an input size and at least one positive hidden size"));
        }
        let side = (self.arch[0] as f64).sqrt().round() as usize;
        if side * side != self.arch[0] {
            return Err(field_err("arch", format!("input size {} is not a square image", self.arch[0])));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(field_err("threshold", "must lie strictly between 0 and 1"));
        }
        if !(self.trust_alpha > 0.0 && self.trust_alpha <= 1.0) {
            return Err(field_err("trust_alpha", "must lie in (0, 1]"));
        }
        if !(self.trust_floor > 0.0 && self.trust_floor <= 1.0) {
            return Err(field_err("trust_floor", "must lie in (0, 1]"));
        }
        if self.n_nodes == 0 {
            return Err(field_err("n_nodes", "must be at least 1"));
        }
        if self.difficulty > 64 {
            return Err(field_err("difficulty", "at most 64 bits"));
        }
        if self.synthetic_per_class == 0 && self.train_manifest.is_none() {
            return Err(field_err("synthetic_per_class", "must be positive when no train_manifest is given"));
        }
        if let Some((i, _)) = self.faults.iter().find(|(i, _)| *i >= self.n_nodes) {
            return Err(field_err(&format!("fault.{i}"), format!("only {} nodes", self.n_nodes)));
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        (self.arch[0] as f64).sqrt().round() as usize
    }

    pub fn dbn_arch(&self) -> DbnArch {
        DbnArch {
            layer_sizes: self.arch.clone(),
            n_classes: 2,
            pretrain_epochs: self.pretrain_epochs,
            finetune_epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            rng_seed: self.seed,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            n_nodes: self.n_nodes,
            difficulty: self.difficulty,
            threshold: self.threshold,
            trust: TrustParams { alpha: self.trust_alpha, t_min: self.trust_floor },
            seed: self.seed,
            arch: self.dbn_arch(),
            faults: self.faults.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert_eq!(AppConfig::default().validate(), Ok(()));
    }

    #[test]
    fn file_overrides_defaults() {
        let mut cfg = AppConfig::default();
        cfg.apply_text(
            "# network\narch = 256, 64\nn_nodes = 3\nfault.2 = inverter\ntrain_manifest = data/m.tsv\nthreshold=0.6\n",
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(cfg.arch, vec![256, 64]);
        assert_eq!(cfg.n_nodes, 3);
        assert_eq!(cfg.faults, vec![(2, FaultModel::Inverter)]);
        assert_eq!(cfg.train_manifest, Some(PathBuf::from("/cfg/data/m.tsv")));
        assert_eq!(cfg.threshold, 0.6);
        assert_eq!(cfg.validate(), Ok(()));
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = AppConfig::default();
        assert_eq!(cfg.apply_text("bogus = 1", None).unwrap_err().field, "bogus");
        assert_eq!(cfg.apply_text("seed = x", None).unwrap_err().field, "seed");
        cfg.threshold = 1.5;
        assert_eq!(cfg.validate().unwrap_err().field, "threshold");
        let cfg = AppConfig { arch: vec![99, 4], ..AppConfig::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "arch");
        let cfg = AppConfig { n_nodes: 2, faults: vec![(5, FaultModel::Random)], ..AppConfig::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "fault.5");
    }
}
