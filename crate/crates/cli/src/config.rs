//! Experiment configuration: one TOML file, every field defaulted, dotted
//! `--set key=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparsescape::landscape::{EigenConfig, FieldKind};
use sparsescape::pruning::GradualSchedule;
use sparsescape::psp::Aggregation;
use sparsescape::{Normalization, Split, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub retrain: RetrainConfig,
    pub plane: PlaneConfig,
    pub hessian: HessianConfig,
    pub psp: PspConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "lenet300".into(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            retrain: RetrainConfig::default(),
            plane: PlaneConfig::default(),
            hessian: HessianConfig::default(),
            psp: PspConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the IDX files; the `--data` flag and `SPARSESCAPE_DATA` take precedence.
    pub root: Option<PathBuf>,
    /// Keep only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Oneshot,
    Gradual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub method: PruneMethod,
    /// One-shot: fraction of prunable weights removed.
    pub fraction: f64,
    /// One-shot: remove exactly this many weights instead of `fraction`.
    pub count: Option<usize>,
    pub schedule: GradualSchedule,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { method: PruneMethod::Oneshot, fraction: 0.9, count: None, schedule: GradualSchedule::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Rewind,
    Reinit,
    Finetune,
    RandomStructure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub strategy: StrategyName,
    /// Seed for re-initialization or the random structure.
    pub seed: u64,
    /// Overrides `train.epochs` for retraining.
    pub epochs: Option<usize>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig { strategy: StrategyName::Rewind, seed: 1, epochs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    pub seed: u64,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub steps: usize,
    pub fields: Vec<FieldKind>,
    /// Seeded subset size for data-dependent fields (all samples when absent).
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub heatmap: bool,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig {
            seed: 0,
            alpha: [-0.5, 1.5],
            beta: [-0.5, 1.5],
            steps: 25,
            fields: vec![FieldKind::TrainLoss],
            subset: None,
            subset_seed: 0,
            heatmap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianConfig {
    pub k: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub subset: usize,
    pub subset_seed: u64,
    pub split: Split,
    /// Finite-difference step; the default scales with the parameter norm.
    pub step: Option<f64>,
    /// Restrict the operator to the unpruned coordinates of the checkpoint's mask.
    pub restrict_to_mask: bool,
}

impl Default for HessianConfig {
    fn default() -> Self {
        let e = EigenConfig::default();
        HessianConfig {
            k: e.k,
            iters: e.iters,
            tol: e.tol,
            seed: e.seed,
            subset: 2048,
            subset_seed: 0,
            split: Split::Train,
            step: None,
            restrict_to_mask: false,
        }
    }
}

impl HessianConfig {
    pub fn eigen(&self) -> EigenConfig {
        EigenConfig { k: self.k, iters: self.iters, tol: self.tol, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PspConfig {
    pub split: Split,
    pub subset: Option<usize>,
    pub subset_seed: u64,
    pub pairs_per_layer: usize,
    pub pair_seed: u64,
    /// Every within-layer pair regardless of `pairs_per_layer`.
    pub exhaustive: bool,
    pub aggregation: Aggregation,
}

impl Default for PspConfig {
    fn default() -> Self {
        PspConfig {
            split: Split::Train,
            subset: None,
            subset_seed: 0,
            pairs_per_layer: 10_000,
            pair_seed: 0,
            exhaustive: false,
            aggregation: Aggregation::Mean,
        }
    }
}

impl PspConfig {
    pub fn selection(&self) -> sparsescape::psp::PairSelection {
        if self.exhaustive {
            sparsescape::psp::PairSelection::Exhaustive
        } else {
            sparsescape::psp::PairSelection::Sampled { per_layer: self.pairs_per_layer, seed: self.pair_seed }
        }
    }
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override key `{key}`: `{p}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.prune.schedule.validate()?;
        if self.plane.steps == 0 {
            bail!("plane.steps must be at least 1");
        }
        if self.hessian.subset == 0 {
            bail!("hessian.subset must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.epochs=3").unwrap();
        apply_override(&mut t, "prune.schedule.target = 0.95").unwrap();
        apply_override(&mut t, "model=lenet5").unwrap();
        apply_override(&mut t, "plane.fields=[\"train_loss\", \"psp_l2\"]").unwrap();
        let c: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.prune.schedule.target, 0.95);
        assert_eq!(c.model, "lenet5");
        assert_eq!(c.plane.fields, vec![FieldKind::TrainLoss, FieldKind::PspL2]);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.epoch=3").unwrap();
        assert!(toml::Value::Table(t).try_into::<ExperimentConfig>().is_err());
    }
}
