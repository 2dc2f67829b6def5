//! Experiment configuration: a JSON document merged over defaults, then
//! patched by dotted command-line overrides.

use std::path::{Path, PathBuf};

use gatcons::adcore::Activation;
use gatcons::graphio::{gen_sbm, karate_fixture, load_dataset, Dataset, SbmParams};
use gatcons::init::{InitScheme, InitSpec};
use gatcons::model::{HeadAggregation, NetworkConfig, Variant};
use gatcons::train::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Architecture block; input and output widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkBlock {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_agg: HeadAggregation,
    pub activation: Activation,
    pub attn_slope: f64,
    pub weight_sharing: bool,
    pub variant: Variant,
    pub final_activation: bool,
    pub self_loops: bool,
}

impl Default for NetworkBlock {
    fn default() -> Self {
        NetworkBlock {
            depth: 2,
            hidden: 64,
            heads: 1,
            head_agg: HeadAggregation::Concat,
            activation: Activation::Relu,
            attn_slope: 0.2,
            weight_sharing: true,
            variant: Variant::Gatv2,
            final_activation: false,
            self_loops: true,
        }
    }
}

impl NetworkBlock {
    pub fn resolve(&self, in_dim: usize, classes: usize) -> NetworkConfig {
        NetworkConfig {
            heads: self.heads,
            head_agg: self.head_agg,
            activation: self.activation,
            attn_slope: self.attn_slope,
            weight_sharing: self.weight_sharing,
            variant: self.variant,
            final_activation: self.final_activation,
            self_loops: self.self_loops,
            ..NetworkConfig::uniform(in_dim, self.hidden, self.depth, classes)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `karate`, `sbm` (generated from the `sbm` block), or a dataset
    /// directory.
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbm: Option<SbmParams>,
    pub network: NetworkBlock,
    pub init: InitSpec,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub runs: usize,
    /// Run `r` uses seed `seed + r` for both initialization and training.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "karate".into(),
            sbm: None,
            network: NetworkBlock::default(),
            init: InitSpec::new(InitScheme::Xavier, 0),
            train: TrainConfig::new(Optimizer::Gd, 0.1),
            output_dir: PathBuf::from("out"),
            runs: 1,
            seed: 0,
        }
    }
}

/// A `--path.to.leaf=value` argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    /// The value is read as JSON when it parses, otherwise as a string.
    pub fn parse(key: &str, raw: &str) -> Self {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Override { path: key.split('.').map(str::to_string).collect(), value }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply(root: &mut Value, ov: &Override) -> Result<(), CliError> {
    let mut cur = root;
    for key in &ov.path[..ov.path.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {}: {key} is not an object", ov.path.join("."))))?;
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    let leaf = ov.path.last().expect("non-empty path");
    cur.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {}: parent is not an object", ov.path.join("."))))?
        .insert(leaf.clone(), ov.value.clone());
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(CliError::Config(format!("config {} must be a JSON object", p.display())));
            }
            merge(&mut root, file);
        }
        for ov in overrides {
            apply(&mut root, ov)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Config("runs must be >= 1".into()));
        }
        if self.network.depth == 0 {
            return Err(CliError::Config("network.depth must be >= 1".into()));
        }
        if self.dataset == "sbm" && self.sbm.is_none() {
            return Err(CliError::Config("dataset \"sbm\" needs an sbm block".into()));
        }
        self.init.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Loads or generates the dataset. A missing directory is a config
    /// error; a malformed one is a runtime error.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        match self.dataset.as_str() {
            "karate" => Ok(karate_fixture()),
            "sbm" => gen_sbm(self.sbm.as_ref().expect("validated")).map_err(|e| CliError::Config(e.to_string())),
            path => {
                let dir = Path::new(path);
                if !dir.is_dir() {
                    return Err(CliError::Config(format!("dataset directory {path} does not exist")));
                }
                load_dataset(dir).map_err(|e| CliError::Runtime(e.to_string()))
            }
        }
    }

    pub fn network(&self, data: &Dataset) -> Result<NetworkConfig, CliError> {
        let cfg = self.network.resolve(data.feature_dim(), data.num_classes);
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Init and train blocks for run `r`.
    pub fn run_specs(&self, r: usize) -> (InitSpec, TrainConfig) {
        let seed = self.seed + r as u64;
        let init = InitSpec { seed, ..self.init };
        let train = TrainConfig { seed, ..self.train.clone() };
        (init, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_then_string() {
        assert_eq!(Override::parse("train.lr", "0.05").value, Value::from(0.05));
        assert_eq!(Override::parse("dataset", "data/cora").value, Value::from("data/cora"));
        assert_eq!(Override::parse("network.weight_sharing", "false").value, Value::from(false));
        assert_eq!(Override::parse("a.b.c", "1").path, vec!["a", "b", "c"]);
    }

    #[test]
    fn defaults_then_overrides() {
        let ovs = [
            Override::parse("train.lr", "0.05"),
            Override::parse("init.scheme", "bal_llortho"),
            Override::parse("runs", "3"),
        ];
        let c = ExperimentConfig::load(None, &ovs).unwrap();
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.train.max_epochs, 5000);
        assert_eq!(c.init.scheme, InitScheme::BalLlortho);
        assert_eq!(c.runs, 3);
        assert_eq!(c.dataset, "karate");
    }

    #[test]
    fn unknown_leaf_is_a_config_error() {
        let err = ExperimentConfig::load(None, &[Override::parse("train.lrr", "1")]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = ExperimentConfig::load(None, &[Override::parse("runs", "0")]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn sbm_block_via_overrides() {
        let ovs = [
            Override::parse("dataset", "sbm"),
            Override::parse("sbm.blocks", "[4,4]"),
            Override::parse("sbm.p_in", "1"),
            Override::parse("sbm.p_out", "0"),
            Override::parse("sbm.feat_dim", "3"),
        ];
        let c = ExperimentConfig::load(None, &ovs).unwrap();
        assert_eq!(c.dataset().unwrap().num_nodes(), 8);
        assert!(ExperimentConfig::load(None, &ovs[..1]).is_err());
    }

    #[test]
    fn merge_keeps_untouched_defaults() {
        let mut base = serde_json::json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, serde_json::json!({"a": {"y": 5}}));
        assert_eq!(base, serde_json::json!({"a": {"x": 1, "y": 5}, "b": 3}));
    }

    #[test]
    fn run_seeds_are_consecutive() {
        let c = ExperimentConfig { seed: 10, ..Default::default() };
        assert_eq!(c.run_specs(2).0.seed, 12);
        assert_eq!(c.run_specs(2).1.seed, 12);
    }
}
