use std::fs;
use std::path::Path;

use serde::Deserialize;
use streambp::engines::EngineKind;
use streambp::model::ModelConfig;
use streambp::objectives::ObjectiveKind;
use streambp::plan::PartitionPlan;
use streambp::scenario::ObjectiveConfig;

use crate::Usage;

const DEFAULT_BUDGET: u64 = 2 << 30;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub seq_len: Option<usize>,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub kv_share: usize,
}

fn one() -> usize {
    1
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            mlp_hidden: self.mlp_hidden,
            vocab: self.vocab,
            layers: self.layers,
            kv_share: self.kv_share,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub seq_len: Option<Vec<usize>>,
    pub d_layer: Option<Vec<usize>>,
    /// Defaults to following `d_layer`.
    pub d_head: Option<Vec<usize>>,
    /// Rows per chunk; each entry becomes `D = ceil(T / size)`.
    pub partition_size: Option<Vec<usize>>,
    pub engines: Option<Vec<EngineKind>>,
    pub objectives: Option<Vec<ObjectiveKind>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default = "default_budget")]
    pub activation_bytes: u64,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            activation_bytes: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: Option<ModelSection>,
    pub plan: Option<PartitionPlan>,
    pub objective: Option<ObjectiveConfig>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub budget: BudgetSection,
    pub seed: Option<u64>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, Usage> {
        let Some(path) = path else {
            return Ok(Config::empty());
        };
        let text = fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn empty() -> Config {
        Config {
            model: None,
            plan: None,
            objective: None,
            sweep: SweepSection::default(),
            budget: BudgetSection::default(),
            seed: None,
        }
    }

    fn validate(&self) -> Result<(), Usage> {
        if let Some(m) = &self.model {
            m.config().validate().map_err(usage)?;
            if m.seq_len == Some(0) {
                return Err(Usage("invalid model.seq_len: must be at least 1".into()));
            }
        }
        if let Some(p) = &self.plan {
            p.validate().map_err(usage)?;
        }
        if let Some(o) = &self.objective {
            o.validate().map_err(usage)?;
        }
        let s = &self.sweep;
        for (field, list) in [
            ("sweep.seq_len", &s.seq_len),
            ("sweep.d_layer", &s.d_layer),
            ("sweep.d_head", &s.d_head),
            ("sweep.partition_size", &s.partition_size),
        ] {
            if list.as_ref().is_some_and(|l| l.contains(&0)) {
                return Err(Usage(format!("invalid {field}: entries must be at least 1")));
            }
        }
        if self.budget.activation_bytes == 0 {
            return Err(Usage("invalid budget.activation_bytes: must be positive".into()));
        }
        Ok(())
    }

    pub fn model_or(&self, default: ModelConfig) -> ModelConfig {
        self.model.as_ref().map(ModelSection::config).unwrap_or(default)
    }

    pub fn seq_lens(&self, default: &[usize]) -> Vec<usize> {
        match (&self.sweep.seq_len, self.model.as_ref().and_then(|m| m.seq_len)) {
            (Some(list), _) => list.clone(),
            (None, Some(t)) => vec![t],
            (None, None) => default.to_vec(),
        }
    }

    pub fn objective_for(&self, kind: ObjectiveKind) -> ObjectiveConfig {
        match self.objective {
            Some(o) => ObjectiveConfig { kind, ..o },
            None => ObjectiveConfig::new(kind),
        }
    }

    /// Chunk counts `(D_layer, D_head)` to sweep at sequence length `t`.
    pub fn partitions(&self, t: usize, default_d: &[usize]) -> Vec<(usize, usize)> {
        let s = &self.sweep;
        let mut layer: Vec<usize> = match (&s.d_layer, &s.partition_size, &self.plan) {
            (None, None, Some(p)) => vec![p.d_layer],
            (None, None, None) => default_d.to_vec(),
            (d, _, _) => d.clone().unwrap_or_default(),
        };
        if let Some(sizes) = &s.partition_size {
            layer.extend(sizes.iter().map(|&p| t.div_ceil(p)));
        }
        let fixed_head = match (&s.d_head, &self.plan) {
            (Some(h), _) => Some(h.clone()),
            (None, Some(p)) if s.d_layer.is_none() && s.partition_size.is_none() => Some(vec![p.d_head]),
            _ => None,
        };
        match fixed_head {
            Some(heads) => layer
                .iter()
                .flat_map(|&d| heads.iter().map(move |&h| (d, h)))
                .collect(),
            None => layer.iter().map(|&d| (d, d)).collect(),
        }
    }
}

pub fn usage(e: streambp::Error) -> Usage {
    Usage(e.to_string())
}
