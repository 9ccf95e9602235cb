//! Experiment configuration: TOML schema, validation diagnostics, and the
//! named lambda presets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dcmi_core::data::SyntheticSpec;
use dcmi_core::train::{TrainConfig, Variant};

/// Named (lambda1, lambda2) pairs for the asc/dsc/rfd benchmark corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Asc,
    Dsc,
    Rfd,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "asc" => Some(Preset::Asc),
            "dsc" => Some(Preset::Dsc),
            "rfd" => Some(Preset::Rfd),
            _ => None,
        }
    }

    pub fn lambdas(self) -> (f64, f64) {
        match self {
            Preset::Asc => (50.0, 6.0),
            Preset::Dsc => (30.0, 15.0),
            Preset::Rfd => (4.0, 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Jsonl,
}

/// `positive_rate` accepts a scalar broadcast over domains or one rate per
/// domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateSpec {
    Uniform(f64),
    PerDomain(Vec<f64>),
}

impl RateSpec {
    fn materialize(&self, domains: usize) -> Vec<f64> {
        match self {
            RateSpec::Uniform(r) => vec![*r; domains],
            RateSpec::PerDomain(rates) => rates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSection {
    pub domain_sizes: Vec<usize>,
    pub positive_rate: RateSpec,
    pub sentiment_tokens: usize,
    pub domain_tokens: usize,
    pub noise_tokens: usize,
    pub sentiment_per_sample: usize,
    pub domain_per_sample: usize,
    pub noise_per_sample: usize,
    pub similarity_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub inverted_domains: BTreeSet<usize>,
    /// Defaults to a seed derived from `base_seed`.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SyntheticSection {
    pub fn to_spec(&self, base_seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            domain_sizes: self.domain_sizes.clone(),
            positive_rate: self.positive_rate.materialize(self.domain_sizes.len()),
            sentiment_tokens: self.sentiment_tokens,
            domain_tokens: self.domain_tokens,
            noise_tokens: self.noise_tokens,
            sentiment_per_sample: self.sentiment_per_sample,
            domain_per_sample: self.domain_per_sample,
            noise_per_sample: self.noise_per_sample,
            similarity_groups: self.similarity_groups.clone(),
            inverted_domains: self.inverted_domains.clone(),
            seed: self
                .seed
                .unwrap_or_else(|| dcmi_core::derive_seed(base_seed, "data")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub jsonl_path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_factor() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    /// Down-sampling factor applied to the train and validation splits.
    #[serde(default = "default_factor")]
    pub downsample_factor: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            fractions: default_fractions(),
            downsample_factor: default_factor(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub variants: Vec<String>,
    #[serde(flatten)]
    pub base: TrainConfig,
}

/// One sweep axis: explicit values or a logarithmic grid over `[0, max]`
/// (zero plus `points - 1` log-spaced values anchored at 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxis {
    Explicit(Vec<f64>),
    Log { max: f64, points: usize },
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridAxis::Explicit(values) => values.clone(),
            GridAxis::Log { max, points } => log_grid(*max, *points),
        }
    }
}

/// `[0, 1, ..., max]` with the positive entries geometrically spaced.
pub fn log_grid(max: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && max > 0.0, "validated before use");
    let mut values = vec![0.0];
    let steps = points - 1;
    for i in 0..steps {
        let t = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
        values.push(max.powf(t));
    }
    values
}

fn default_sweep_seeds() -> usize {
    1
}
fn default_max_cells() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub lambda1: GridAxis,
    pub lambda2: GridAxis,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: usize,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

fn default_seeds() -> usize {
    5
}
fn default_workers() -> usize {
    1
}

/// The full experiment description parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub export_representations: bool,
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn variants(&self) -> Result<Vec<Variant>, String> {
        self.train
            .variants
            .iter()
            .map(|name| {
                Variant::parse(name).ok_or_else(|| {
                    format!(
                        "train.variants: unknown variant {name:?} (expected one of {})",
                        Variant::ALL
                            .iter()
                            .map(|v| v.name())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )
                })
            })
            .collect()
    }

    /// Full schema and semantic validation; every diagnostic names the
    /// offending field. Shared by `validate` and `run`.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.train.variants.is_empty() {
            out.push("train.variants: at least one variant required".into());
        }
        if let Err(msg) = self.variants() {
            out.push(msg);
        }
        if self.seeds < 1 {
            out.push("seeds: must be >= 1".into());
        }
        if self.workers < 1 {
            out.push("workers: must be >= 1".into());
        }

        match self.data.source {
            DataSource::Synthetic => match &self.data.synthetic {
                None => out.push("data.synthetic: section required when source = \"synthetic\"".into()),
                Some(section) => {
                    if let Err(e) = section.to_spec(self.base_seed).validate() {
                        out.push(format!("data.synthetic: {e}"));
                    }
                }
            },
            DataSource::Jsonl => match &self.data.jsonl_path {
                None => out.push("data.jsonl_path: required when source = \"jsonl\"".into()),
                Some(path) if !path.exists() => {
                    out.push(format!("data.jsonl_path: {} does not exist", path.display()))
                }
                Some(_) => {}
            },
        }

        let f = &self.split.fractions;
        if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            out.push(format!(
                "split.fractions: must be positive and sum to 1, got {f:?}"
            ));
        }
        if self.split.downsample_factor < 1 {
            out.push("split.downsample_factor: must be >= 1".into());
        }

        if let Err(e) = self.train.base.validate() {
            out.push(format!("train: {e}"));
        }

        if let Some(sweep) = &self.sweep {
            for (name, axis) in [("lambda1", &sweep.lambda1), ("lambda2", &sweep.lambda2)] {
                match axis {
                    GridAxis::Explicit(values) => {
                        if values.is_empty() {
                            out.push(format!("sweep.{name}: grid must be non-empty"));
                        }
                        if values.iter().any(|&v| v < 0.0) {
                            out.push(format!("sweep.{name}: grid values must be >= 0"));
                        }
                    }
                    GridAxis::Log { max, points } => {
                        if *max <= 0.0 {
                            out.push(format!("sweep.{name}.max: must be > 0"));
                        }
                        if *points < 2 {
                            out.push(format!("sweep.{name}.points: must be >= 2"));
                        }
                    }
                }
            }
            if sweep.seeds < 1 {
                out.push("sweep.seeds: must be >= 1".into());
            }
        }
        out
    }

    pub fn data_seed(&self) -> u64 {
        match &self.data.synthetic {
            Some(s) => s.seed.unwrap_or_else(|| dcmi_core::derive_seed(self.base_seed, "data")),
            None => dcmi_core::derive_seed(self.base_seed, "data"),
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split
            .seed
            .unwrap_or_else(|| dcmi_core::derive_seed(self.base_seed, "split"))
    }
}
