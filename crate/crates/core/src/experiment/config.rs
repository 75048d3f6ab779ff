use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Ratio, SyntheticConfig};
use crate::error::{Error, Result};
use crate::nn::ExtractorConfig;
use crate::seed::sha256_hex;
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgingMode {
    Auto,
    Human,
}

impl JudgingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            JudgingMode::Auto => "auto",
            JudgingMode::Human => "human",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Results store directory.
    pub out: PathBuf,
    pub judging: JudgingMode,
    pub ratios: Vec<Ratio>,
    /// Run the ratio pipelines on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seed: 0,
            out: PathBuf::from("results"),
            judging: JudgingMode::Auto,
            ratios: Ratio::standard_sweep(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Root directory of an imported dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Manifest path of an imported dataset, relative to `root` unless
    /// absolute.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Attributes whose training composition follows the ratio sweep; with
    /// more than one, every listed attribute gets the same ratio jointly.
    /// Empty means the first attribute of the dataset.
    pub audited: Vec<String>,
    /// Training samples per class.
    pub class_train_size: usize,
    /// Test samples per subgroup, as a fraction of the smallest subgroup.
    pub test_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DatasetSource::Synthetic,
            root: None,
            manifest: None,
            audited: Vec::new(),
            class_train_size: 300,
            test_fraction: 0.25,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcamSection {
    /// Convolutional layer to explain; defaults to the last extractor layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    pub tau: f64,
    pub mass_quantile: f64,
    pub budget_per_subgroup: usize,
}

impl Default for GradcamSection {
    fn default() -> Self {
        GradcamSection {
            layer: None,
            tau: 0.5,
            mass_quantile: 0.2,
            budget_per_subgroup: 50,
        }
    }
}

/// Example directories of the two concepts of an imported attribute. Each
/// directory holds `positives/`, `negatives/` and `concept.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDirs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcavSection {
    pub enabled: bool,
    /// Layer of the frozen extractor where CAVs live; defaults to its last
    /// layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    pub runs: usize,
    pub random_runs: usize,
    pub alpha: f64,
    /// Generated examples per concept side (synthetic datasets).
    pub examples_per_concept: usize,
    /// Concept example directories per attribute (imported datasets).
    pub concepts: BTreeMap<String, ConceptDirs>,
}

impl Default for TcavSection {
    fn default() -> Self {
        TcavSection {
            enabled: true,
            layer: None,
            runs: 10,
            random_runs: 10,
            alpha: 0.05,
            examples_per_concept: 100,
            concepts: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationSection {
    pub enabled: bool,
    pub bind: String,
    pub max_verdicts_per_item: usize,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection {
            enabled: false,
            bind: "127.0.0.1:8080".into(),
            max_verdicts_per_item: 1,
        }
    }
}

/// Everything one experiment needs, read from a single TOML document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub extractor: ExtractorConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainConfig,
    pub gradcam: GradcamSection,
    pub tcav: TcavSection,
    pub annotation: AnnotationSection,
    /// Optional unfairness tolerance per attribute; exceeding one flags the
    /// report without failing it.
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experiment.ratios.is_empty() {
            return bad("experiment.ratios must not be empty".into());
        }
        let mut labels: Vec<&str> = self.experiment.ratios.iter().map(Ratio::label).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("experiment.ratios lists a ratio twice".into());
        }
        if self.experiment.judging == JudgingMode::Human && !self.annotation.enabled {
            return bad("judging = \"human\" requires annotation.enabled = true".into());
        }
        match self.dataset.source {
            DatasetSource::Synthetic => {
                self.dataset.synthetic.validate()?;
                if self.dataset.synthetic.seed != 0 {
                    return bad(
                        "dataset.synthetic.seed is derived from experiment.seed; leave it unset".into(),
                    );
                }
            }
            DatasetSource::Import => {
                if self.dataset.root.is_none() || self.dataset.manifest.is_none() {
                    return bad("dataset.source = \"import\" needs dataset.root and dataset.manifest".into());
                }
            }
        }
        if self.dataset.class_train_size == 0 {
            return bad("dataset.class_train_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) || self.dataset.test_fraction == 0.0 {
            return bad("dataset.test_fraction must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.gradcam.tau) {
            return bad("gradcam.tau must lie in [0, 1]".into());
        }
        if !(self.gradcam.mass_quantile > 0.0 && self.gradcam.mass_quantile <= 1.0) {
            return bad("gradcam.mass_quantile must lie in (0, 1]".into());
        }
        if self.tcav.enabled {
            if self.tcav.runs < 2 || self.tcav.random_runs < 2 {
                return bad("tcav.runs and tcav.random_runs must be at least 2".into());
            }
            if !(self.tcav.alpha > 0.0 && self.tcav.alpha < 1.0) {
                return bad("tcav.alpha must lie in (0, 1)".into());
            }
            if self.dataset.source == DatasetSource::Synthetic && self.tcav.examples_per_concept < 4 {
                return bad("tcav.examples_per_concept must be at least 4".into());
            }
        }
        if self.annotation.max_verdicts_per_item == 0 {
            return bad("annotation.max_verdicts_per_item must be at least 1".into());
        }
        for (name, tol) in &self.tolerances {
            if !(tol.is_finite() && *tol >= 0.0) {
                return bad(format!("tolerance for {name} must be a non-negative number"));
            }
        }
        Ok(())
    }

    /// Flattened `section.key` → value view, used for hashing and diffs.
    /// The output directory is excluded so a store can be moved.
    pub fn hashed_view(&self) -> Result<BTreeMap<String, serde_json::Value>> {
        let mut value = serde_json::to_value(self)?;
        if let Some(exp) = value.get_mut("experiment").and_then(|v| v.as_object_mut()) {
            exp.remove("out");
        }
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        Ok(flat)
    }

    pub fn hash(&self) -> Result<String> {
        let flat = self.hashed_view()?;
        Ok(sha256_hex(&serde_json::to_vec(&flat)?))
    }

    /// Keys whose values differ between two configs.
    pub fn changed_keys(&self, other: &ExperimentConfig) -> Result<Vec<String>> {
        let a = self.hashed_view()?;
        let b = other.hashed_view()?;
        let mut keys: Vec<String> = a
            .keys()
            .chain(b.keys())
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect();
        keys.sort();
        keys.dedup();
        Ok(keys)
    }
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match value {
        serde_json::Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        v => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}
