//! Experiment configuration, read from TOML.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centroids::GeneratorOptions;
use crate::data::{DatasetSpec, Role};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::model::{LossConfig, NetworkConfig};
use crate::scoring::BiasMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidConfig {
    /// Registered generator name: `simplex` or `iterative`.
    pub generator: String,
    /// Class count; taken from the ID dataset when absent.
    pub classes: Option<usize>,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        let o = GeneratorOptions::default();
        CentroidConfig {
            generator: "simplex".into(),
            classes: None,
            steps: o.steps,
            step_size: o.step_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub bias_mode: BiasMode,
    /// Score with the intermediate checkpoint instead of the final model.
    pub use_checkpoint_snapshot: bool,
    pub histogram_bins: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            bias_mode: BiasMode::Exclude,
            use_checkpoint_snapshot: true,
            histogram_bins: crate::metrics::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    /// Name of the ID source in `sources`.
    pub id: String,
    /// The single OOD source the fusion classifier is fitted against.
    pub reference_ood: String,
    pub test_ood: Vec<String>,
    /// Train and test fractions of the ID data.
    #[serde(default = "default_split")]
    pub split: [f64; 2],
    pub sources: BTreeMap<String, DatasetSpec>,
}

fn default_split() -> [f64; 2] {
    [0.8, 0.2]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub centroids: CentroidConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub fusion: FusionParams,
    pub datasets: DatasetsConfig,
}

/// Mixes a component name into the global seed so each stage draws from its
/// own stream and can be re-run alone.
pub fn derive_seed(global: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Parses TOML text; relative dataset paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for spec in cfg.datasets.sources.values_mut() {
            spec.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        let d = &self.datasets;
        let known = |name: &str| -> Result<&DatasetSpec> {
            d.sources
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("dataset `{name}` is not defined under [datasets.sources]")))
        };
        if known(&d.id)?.role() != Role::Id {
            return Err(Error::InvalidConfig(format!("ID dataset `{}` has role ood", d.id)));
        }
        known(&d.reference_ood)?;
        if d.test_ood.is_empty() {
            return Err(Error::InvalidConfig("test_ood lists no datasets".into()));
        }
        for name in &d.test_ood {
            known(name)?;
        }
        let [tr, te] = d.split;
        if !(tr > 0.0 && te > 0.0 && (tr + te - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidConfig(format!("split {:?} must be positive and sum to 1", d.split)));
        }
        if self.scoring.histogram_bins == 0 {
            return Err(Error::InvalidConfig("histogram_bins must be >= 1".into()));
        }
        crate::centroids::generator_registry()
            .get(&self.centroids.generator)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(c) = self.centroids.classes {
            if c > self.network.pedcc_dim + 1 {
                return Err(Error::InvalidConfig(format!(
                    "{c} classes do not fit in pedcc_dim {}",
                    self.network.pedcc_dim
                )));
            }
        }
        Ok(())
    }

    /// Network settings with the training seed drawn from the global seed.
    pub fn network_for_training(&self) -> NetworkConfig {
        NetworkConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.network.clone()
        }
    }

    pub fn generator_options(&self) -> GeneratorOptions {
        GeneratorOptions {
            seed: derive_seed(self.seed, "centroids"),
            steps: self.centroids.steps,
            step_size: self.centroids.step_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[network]
architecture = "dense(16)"
pedcc_dim = 3

[datasets]
id = "blobs"
reference_ood = "cluster"
test_ood = ["ring"]

[datasets.sources.blobs]
kind = "gaussian_mixture"

[datasets.sources.cluster]
kind = "shifted_cluster"

[datasets.sources.ring]
kind = "uniform_ring"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(cfg.loss.scale, 5.5);
        assert_eq!(cfg.loss.margin, 0.35);
        assert_eq!(cfg.fusion.c, 5.0);
        assert_eq!(cfg.datasets.split, [0.8, 0.2]);
        assert!(cfg.scoring.use_checkpoint_snapshot);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_dataset_and_keys() {
        let text = MINIMAL.replace("test_ood = [\"ring\"]", "test_ood = [\"nope\"]");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text, Path::new(".")),
            Err(Error::InvalidConfig(_))
        ));
        let text = MINIMAL.replace("seed = 3", "seed = 3\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("pedcc_dim = 3", "pedcc_dim = 3\nlearning_rate = -1.0");
        assert!(ExperimentConfig::from_toml_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(1, "train"), derive_seed(1, "split"));
        assert_ne!(derive_seed(1, "train"), derive_seed(2, "train"));
        assert_eq!(derive_seed(5, "fusion"), derive_seed(5, "fusion"));
    }
}
