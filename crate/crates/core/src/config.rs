//! TOML run configuration. Every section is optional and falls back to the
//! library defaults, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::{AblationAxis, ExperimentSpec};
use crate::error::{Error, Result};
use crate::synth::{ChatClientConfig, Describer, DomainSpec, SplitFractions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Built-in domains to generate, by name.
    pub presets: Vec<String>,
    /// Additional fully specified domains. A custom domain with a preset's
    /// name replaces that preset.
    pub domains: Vec<DomainSpec>,
    pub n_per_domain: usize,
    pub describer: Describer,
    pub splits: SplitFractions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            presets: DomainSpec::presets().into_iter().map(|s| s.name).collect(),
            domains: Vec::new(),
            n_per_domain: 1000,
            describer: Describer::Template,
            splits: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Domains to generate, presets first, in configuration order.
    pub fn specs(&self) -> Result<Vec<DomainSpec>> {
        let mut out = Vec::new();
        for name in &self.presets {
            match self.domains.iter().find(|d| &d.name == name) {
                Some(custom) => out.push(custom.clone()),
                None => out.push(DomainSpec::preset(name)?),
            }
        }
        for d in &self.domains {
            if !out.iter().any(|s| s.name == d.name) {
                out.push(d.clone());
            }
        }
        let mut names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        for s in &out {
            s.validate()?;
        }
        Ok(out)
    }

    /// Spec for a domain tag found in a corpus: custom domains first, then
    /// presets.
    pub fn spec_for(&self, domain: &str) -> Result<DomainSpec> {
        match self.domains.iter().find(|d| d.name == domain) {
            Some(d) => Ok(d.clone()),
            None => DomainSpec::preset(domain),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of each split kept per source when several corpora are mixed.
    pub multidomain_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { multidomain_fraction: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Axes to sweep; empty means all four.
    pub axes: Vec<AblationAxis>,
}

impl AblationConfig {
    pub fn axes(&self) -> Vec<AblationAxis> {
        if self.axes.is_empty() {
            AblationAxis::ALL.to_vec()
        } else {
            self.axes.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSpec,
    pub synth: SynthConfig,
    pub client: ChatClientConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.synth.splits.validate()?;
        if !(self.data.multidomain_fraction > 0.0 && self.data.multidomain_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "multidomain_fraction {} not in (0, 1]",
                self.data.multidomain_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::PoolingMode;
    use crate::train::LossKind;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_override_only_named_fields() {
        let cfg = Config::from_toml_str(
            r#"
            [experiment]
            seeds = [3, 4]
            [experiment.embed]
            pooling = "MAX"
            [experiment.loss]
            kind = "MSE_COSINE"
            [experiment.training]
            epochs = 2
            [synth]
            presets = ["us_earthquake"]
            n_per_domain = 20
            [ablation]
            axes = ["pooling"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.seeds, vec![3, 4]);
        assert_eq!(cfg.experiment.embed.pooling, PoolingMode::Max);
        assert_eq!(cfg.experiment.loss.kind, LossKind::MseCosine);
        assert_eq!(cfg.experiment.training.epochs, 2);
        assert_eq!(cfg.experiment.backbone, ExperimentSpec::default().backbone);
        assert_eq!(cfg.synth.specs().unwrap(), vec![DomainSpec::us_earthquake()]);
        assert_eq!(cfg.ablation.axes(), vec![AblationAxis::Pooling]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::from_toml_str("[synth]\nn_per_domian = 3").is_err());
        assert!(Config::from_toml_str("[experiment.embed]\npooling = \"MEDIAN\"").is_err());
        assert!(Config::from_toml_str("[experiment]\nseeds = []").is_err());
        assert!(Config::from_toml_str("[data]\nmultidomain_fraction = 0.0").is_err());
    }

    #[test]
    fn custom_domain_replaces_preset_of_same_name() {
        let mut quake = DomainSpec::us_earthquake();
        quake.mean_length = 5.0;
        quake.min_length = 2;
        let synth = SynthConfig {
            presets: vec!["us_earthquake".into()],
            domains: vec![quake.clone(), DomainSpec::default()],
            ..Default::default()
        };
        assert_eq!(synth.specs().unwrap(), vec![quake.clone(), DomainSpec::default()]);
        assert_eq!(synth.spec_for("us_earthquake").unwrap(), quake);
        assert!(synth.spec_for("nope").is_err());
    }
}
