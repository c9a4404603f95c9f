use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{layerdrop_select, BackboneConfig, Pooling};
use crate::datakit::{InteractionDataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evalkit::EvalSplit;
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::modality::Modality;
use crate::rng::SeedStreams;
use crate::seqrec::{SeqEncoderConfig, TrainConfig};
use crate::sidenet::SideConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

/// Shared settings of the frozen per-modality backbones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub keep_ratio: f64,
    pub pooling: Pooling,
    /// Master seed for backbone weights; each modality gets its own stream.
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 256,
            num_heads: 4,
            keep_ratio: 0.5,
            pooling: Pooling::FirstToken,
            seed: 0,
        }
    }
}

impl BackboneSection {
    pub fn retained_count(&self) -> Result<usize> {
        Ok(layerdrop_select(self.num_layers, self.keep_ratio)?.len())
    }

    /// Backbone config for `m`, shaped to the dataset's feature files.
    pub fn for_modality(&self, m: Modality, dataset: &InteractionDataset) -> Result<BackboneConfig> {
        let f = dataset.feature(m)?;
        Ok(BackboneConfig {
            modality: m,
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            token_count: f.token_count,
            input_feat_dim: f.feat_dim,
            seed: SeedStreams::new(self.seed).seed_for(&format!("backbone.{m}")),
            keep_ratio: self.keep_ratio,
            pooling: self.pooling,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: EvalSplit,
    pub max_users: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: EvalSplit::Test,
            max_users: None,
        }
    }
}

/// Everything a run needs. Every field has a default and unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: SyntheticConfig,
    pub backbones: BackboneSection,
    pub sidenet: SideConfig,
    pub fusion: FusionConfig,
    pub seqrec: SeqEncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            context: context.to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            sidenet: self.sidenet.clone(),
            fusion: self.fusion.clone(),
            seqrec: self.seqrec.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let probe = BackboneConfig {
            num_layers: self.backbones.num_layers,
            d_model: self.backbones.d_model,
            num_heads: self.backbones.num_heads,
            keep_ratio: self.backbones.keep_ratio,
            ..BackboneConfig::new(Modality::Text, 0)
        };
        probe.validate()?;
        self.sidenet.validate()?;
        self.fusion.validate(self.sidenet.modalities.len())?;
        self.seqrec.validate()?;
        self.train.validate()?;
        let retained = self.backbones.retained_count()?;
        if self.sidenet.num_side_layers != retained {
            return Err(Error::Config(format!(
                "num_side_layers {} must equal the backbones' retained layer count {retained}",
                self.sidenet.num_side_layers
            )));
        }
        Ok(())
    }

    /// Check that the dataset provides every modality the side network uses.
    pub fn check_dataset(&self, dataset: &InteractionDataset) -> Result<()> {
        let have = dataset.modalities();
        for m in &self.sidenet.modalities {
            if !have.contains(m) {
                return Err(Error::MissingModality(format!("{m} (dataset has {have:?})")));
            }
        }
        Ok(())
    }

    pub fn backbone_widths(&self) -> BTreeMap<Modality, usize> {
        self.sidenet.modalities.iter().map(|&m| (m, self.backbones.d_model)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct") + "\n"
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_unknown_keys_fail() {
        RunConfig::default().validate().unwrap();
        let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#, "t").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.seqrec, SeqEncoderConfig::default());
        let err = RunConfig::from_json(r#"{"train": {"epoch": 3}}"#, "t").unwrap_err();
        assert!(err.is_validation());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#, "t").is_err());
    }

    #[test]
    fn layer_count_must_match_backbones() {
        let mut c = RunConfig::default();
        c.sidenet.num_side_layers = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.fusion.top_k = 9;
        assert!(c.validate().is_err());
    }
}
