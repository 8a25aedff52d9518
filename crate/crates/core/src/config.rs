//! The single run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::{CompositionConfig, CompositionTrainConfig, GreedyConfig};
use crate::error::Result;
use crate::grounding::GroundingConfig;
use crate::io::{parse_json, read_text};
use crate::pairwise::{ComparatorConfig, PairwiseTrainConfig};
use crate::qgen::QuestionConfig;
use crate::synth::WorldConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseSection {
    pub comparator: ComparatorConfig,
    pub training: PairwiseTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionSection {
    pub model: CompositionConfig,
    pub training: CompositionTrainConfig,
    pub greedy: GreedyConfig,
}

/// Every section is optional; missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    /// Also carries the frame rate used to name images.
    pub questions: QuestionConfig,
    pub pairwise: PairwiseSection,
    pub composition: CompositionSection,
    pub grounding: GroundingConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let c: Config = parse_json(text, "config")?;
        c.grounding.validate()?;
        c.world.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&read_text(path)?)
    }

    pub fn fps(&self) -> f64 {
        self.questions.fps
    }

    pub fn to_json(&self) -> String {
        crate::io::to_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::parse("{}").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = Config::parse(r#"{"seed": 3, "grounding": {"max_video_segments": 64, "pyramid_sizes": [16, 8]}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.grounding.pyramid_sizes, vec![16, 8]);
        assert_eq!(c.grounding.max_sentence_tokens, 20);
        assert_eq!(c.world, WorldConfig::default());
    }

    #[test]
    fn unknown_and_invalid_fields_fail() {
        assert!(Config::parse(r#"{"sed": 3}"#).is_err());
        assert!(Config::parse(r#"{"world": {"n_video": 3}}"#).is_err());
        assert!(Config::parse(r#"{"grounding": {"pyramid_sizes": [16, 32]}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_json()).unwrap(), c);
    }
}
