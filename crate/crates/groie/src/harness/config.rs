//! JSON run configuration shared by the train, eval, and compare commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{Aggregation, BlockChoice, Strategy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub eval_scenes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub channels: usize,
    pub extractor: ExtractorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenes: 256,
            eval_scenes: 64,
            epochs: 12,
            lr: 0.01,
            channels: 64,
            extractor: ExtractorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSpec {
    /// One of: single, random, sum, sum_plus, concat, groie.
    pub strategy: String,
    /// Per-level block for groie: none, conv1, conv3, conv5, nonlocal, attention.
    pub pre: String,
    /// Aggregation for groie: sum or concat.
    pub agg: String,
    /// Shared post-aggregation block, same choices as `pre`.
    pub post: String,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            strategy: "sum".into(),
            pre: "none".into(),
            agg: "sum".into(),
            post: "none".into(),
        }
    }
}

fn parse_block(name: &str) -> Result<BlockChoice> {
    Ok(match name {
        "none" => BlockChoice::None,
        "conv1" => BlockChoice::Conv(1),
        "conv3" => BlockChoice::Conv(3),
        "conv5" => BlockChoice::Conv(5),
        "nonlocal" => BlockChoice::NonLocal,
        "attention" => BlockChoice::Attention,
        other => {
            return Err(Error::Config(format!(
                "unknown block {other:?} (want none|conv1|conv3|conv5|nonlocal|attention)"
            )))
        }
    })
}

impl ExtractorSpec {
    pub fn to_strategy(&self) -> Result<Strategy> {
        Ok(match self.strategy.as_str() {
            "single" => Strategy::SingleLevel,
            "random" => Strategy::RandomLevel,
            "sum" => Strategy::Sum,
            "sum_plus" => Strategy::SumPlus,
            "concat" => Strategy::Concat,
            "groie" => Strategy::Groie {
                pre: parse_block(&self.pre)?,
                agg: match self.agg.as_str() {
                    "sum" => Aggregation::Sum,
                    "concat" => Aggregation::Concat,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown aggregation {other:?} (want sum|concat)"
                        )))
                    }
                },
                post: parse_block(&self.post)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy {other:?} (want single|random|sum|sum_plus|concat|groie)"
                )))
            }
        })
    }

    /// Spec for a bare strategy name; groie defaults to conv5 pre + sum +
    /// attention post, the configuration that pairs locality with context.
    pub fn from_name(name: &str) -> ExtractorSpec {
        let mut spec = ExtractorSpec { strategy: name.into(), ..ExtractorSpec::default() };
        if name == "groie" {
            spec.pre = "conv5".into();
            spec.post = "attention".into();
        }
        spec
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.epochs == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("scenes, eval_scenes and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of 8",
                self.channels
            )));
        }
        self.extractor.to_strategy()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.scenes, 256);
        assert_eq!(back.epochs, 12);
        assert!(back.validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "epochs": 2}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.channels, 64);
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sceness": 1}"#).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for (name, want) in [
            ("single", Strategy::SingleLevel),
            ("random", Strategy::RandomLevel),
            ("sum", Strategy::Sum),
            ("sum_plus", Strategy::SumPlus),
            ("concat", Strategy::Concat),
        ] {
            assert_eq!(ExtractorSpec::from_name(name).to_strategy().unwrap(), want);
        }
        let groie = ExtractorSpec::from_name("groie").to_strategy().unwrap();
        assert_eq!(
            groie,
            Strategy::Groie {
                pre: BlockChoice::Conv(5),
                agg: Aggregation::Sum,
                post: BlockChoice::Attention
            }
        );
        assert!(ExtractorSpec::from_name("bogus").to_strategy().is_err());
    }
}
