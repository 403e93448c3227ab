//! Run configuration: one TOML document covering every stage.
//!
//! Resolution order is profile defaults, then the config file, then
//! command-line overrides. Unknown keys are rejected with their path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::corpus::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::error::{CelError, Result};
use crate::eval::DcfParams;
use crate::features::FeatureConfig;
use crate::trainer::{FinetuneConfig, Frontend, PretrainConfig};

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small corpus, K = 8, few epochs: runs in minutes on one core.
    Desk,
    /// K = 200 and 500/250 epochs; needs a large corpus.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(CelError::Schema(format!("unknown profile `{s}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dcf: DcfParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root of every random stream in the run.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                corpus: CorpusConfig::default(),
                features: FeatureConfig::default(),
                augment: AugmentConfig::default(),
                encoder: EncoderConfig::default(),
                pretrain: PretrainConfig::default(),
                finetune: FinetuneConfig::default(),
                eval: EvalConfig::default(),
            },
            Profile::Desk => Self {
                profile,
                encoder: EncoderConfig {
                    embedding_dim: 16,
                    ..EncoderConfig::default()
                },
                pretrain: PretrainConfig {
                    batch_size: 8,
                    epochs: 15,
                    ..PretrainConfig::default()
                },
                finetune: FinetuneConfig {
                    epochs: 10,
                    ..FinetuneConfig::default()
                },
                ..Self::profile(Profile::Paper)
            },
        }
    }

    /// Profile defaults overlaid with `file` (a TOML document).
    ///
    /// The file may name its own profile; `profile` takes precedence when given.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| CelError::Schema(e.message().to_string()))?;
        let base_profile = match (profile, file.get("profile")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(other)) => return Err(CelError::Schema(format!("profile must be a string, found {other}"))),
            (None, None) => Profile::Desk,
        };
        let base = toml::Table::try_from(Self::profile(base_profile)).map_err(|e| CelError::Schema(e.to_string()))?;
        let mut merged = base;
        merge(&mut merged, file, "")?;
        merged.insert("profile".into(), toml::Value::String(format!("{base_profile:?}").to_lowercase()));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| CelError::Schema(e.message().to_string()))?;
        cfg.sync_seeds()
    }

    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CelError::Schema(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text, profile)
            }
            None => Self::profile(profile.unwrap_or(Profile::Desk)).sync_seeds(),
        }
    }

    /// Copies the run seed into the stage configs.
    pub fn sync_seeds(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.input_dim != self.features.n_mels {
            return Err(CelError::Schema(format!(
                "encoder.input_dim {} must equal features.n_mels {}",
                self.encoder.input_dim, self.features.n_mels
            )));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        DcfParams::new(self.eval.dcf.c_miss, self.eval.dcf.c_fa, self.eval.dcf.p_target)?;
        Ok(())
    }

    pub fn frontend(&self) -> Frontend {
        Frontend {
            features: self.features.clone(),
            augment: self.augment.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CelError::Schema(e.to_string()))
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO), self.to_toml()?)?;
        Ok(())
    }
}

/// Deep-merges `over` into `base`, rejecting keys `base` does not have.
fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(slot), v) => *slot = v,
            // optional fields are absent from the serialized defaults
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(key, v);
            }
            (None, _) => return Err(CelError::Schema(format!("unknown config key `{path}`"))),
        }
    }
    Ok(())
}

const OPTIONAL_KEYS: &[&str] = &["augment.bank_dir"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_keeps_recipe_defaults() {
        let c = RunConfig::profile(Profile::Paper);
        assert_eq!(c.pretrain.batch_size, 200);
        assert_eq!(c.pretrain.lambda, 1.0);
        assert_eq!(c.pretrain.t, 2.0);
        let echo = c.to_toml().unwrap();
        assert!(echo.contains("batch_size = 200"));
        assert!(echo.contains("lambda = 1.0"));
        assert!(echo.contains("t = 2.0"));
    }

    #[test]
    fn file_overrides_profile_and_round_trips() {
        let c = RunConfig::from_toml("seed = 9\n[pretrain]\nlambda = 0.0\n[augment]\nbank_dir = \"x\"\n", None).unwrap();
        assert_eq!(c.pretrain.lambda, 0.0);
        assert_eq!(c.pretrain.batch_size, 8);
        assert_eq!(c.pretrain.seed, 9);
        assert_eq!(c.augment.bank_dir.as_deref(), Some("x"));
        let again = RunConfig::from_toml(&c.to_toml().unwrap(), None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[pretrain]\nlamda = 1.0\n", None).unwrap_err();
        assert!(err.to_string().contains("pretrain.lamda"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n", None).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn explicit_profile_wins() {
        let c = RunConfig::from_toml("profile = \"desk\"\n", Some(Profile::Paper)).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert!(RunConfig::from_toml("profile = \"huge\"\n", None).is_err());
    }

    #[test]
    fn mismatched_front_end_rejected() {
        assert!(RunConfig::from_toml("[encoder]\ninput_dim = 20\n", None).is_err());
    }
}
