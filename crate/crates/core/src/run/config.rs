use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::{check_fits, DataStore, TimestepPlan};
use crate::data::{generate_corpora, load_jsonl, CorpusTimeline, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Where the corpus timeline comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Jsonl(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Everything needed to reproduce a run. Serialized next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub plan: TimestepPlan,
    pub seed: u64,
    /// Root under which run directories are created; not part of the hash.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::default(),
            encoder: EncoderConfig {
                vocab_size: SyntheticSpec::default().vocab_size,
                ..EncoderConfig::default()
            },
            plan: TimestepPlan::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.plan.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.vocab_size > self.encoder.vocab_size {
                return Err(Error::Config(format!(
                    "synthetic vocabulary {} exceeds the encoder vocabulary {}",
                    spec.vocab_size, self.encoder.vocab_size
                )));
            }
            if spec.max_query_len() + 1 > self.encoder.max_len {
                return Err(Error::Config(format!(
                    "queries of up to {} tokens plus [CLS] exceed max_len {}",
                    spec.max_query_len(),
                    self.encoder.max_len
                )));
            }
            if spec.increments == 0 {
                return Err(Error::Config("the timeline needs at least one increment".into()));
            }
        }
        Ok(())
    }

    /// Same run under another seed; a synthetic corpus is regenerated from it
    /// as well.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
        cfg
    }

    /// Short content hash over everything except the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("RunConfig serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    /// `<out_dir>/<strategy>-<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        let root = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{}-{}", self.plan.strategy, self.hash()))
    }

    pub fn timeline(&self) -> Result<CorpusTimeline> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_corpora(spec),
            DataSource::Jsonl(path) => load_jsonl(path),
        }
    }

    /// Loads the timeline and checks that it fits the encoder.
    pub fn store(&self) -> Result<DataStore> {
        let store = DataStore::new(self.timeline()?)?;
        check_fits(&store, &self.encoder)?;
        if store.num_corpora() < 2 {
            return Err(Error::Data(
                "the timeline holds no corpus after D_0".into(),
            ));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual::StrategyTag;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.encoder.vocab_size, 1280);
    }

    #[test]
    fn empty_object_means_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn hash_ignores_out_dir_but_not_strategy() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.plan.strategy = StrategyTag::SeqFt;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn with_seed_reseeds_synthetic_data() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!(cfg.seed, 7);
        match cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.seed, 7),
            DataSource::Jsonl(_) => unreachable!(),
        }
    }

    #[test]
    fn malformed_and_inconsistent_configs_are_config_errors() {
        for text in [
            "{",
            r#"{"seeed": 1}"#,
            r#"{"plan": {"strategy": "NOPE"}}"#,
            r#"{"encoder": {"vocab_size": 100}}"#,
            r#"{"encoder": {"max_len": 4}}"#,
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn unreadable_config_file_is_a_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn strategy_names_parse_case_insensitively() {
        let cfg = RunConfig::from_json(r#"{"plan": {"strategy": "promptdsi_topic"}}"#).unwrap();
        assert_eq!(cfg.plan.strategy.to_string(), "PROMPTDSI_TOPIC");
    }
}
