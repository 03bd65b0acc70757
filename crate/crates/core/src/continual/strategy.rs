use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::SelectionMode;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::prompts::{PoolConfig, PromptStrategy};

/// Which continual-indexing method a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategyTag {
    /// Full model fine-tuned on each new corpus alone.
    SeqFt,
    /// `SeqFt` plus sparse replay of earlier pseudo-queries.
    ReplayFt,
    /// Encoder frozen; only the new classifier rows train.
    FrozenCls,
    /// New rows start at cached query-embedding centroids, then refine.
    CachedCentroid,
    PromptDsi(PromptStrategy),
    /// Same objective with two-pass `[CLS]` selection.
    NaivePromptDsi(PromptStrategy),
    /// Retrains from the base model on the union of the new corpora.
    Multi,
    /// Trains on the union of every corpus seen so far.
    Joint,
}

impl Default for StrategyTag {
    fn default() -> Self {
        StrategyTag::PromptDsi(PromptStrategy::L2p)
    }
}

const PROMPT_STRATEGIES: [PromptStrategy; 4] = [
    PromptStrategy::L2p,
    PromptStrategy::Spp,
    PromptStrategy::Coda,
    PromptStrategy::Topic,
];

fn suffix(p: PromptStrategy) -> &'static str {
    match p {
        PromptStrategy::L2p => "L2P",
        PromptStrategy::Spp => "SPP",
        PromptStrategy::Coda => "CODA",
        PromptStrategy::Topic => "TOPIC",
    }
}

impl StrategyTag {
    /// Every tag, baselines first.
    pub fn all() -> Vec<StrategyTag> {
        let mut v = vec![
            StrategyTag::SeqFt,
            StrategyTag::ReplayFt,
            StrategyTag::FrozenCls,
            StrategyTag::CachedCentroid,
        ];
        v.extend(PROMPT_STRATEGIES.map(StrategyTag::PromptDsi));
        v.extend(PROMPT_STRATEGIES.map(StrategyTag::NaivePromptDsi));
        v.push(StrategyTag::Multi);
        v.push(StrategyTag::Joint);
        v
    }

    pub fn prompt_strategy(self) -> Option<PromptStrategy> {
        match self {
            StrategyTag::PromptDsi(p) | StrategyTag::NaivePromptDsi(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_prompt_based(self) -> bool {
        self.prompt_strategy().is_some()
    }

    pub fn selection_mode(self) -> SelectionMode {
        match self {
            StrategyTag::NaivePromptDsi(_) => SelectionMode::TwoPassCls,
            _ => SelectionMode::SinglePassAvg,
        }
    }

    /// Strategies whose encoder stays frozen after `t = 0`.
    pub fn freezes_encoder(self) -> bool {
        matches!(
            self,
            StrategyTag::FrozenCls
                | StrategyTag::CachedCentroid
                | StrategyTag::PromptDsi(_)
                | StrategyTag::NaivePromptDsi(_)
        )
    }

    /// Strategies audited for never reading earlier corpora after `t = 0`.
    pub fn rehearsal_free(self) -> bool {
        self.is_prompt_based()
    }

    /// The single-pass counterpart of a naive tag, or the tag itself.
    pub fn single_pass(self) -> StrategyTag {
        match self {
            StrategyTag::NaivePromptDsi(p) => StrategyTag::PromptDsi(p),
            other => other,
        }
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyTag::SeqFt => f.write_str("SEQ_FT"),
            StrategyTag::ReplayFt => f.write_str("REPLAY_FT"),
            StrategyTag::FrozenCls => f.write_str("FROZEN_CLS"),
            StrategyTag::CachedCentroid => f.write_str("CACHED_CENTROID"),
            StrategyTag::PromptDsi(p) => write!(f, "PROMPTDSI_{}", suffix(*p)),
            StrategyTag::NaivePromptDsi(p) => write!(f, "NAIVE_PROMPTDSI_{}", suffix(*p)),
            StrategyTag::Multi => f.write_str("MULTI"),
            StrategyTag::Joint => f.write_str("JOINT"),
        }
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::all()
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl TryFrom<String> for StrategyTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StrategyTag> for String {
    fn from(t: StrategyTag) -> String {
        t.to_string()
    }
}

/// Schedule-wide training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimestepPlan {
    pub strategy: StrategyTag,
    /// Full-model epochs on `D_0`.
    pub base_epochs: usize,
    pub base_lr: f64,
    /// Epochs per new corpus for the fine-tuning and head-only baselines.
    pub epochs: usize,
    /// Prompt-based strategies train `epochs × prompt_epoch_factor` epochs.
    pub prompt_epoch_factor: usize,
    /// Full-model fine-tuning rate after `t = 0`.
    pub lr: f64,
    /// Rate for new classifier rows whenever the encoder is frozen.
    pub head_lr: f64,
    /// Rate for prompts, keys and attention vectors.
    pub prompt_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// One replay batch after every this many new-corpus batches.
    pub replay_every: usize,
    /// Gradient refinement epochs after centroid initialization.
    pub refine_epochs: usize,
    pub match_weight: f64,
    /// Number of mined topics for topic-keyed pools.
    pub num_topics: usize,
    pub pool: PoolConfig,
    pub exec: Exec,
    /// Re-digest every frozen tensor after each optimizer step.
    pub audit: bool,
}

impl Default for TimestepPlan {
    fn default() -> Self {
        TimestepPlan {
            strategy: StrategyTag::default(),
            base_epochs: 30,
            base_lr: 1e-3,
            epochs: 5,
            prompt_epoch_factor: 2,
            lr: 1e-3,
            head_lr: 5e-3,
            prompt_lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 32,
            replay_every: 4,
            refine_epochs: 10,
            match_weight: 1.0,
            num_topics: 8,
            pool: PoolConfig::default(),
            exec: Exec::default(),
            audit: true,
        }
    }
}

impl TimestepPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.replay_every == 0 {
            return bad("replay_every must be positive");
        }
        if self.prompt_epoch_factor == 0 {
            return bad("prompt_epoch_factor must be positive");
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("lr", self.lr),
            ("head_lr", self.head_lr),
            ("prompt_lr", self.prompt_lr),
            ("weight_decay", self.weight_decay),
            ("match_weight", self.match_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0")));
            }
        }
        if self.strategy.prompt_strategy() == Some(PromptStrategy::Topic) && self.num_topics == 0 {
            return bad("topic-keyed pools need num_topics ≥ 1");
        }
        self.pool.validate()
    }

    /// Epochs spent on each new corpus by the configured strategy.
    pub fn step_epochs(&self) -> usize {
        match self.strategy {
            StrategyTag::PromptDsi(_) | StrategyTag::NaivePromptDsi(_) => {
                self.epochs * self.prompt_epoch_factor
            }
            StrategyTag::CachedCentroid => self.refine_epochs,
            _ => self.epochs,
        }
    }

    pub fn step_lr(&self) -> f64 {
        match self.strategy {
            StrategyTag::PromptDsi(_) | StrategyTag::NaivePromptDsi(_) => self.prompt_lr,
            StrategyTag::FrozenCls | StrategyTag::CachedCentroid => self.head_lr,
            _ => self.lr,
        }
    }
}
