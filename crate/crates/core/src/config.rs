//! JSON run configuration. Unknown keys are rejected in every section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::biploop::{FeedbackMode, PretrainConfig, TrainConfig};
use crate::corpus::{
    build_vocab, encode_pairs, generate_synthetic, load_parallel, SentencePair, SyntheticTaskSpec,
    TaskKind, TokenizedPair, Vocabs, DEFAULT_MAX_LEN,
};
use crate::error::{Error, Result};
use crate::metrics::ChrfConfig;
use crate::rlcore::OptimConfig;
use crate::seqmodel::ModelDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    /// Seed for parameter initialization (the critic uses `seed + 1`).
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 64,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, vocabs: &Vocabs) -> Result<ModelDims> {
        let dims = ModelDims {
            source_vocab: vocabs.source.len(),
            target_vocab: vocabs.target.len(),
            embed: self.embed,
            hidden: self.hidden,
        };
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epsilon: f64,
    pub mu: f64,
    pub t_max: usize,
    pub seed: u64,
    pub feedback: FeedbackMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epsilon: d.epsilon,
            mu: d.mu,
            t_max: d.t_max,
            seed: d.seed,
            feedback: d.feedback,
        }
    }
}

/// Synthetic corpora: pretraining pairs from `task`, bandit stream and test
/// set from `task` with `stream_kind` swapped in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub task: SyntheticTaskSpec,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub stream_kind: TaskKind,
    pub stream_inputs: usize,
    pub test_pairs: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec {
                kind: TaskKind::Mapping,
                ..SyntheticTaskSpec::default()
            },
            train_pairs: 2000,
            valid_pairs: 200,
            stream_kind: TaskKind::MappingReversed,
            stream_inputs: 1000,
            test_pairs: 200,
        }
    }
}

/// All splits of a synthetic configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub vocabs: Vocabs,
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub stream: Vec<TokenizedPair>,
    pub test: Vec<TokenizedPair>,
}

impl SyntheticData {
    /// Each split is drawn from its own seed offset of the task seed.
    pub fn splits(&self) -> Result<SyntheticSplits> {
        let (src, tgt) = self.task.vocabs();
        let vocabs = Vocabs::new(src, tgt);
        let with = |kind: TaskKind, offset: u64| SyntheticTaskSpec {
            kind,
            seed: self.task.seed.wrapping_add(offset),
            ..self.task
        };
        let encode = |pairs: Vec<TokenizedPair>| encode_pairs(&pairs, &vocabs.source, &vocabs.target);
        let train = encode(generate_synthetic(&with(self.task.kind, 0), self.train_pairs)?)?;
        let valid = encode(generate_synthetic(&with(self.task.kind, 1), self.valid_pairs)?)?;
        let stream = generate_synthetic(&with(self.stream_kind, 2), self.stream_inputs)?;
        let test = generate_synthetic(&with(self.stream_kind, 3), self.test_pairs)?;
        Ok(SyntheticSplits {
            vocabs,
            train,
            valid,
            stream,
            test,
        })
    }
}

/// Parallel text files for pretraining; vocabularies are built from the training side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub valid_source: PathBuf,
    pub valid_target: PathBuf,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_vocab_cap() -> usize {
    200
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl FileData {
    pub fn load(&self) -> Result<(Vocabs, Vec<SentencePair>, Vec<SentencePair>)> {
        let train = load_parallel(&self.train_source, &self.train_target, self.max_len)?;
        let valid = load_parallel(&self.valid_source, &self.valid_target, self.max_len)?;
        let sources: Vec<Vec<String>> = train.iter().map(|p| p.source.clone()).collect();
        let targets: Vec<Vec<String>> = train.iter().map(|p| p.target.clone()).collect();
        let vocabs = Vocabs::new(
            build_vocab(&sources, self.vocab_cap)?,
            build_vocab(&targets, self.vocab_cap)?,
        );
        let train = encode_pairs(&train, &vocabs.source, &vocabs.target)?;
        let valid = encode_pairs(&valid, &vocabs.source, &vocabs.target)?;
        Ok((vocabs, train, valid))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Files(FileData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticData::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainSection,
    pub pretrain: PretrainConfig,
    pub chrf: ChrfConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epsilon: self.train.epsilon,
            mu: self.train.mu,
            t_max: self.train.t_max,
            optim: self.optim,
            seed: self.train.seed,
            feedback: self.train.feedback,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.embed == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model embed and hidden must be >= 1".into()));
        }
        self.train_config().validate()?;
        self.pretrain.validate()?;
        self.chrf.validate()?;
        if let DataConfig::Synthetic(s) = &self.data {
            s.task.validate()?;
            if s.train_pairs == 0 || s.valid_pairs == 0 || s.stream_inputs == 0 || s.test_pairs == 0 {
                return Err(Error::Config("synthetic split sizes must be >= 1".into()));
            }
        }
        Ok(())
    }
}
