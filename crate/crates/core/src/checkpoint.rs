//! On-disk checkpoints: a directory with `manifest.json`, a little-endian
//! `f64` blob `tensors.bin` and the two vocabularies as one token per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biploop::Learner;
use crate::corpus::{Vocab, Vocabs};
use crate::error::{Error, Result};
use crate::rlcore::AdamState;
use crate::scalar::Scalar;
use crate::seqmodel::{Gradients, ModelDims, ModelParams, TENSOR_NAMES};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const SOURCE_VOCAB_FILE: &str = "src_vocab.txt";
pub const TARGET_VOCAB_FILE: &str = "tgt_vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Scalar type the parameters were trained in.
    pub scalar: String,
    pub dims: ModelDims,
    pub vocab_hash: String,
    pub k: u64,
    pub next_request_id: u64,
    pub actor_adam_step: Option<u64>,
    pub critic_adam_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Actor plus optional critic and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub actor: ModelParams<T>,
    pub critic: Option<ModelParams<T>>,
    pub actor_adam: Option<AdamState<T>>,
    pub critic_adam: Option<AdamState<T>>,
    pub k: u64,
    pub next_request_id: u64,
    pub vocabs: Vocabs,
}

const GROUPS: [&str; 6] = [
    "actor",
    "critic",
    "actor_adam.first",
    "actor_adam.second",
    "critic_adam.first",
    "critic_adam.second",
];

impl<T: Scalar> Checkpoint<T> {
    pub fn actor_only(actor: ModelParams<T>, vocabs: Vocabs) -> Self {
        Self {
            actor,
            critic: None,
            actor_adam: None,
            critic_adam: None,
            k: 0,
            next_request_id: 0,
            vocabs,
        }
    }

    pub fn from_learner(learner: &Learner<T>, vocabs: Vocabs) -> Self {
        Self {
            actor: learner.actor.clone(),
            critic: Some(learner.critic.clone()),
            actor_adam: Some(learner.actor_adam.clone()),
            critic_adam: Some(learner.critic_adam.clone()),
            k: learner.k,
            next_request_id: learner.next_request_id,
            vocabs,
        }
    }

    /// Learner for a new bandit run. A missing critic is initialized from
    /// `critic_seed`; optimizer moments always start fresh.
    pub fn learner(&self, critic_seed: u64) -> Result<Learner<T>> {
        let mut learner = match &self.critic {
            Some(c) => Learner::new(self.actor.clone(), c.clone())?,
            None => Learner::with_fresh_critic(self.actor.clone(), critic_seed)?,
        };
        learner.k = self.k;
        learner.next_request_id = self.next_request_id;
        Ok(learner)
    }

    /// Learner that continues exactly where the saved one stopped.
    pub fn resume(&self, critic_seed: u64) -> Result<Learner<T>> {
        let mut learner = self.learner(critic_seed)?;
        if let Some(a) = &self.actor_adam {
            learner.actor_adam = a.clone();
        }
        if let Some(c) = &self.critic_adam {
            learner.critic_adam = c.clone();
        }
        Ok(learner)
    }

    fn groups(&self) -> [Option<[&Matrix<T>; 13]>; 6] {
        [
            Some(self.actor.tensors()),
            self.critic.as_ref().map(|c| c.tensors()),
            self.actor_adam.as_ref().map(|a| a.first.tensors()),
            self.actor_adam.as_ref().map(|a| a.second.tensors()),
            self.critic_adam.as_ref().map(|a| a.first.tensors()),
            self.critic_adam.as_ref().map(|a| a.second.tensors()),
        ]
    }

    fn check_consistent(&self) -> Result<()> {
        let dims = self.actor.dims();
        if dims.source_vocab != self.vocabs.source.len() || dims.target_vocab != self.vocabs.target.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary sizes {}/{} do not match vocabularies {}/{}",
                dims.source_vocab,
                dims.target_vocab,
                self.vocabs.source.len(),
                self.vocabs.target.len()
            )));
        }
        let others = [
            self.critic.as_ref().map(|c| c.dims()),
            self.actor_adam.as_ref().map(|a| a.dims()),
            self.critic_adam.as_ref().map(|a| a.dims()),
        ];
        if others.iter().flatten().any(|d| *d != dims) {
            return Err(Error::Checkpoint("component dimensions differ".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check_consistent()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (group, tensors) in GROUPS.iter().zip(self.groups()) {
            let Some(tensors) = tensors else { continue };
            for (name, m) in TENSOR_NAMES.iter().zip(tensors) {
                entries.push(TensorEntry {
                    name: format!("{group}.{name}"),
                    shape: m.shape(),
                });
                for v in m.as_slice() {
                    blob.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            scalar: std::any::type_name::<T>().to_string(),
            dims: self.actor.dims(),
            vocab_hash: self.vocabs.content_hash(),
            k: self.k,
            next_request_id: self.next_request_id,
            actor_adam_step: self.actor_adam.as_ref().map(|a| a.step),
            critic_adam_step: self.critic_adam.as_ref().map(|a| a.step),
            tensors: entries,
        };
        write(dir, TENSORS_FILE, &blob)?;
        write_vocab(dir, SOURCE_VOCAB_FILE, &self.vocabs.source)?;
        write_vocab(dir, TARGET_VOCAB_FILE, &self.vocabs.target)?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        write(dir, MANIFEST_FILE, &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let vocabs = Vocabs::new(
            read_vocab(dir, SOURCE_VOCAB_FILE)?,
            read_vocab(dir, TARGET_VOCAB_FILE)?,
        );
        if vocabs.content_hash() != manifest.vocab_hash {
            return Err(Error::Checkpoint("vocabulary files do not match the manifest hash".into()));
        }
        let dims = manifest.dims;
        dims.validate()?;
        let path = dir.join(TENSORS_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        if blob.len() != expected * 8 {
            return Err(Error::Checkpoint(format!(
                "tensor blob has {} bytes, manifest needs {}",
                blob.len(),
                expected * 8
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
        let mut entries = manifest.tensors.iter();
        let mut groups: Vec<Option<ModelParams<T>>> = Vec::new();
        let shapes = dims.shapes();
        let mut pending = entries.next();
        for group in GROUPS {
            let present = pending.is_some_and(|e| e.name.starts_with(&format!("{group}.")));
            if !present {
                groups.push(None);
                continue;
            }
            let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
            for (name, shape) in TENSOR_NAMES.iter().zip(shapes) {
                let entry = pending.ok_or_else(|| Error::Checkpoint("manifest ends early".into()))?;
                if entry.name != format!("{group}.{name}") || entry.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "unexpected tensor {} {:?}; wanted {group}.{name} {:?}",
                        entry.name, entry.shape, shape
                    )));
                }
                let data: Vec<T> = values.by_ref().take(shape[0] * shape[1]).collect();
                tensors.push(Matrix::from_vec(shape[0], shape[1], data));
                pending = entries.next();
            }
            groups.push(Some(ModelParams::from_tensors(dims, tensors)?));
        }
        if let Some(extra) = pending {
            return Err(Error::Checkpoint(format!("unknown tensor {}", extra.name)));
        }
        let mut groups = groups.into_iter();
        let mut next = || groups.next().expect("one slot per group");
        let actor = next().ok_or_else(|| Error::Checkpoint("actor parameters missing".into()))?;
        let critic = next();
        let adam = |first: Option<ModelParams<T>>, second: Option<ModelParams<T>>, step: Option<u64>| {
            match (first, second, step) {
                (Some(f), Some(s), Some(step)) => Ok(Some(AdamState {
                    first: Gradients(f),
                    second: Gradients(s),
                    step,
                })),
                (None, None, None) => Ok(None),
                _ => Err(Error::Checkpoint("incomplete optimizer state".into())),
            }
        };
        let actor_adam = adam(next(), next(), manifest.actor_adam_step)?;
        let critic_adam = adam(next(), next(), manifest.critic_adam_step)?;
        let ckpt = Self {
            actor,
            critic,
            actor_adam,
            critic_adam,
            k: manifest.k,
            next_request_id: manifest.next_request_id,
            vocabs,
        };
        ckpt.check_consistent()?;
        Ok(ckpt)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write(dir: &Path, file: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_vocab(dir: &Path, file: &str, vocab: &Vocab) -> Result<()> {
    let mut text = vocab.regular_tokens().join("\n");
    text.push('\n');
    write(dir, file, text.as_bytes())
}

fn read_vocab(dir: &Path, file: &str) -> Result<Vocab> {
    let path = dir.join(file);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()))
}
