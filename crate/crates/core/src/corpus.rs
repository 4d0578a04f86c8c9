//! Tokenization, vocabularies, line-aligned corpus loading and the synthetic
//! substitution/reversal translation task.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Default sentence-length filter.
pub const DEFAULT_MAX_LEN: usize = 50;

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '"', '(', ')'];

/// Lowercases, splits on whitespace and splits the characters `.,;:!?'"()`
/// into tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if PUNCTUATION.contains(&ch) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Bidirectional token/id map with the four special symbols at ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from regular tokens in the given id order (ids start at 4).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::specials_only();
        for tok in tokens {
            let tok = tok.into();
            if vocab.token_to_id.contains_key(&tok) {
                return Err(Error::Input(format!("duplicate vocabulary entry {tok:?}")));
            }
            vocab.token_to_id.insert(tok.clone(), vocab.id_to_token.len());
            vocab.id_to_token.push(tok);
        }
        Ok(vocab)
    }

    fn specials_only() -> Self {
        let id_to_token: Vec<String> = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    /// Regular (non-special) tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Decodes to text tokens, dropping pad/bos/eos control symbols.
    pub fn decode_text(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Source and target vocabularies of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub source: Vocab,
    pub target: Vocab,
}

impl Vocabs {
    pub fn new(source: Vocab, target: Vocab) -> Self {
        Self { source, target }
    }

    /// Hash over both vocabularies, used to pair checkpoints with their data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.content_hash().as_bytes());
        h.update(self.target.content_hash().as_bytes());
        hex::encode(h.finalize())
    }
}

/// The `cap` most frequent tokens get ids `4..cap+3` in descending frequency,
/// ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], cap: usize) -> Result<Vocab> {
    if cap == 0 {
        return Err(Error::Config("vocabulary cap must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpus {
        for tok in sentence {
            let tok = tok.as_ref();
            if matches!(tok, PAD_TOKEN | UNK_TOKEN | BOS_TOKEN | EOS_TOKEN) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic and the sort is stable.
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    Vocab::from_tokens(ranked.into_iter().take(cap).map(|(t, _)| t))
}

/// A sentence pair in token form, target without the end marker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// A sentence pair in id form; the target always ends with [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(source: Vec<TokenId>, mut target: Vec<TokenId>) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Input("empty source sentence".into()));
        }
        if target.last() != Some(&EOS) {
            target.push(EOS);
        }
        if target.len() < 2 {
            return Err(Error::Input("empty target sentence".into()));
        }
        Ok(Self { source, target })
    }

    pub fn check(&self, max_len: usize) -> bool {
        !self.source.is_empty()
            && self.target.len() >= 2
            && self.target.last() == Some(&EOS)
            && self.source.len() <= max_len
            && self.target.len() - 1 <= max_len
    }
}

pub fn encode_pairs(pairs: &[TokenizedPair], src: &Vocab, tgt: &Vocab) -> Result<Vec<SentencePair>> {
    pairs
        .iter()
        .map(|p| SentencePair::new(src.encode(&p.source), tgt.encode(&p.target)))
        .collect()
}

/// Reads two line-aligned UTF-8 files. Pairs where either side is empty or
/// longer than `max_len` tokens are dropped.
pub fn load_parallel(
    source_path: impl AsRef<Path>,
    target_path: impl AsRef<Path>,
    max_len: usize,
) -> Result<Vec<TokenizedPair>> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let src = read(source_path.as_ref())?;
    let tgt = read(target_path.as_ref())?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment {
            source_lines: src_lines.len(),
            target_lines: tgt_lines.len(),
        });
    }
    Ok(src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| TokenizedPair {
            source: tokenize(s),
            target: tokenize(t),
        })
        .filter(|p| {
            !p.source.is_empty()
                && !p.target.is_empty()
                && p.source.len() <= max_len
                && p.target.len() <= max_len
        })
        .collect())
}

/// Reads a single monolingual file, one tokenized sentence per line.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Token-wise substitution only.
    Mapping,
    /// Substitution followed by reversal of the whole sentence.
    MappingReversed,
}

/// Desk-scale translation task: source tokens `s1..sK`, target tokens `t1..tK`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub source_vocab_size: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_kind")]
    pub kind: TaskKind,
}

fn default_kind() -> TaskKind {
    TaskKind::MappingReversed
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            source_vocab_size: 50,
            seed: 7,
            min_len: 3,
            max_len: 8,
            kind: TaskKind::MappingReversed,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_vocab_size < 4 {
            return Err(Error::Config("synthetic source_vocab_size must be >= 4".into()));
        }
        if !(2 <= self.min_len && self.min_len <= self.max_len && self.max_len <= DEFAULT_MAX_LEN) {
            return Err(Error::Config(format!(
                "synthetic lengths must satisfy 2 <= min_len <= max_len <= {DEFAULT_MAX_LEN}"
            )));
        }
        Ok(())
    }

    pub fn source_token(i: usize) -> String {
        format!("s{i}")
    }

    pub fn target_token(i: usize) -> String {
        format!("t{i}")
    }

    /// Translates a source sentence under this task's rule.
    pub fn translate<S: AsRef<str>>(&self, source: &[S]) -> Vec<String> {
        let mut target: Vec<String> = source
            .iter()
            .map(|s| {
                let s = s.as_ref();
                match s.strip_prefix('s') {
                    Some(idx) => format!("t{idx}"),
                    None => UNK_TOKEN.to_string(),
                }
            })
            .collect();
        if self.kind == TaskKind::MappingReversed {
            target.reverse();
        }
        target
    }

    /// Complete source and target vocabularies in natural index order.
    pub fn vocabs(&self) -> (Vocab, Vocab) {
        let n = self.source_vocab_size;
        let src = Vocab::from_tokens((1..=n).map(Self::source_token)).expect("unique tokens");
        let tgt = Vocab::from_tokens((1..=n).map(Self::target_token)).expect("unique tokens");
        (src, tgt)
    }
}

/// Deterministically generates `n` pairs from the task seed.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<TokenizedPair>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("synthetic corpus size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let source: Vec<String> = (0..len)
                .map(|_| SyntheticTaskSpec::source_token(rng.random_range(1..=spec.source_vocab_size)))
                .collect();
            let target = spec.translate(&source);
            TokenizedPair { source, target }
        })
        .collect())
}

/// Seeded in-place shuffle.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}
