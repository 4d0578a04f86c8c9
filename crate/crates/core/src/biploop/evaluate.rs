use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{avg_sentence_chrf, corpus_bleu, ChrfConfig};
use crate::scalar::Scalar;
use crate::seqmodel::{greedy_decode, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_chrf: f64,
    pub bleu: f64,
    pub hypotheses: Vec<Vec<String>>,
}

/// Greedy-decodes every source and scores it against its reference tokens.
pub fn evaluate<T: Scalar>(
    actor: &ModelParams<T>,
    sources: &[Vec<TokenId>],
    references: &[Vec<String>],
    target_vocab: &Vocab,
    t_max: usize,
    chrf_cfg: &ChrfConfig,
) -> Result<EvalReport> {
    if sources.len() != references.len() {
        return Err(Error::Input(format!(
            "{} sources but {} references",
            sources.len(),
            references.len()
        )));
    }
    let hypotheses = sources
        .iter()
        .map(|s| Ok(target_vocab.decode_text(&greedy_decode(actor, s, t_max)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        avg_chrf: avg_sentence_chrf(&hypotheses, references, chrf_cfg)?,
        bleu: corpus_bleu(&hypotheses, references)?,
        hypotheses,
    })
}
