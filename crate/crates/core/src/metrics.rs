//! Character n-gram F-score, reference truncation for partial hypotheses, and
//! corpus-level BLEU.

use std::collections::HashMap;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::corpus::detokenize;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChrfConfig {
    /// Highest character n-gram order.
    pub order: usize,
    /// Recall weight.
    pub beta: f64,
    /// Strip all spaces before extracting n-grams.
    pub remove_whitespace: bool,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        Self {
            order: 6,
            beta: 2.0,
            remove_whitespace: false,
        }
    }
}

impl ChrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("chrF order must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("chrF beta must be > 0".into()));
        }
        Ok(())
    }

    fn prepare<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<char> {
        let text = detokenize(tokens);
        if self.remove_whitespace {
            text.chars().filter(|c| *c != ' ').collect()
        } else {
            text.chars().collect()
        }
    }
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// chrF in any field-like number type (`f64`, or an exact rational).
pub fn chrf_in<T, S>(hyp: &[S], reference: &[S], cfg: &ChrfConfig) -> T
where
    T: Num + FromPrimitive + Clone,
    S: AsRef<str>,
{
    let h = cfg.prepare(hyp);
    let r = cfg.prepare(reference);
    if h.is_empty() {
        return if r.is_empty() { T::one() } else { T::zero() };
    }
    let of = |v: usize| T::from_usize(v).expect("count representable");
    let mut p_sum = T::zero();
    let mut r_sum = T::zero();
    let mut used = 0usize;
    for n in 1..=cfg.order {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        let h_total = h.len().saturating_sub(n - 1);
        let r_total = r.len().saturating_sub(n - 1);
        if h_total == 0 && r_total == 0 {
            continue;
        }
        let matches: usize = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        if h_total > 0 {
            p_sum = p_sum + of(matches) / of(h_total);
        }
        if r_total > 0 {
            r_sum = r_sum + of(matches) / of(r_total);
        }
        used += 1;
    }
    let chr_p = p_sum / of(used);
    let chr_r = r_sum / of(used);
    let b2 = T::from_f64(cfg.beta * cfg.beta).expect("beta representable");
    let denom = b2.clone() * chr_p.clone() + chr_r.clone();
    if denom == T::zero() {
        return T::zero();
    }
    (T::one() + b2) * chr_p * chr_r / denom
}

/// Sentence-level chrF on the unit interval.
pub fn chrf<S: AsRef<str>>(hyp: &[S], reference: &[S], cfg: &ChrfConfig) -> f64 {
    chrf_in::<f64, S>(hyp, reference, cfg)
}

/// First `min(hyp_len, |ref|)` reference tokens.
pub fn truncate_reference<S>(reference: &[S], hyp_len: usize) -> &[S] {
    &reference[..hyp_len.min(reference.len())]
}

pub fn avg_sentence_chrf<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    cfg: &ChrfConfig,
) -> Result<f64> {
    check_counts(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| chrf(h, r, cfg)).sum();
    Ok(total / hyps.len() as f64)
}

pub const BLEU_ORDER: usize = 4;

fn word_ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let words: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU on a 0–100 scale: geometric mean of corpus-level modified
/// 1..4-gram precisions times the brevity penalty. Unsmoothed.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_counts(hyps.len(), refs.len())?;
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = word_ngrams(h, n);
            let rc = word_ngrams(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_mean.exp())
}

fn check_counts(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::Input(format!("{h} hypotheses but {r} references")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn cfg() -> ChrfConfig {
        ChrfConfig::default()
    }

    #[test]
    fn chrf_examples() {
        assert_eq!(chrf(&t("since"), &t("since"), &cfg()), 1.0);
        assert!((chrf(&t("aa"), &t("ab"), &cfg()) - 0.25).abs() < 1e-15);
        assert_eq!(chrf(&t(""), &t("x"), &cfg()), 0.0);
        assert_eq!(chrf(&t(""), &t(""), &cfg()), 1.0);
        assert_eq!(chrf(&t("x"), &t(""), &cfg()), 0.0);
    }

    #[test]
    fn whitespace_flag_changes_ngrams() {
        let strip = ChrfConfig {
            remove_whitespace: true,
            ..cfg()
        };
        // "ab" vs "a b": identical once spaces are removed.
        assert_eq!(chrf(&t("ab"), &t("a b"), &strip), 1.0);
        assert!(chrf(&t("ab"), &t("a b"), &cfg()) < 1.0);
    }

    #[test]
    fn truncation_examples() {
        let r: Vec<usize> = (0..10).collect();
        assert_eq!(truncate_reference(&r, 3), &[0, 1, 2]);
        assert_eq!(truncate_reference(&r, 15), &r[..]);
        assert!(truncate_reference(&r, 0).is_empty());
    }

    #[test]
    fn bleu_examples() {
        let c = vec![t("the cat sat on the mat"), t("a b c d e")];
        assert!((corpus_bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&[t("x y z w")], &[t("a b c d")]).unwrap(), 0.0);
        // 3/4, 2/3, 1/2 and 0/1 precisions
        assert_eq!(corpus_bleu(&[t("a b c d")], &[t("a b c e")]).unwrap(), 0.0);
        assert!(corpus_bleu(&[t("a")], &[]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let h = vec![t("a b c d")];
        let r = vec![t("a b c d e f g h")];
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        assert!((corpus_bleu(&h, &r).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn avg_chrf_examples() {
        let h = vec![t("abc"), t("")];
        let r = vec![t("abc"), t("xyz")];
        assert_eq!(avg_sentence_chrf(&h, &r, &cfg()).unwrap(), 0.5);
        assert_eq!(avg_sentence_chrf(&r, &r, &cfg()).unwrap(), 1.0);
        assert!(avg_sentence_chrf(&h, &r[..1], &cfg()).is_err());
    }

    proptest! {
        #[test]
        fn chrf_bounded_and_reflexive(a in "[a-d ]{0,20}", b in "[a-d ]{0,20}") {
            let (ha, hb) = (t(&a), t(&b));
            let s = chrf(&ha, &hb, &cfg());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            if !ha.is_empty() {
                prop_assert!((chrf(&ha, &ha, &cfg()) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn truncation_is_prefix(len in 0usize..20, cut in 0usize..30) {
            let r: Vec<usize> = (0..len).collect();
            let tr = truncate_reference(&r, cut);
            prop_assert!(r.starts_with(tr));
            prop_assert_eq!(truncate_reference(&r, r.len()), &r[..]);
        }

        #[test]
        fn bleu_permutation_invariant(pairs in proptest::collection::vec(("[a-c]( [a-c]){0,6}", "[a-c]( [a-c]){0,6}"), 1..8), rot in 0usize..8) {
            let hyps: Vec<Vec<String>> = pairs.iter().map(|p| t(&p.0)).collect();
            let refs: Vec<Vec<String>> = pairs.iter().map(|p| t(&p.1)).collect();
            let k = rot % hyps.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let a = corpus_bleu(&hyps, &refs).unwrap();
            let b = corpus_bleu(&h2, &r2).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
