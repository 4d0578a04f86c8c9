use rand::Rng;

use crate::corpus::{TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::gate;
use crate::scalar::Scalar;
use crate::tensor::{dot, log_sum_exp, softmax};

use super::gru::{self, GruCache};
use super::params::ModelParams;

/// Encoder annotations, one per source position.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource<T> {
    pub annotations: Vec<Vec<T>>,
    source: Vec<TokenId>,
    caches: Vec<GruCache<T>>,
}

impl<T: Scalar> EncodedSource<T> {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn final_state(&self) -> &[T] {
        self.annotations.last().expect("encoded source is never empty")
    }

    pub fn source(&self) -> &[TokenId] {
        &self.source
    }

    pub(crate) fn caches(&self) -> &[GruCache<T>] {
        &self.caches
    }
}

pub fn encode<T: Scalar>(params: &ModelParams<T>, source: &[TokenId]) -> Result<EncodedSource<T>> {
    if source.is_empty() {
        return Err(Error::Input("cannot encode an empty source".into()));
    }
    let dims = params.dims();
    if let Some(&bad) = source.iter().find(|&&t| t >= dims.source_vocab) {
        return Err(Error::Shape(format!(
            "source id {bad} outside vocabulary of {}",
            dims.source_vocab
        )));
    }
    let mut h = vec![T::zero(); dims.hidden];
    let mut annotations = Vec::with_capacity(source.len());
    let mut caches = Vec::with_capacity(source.len());
    for &tok in source {
        let (next, cache) = gru::forward(&params.encoder, params.source_embed.row(tok), &h);
        annotations.push(next.clone());
        caches.push(cache);
        h = next;
    }
    Ok(EncodedSource {
        annotations,
        source: source.to_vec(),
        caches,
    })
}

/// Decoder state `s_t`: the recurrent state after `t-1` emitted tokens plus
/// the token to condition the next prediction on.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub hidden: Vec<T>,
    pub prev_token: TokenId,
    pub step: usize,
}

impl<T: Scalar> DecoderState<T> {
    pub fn initial(encoded: &EncodedSource<T>) -> Self {
        Self {
            hidden: encoded.final_state().to_vec(),
            prev_token: BOS,
            step: 1,
        }
    }

    /// Replaces the token the next step conditions on.
    pub fn with_token(mut self, token: TokenId) -> Self {
        self.prev_token = token;
        self
    }
}

/// Probability vector over the target vocabulary, kept alongside its logs.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution<T> {
    probs: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        let lse = log_sum_exp(logits);
        let log_probs: Vec<T> = logits.iter().map(|&l| l - lse).collect();
        let probs = softmax(logits);
        Self { probs, log_probs }
    }

    /// Validates and wraps an explicit probability vector.
    pub fn from_probs(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= T::zero())) {
            return Err(Error::Input("probabilities must be non-negative".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-6) {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn log_prob(&self, id: TokenId) -> T {
        self.log_probs[id]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Multinomial draw by inverse CDF.
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(dist: &Distribution<T>, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below u.
    last_nonzero
}

/// Argmax with ties resolved to the lowest id.
pub fn greedy_token<T: Scalar>(dist: &Distribution<T>) -> TokenId {
    let mut best = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > dist.probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepCache<T> {
    pub(crate) input_token: TokenId,
    pub(crate) gru: GruCache<T>,
    pub(crate) hidden: Vec<T>,
    pub(crate) query: Vec<T>,
    pub(crate) weights: Vec<T>,
    pub(crate) context: Vec<T>,
    pub(crate) attended: Vec<T>,
}

pub(crate) struct StepOutput<T> {
    pub scores: Vec<T>,
    pub cache: StepCache<T>,
}

/// One decoder step: recurrent update, bilinear global attention, combine, output scores.
pub(crate) fn step_forward<T: Scalar>(
    params: &ModelParams<T>,
    state: &DecoderState<T>,
    encoded: &EncodedSource<T>,
) -> StepOutput<T> {
    let x = params.target_embed.row(state.prev_token);
    let (hidden, gru_cache) = gru::forward(&params.decoder, x, &state.hidden);

    let query = params.attention.matvec(&hidden);
    let scores: Vec<T> = encoded.annotations.iter().map(|a| dot(a, &query)).collect();
    let weights = softmax(&scores);
    let mut context = vec![T::zero(); hidden.len()];
    for (w, a) in weights.iter().zip(&encoded.annotations) {
        crate::tensor::axpy(*w, a, &mut context);
    }

    let mut joined = Vec::with_capacity(2 * hidden.len());
    joined.extend_from_slice(&context);
    joined.extend_from_slice(&hidden);
    let mut attended = params.combine.matvec(&joined);
    for (v, b) in attended.iter_mut().zip(params.combine_bias.as_slice()) {
        *v = (*v + *b).tanh();
    }
    let mut out = params.output.matvec(&attended);
    for (v, b) in out.iter_mut().zip(params.output_bias.as_slice()) {
        *v = *v + *b;
    }
    StepOutput {
        scores: out,
        cache: StepCache {
            input_token: state.prev_token,
            gru: gru_cache,
            hidden,
            query,
            weights,
            context,
            attended,
        },
    }
}

/// Computes `p(· | s_t)` and the successor state. The successor conditions on
/// the greedy choice; use [`DecoderState::with_token`] to override it.
pub fn decode_step<T: Scalar>(
    params: &ModelParams<T>,
    state: &DecoderState<T>,
    encoded: &EncodedSource<T>,
) -> (Distribution<T>, DecoderState<T>) {
    let out = step_forward(params, state, encoded);
    let dist = Distribution::from_logits(&out.scores);
    let next = DecoderState {
        hidden: out.cache.hidden,
        prev_token: greedy_token(&dist),
        step: state.step + 1,
    };
    (dist, next)
}

/// One emitted (or forced) token together with everything needed to learn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<T> {
    pub token: TokenId,
    pub log_prob: T,
    pub entropy: T,
    pub forced: bool,
    pub dist: Distribution<T>,
    pub(crate) cache: Option<StepCache<T>>,
}

impl<T> StepRecord<T> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }
}

/// Cached forward pass of the actor over one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace<T> {
    pub(crate) encoded: EncodedSource<T>,
    pub steps: Vec<StepRecord<T>>,
}

impl<T: Scalar> DecodeTrace<T> {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn source(&self) -> &[TokenId] {
        self.encoded.source()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `Σ_t log p(ŷ_t | s_t)`.
    pub fn log_likelihood(&self) -> T {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

/// Incremental decoder that records every step it takes.
pub struct Rollout<'p, T> {
    params: &'p ModelParams<T>,
    trace: DecodeTrace<T>,
    state: DecoderState<T>,
    pending: Option<(StepOutput<T>, Distribution<T>)>,
}

impl<'p, T: Scalar> Rollout<'p, T> {
    pub fn new(params: &'p ModelParams<T>, source: &[TokenId]) -> Result<Self> {
        let encoded = encode(params, source)?;
        let state = DecoderState::initial(&encoded);
        Ok(Self {
            params,
            trace: DecodeTrace {
                encoded,
                steps: Vec::new(),
            },
            state,
            pending: None,
        })
    }

    /// Distribution for the next position (computed once per position).
    pub fn distribution(&mut self) -> &Distribution<T> {
        if self.pending.is_none() {
            let out = step_forward(self.params, &self.state, &self.trace.encoded);
            let dist = Distribution::from_logits(&out.scores);
            self.pending = Some((out, dist));
        }
        &self.pending.as_ref().expect("just filled").1
    }

    /// Commits `token` at the current position.
    pub fn push(&mut self, token: TokenId, forced: bool) -> &StepRecord<T> {
        self.distribution();
        let (out, dist) = self.pending.take().expect("distribution computed");
        let record = StepRecord {
            token,
            log_prob: dist.log_prob(token),
            entropy: gate::step_entropy(&dist),
            forced,
            dist,
            cache: Some(out.cache),
        };
        self.state = DecoderState {
            hidden: record.cache.as_ref().expect("fresh cache").hidden.clone(),
            prev_token: token,
            step: self.state.step + 1,
        };
        self.trace.steps.push(record);
        self.trace.steps.last().expect("just pushed")
    }

    pub fn steps(&self) -> &[StepRecord<T>] {
        &self.trace.steps
    }

    pub fn len(&self) -> usize {
        self.trace.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.steps.is_empty()
    }

    pub fn into_trace(self) -> DecodeTrace<T> {
        self.trace
    }
}

/// Runs the actor over fixed `tokens` (forced decoding / teacher forcing).
pub fn teacher_force<T: Scalar>(
    params: &ModelParams<T>,
    source: &[TokenId],
    tokens: &[TokenId],
) -> Result<DecodeTrace<T>> {
    check_targets(params, tokens)?;
    let mut rollout = Rollout::new(params, source)?;
    for &tok in tokens {
        rollout.push(tok, true);
    }
    Ok(rollout.into_trace())
}

/// Greedy decoding until eos or `max_len` tokens.
pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    source: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let encoded = encode(params, source)?;
    let mut state = DecoderState::initial(&encoded);
    let mut out = Vec::new();
    while out.len() < max_len {
        let (dist, next) = decode_step(params, &state, &encoded);
        let tok = greedy_token(&dist);
        out.push(tok);
        if tok == EOS {
            break;
        }
        state = next.with_token(tok);
    }
    Ok(out)
}

/// Raw (unnormalized) output scores of a teacher-forced pass, with caches.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePass<T> {
    pub(crate) encoded: EncodedSource<T>,
    pub scores: Vec<Vec<T>>,
    pub tokens: Vec<TokenId>,
    pub(crate) caches: Vec<StepCache<T>>,
}

pub fn score_pass<T: Scalar>(
    params: &ModelParams<T>,
    source: &[TokenId],
    prefix: &[TokenId],
) -> Result<ScorePass<T>> {
    if prefix.is_empty() {
        return Err(Error::Input("critic prefix must be non-empty".into()));
    }
    check_targets(params, prefix)?;
    let encoded = encode(params, source)?;
    let mut state = DecoderState::initial(&encoded);
    let mut scores = Vec::with_capacity(prefix.len());
    let mut caches = Vec::with_capacity(prefix.len());
    for &tok in prefix {
        let out = step_forward(params, &state, &encoded);
        state = DecoderState {
            hidden: out.cache.hidden.clone(),
            prev_token: tok,
            step: state.step + 1,
        };
        scores.push(out.scores);
        caches.push(out.cache);
    }
    Ok(ScorePass {
        encoded,
        scores,
        tokens: prefix.to_vec(),
        caches,
    })
}

/// Per-step, per-action reward estimates `Q̂(v | s_t)` for `t = 1..=|prefix|`.
pub fn critic_scores<T: Scalar>(
    critic: &ModelParams<T>,
    source: &[TokenId],
    prefix: &[TokenId],
) -> Result<Vec<Vec<T>>> {
    Ok(score_pass(critic, source, prefix)?.scores)
}

fn check_targets<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<()> {
    let v = params.dims().target_vocab;
    match tokens.iter().find(|&&t| t >= v) {
        Some(bad) => Err(Error::Shape(format!("target id {bad} outside vocabulary of {v}"))),
        None => Ok(()),
    }
}
