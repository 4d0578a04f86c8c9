//! Optimization: Adam with gradient-norm clipping, the advantage estimate,
//! the actor/critic online updates and the supervised MLE step.

use serde::{Deserialize, Serialize};

use crate::corpus::{SentencePair, TokenId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::{
    backprop_scores, backprop_weighted_logprob, score_pass, teacher_force, DecodeTrace,
    Distribution, Gradients, ModelDims, ModelParams, ScorePass,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub actor_rate: f64,
    pub critic_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    /// Constant online rates of 1e-5 for both networks, Adam(0.9, 0.999), clip 5.
    fn default() -> Self {
        Self {
            actor_rate: 1e-5,
            critic_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.actor_rate > 0.0
            && self.critic_rate > 0.0
            && 0.0 < self.beta1
            && self.beta1 < 1.0
            && 0.0 < self.beta2
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: Gradients<T>,
    pub second: Gradients<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            first: Gradients::zeros(dims),
            second: Gradients::zeros(dims),
            step: 0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.first.dims()
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    grads: &Gradients<T>,
    rate: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != adam.dims() {
        return Err(Error::Shape("parameters, gradients and Adam state differ in shape".into()));
    }
    adam.step += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = one - T::of(cfg.beta1.powi(adam.step as i32));
    let c2 = one - T::of(cfg.beta2.powi(adam.step as i32));
    let lr = T::of(rate);
    let eps = T::of(cfg.epsilon);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(adam.first.tensors_mut())
        .zip(adam.second.tensors_mut())
        .zip(grads.tensors());
    for (((p, m), v), g) in tensors {
        for (((p, m), v), &g) in p
            .as_mut_slice()
            .iter_mut()
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
            .zip(g.as_slice())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so that its Euclidean norm is at most `max_norm`.
/// Returns the pre-clipping norm.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.norm().as_f64();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// `Q̂(chosen) − Σ_v p(v) Q̂(v)`.
pub fn advantage<T: Scalar>(dist: &Distribution<T>, q_row: &[T], chosen: TokenId) -> Result<T> {
    if dist.len() != q_row.len() {
        return Err(Error::Shape(format!(
            "distribution of length {} vs score row of length {}",
            dist.len(),
            q_row.len()
        )));
    }
    if chosen >= q_row.len() {
        return Err(Error::Shape(format!("chosen id {chosen} outside row")));
    }
    let baseline: T = dist.probs().iter().zip(q_row).map(|(&p, &q)| p * q).sum();
    Ok(q_row[chosen] - baseline)
}

/// Per-step advantages of the recorded tokens under critic scores `q_rows`.
pub fn advantages<T: Scalar>(trace: &DecodeTrace<T>, q_rows: &[Vec<T>]) -> Result<Vec<T>> {
    if trace.steps.len() != q_rows.len() {
        return Err(Error::Shape("critic rows do not align with actor steps".into()));
    }
    trace
        .steps
        .iter()
        .zip(q_rows)
        .map(|(s, q)| advantage(&s.dist, q, s.token))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub loss: f64,
}

fn apply<T: Scalar>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    mut grads: Gradients<T>,
    rate: f64,
    cfg: &OptimConfig,
    loss: f64,
) -> Result<UpdateReport> {
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient; update skipped".into()));
    }
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
    let before = (params.clone(), adam.clone());
    adam_step(params, adam, &grads, rate, cfg)?;
    if !params.is_finite() {
        (*params, *adam) = before;
        return Err(Error::Numeric("update produced non-finite parameters".into()));
    }
    Ok(UpdateReport {
        grad_norm,
        clipped: grad_norm > cfg.clip_norm,
        loss,
    })
}

/// Gradient descent on `−Σ_t A_t log p(ŷ_t | s_t)` at rate `α_A`.
pub fn actor_update<T: Scalar>(
    actor: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    trace: &DecodeTrace<T>,
    advantages: &[T],
    cfg: &OptimConfig,
) -> Result<UpdateReport> {
    let weights: Vec<T> = advantages.iter().map(|&a| -a).collect();
    let grads = backprop_weighted_logprob(actor, trace, &weights)?;
    let loss = trace
        .steps
        .iter()
        .zip(advantages)
        .map(|(s, &a)| -(a * s.log_prob).as_f64())
        .sum();
    apply(actor, adam, grads, cfg.actor_rate, cfg, loss)
}

/// Mean squared error of `Q̂(ŷ_t | s_t)` against the observed reward.
pub fn critic_loss<T: Scalar>(pass: &ScorePass<T>, reward: f64) -> f64 {
    let n = pass.tokens.len() as f64;
    pass.scores
        .iter()
        .zip(&pass.tokens)
        .map(|(row, &tok)| (row[tok].as_f64() - reward).powi(2))
        .sum::<f64>()
        / n
}

/// One regression step of the critic towards `reward` on every step of the prefix.
pub fn critic_update<T: Scalar>(
    critic: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    pass: &ScorePass<T>,
    reward: f64,
    cfg: &OptimConfig,
) -> Result<UpdateReport> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(Error::Input(format!("reward {reward} outside [0, 1]")));
    }
    let n = T::from_usize(pass.tokens.len()).expect("length fits");
    let r = T::of(reward);
    let two = T::of(2.0);
    let dscores: Vec<Vec<T>> = pass
        .scores
        .iter()
        .zip(&pass.tokens)
        .map(|(row, &tok)| {
            let mut d = vec![T::zero(); row.len()];
            // descent direction: gradient of the loss itself
            d[tok] = two * (row[tok] - r) / n;
            d
        })
        .collect();
    // backprop_scores computes ∇ of Σ dscores·scores, which is ∇loss here.
    let grads = backprop_scores(critic, pass, &dscores)?;
    apply(critic, adam, grads, cfg.critic_rate, cfg, critic_loss(pass, reward))
}

/// Convenience wrapper running the critic forward pass first.
pub fn critic_update_on<T: Scalar>(
    critic: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    source: &[TokenId],
    prefix: &[TokenId],
    reward: f64,
    cfg: &OptimConfig,
) -> Result<UpdateReport> {
    let pass = score_pass(critic, source, prefix)?;
    critic_update(critic, adam, &pass, reward, cfg)
}

/// Negative log-likelihood summed over target tokens and its gradient,
/// for one teacher-forced pair.
pub fn pair_nll_gradient<T: Scalar>(
    params: &ModelParams<T>,
    pair: &SentencePair,
) -> Result<(f64, Gradients<T>)> {
    let trace = teacher_force(params, &pair.source, &pair.target)?;
    let weights = vec![-T::one(); trace.len()];
    let grads = backprop_weighted_logprob(params, &trace, &weights)?;
    Ok((-trace.log_likelihood().as_f64(), grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleReport {
    /// Mean negative log-likelihood per target token.
    pub nll_per_token: f64,
    pub grad_norm: f64,
}

/// Teacher-forced cross-entropy step. The loss is the per-sentence summed
/// NLL averaged over the batch; the report gives NLL per token.
pub fn mle_step<T: Scalar>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &[SentencePair],
    rate: f64,
    cfg: &OptimConfig,
) -> Result<MleReport> {
    if batch.is_empty() {
        return Err(Error::Input("empty MLE batch".into()));
    }
    let mut total = Gradients::zeros(params.dims());
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in batch {
        let (pair_nll, g) = pair_nll_gradient(params, pair)?;
        nll += pair_nll;
        tokens += pair.target.len();
        total.add_assign(&g);
    }
    total.scale(T::one() / T::from_usize(batch.len()).expect("batch size fits"));
    let report = apply(params, adam, total, rate, cfg, nll)?;
    Ok(MleReport {
        nll_per_token: nll / tokens as f64,
        grad_norm: report.grad_norm,
    })
}

/// Mean NLL per token over a corpus without updating anything.
pub fn corpus_nll<T: Scalar>(params: &ModelParams<T>, pairs: &[SentencePair]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let trace = teacher_force(params, &pair.source, &pair.target)?;
        nll -= trace.log_likelihood().as_f64();
        tokens += pair.target.len();
    }
    if tokens == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    Ok(nll / tokens as f64)
}
