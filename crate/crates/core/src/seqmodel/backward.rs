use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{add_assign, axpy, dot};

use super::decode::{teacher_force, DecodeTrace, EncodedSource, ScorePass, StepCache};
use super::gru;
use super::params::{Gradients, ModelParams};

/// Backpropagation through time given `∂J/∂scores_t` for every step.
fn backward_core<T: Scalar>(
    params: &ModelParams<T>,
    encoded: &EncodedSource<T>,
    caches: &[&StepCache<T>],
    dscores: &[Vec<T>],
) -> Gradients<T> {
    let dims = params.dims();
    let h = dims.hidden;
    let mut g = Gradients::zeros(dims);
    let grads = &mut g.0;
    let n = encoded.len();
    let mut d_ann = vec![vec![T::zero(); h]; n];
    let mut ds_next = vec![T::zero(); h];
    let zero = T::zero();

    for (c, dout) in caches.iter().zip(dscores).rev() {
        let mut ds = std::mem::replace(&mut ds_next, vec![zero; h]);
        let active = dout.iter().any(|&v| v != zero);
        if active {
            // output layer
            grads.output.add_outer(dout, &c.attended);
            grads.output_bias.add_column(dout);
            let mut d_att = vec![zero; h];
            params.output.t_matvec_acc(dout, &mut d_att);

            // combine layer: attended = tanh(W_c [context; hidden] + b_c)
            let du: Vec<T> = d_att
                .iter()
                .zip(&c.attended)
                .map(|(&d, &a)| d * (T::one() - a * a))
                .collect();
            let mut joined = Vec::with_capacity(2 * h);
            joined.extend_from_slice(&c.context);
            joined.extend_from_slice(&c.hidden);
            grads.combine.add_outer(&du, &joined);
            grads.combine_bias.add_column(&du);
            let mut d_joined = vec![zero; 2 * h];
            params.combine.t_matvec_acc(&du, &mut d_joined);
            let (d_ctx, d_hid) = d_joined.split_at(h);
            add_assign(&mut ds, d_hid);

            // attention: context = Σ_j α_j a_j, α = softmax(a_j · W_a s)
            let d_alpha: Vec<T> = encoded.annotations.iter().map(|a| dot(a, d_ctx)).collect();
            let mean = dot(&c.weights, &d_alpha);
            let mut dq = vec![zero; h];
            for (j, a) in encoded.annotations.iter().enumerate() {
                let w = c.weights[j];
                axpy(w, d_ctx, &mut d_ann[j]);
                let dscore = w * (d_alpha[j] - mean);
                axpy(dscore, &c.query, &mut d_ann[j]);
                axpy(dscore, a, &mut dq);
            }
            grads.attention.add_outer(&dq, &c.hidden);
            params.attention.t_matvec_acc(&dq, &mut ds);
        }

        if ds.iter().all(|&v| v == zero) {
            continue;
        }
        let x = params.target_embed.row(c.input_token);
        let (dh_prev, dx) = gru::backward(&params.decoder, &mut grads.decoder, x, &c.gru, &ds);
        add_assign(grads.target_embed.row_mut(c.input_token), &dx);
        ds_next = dh_prev;
    }

    // The decoder starts from the final encoder state.
    add_assign(&mut d_ann[n - 1], &ds_next);

    let mut dh_next = vec![zero; h];
    for j in (0..n).rev() {
        let mut dh = std::mem::take(&mut d_ann[j]);
        add_assign(&mut dh, &dh_next);
        if dh.iter().all(|&v| v == zero) {
            dh_next = vec![zero; h];
            continue;
        }
        let tok = encoded.source()[j];
        let x = params.source_embed.row(tok);
        let (dh_prev, dx) =
            gru::backward(&params.encoder, &mut grads.encoder, x, &encoded.caches()[j], &dh);
        add_assign(grads.source_embed.row_mut(tok), &dx);
        dh_next = dh_prev;
    }
    g
}

/// `∇_θ Σ_t w_t · log p_θ(ŷ_t | s_t)` over the recorded token choices.
pub fn backprop_weighted_logprob<T: Scalar>(
    params: &ModelParams<T>,
    trace: &DecodeTrace<T>,
    weights: &[T],
) -> Result<Gradients<T>> {
    if weights.len() != trace.steps.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} steps",
            weights.len(),
            trace.steps.len()
        )));
    }
    if trace.encoded.source().is_empty() {
        return Err(Error::State("trace has no encoder activations".into()));
    }
    let caches = trace
        .steps
        .iter()
        .map(|s| s.cache.as_ref())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::State("step activation cache missing".into()))?;
    let dscores: Vec<Vec<T>> = trace
        .steps
        .iter()
        .zip(weights)
        .map(|(s, &w)| {
            // d log softmax_y / d logits = onehot(y) - p
            let mut d: Vec<T> = s.dist.probs().iter().map(|&p| -w * p).collect();
            d[s.token] = d[s.token] + w;
            d
        })
        .collect();
    Ok(backward_core(params, &trace.encoded, &caches, &dscores))
}

/// Gradient of any loss given its derivative with respect to the raw scores.
pub fn backprop_scores<T: Scalar>(
    params: &ModelParams<T>,
    pass: &ScorePass<T>,
    dscores: &[Vec<T>],
) -> Result<Gradients<T>> {
    if dscores.len() != pass.caches.len() {
        return Err(Error::Shape(format!(
            "{} score gradients for {} steps",
            dscores.len(),
            pass.caches.len()
        )));
    }
    let v = params.dims().target_vocab;
    if let Some(bad) = dscores.iter().find(|d| d.len() != v) {
        return Err(Error::Shape(format!("score gradient of length {} (vocab {v})", bad.len())));
    }
    let caches: Vec<&StepCache<T>> = pass.caches.iter().collect();
    Ok(backward_core(params, &pass.encoded, &caches, dscores))
}

/// Objective used by [`finite_diff_check`]: teacher-forced `Σ_t w_t log p(y_t)`.
fn weighted_objective<T: Scalar>(
    params: &ModelParams<T>,
    source: &[TokenId],
    target: &[TokenId],
    weights: &[T],
) -> Result<T> {
    let trace = teacher_force(params, source, target)?;
    Ok(trace
        .steps
        .iter()
        .zip(weights)
        .map(|(s, &w)| w * s.log_prob)
        .sum())
}

/// Result of comparing the analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / (|numeric| + 1e-10)` over all parameters.
    pub max_rel_error: f64,
    /// Same maximum, per tensor, in tensor order.
    pub per_tensor: Vec<(&'static str, f64)>,
    pub checked: usize,
}

/// Checks [`backprop_weighted_logprob`] on a teacher-forced pair with per-step
/// weights against central differences with step `epsilon`.
pub fn finite_diff_check<T: Scalar>(
    params: &ModelParams<T>,
    source: &[TokenId],
    target: &[TokenId],
    weights: &[T],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let trace = teacher_force(params, source, target)?;
    let analytic = backprop_weighted_logprob(params, &trace, weights)?;
    let mut probe = params.clone();
    let eps = T::of(epsilon);
    let two_eps = T::of(2.0 * epsilon);
    let mut per_tensor = Vec::with_capacity(13);
    let mut overall = 0.0f64;
    let mut checked = 0;
    for (ti, (name, grad)) in analytic.named_tensors().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..grad.as_slice().len() {
            let orig = probe.tensors()[ti].as_slice()[k];
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig + eps;
            let plus = weighted_objective(&probe, source, target, weights)?;
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig - eps;
            let minus = weighted_objective(&probe, source, target, weights)?;
            probe.tensors_mut()[ti].as_mut_slice()[k] = orig;
            let numeric = ((plus - minus) / two_eps).as_f64();
            let a = grad.as_slice()[k].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-10);
            worst = worst.max(rel);
            checked += 1;
        }
        overall = overall.max(worst);
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport {
        max_rel_error: overall,
        per_tensor,
        checked,
    })
}
