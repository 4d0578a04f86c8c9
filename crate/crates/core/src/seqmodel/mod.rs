//! Attention encoder-decoder used for both the actor (softmax policy head) and
//! the critic (unbounded per-action reward head), with hand-written gradients.
//!
//! Encoder: single-layer unidirectional GRU over source embeddings.
//! Decoder: GRU initialised from the final encoder state, bilinear global
//! attention `softmax_j(a_j · W_a s_t)`, a `tanh` combine layer over
//! `[context; s_t]` and a linear output layer.

mod backward;
mod decode;
mod gru;
mod params;

pub use backward::{backprop_scores, backprop_weighted_logprob, finite_diff_check, GradCheckReport};
pub use decode::{
    critic_scores, decode_step, encode, greedy_decode, greedy_token, sample_token, score_pass,
    teacher_force, DecodeTrace, DecoderState, Distribution, EncodedSource, Rollout, ScorePass,
    StepCache, StepRecord,
};
pub use params::{GruParams, Gradients, ModelDims, ModelParams, INIT_SCALE, TENSOR_NAMES};
