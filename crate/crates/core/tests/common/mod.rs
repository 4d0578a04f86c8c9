#![allow(dead_code)]

use bip_core::biploop::PretrainConfig;
use bip_core::config::{ModelConfig, SyntheticData, SyntheticSplits};
use bip_core::corpus::TokenId;
use bip_core::rlcore::OptimConfig;
use bip_core::ActorParams;

pub const EX1_REF: &str =
    "since 2003 , china has become mexico 's most important trading partner after the united states . </s>";
pub const EX2_REF: &str = "the answer that we as individuals accept is that we are free because we rule ourselves in common , rather than being ruled by some agency that need not take account of us . </s>";
pub const EX3_REF: &str =
    "at a jerusalem day rally at tehran university in december 2001 , he uttered one of the regime 's most sinister threats . </s>";

/// (reference, partial, rating) for every rated partial in the three recorded example sessions.
pub const RATED_PARTIALS: [(&str, &str, f64); 17] = [
    (EX1_REF, "since", 1.0),
    (EX1_REF, "since 2003 , china has", 1.0),
    (EX1_REF, "since 2003 , china has become", 1.0),
    (EX1_REF, "since 2003 , china has become mexico", 1.0),
    (EX1_REF, "since 2003 , china has become mexico 's", 1.0),
    (EX1_REF, "since 2003 , china has become mexico 's most", 1.0),
    (EX1_REF, "since 2003 , china has become mexico 's most important", 1.0),
    (
        EX1_REF,
        "since 2003 , china has become mexico 's most important trading partner after the us . </s>",
        0.8823,
    ),
    (EX2_REF, "the", 1.0),
    (EX2_REF, "the answer", 1.0),
    (EX2_REF, "the answer we", 0.6964),
    (EX2_REF, "the answer we ,", 0.6246),
    (EX2_REF, "the answer we as individuals allow to 14 are", 0.6008),
    (
        EX2_REF,
        "the answer we , as individuals , go down to speak 8 , are being free because we govern ourselves , rather from being based together",
        0.5155,
    ),
    (
        EX2_REF,
        "the answer we , as people , accepts is that we principle are free because we govern ourselves , rather than being led by a organisation which has absolutely no need to take our standards . </s>",
        0.5722,
    ),
    (EX3_REF, "in", 0.0),
    (
        EX3_REF,
        "in a round of jerusalem called a academic university in teheran in december 2001 , he declared one in the most recent hostility to the regime . </s>",
        0.5903,
    ),
];

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Desk-scale optimizer: the actor keeps the constant online rate, the
/// critic learns faster so that its value estimates settle within a few
/// hundred ratings.
pub fn desk_optim() -> OptimConfig {
    OptimConfig {
        critic_rate: 1e-3,
        ..OptimConfig::default()
    }
}

/// Desk-scale pretraining. With 2000 pairs the default rate leaves about half
/// of the seeds on a plateau that ignores the source (validation perplexity
/// 6 to 27 after 30 epochs); 3e-3 gets every seed tried below 1.02.
pub fn desk_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig {
        rate: 3e-3,
        seed,
        ..PretrainConfig::default()
    }
}

pub fn synthetic(stream_inputs: usize) -> SyntheticSplits {
    SyntheticData {
        stream_inputs,
        ..SyntheticData::default()
    }
    .splits()
    .unwrap()
}

pub fn sources(splits: &SyntheticSplits) -> Vec<Vec<TokenId>> {
    splits.stream.iter().map(|p| splits.vocabs.source.encode(&p.source)).collect()
}

pub fn references(splits: &SyntheticSplits) -> Vec<Vec<String>> {
    splits.stream.iter().map(|p| p.target.clone()).collect()
}

pub fn test_set(splits: &SyntheticSplits) -> (Vec<Vec<TokenId>>, Vec<Vec<String>>) {
    (
        splits.test.iter().map(|p| splits.vocabs.source.encode(&p.source)).collect(),
        splits.test.iter().map(|p| p.target.clone()).collect(),
    )
}

/// MLE-pretrained actor on the mapping task.
pub fn pretrained(splits: &SyntheticSplits, model_seed: u64, cfg: &PretrainConfig) -> (ActorParams, f64) {
    let dims = ModelConfig::default().dims(&splits.vocabs).unwrap();
    let mut actor = ActorParams::init(dims, model_seed).unwrap();
    let report = bip_core::biploop::pretrain(
        &mut actor,
        &splits.train,
        &splits.valid,
        cfg,
        &OptimConfig::default(),
        |_| {},
    )
    .unwrap();
    (actor, report.best_perplexity)
}
