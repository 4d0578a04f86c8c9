mod common;

use bip_core::biploop::{evaluate, perplexity, pretrain, PretrainConfig, RateSchedule};
use bip_core::config::ModelConfig;
use bip_core::corpus::{SentencePair, EOS};
use bip_core::metrics::ChrfConfig;
use bip_core::rlcore::OptimConfig;
use bip_core::ActorParams;

#[test]
fn synthetic_pretraining_reaches_low_perplexity() {
    let splits = common::synthetic(10);
    let (_, ppl) = common::pretrained(&splits, 1, &PretrainConfig::default());
    assert!(ppl < 1.5, "validation perplexity {ppl}");
}

#[test]
fn one_epoch_on_one_pair_lowers_perplexity() {
    let splits = common::synthetic(1);
    let dims = ModelConfig::default().dims(&splits.vocabs).unwrap();
    let mut actor = ActorParams::init(dims, 4).unwrap();
    let pair = vec![splits.train[0].clone()];
    let before = perplexity(&actor, &pair).unwrap();
    let cfg = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let report = pretrain(&mut actor, &pair, &pair, &cfg, &OptimConfig::default(), |_| {}).unwrap();
    assert_eq!(report.initial_perplexity, before);
    let after = perplexity(&actor, &pair).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn two_late_increases_quarter_the_rate() {
    let mut s = RateSchedule::new(1e-3, 5, 0.5);
    for (epoch, ppl) in [(1, 9.0), (2, 9.5), (3, 8.0), (4, 7.0), (5, 7.5), (6, 7.0), (7, 7.2)] {
        s.observe(epoch, ppl);
    }
    assert_eq!(s.rate(), 1e-3 / 4.0);
}

#[test]
fn epoch_reports_follow_the_schedule() {
    let splits = common::synthetic(1);
    let dims = ModelConfig {
        embed: 8,
        hidden: 8,
        seed: 1,
    }
    .dims(&splits.vocabs)
    .unwrap();
    let mut actor = ActorParams::init(dims, 1).unwrap();
    let cfg = PretrainConfig {
        epochs: 6,
        ..PretrainConfig::default()
    };
    let mut seen = Vec::new();
    let report = pretrain(&mut actor, &splits.train[..200], &splits.valid, &cfg, &OptimConfig::default(), |e| {
        seen.push(*e)
    })
    .unwrap();
    assert_eq!(report.epochs, seen);
    let mut oracle = RateSchedule::new(cfg.rate, cfg.decay_start, cfg.decay_factor);
    for e in &seen {
        assert_eq!(e.rate, oracle.rate());
        oracle.observe(e.epoch, e.valid_perplexity);
    }
    let best = seen.iter().map(|e| e.valid_perplexity).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_perplexity, best);
    assert_eq!(perplexity(&actor, &splits.valid).unwrap(), best);
}

#[test]
fn memorized_pair_scores_perfectly() {
    let splits = common::synthetic(1);
    let dims = ModelConfig::default().dims(&splits.vocabs).unwrap();
    let mut actor = ActorParams::init(dims, 2).unwrap();
    let pair = SentencePair::new(splits.vocabs.source.encode(&common::words("s3 s1 s4 s9")), vec![7, 4, 12, 5, EOS])
        .unwrap();
    let data = vec![pair.clone()];
    let cfg = PretrainConfig {
        epochs: 400,
        rate: 3e-3,
        decay_factor: 1.0,
        stop_below: Some(1.05),
        ..PretrainConfig::default()
    };
    let fit = pretrain(&mut actor, &data, &data, &cfg, &OptimConfig::default(), |_| {}).unwrap();
    assert!(fit.best_perplexity < 1.05, "perplexity {}", fit.best_perplexity);
    let reference = splits.vocabs.target.decode_text(&pair.target);
    let report = evaluate(
        &actor,
        std::slice::from_ref(&pair.source),
        &[reference],
        &splits.vocabs.target,
        50,
        &ChrfConfig::default(),
    )
    .unwrap();
    assert_eq!(report.avg_chrf, 1.0);
    assert!((report.bleu - 100.0).abs() < 1e-9, "bleu {}", report.bleu);
}

#[test]
fn random_model_scores_low_and_evaluation_is_deterministic() {
    let splits = common::synthetic(1);
    let dims = ModelConfig::default().dims(&splits.vocabs).unwrap();
    let actor = ActorParams::init(dims, 8).unwrap();
    let (src, refs) = common::test_set(&splits);
    let eval = || evaluate(&actor, &src, &refs, &splits.vocabs.target, 50, &ChrfConfig::default()).unwrap();
    let a = eval();
    assert!(a.avg_chrf < 0.3, "chrF {}", a.avg_chrf);
    assert_eq!(a, eval());
    assert!(evaluate(&actor, &src[..2], &refs[..1], &splits.vocabs.target, 50, &ChrfConfig::default()).is_err());
}
