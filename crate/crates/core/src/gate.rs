//! Entropy-gated feedback requests.
//!
//! All entropies are in nats. The log base only rescales both the prefix
//! average and the running average, so the trigger decision does not depend on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::Distribution;

/// Shannon entropy `-Σ_v p(v) ln p(v)`; zero-probability entries contribute 0.
pub fn step_entropy<T: Scalar>(dist: &Distribution<T>) -> T {
    let mut h = T::zero();
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > T::zero() {
            // log_prob is exact in log space even where p underflows slightly
            h = h - p * dist.log_prob(i);
        }
    }
    h.max(T::zero())
}

/// Average per-step entropy of a prefix, counted from the sentence beginning.
pub fn avg_entropy<T: Scalar>(entropies: &[T]) -> Result<T> {
    if entropies.is_empty() {
        return Err(Error::Input("average entropy of an empty prefix".into()));
    }
    let n = T::from_usize(entropies.len()).expect("length fits in a float");
    Ok(entropies.iter().copied().sum::<T>() / n)
}

/// Running average `γ` of prefix-average entropies within one input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTracker {
    gamma: f64,
    steps: u64,
}

impl EntropyTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Advances the step counter to `t` and applies `γ_t = γ_{t-1} + (H̄ − γ_{t-1}) / t`.
    pub fn update(&mut self, avg: f64) {
        self.steps += 1;
        self.gamma += (avg - self.gamma) / self.steps as f64;
    }
}

/// Functional form of [`EntropyTracker::update`].
pub fn update_running(tracker: EntropyTracker, avg: f64) -> EntropyTracker {
    let mut t = tracker;
    t.update(avg);
    t
}

/// `H̄ − γ ≥ ε·γ`, or an end-of-sentence token was produced.
pub fn should_request(avg: f64, tracker: &EntropyTracker, epsilon: f64, eos_seen: bool) -> bool {
    let gamma = tracker.gamma;
    eos_seen || avg - gamma >= epsilon * gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> Distribution<f64> {
        Distribution::from_probs(p.to_vec()).unwrap()
    }

    fn tracker_with(gamma: f64, steps: u64) -> EntropyTracker {
        EntropyTracker { gamma, steps }
    }

    #[test]
    fn entropy_examples() {
        assert!((step_entropy(&dist(&[0.25; 4])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(step_entropy(&dist(&[0.0, 1.0, 0.0])), 0.0);
        assert!((step_entropy(&dist(&[0.5, 0.5, 0.0, 0.0])) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn average_examples() {
        let l4 = 4f64.ln();
        assert!((avg_entropy(&[l4, 0.0]).unwrap() - l4 / 2.0).abs() < 1e-15);
        assert_eq!(avg_entropy(&[0.7]).unwrap(), 0.7);
        assert!((avg_entropy(&[0.3f64; 9]).unwrap() - 0.3).abs() < 1e-15);
        assert!(avg_entropy::<f64>(&[]).is_err());
    }

    #[test]
    fn trigger_examples() {
        let fresh = EntropyTracker::new();
        assert!(should_request(0.0, &fresh, 0.75, false));
        assert!(should_request(3.0, &fresh, 10.0, false));
        let t = tracker_with(1.0, 1);
        assert!(!should_request(1.70, &t, 0.75, false));
        assert!(should_request(1.75, &t, 0.75, false));
        assert!(should_request(0.1, &t, 0.75, true));
    }

    #[test]
    fn running_update_examples() {
        let t = update_running(tracker_with(0.5, 1), 1.5);
        assert_eq!(t.steps(), 2);
        assert_eq!(t.gamma(), 1.0);
        let t = update_running(EntropyTracker::new(), 0.42);
        assert_eq!(t.gamma(), 0.42);
    }

    proptest! {
        #[test]
        fn gamma_is_running_mean(hs in proptest::collection::vec(0.0f64..5.0, 1..200)) {
            let mut t = EntropyTracker::new();
            for &h in &hs {
                t.update(h);
            }
            let mean = hs.iter().sum::<f64>() / hs.len() as f64;
            prop_assert!((t.gamma() - mean).abs() < 1e-12);
        }

        #[test]
        fn larger_margin_never_adds_requests(avg in 0.0f64..5.0, gamma in 0.01f64..5.0, e1 in 0.0f64..2.0, de in 0.0f64..2.0) {
            let t = tracker_with(gamma, 3);
            if should_request(avg, &t, e1 + de, false) {
                prop_assert!(should_request(avg, &t, e1, false));
            }
        }

        #[test]
        fn entropy_bounded_by_log_vocab(raw in proptest::collection::vec(0.0f64..1.0, 2..30)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let n = p.len();
            let h = step_entropy(&Distribution::from_probs(p).unwrap());
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (n as f64).ln() + 1e-12);
        }
    }
}
