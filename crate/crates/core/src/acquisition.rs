//! Uncertainty scores over MC-dropout predictions and top-k selection.
//! All logarithms are natural, so entropy and BALD are in nats.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::McPrediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Entropy,
    Bald,
    Vr,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Entropy, Strategy::Bald, Strategy::Vr, Strategy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::Bald => "bald",
            Strategy::Vr => "vr",
            Strategy::Random => "random",
        }
    }

    /// Whether selection depends on model predictions.
    pub fn uses_model(self) -> bool {
        self != Strategy::Random
    }

    pub fn score(self, pred: &McPrediction) -> Option<f64> {
        match self {
            Strategy::Entropy => Some(score_entropy(pred)),
            Strategy::Bald => Some(score_bald(pred)),
            Strategy::Vr => Some(score_vr(pred)),
            Strategy::Random => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (valid: entropy, bald, vr, random)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub pool_index: usize,
    pub strategy: Strategy,
    pub value: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Predictive entropy of the MC mean.
pub fn score_entropy(pred: &McPrediction) -> f64 {
    entropy(pred.mean()).max(0.0)
}

/// Mutual information between the prediction and the weights: entropy of
/// the mean minus the mean entropy of the samples.
///
/// Computed as the average KL divergence of each sample from the mean,
/// which is the same quantity but is exactly zero when all samples agree.
pub fn score_bald(pred: &McPrediction) -> f64 {
    let mean = pred.mean();
    let t = pred.num_samples() as f64;
    let mi = pred
        .samples()
        .iter()
        .map(|s| {
            s.iter()
                .zip(mean)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / t;
    mi.clamp(0.0, score_entropy(pred))
}

/// One minus the largest mean class probability.
pub fn score_vr(pred: &McPrediction) -> f64 {
    let max = pred.mean().iter().cloned().fold(0.0, f64::max);
    (1.0 - max).max(0.0)
}

pub fn score_all(preds: &[McPrediction], strategy: Strategy) -> Result<Vec<AcquisitionScore>> {
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let value = strategy
                .score(p)
                .ok_or_else(|| Error::InvalidArgument("random acquisition has no score".into()))?;
            Ok(AcquisitionScore {
                pool_index: i,
                strategy,
                value,
            })
        })
        .collect()
}

/// The `k` highest-scoring pool indices, highest first; equal scores go to
/// the lower pool index.
pub fn select_top_k(scores: &[AcquisitionScore], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot acquire {k} points from a pool of {}",
            scores.len()
        )));
    }
    let mut order: Vec<&AcquisitionScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .unwrap_or(Ordering::Equal)
            .then(a.pool_index.cmp(&b.pool_index))
    });
    Ok(order.into_iter().take(k).map(|s| s.pool_index).collect())
}

/// `k` distinct uniformly drawn indices of `0..pool_size`.
pub fn select_random<R: Rng + ?Sized>(pool_size: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > pool_size {
        return Err(Error::InvalidArgument(format!(
            "cannot acquire {k} points from a pool of {pool_size}"
        )));
    }
    Ok(rand::seq::index::sample(rng, pool_size, k).into_vec())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::rng::SimRng;

    fn pred(samples: Vec<Vec<f64>>) -> McPrediction {
        McPrediction::from_samples(samples).unwrap()
    }

    fn scores(values: &[f64]) -> Vec<AcquisitionScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| AcquisitionScore {
                pool_index: i,
                strategy: Strategy::Entropy,
                value: v,
            })
            .collect()
    }

    #[test]
    fn entropy_cases() {
        let uniform = pred(vec![vec![0.1; 10]]);
        assert!((score_entropy(&uniform) - 10f64.ln()).abs() < 1e-12);
        let certain = pred(vec![vec![0.0, 1.0, 0.0]; 4]);
        assert_eq!(score_entropy(&certain), 0.0);
        let split = pred(vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        assert!((score_entropy(&split) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bald_cases() {
        let same = pred(vec![vec![0.2, 0.3, 0.5]; 7]);
        assert_eq!(score_bald(&same), 0.0);
        let split = pred(vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        // ln 2 + 0.9 ln 0.9 + 0.1 ln 0.1
        let expected = 2f64.ln() + 0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln();
        assert!((score_bald(&split) - expected).abs() < 1e-12);
        assert!((score_bald(&split) - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn vr_cases() {
        assert_eq!(score_vr(&pred(vec![vec![0.0, 1.0]])), 0.0);
        assert_eq!(score_vr(&pred(vec![vec![0.9, 0.1], vec![0.1, 0.9]])), 0.5);
        assert!((score_vr(&pred(vec![vec![0.1; 10]])) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn top_k_ordering_and_ties() {
        assert_eq!(select_top_k(&scores(&[3.0, 1.0, 2.0]), 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_k(&scores(&[1.0; 5]), 2).unwrap(), vec![0, 1]);
        assert!(select_top_k(&scores(&[1.0; 3]), 4).is_err());
    }

    #[test]
    fn random_selection() {
        let mut rng = SimRng::seed_from_u64(3);
        let mut all = select_random(7, 7, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        let a = select_random(200, 10, &mut SimRng::seed_from_u64(1)).unwrap();
        let b = select_random(200, 10, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(select_random(5, 6, &mut rng).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("BALD".parse::<Strategy>().unwrap(), Strategy::Bald);
        let err = "margin".parse::<Strategy>().unwrap_err().to_string();
        assert!(err.contains("entropy, bald, vr, random"));
    }
}
