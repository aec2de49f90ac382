use crate::error::{Error, Result};
use crate::lm::TokenId;

/// Slack used when comparing cumulative nucleus mass against `p`, so that a
/// prefix summing to `p` up to rounding counts as reaching it.
pub const NUCLEUS_EPS: f64 = 1e-12;

/// A dense probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Wraps a vector after checking it is a distribution (entries >= 0,
    /// finite, summing to 1 within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("distribution has negative or non-finite entries".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Invalid("weights cannot be normalized".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self(weights))
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Token ids sorted by descending probability, ties by ascending id.
pub fn ranked_tokens(dist: &ProbDist) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..dist.len() as TokenId).collect();
    // Stable sort keeps ascending id order among equal probabilities.
    ids.sort_by(|&a, &b| dist.prob(b).total_cmp(&dist.prob(a)));
    ids
}

/// The smallest probability-ranked prefix whose mass reaches `p`.
pub fn nucleus(dist: &ProbDist, p: f64) -> Vec<TokenId> {
    assert!(p > 0.0 && p <= 1.0, "top-p must lie in (0, 1], got {p}");
    let ranked = ranked_tokens(dist);
    let mut cumulative = 0.0;
    let mut out = Vec::new();
    for id in ranked {
        let q = dist.prob(id);
        if q <= 0.0 {
            break;
        }
        out.push(id);
        cumulative += q;
        if cumulative >= p - NUCLEUS_EPS {
            break;
        }
    }
    out
}

/// Nucleus (top-p) filtering: keeps [`nucleus`] and renormalizes it,
/// zeroing every other entry. `p = 1` returns the input unchanged.
pub fn top_p_filter(dist: &ProbDist, p: f64) -> ProbDist {
    assert!(p > 0.0 && p <= 1.0, "top-p must lie in (0, 1], got {p}");
    if p >= 1.0 {
        return dist.clone();
    }
    let keep = nucleus(dist, p);
    let mass: f64 = keep.iter().map(|&t| dist.prob(t)).sum();
    let mut out = vec![0.0; dist.len()];
    for t in keep {
        out[t as usize] = dist.prob(t) / mass;
    }
    ProbDist(out)
}
