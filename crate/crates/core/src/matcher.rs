//! Logistic response-selection model over lexical overlap features.
//!
//! All five features lie in `[0, 1]`; overlap features are normalized by
//! the response length (idf-weighted where stated). The model scores
//! `σ(w·f + b)` and is trained by full-batch gradient descent on the mean
//! logistic loss plus `(λ/2)‖w‖²`; the bias is not penalized.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::corpus::{Conversation, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::keywords::KeywordExtractor;
use crate::seed::rng_from_seed;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "context_overlap",
    "last_turn_overlap",
    "keyword_overlap",
    "length_ratio",
    "response_idf_mean",
];
pub const NUM_FEATURES: usize = 5;
/// Keywords of the context used by `keyword_overlap`.
pub const FEATURE_KEYWORDS: usize = 5;

const MAGIC: &str = "hardneg-matcher";
const VERSION: u32 = 1;

pub type FeatureVector = [f64; NUM_FEATURES];

/// Computes the feature vector of `(context, response)`.
///
/// * `context_overlap`: idf mass of response tokens found anywhere in the
///   context over the idf mass of the response.
/// * `last_turn_overlap`: share of response tokens found in the last turn.
/// * `keyword_overlap`: share of response tokens that belong to one of the
///   context's top keywords.
/// * `length_ratio`: `|R| / (|R| + mean turn length)`.
/// * `response_idf_mean`: mean response idf over the largest possible idf.
pub fn featurize(context: &Conversation, response: &Utterance, extractor: &KeywordExtractor) -> FeatureVector {
    let mode = extractor.mode;
    let idf = &extractor.idf;
    let resp = mode.split(response.text());
    let turns: Vec<Vec<&str>> = context.texts().map(|t| mode.split(t)).collect();
    let ctx_set: HashSet<&str> = turns.iter().flatten().copied().collect();
    let last_set: HashSet<&str> = turns.last().into_iter().flatten().copied().collect();
    let keywords = extractor.extract(context, FEATURE_KEYWORDS);
    let kw_set: HashSet<&str> = keywords.iter().flat_map(|k| k.tokens.iter().map(String::as_str)).collect();

    if resp.is_empty() {
        return [0.0; NUM_FEATURES];
    }
    let k = resp.len() as f64;
    let weights: Vec<f64> = resp.iter().map(|t| idf.idf(t)).collect();
    let mass: f64 = weights.iter().sum();
    let shared: f64 = resp
        .iter()
        .zip(&weights)
        .filter(|(t, _)| ctx_set.contains(*t))
        .map(|(_, w)| w)
        .sum();
    let share = |set: &HashSet<&str>| resp.iter().filter(|t| set.contains(*t)).count() as f64 / k;
    let turn_tokens: usize = turns.iter().map(Vec::len).sum();
    let mean_turn = turn_tokens as f64 / turns.len() as f64;
    let max_idf = ((1 + idf.doc_count()) as f64).ln() + 1.0;
    [
        shared / mass,
        share(&last_set),
        share(&kw_set),
        k / (k + mean_turn),
        mass / k / max_idf,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 penalty {} must be non-negative", self.l2)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatcherModel {
    pub weights: FeatureVector,
    pub bias: f64,
    pub meta: Option<TrainMeta>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn dot(w: &FeatureVector, x: &FeatureVector) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Regularized mean logistic loss and its gradient `(∂w, ∂b)`. Labels are
/// 0 or 1.
pub fn loss_and_grad(
    weights: &FeatureVector,
    bias: f64,
    xs: &[FeatureVector],
    ys: &[f64],
    l2: f64,
) -> (f64, FeatureVector, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = [0.0; NUM_FEATURES];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(weights, x) + bias;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

impl MatcherModel {
    pub fn zeros() -> Self {
        Self {
            weights: [0.0; NUM_FEATURES],
            bias: 0.0,
            meta: None,
        }
    }

    pub fn score_features(&self, f: &FeatureVector) -> f64 {
        sigmoid(dot(&self.weights, f) + self.bias)
    }

    /// Probability that `response` continues `context`.
    pub fn score(&self, context: &Conversation, response: &Utterance, extractor: &KeywordExtractor) -> f64 {
        self.score_features(&featurize(context, response, extractor))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "features {}", FEATURE_NAMES.join(" "))?;
        writeln!(w, "weights {}", join(&self.weights))?;
        writeln!(w, "bias {}", self.bias)?;
        if let Some(m) = &self.meta {
            writeln!(w, "epochs {}", m.epochs)?;
            writeln!(w, "learning_rate {}", m.learning_rate)?;
            writeln!(w, "l2 {}", m.l2)?;
            writeln!(w, "seed {}", m.seed)?;
            writeln!(w, "initial_loss {}", m.initial_loss)?;
            writeln!(w, "final_loss {}", m.final_loss)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io("<matcher>", e))?
            .unwrap_or_default();
        if header != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("expected header '{MAGIC} {VERSION}', found {header:?}")));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<matcher>", e))?;
            if let Some((k, v)) = line.split_once(' ') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.trim().parse().map_err(|_| bad(format!("bad {k}"))) };

        let names: Vec<&str> = get("features")?.split_whitespace().collect();
        if names != FEATURE_NAMES {
            return Err(bad(format!("feature set {names:?} does not match this version")));
        }
        let ws: Vec<f64> = get("weights")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("bad weight {s:?}"))))
            .collect::<Result<_>>()?;
        let weights: FeatureVector = ws
            .try_into()
            .map_err(|_| bad(format!("expected {NUM_FEATURES} weights")))?;
        let bias = num("bias")?;
        if !(bias.is_finite() && weights.iter().all(|w| w.is_finite())) {
            return Err(bad("non-finite parameter".into()));
        }
        let meta = if fields.contains_key("epochs") {
            Some(TrainMeta {
                epochs: num("epochs")? as usize,
                learning_rate: num("learning_rate")?,
                l2: num("l2")?,
                seed: get("seed")?.trim().parse().map_err(|_| bad("bad seed".into()))?,
                initial_loss: num("initial_loss")?,
                final_loss: num("final_loss")?,
            })
        } else {
            None
        };
        Ok(Self { weights, bias, meta })
    }
}

/// Features and 0/1 labels of every example.
pub fn design_matrix(data: &Dataset, extractor: &KeywordExtractor) -> (Vec<FeatureVector>, Vec<f64>) {
    data.examples
        .iter()
        .map(|e| {
            (
                featurize(&e.context, &e.response, extractor),
                e.label.as_int() as f64,
            )
        })
        .unzip()
}

pub fn train_matcher(train: &Dataset, extractor: &KeywordExtractor, cfg: &TrainConfig) -> Result<MatcherModel> {
    cfg.validate()?;
    let (xs, ys) = design_matrix(train, extractor);
    let pos = ys.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == ys.len() {
        return Err(Error::Training("matcher training needs both positive and negative examples".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut w: FeatureVector = std::array::from_fn(|_| rng.random_range(-0.01..0.01));
    let mut b = 0.0;
    let initial_loss = loss_and_grad(&w, b, &xs, &ys, cfg.l2).0;
    for _ in 0..cfg.epochs {
        let (_, gw, gb) = loss_and_grad(&w, b, &xs, &ys, cfg.l2);
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * gb;
    }
    let final_loss = loss_and_grad(&w, b, &xs, &ys, cfg.l2).0;
    Ok(MatcherModel {
        weights: w,
        bias: b,
        meta: Some(TrainMeta {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            l2: cfg.l2,
            seed: cfg.seed,
            initial_loss,
            final_loss,
        }),
    })
}
