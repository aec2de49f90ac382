//! Python bindings for the augmentation pipeline.
//!
//! Exposes the n-gram model, ranking metrics, the synthetic corpus and the
//! augmentation stage. Long-running calls release the GIL.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hardneg::corpus::{
    load_dataset, write_dataset, write_dataset_with_header, Conversation, Format, Split, TokenizerMode,
    UtterancePool,
};
use hardneg::gen::GenConfig;
use hardneg::keywords::{IdfTable, KeywordExtractor, Stopwords};
use hardneg::lm::{perplexity, score_sequence, train_ngram, LanguageModel, NGramLM, TokenId};
use hardneg::metrics::{aggregate, RankedList};
use hardneg::select::{augment_dataset, resolve_threshold, Ablation, AugmentConfig, ThresholdSpec};
use hardneg::synthetic::{one_to_one, SyntheticConfig};
use hardneg::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Parse { .. }
        | Error::EmptyDataset
        | Error::TabInUtterance { .. }
        | Error::Config(_)
        | Error::Invalid(_)
        | Error::EmptyResponse
        | Error::ModelFormat(_)
        | Error::RankOutOfRange { .. }
        | Error::CandidateCount { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn load(path: &PathBuf, split: Split) -> PyResult<hardneg::corpus::Dataset> {
    load_dataset(path, Format::from_path(path), split).map_err(to_py)
}

/// Interpolated Kneser-Ney n-gram language model.
#[pyclass(name = "NGramModel", module = "hardneg_py", frozen)]
struct PyNGramModel {
    inner: NGramLM,
}

#[pymethods]
impl PyNGramModel {
    /// Trains on the positive examples of a TSV or JSONL dataset.
    #[staticmethod]
    #[pyo3(signature = (path, order = 3, tokenizer = "whitespace"))]
    fn train(py: Python<'_>, path: PathBuf, order: usize, tokenizer: &str) -> PyResult<Self> {
        let mode: TokenizerMode = parse(tokenizer)?;
        let ds = load(&path, Split::Train)?;
        let inner = py.detach(|| train_ngram(&ds, order, mode)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NGramLM::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.inner.tokenizer().tokenize(text)
    }

    fn detokenize(&self, ids: Vec<TokenId>) -> String {
        self.inner.tokenizer().detokenize(&ids)
    }

    /// Next-token probabilities over the whole vocabulary.
    fn next_token_dist(&self, context: Vec<TokenId>) -> PyResult<Vec<f64>> {
        let v = self.inner.vocab_size();
        if let Some(bad) = context.iter().find(|&&t| t as usize >= v) {
            return Err(PyValueError::new_err(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(self.inner.next_token_dist(&context).map_err(to_py)?.into_vec())
    }

    /// `(log_prob, perplexity)` of `response` after the history turns.
    fn score(&self, history: Vec<String>, response: &str) -> PyResult<(f64, f64)> {
        let conv = Conversation::from_texts("py", &history).map_err(to_py)?;
        let ids = self.inner.tokenizer().tokenize(response);
        let s = score_sequence(&self.inner, &conv, &ids).map_err(to_py)?;
        Ok((s.log_prob, perplexity(&s)))
    }

    fn __repr__(&self) -> String {
        format!("NGramModel(order={}, vocab_size={})", self.inner.order(), self.inner.vocab_size())
    }
}

/// Aggregated ranking metrics for lists of `(score, relevant)` pairs.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, lists: Vec<Vec<(f64, bool)>>) -> PyResult<Bound<'py, PyDict>> {
    let ranked = lists
        .into_iter()
        .enumerate()
        .map(|(i, l)| RankedList::new(i.to_string(), l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let report = aggregate(&ranked);
    let d = PyDict::new(py);
    for (name, v) in report.columns() {
        d.set_item(name, v)?;
    }
    d.set_item("contexts_evaluated", report.contexts_evaluated)?;
    d.set_item("contexts_skipped", report.contexts_skipped)?;
    Ok(d)
}

/// Writes a seeded topical 1:1 corpus. Splits drawn with the same
/// `vocab_seed` share a vocabulary.
#[pyfunction]
#[pyo3(signature = (path, dialogues = 500, seed = 0, split = "train", vocab_seed = 0))]
fn synthetic_corpus(path: PathBuf, dialogues: usize, seed: u64, split: &str, vocab_seed: u64) -> PyResult<usize> {
    let ds = one_to_one(&SyntheticConfig {
        dialogues,
        seed,
        vocab_seed,
        split: parse(split)?,
        ..Default::default()
    })
    .map_err(to_py)?;
    write_dataset(&ds, &path, Format::from_path(&path)).map_err(to_py)?;
    Ok(ds.len())
}

/// Adds one selected negative per context of a 1:1 dataset and writes the
/// result. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (train, model, output, seed, threshold = "q0.5", ablation = "none"))]
fn augment<'py>(
    py: Python<'py>,
    train: PathBuf,
    model: &PyNGramModel,
    output: PathBuf,
    seed: u64,
    threshold: &str,
    ablation: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let spec: ThresholdSpec = parse(threshold)?;
    let ablation: Ablation = parse(ablation)?;
    let ds = load(&train, Split::Train)?;
    let lm = &model.inner;
    let (aug, tau) = py
        .detach(|| {
            let mode = lm.tokenizer().mode();
            let ex = KeywordExtractor::new(IdfTable::build(&ds, mode), Stopwords::default_list(), mode);
            let tau = resolve_threshold(spec, lm, &ds)?;
            let cfg = AugmentConfig {
                gen: GenConfig::default(),
                tau,
                seed,
                ablation,
            };
            let pool = UtterancePool::new(&ds);
            let aug = augment_dataset(&ds, lm, &pool, &ex, &cfg)?;
            let header = serde_json::json!({
                "tool": "hardneg-py",
                "seed": seed,
                "threshold": spec.to_string(),
                "tau": tau,
                "ablation": ablation.as_str(),
            });
            write_dataset_with_header(&aug.dataset, &output, Format::from_path(&output), Some(&header))?;
            Ok::<_, Error>((aug, tau))
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("contexts", aug.audit.len())?;
    d.set_item("examples", aug.dataset.len())?;
    d.set_item("tau", tau)?;
    let fallbacks = aug
        .audit
        .iter()
        .filter(|a| a.selection.origin == "fallback-random")
        .count();
    d.set_item("fallbacks", fallbacks)?;
    Ok(d)
}

#[pymodule]
fn hardneg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNGramModel>()?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
