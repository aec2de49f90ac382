//! Layered settings: a `key=value` file overlaid by command-line options.
//!
//! Every config key is also a long option of the same name, and command-line
//! values replace file values key by key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::Args;
use hardneg::corpus::TokenizerMode;
use hardneg::gen::GenConfig;
use hardneg::lm::{DecodeParams, DEFAULT_ORDER};
use hardneg::matcher::TrainConfig;
use hardneg::metrics::TEST_CANDIDATES;
use hardneg::select::{Ablation, ThresholdSpec};

/// Bad invocation or configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

macro_rules! value_options {
    ($($field:ident => $key:literal : $help:literal),* $(,)?) => {
        /// Value-taking options shared by every subcommand.
        #[derive(Args, Debug, Default, Clone)]
        pub struct ValueOptions {
            $(
                #[arg(long = $key, global = true, value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl ValueOptions {
            fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push(($key, v.clone()));
                    }
                )*
                out
            }
        }

        const VALUE_KEYS: &[&str] = &[$($key),*];
    };
}

value_options! {
    train => "train": "Training dataset (TSV or JSONL)",
    val => "val": "Validation dataset",
    test => "test": "Test dataset with a fixed number of candidates per context",
    pool => "pool": "Dataset whose utterances feed garbling and fallback negatives (default: train)",
    input => "input": "Dataset for garble, keywords, generate, stats and inspect (default: train)",
    output => "output": "Output file",
    lm => "lm": "Language model file",
    matcher => "matcher": "Matcher model file",
    audit => "audit": "Audit trail file (written by augment, read by inspect)",
    stopwords => "stopwords": "Stopword list, one token per line (default: bundled list)",
    idf_corpus => "idf-corpus": "Dataset for idf statistics (default: train)",
    order => "order": "N-gram order",
    tokenizer => "tokenizer": "Tokenizer mode: whitespace or character",
    top_p => "top-p": "Nucleus mass for decoding",
    max_length => "max-length": "Maximum response length in tokens",
    min_length => "min-length": "Minimum response length in tokens",
    n_gen1 => "n-gen1": "Unconstrained candidates per batch",
    n_gen2 => "n-gen2": "Keyword-constrained candidates per batch",
    keyword_top_k => "keyword-top-k": "Keywords considered per conversation",
    threshold => "threshold": "Perplexity threshold: absolute (7.5), quantile (q0.5) or median",
    seed => "seed": "Master seed",
    workers => "workers": "Worker threads (default: all cores)",
    candidates => "candidates": "Candidates per test context",
    context_id => "context-id": "Restrict to one conversation id",
    strategy => "strategy": "Garbling strategy: flow-distortion, context-destruction or both",
    lr => "lr": "Matcher learning rate",
    epochs => "epochs": "Matcher training epochs",
    l2 => "l2": "Matcher L2 penalty",
    lm_command => "lm-command": "Command line of an external language model process",
    lm_timeout => "lm-timeout": "External model reply timeout in seconds",
}

/// Ablation switches; each is also a boolean config key.
#[derive(Args, Debug, Default, Clone)]
pub struct AblationFlags {
    /// Generate from the original history instead of a garbled one
    #[arg(long = "no-garble", global = true)]
    pub no_garble: bool,
    /// Pick a random candidate instead of the highest-perplexity one
    #[arg(long = "no-filter", global = true)]
    pub no_filter: bool,
    /// Fill the whole batch with keyword-constrained candidates
    #[arg(long = "no-gen1", global = true)]
    pub no_gen1: bool,
    /// Fill the whole batch with unconstrained candidates
    #[arg(long = "no-gen2", global = true)]
    pub no_gen2: bool,
    /// Replace generated negatives with random utterances
    #[arg(long = "random-da", global = true)]
    pub random_da: bool,
}

const FLAG_KEYS: [&str; 5] = ["no-garble", "no-filter", "no-gen1", "no-gen2", "random-da"];

impl AblationFlags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        [self.no_garble, self.no_filter, self.no_gen1, self.no_gen2, self.random_da]
            .into_iter()
            .zip(FLAG_KEYS)
            .filter(|(on, _)| *on)
            .map(|(_, k)| (k, "true".to_string()))
            .collect()
    }
}

/// Raw string settings after layering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn known_key(key: &str) -> bool {
    VALUE_KEYS.contains(&key) || FLAG_KEYS.contains(&key)
}

impl Settings {
    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected key=value", i + 1)));
            };
            let key = k.trim();
            if !known_key(key) {
                return Err(usage(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            values.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(usage(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// File settings (if any) with command-line values on top.
    pub fn layered(config: Option<&Path>, values: &ValueOptions, flags: &AblationFlags) -> anyhow::Result<Self> {
        let mut s = match config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for (k, v) in values.pairs().into_iter().chain(flags.pairs()) {
            s.values.insert(k.to_string(), v);
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> anyhow::Result<()> {
        if !known_key(key) {
            return Err(usage(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("invalid value {v:?} for {key}: {e}"))))
            .transpose()
    }

    fn flag(&self, key: &str) -> anyhow::Result<bool> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(usage(format!("invalid boolean {v:?} for {key}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub matcher: Option<PathBuf>,
    pub audit: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub idf_corpus: Option<PathBuf>,
}

/// Validated pipeline configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub order: usize,
    pub tokenizer: TokenizerMode,
    /// Batch shape and decoding, before any ablation is applied.
    pub gen: GenConfig,
    pub threshold: ThresholdSpec,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub ablation: Ablation,
    pub matcher: TrainConfig,
    pub candidates: usize,
    pub context_id: Option<String>,
    pub strategy: Option<String>,
    pub lm_command: Option<String>,
    pub lm_timeout: Duration,
}

impl PipelineConfig {
    pub fn from_settings(s: &Settings) -> anyhow::Result<Self> {
        let path = |k: &str| s.get(k).map(PathBuf::from);
        let paths = Paths {
            train: path("train"),
            val: path("val"),
            test: path("test"),
            pool: path("pool"),
            input: path("input"),
            output: path("output"),
            lm: path("lm"),
            matcher: path("matcher"),
            audit: path("audit"),
            stopwords: path("stopwords"),
            idf_corpus: path("idf-corpus"),
        };

        let active: Vec<Ablation> = [
            ("no-garble", Ablation::NoGarble),
            ("no-filter", Ablation::NoFilter),
            ("no-gen1", Ablation::NoGen1),
            ("no-gen2", Ablation::NoGen2),
            ("random-da", Ablation::RandomDa),
        ]
        .into_iter()
        .filter_map(|(k, a)| s.flag(k).map(|on| on.then_some(a)).transpose())
        .collect::<anyhow::Result<_>>()?;
        if active.len() > 1 {
            let names: Vec<&str> = active.iter().map(|a| a.as_str()).collect();
            return Err(usage(format!("ablation switches are exclusive; got {}", names.join(", "))));
        }
        let ablation = active.first().copied().unwrap_or(Ablation::None);

        let base = GenConfig::default();
        let decode = DecodeParams {
            top_p: s.parsed("top-p")?.unwrap_or(base.decode.top_p),
            max_length: s.parsed("max-length")?.unwrap_or(base.decode.max_length),
            min_length: s.parsed("min-length")?.unwrap_or(base.decode.min_length),
            seed: 0,
        };
        let gen = GenConfig {
            n_gen1: s.parsed("n-gen1")?.unwrap_or(base.n_gen1),
            n_gen2: s.parsed("n-gen2")?.unwrap_or(base.n_gen2),
            decode,
            keyword_top_k: s.parsed("keyword-top-k")?.unwrap_or(base.keyword_top_k),
            ..base
        };
        gen.validate()?;
        ablation.gen_config(&gen).validate()?;

        let threshold = s.parsed("threshold")?.unwrap_or_default();
        let seed: Option<u64> = s.parsed("seed")?;
        let workers: Option<usize> = s.parsed("workers")?;
        if workers == Some(0) {
            return Err(usage("workers must be at least 1"));
        }
        let dm = TrainConfig::default();
        let matcher = TrainConfig {
            learning_rate: s.parsed("lr")?.unwrap_or(dm.learning_rate),
            epochs: s.parsed("epochs")?.unwrap_or(dm.epochs),
            l2: s.parsed("l2")?.unwrap_or(dm.l2),
            seed: seed.unwrap_or(dm.seed),
        };
        matcher.validate()?;
        let order = s.parsed("order")?.unwrap_or(DEFAULT_ORDER);
        if order == 0 {
            return Err(usage("order must be at least 1"));
        }
        let candidates = s.parsed("candidates")?.unwrap_or(TEST_CANDIDATES);
        if candidates == 0 {
            return Err(usage("candidates must be at least 1"));
        }
        let strategy = s.get("strategy").map(str::to_string);
        if let Some(st) = &strategy {
            if !["flow-distortion", "context-destruction", "both"].contains(&st.as_str()) {
                return Err(usage(format!("unknown strategy {st:?}")));
            }
        }
        let timeout: f64 = s.parsed("lm-timeout")?.unwrap_or(30.0);
        if !(timeout.is_finite() && timeout > 0.0) {
            return Err(usage("lm-timeout must be a positive number of seconds"));
        }

        Ok(Self {
            paths,
            order,
            tokenizer: s.parsed("tokenizer")?.unwrap_or_default(),
            gen,
            threshold,
            seed,
            workers,
            ablation,
            matcher,
            candidates,
            context_id: s.get("context-id").map(str::to_string),
            strategy,
            lm_command: s.get("lm-command").map(str::to_string),
            lm_timeout: Duration::from_secs_f64(timeout),
        })
    }

    pub fn require_seed(&self, command: &str) -> anyhow::Result<u64> {
        self.seed
            .ok_or_else(|| usage(format!("{command} generates data and needs --seed")))
    }
}

/// A required path; missing settings and nonexistent files are usage errors.
pub fn input_path<'a>(value: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    let p = value
        .as_deref()
        .ok_or_else(|| usage(format!("missing required setting --{key}")))?;
    if !p.exists() {
        return Err(usage(format!("{key} file {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn output_path<'a>(value: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("missing required setting --{key}")))
}
