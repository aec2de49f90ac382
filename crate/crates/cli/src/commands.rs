//! Subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use hardneg::corpus::{
    corpus_stats, load_dataset, write_dataset_with_header, Conversation, Dataset, Format, Origin, Split, Tokenizer,
    TokenizerMode, UtterancePool,
};
use hardneg::garble::{context_destruction, flow_distortion, GarbledConversation, Strategy};
use hardneg::gen::generate_batch;
use hardneg::keywords::{IdfTable, KeywordExtractor, Stopwords};
use hardneg::lm::{score_sequence, train_ngram, ExternalLm, LanguageModel, NGramLM};
use hardneg::matcher::{train_matcher, MatcherModel, FEATURE_NAMES};
use hardneg::metrics::evaluate;
use hardneg::seed::{derive_seed, rng_from_seed};
use hardneg::select::{
    augment_dataset, resolve_threshold, score_candidates, select_for_context, AuditCandidate, AuditRecord,
    AugmentConfig,
};

use crate::config::{input_path, output_path, PipelineConfig, UsageError};
use crate::Command;

pub fn dispatch(cmd: Command, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::TrainLm => train_lm(cfg, out),
        Command::Garble => garble(cfg, out),
        Command::Keywords => keywords(cfg, out),
        Command::Generate => generate(cfg, out),
        Command::Augment => augment(cfg, out),
        Command::TrainMatcher => train_matcher_cmd(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Stats => stats(cfg, out),
        Command::Inspect => inspect(cfg, out),
    }
}

fn load(path: &Path, split: Split) -> Result<Dataset> {
    load_dataset(path, Format::from_path(path), split).with_context(|| format!("loading {}", path.display()))
}

fn load_opt(path: &Option<PathBuf>, key: &str, split: Split) -> Result<Option<Dataset>> {
    match path {
        Some(_) => Ok(Some(load(input_path(path, key)?, split)?)),
        None => Ok(None),
    }
}

/// `--input`, falling back to `--train`.
fn main_input(cfg: &PipelineConfig) -> Result<Dataset> {
    if cfg.paths.input.is_some() {
        return load(input_path(&cfg.paths.input, "input")?, Split::Train);
    }
    if cfg.paths.train.is_none() {
        return Err(UsageError("missing required setting --input (or --train)".into()).into());
    }
    load(input_path(&cfg.paths.train, "train")?, Split::Train)
}

fn load_lm(cfg: &PipelineConfig, train: Option<&Dataset>) -> Result<Box<dyn LanguageModel>> {
    let Some(command) = &cfg.lm_command else {
        let path = input_path(&cfg.paths.lm, "lm")?;
        let lm = NGramLM::load(path).with_context(|| format!("loading {}", path.display()))?;
        return Ok(Box::new(lm));
    };
    let tokenizer = match (&cfg.paths.lm, train) {
        (Some(_), _) => NGramLM::load(input_path(&cfg.paths.lm, "lm")?)?.tokenizer().clone(),
        (None, Some(t)) => Tokenizer::fit(
            cfg.tokenizer,
            t.examples
                .iter()
                .flat_map(|e| e.context.texts().chain(std::iter::once(e.response.text()))),
        ),
        (None, None) => return Err(UsageError("an external model needs --lm or --train for its vocabulary".into()).into()),
    };
    let mut words = command.split_whitespace().map(str::to_string);
    let program = words.next().ok_or_else(|| UsageError("empty --lm-command".into()))?;
    let args: Vec<String> = words.collect();
    Ok(Box::new(ExternalLm::spawn(&program, &args, tokenizer, cfg.lm_timeout)?))
}

/// Keyword extractor with idf from `--idf-corpus`, else `--train`, else `fallback`.
fn extractor(cfg: &PipelineConfig, mode: TokenizerMode, fallback: Option<&Dataset>) -> Result<KeywordExtractor> {
    let idf = if let Some(d) = load_opt(&cfg.paths.idf_corpus, "idf-corpus", Split::Train)? {
        IdfTable::build(&d, mode)
    } else if let Some(d) = fallback {
        IdfTable::build(d, mode)
    } else if let Some(d) = load_opt(&cfg.paths.train, "train", Split::Train)? {
        IdfTable::build(&d, mode)
    } else {
        return Err(UsageError("idf statistics need --idf-corpus or --train".into()).into());
    };
    let stopwords = match &cfg.paths.stopwords {
        Some(_) => Stopwords::load(input_path(&cfg.paths.stopwords, "stopwords")?)?,
        None => Stopwords::default_list(),
    };
    Ok(KeywordExtractor::new(idf, stopwords, mode))
}

fn header(cfg: &PipelineConfig, command: &str, tau: Option<f64>) -> Value {
    let gen = cfg.ablation.gen_config(&cfg.gen);
    json!({
        "tool": "hardneg",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "ablation": cfg.ablation.as_str(),
        "threshold": cfg.threshold.to_string(),
        "tau": tau,
        "batch": {
            "n_gen1": gen.n_gen1,
            "n_gen2": gen.n_gen2,
            "keyword_top_k": gen.keyword_top_k,
            "garble": gen.garble,
        },
        "decode": {
            "top_p": gen.decode.top_p,
            "max_length": gen.decode.max_length,
            "min_length": gen.decode.min_length,
        },
    })
}

/// Writes JSONL lines to `path`, or to `out` when no path is set.
fn write_lines(path: Option<&Path>, out: &mut dyn Write, lines: &[Value]) -> Result<()> {
    match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(f);
            for l in lines {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
        None => {
            for l in lines {
                writeln!(out, "{l}")?;
            }
        }
    }
    Ok(())
}

fn selected<'a>(cfg: &PipelineConfig, ds: &'a Dataset) -> Result<Vec<&'a Conversation>> {
    let convs = ds.conversations();
    match &cfg.context_id {
        Some(id) => {
            let found: Vec<_> = convs.into_iter().filter(|c| c.id() == id).collect();
            if found.is_empty() {
                return Err(anyhow!("no conversation with id {id:?}"));
            }
            Ok(found)
        }
        None => Ok(convs),
    }
}

/// Token-weighted perplexity of the golden responses.
fn corpus_perplexity<L: LanguageModel + ?Sized>(lm: &L, ds: &Dataset) -> Result<f64> {
    let (mut log_prob, mut tokens) = (0.0, 0usize);
    for e in ds.examples.iter().filter(|e| e.label.is_positive()) {
        let ids = lm.tokenizer().tokenize(e.response.text());
        if ids.is_empty() {
            continue;
        }
        let s = score_sequence(lm, &e.context, &ids)?;
        log_prob += s.log_prob;
        tokens += s.len();
    }
    if tokens == 0 {
        return Err(anyhow!("no scorable golden responses"));
    }
    Ok((-log_prob / tokens as f64).exp())
}

fn train_lm(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let train = load(input_path(&cfg.paths.train, "train")?, Split::Train)?;
    let output = output_path(&cfg.paths.output, "output")?;
    let lm = train_ngram(&train, cfg.order, cfg.tokenizer)?;
    lm.save(output)?;
    let val = load_opt(&cfg.paths.val, "val", Split::Val)?;
    let (split, heldout) = match &val {
        Some(v) => ("val", v),
        None => ("train", &train),
    };
    let ppl = corpus_perplexity(&lm, heldout)?;
    writeln!(out, "vocab_size={}", lm.vocab_size())?;
    writeln!(out, "order={}", lm.order())?;
    writeln!(out, "heldout_split={split}")?;
    writeln!(out, "heldout_ppl={ppl}")?;
    writeln!(out, "uniform_ppl={}", lm.vocab_size())?;
    Ok(())
}

fn strategies(cfg: &PipelineConfig) -> Vec<Strategy> {
    match cfg.strategy.as_deref() {
        Some("flow-distortion") => vec![Strategy::FlowDistortion],
        Some("context-destruction") => vec![Strategy::ContextDestruction],
        _ => vec![Strategy::FlowDistortion, Strategy::ContextDestruction],
    }
}

fn garble(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let seed = cfg.require_seed("garble")?;
    let ds = main_input(cfg)?;
    let pool_ds = load_opt(&cfg.paths.pool, "pool", Split::Train)?;
    let pool = UtterancePool::new(pool_ds.as_ref().unwrap_or(&ds));
    let mut lines = vec![json!({ "header": header(cfg, "garble", None) })];
    let mut skipped = 0usize;
    for conv in selected(cfg, &ds)? {
        for strategy in strategies(cfg) {
            if !strategy.eligible(conv) {
                skipped += 1;
                continue;
            }
            let label = format!("{}/garble/{}", conv.id(), strategy.as_str());
            let mut rng = rng_from_seed(derive_seed(seed, &label, 0));
            let g: GarbledConversation = match strategy {
                Strategy::FlowDistortion => flow_distortion(conv, &mut rng)?,
                Strategy::ContextDestruction => context_destruction(conv, &pool, &mut rng)?,
            };
            lines.push(json!({
                "context_id": conv.id(),
                "strategy": strategy.as_str(),
                "original": conv.texts().collect::<Vec<_>>(),
                "garbled": g.conversation.texts().collect::<Vec<_>>(),
                "record": g.record,
            }));
        }
    }
    let path = cfg.paths.output.as_deref();
    write_lines(path, out, &lines)?;
    if let Some(p) = path {
        writeln!(
            out,
            "wrote {} garbled histories to {} ({skipped} skipped: too few turns)",
            lines.len() - 1,
            p.display()
        )?;
    }
    Ok(())
}

fn keywords(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let ds = main_input(cfg)?;
    let ex = extractor(cfg, cfg.tokenizer, Some(&ds))?;
    for conv in selected(cfg, &ds)? {
        writeln!(out, "# {}", conv.id())?;
        for (rank, k) in ex.extract(conv, cfg.gen.keyword_top_k).iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{:.6}\tturn {}",
                rank + 1,
                k.text(cfg.tokenizer),
                k.score,
                k.source_turn
            )?;
        }
    }
    Ok(())
}

fn generate(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let seed = cfg.require_seed("generate")?;
    let ds = main_input(cfg)?;
    let train = load_opt(&cfg.paths.train, "train", Split::Train)?;
    let lm = load_lm(cfg, train.as_ref().or(Some(&ds)))?;
    let pool_ds = load_opt(&cfg.paths.pool, "pool", Split::Train)?;
    let pool = UtterancePool::new(pool_ds.as_ref().or(train.as_ref()).unwrap_or(&ds));
    let ex = extractor(cfg, lm.tokenizer().mode(), train.as_ref().or(Some(&ds)))?;
    let gen = cfg.ablation.gen_config(&cfg.gen);
    let convs = selected(cfg, &ds)?;
    let per_conv: Vec<Result<Vec<Value>>> = convs
        .par_iter()
        .map(|conv| {
            let batch = generate_batch(&*lm, conv, &pool, &ex, &gen, seed)?;
            if batch.is_empty() {
                return Ok(Vec::new());
            }
            let scored = score_candidates(&*lm, conv, batch)?;
            Ok(scored
                .iter()
                .enumerate()
                .map(|(i, s)| json!({ "context_id": conv.id(), "candidate": AuditCandidate::new(i, s) }))
                .collect())
        })
        .collect();
    let mut lines = vec![json!({ "header": header(cfg, "generate", None) })];
    for r in per_conv {
        lines.extend(r?);
    }
    let path = cfg.paths.output.as_deref();
    write_lines(path, out, &lines)?;
    if let Some(p) = path {
        writeln!(out, "wrote {} candidates to {}", lines.len() - 1, p.display())?;
    }
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Everything augment and inspect need, loaded once.
struct Stage {
    train: Dataset,
    pool_ds: Option<Dataset>,
    lm: Box<dyn LanguageModel>,
    extractor: KeywordExtractor,
    acfg: AugmentConfig,
}

fn stage(cfg: &PipelineConfig, command: &str, train: Dataset) -> Result<Stage> {
    let seed = cfg.require_seed(command)?;
    let lm = load_lm(cfg, Some(&train))?;
    let pool_ds = load_opt(&cfg.paths.pool, "pool", Split::Train)?;
    let extractor = extractor(cfg, lm.tokenizer().mode(), Some(&train))?;
    let val = load_opt(&cfg.paths.val, "val", Split::Val)?;
    let tau = resolve_threshold(cfg.threshold, &*lm, val.as_ref().unwrap_or(&train))?;
    let acfg = AugmentConfig {
        gen: cfg.gen.clone(),
        tau,
        seed,
        ablation: cfg.ablation,
    };
    acfg.validate()?;
    Ok(Stage {
        train,
        pool_ds,
        lm,
        extractor,
        acfg,
    })
}

fn augment(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let train = load(input_path(&cfg.paths.train, "train")?, Split::Train)?;
    let output = output_path(&cfg.paths.output, "output")?;
    let st = stage(cfg, "augment", train)?;
    let pool = UtterancePool::new(st.pool_ds.as_ref().unwrap_or(&st.train));
    let aug = augment_dataset(&st.train, &*st.lm, &pool, &st.extractor, &st.acfg)?;
    let head = header(cfg, "augment", Some(st.acfg.tau));
    write_dataset_with_header(&aug.dataset, output, Format::from_path(output), Some(&head))?;
    if let Some(audit) = cfg.paths.audit.as_deref() {
        let mut lines = vec![json!({ "header": head })];
        for r in &aug.audit {
            lines.push(serde_json::to_value(r)?);
        }
        write_lines(Some(audit), out, &lines)?;
    }
    let count = |o: Origin| aug.dataset.examples.iter().filter(|e| e.origin == o).count();
    writeln!(out, "contexts={}", aug.audit.len())?;
    writeln!(out, "examples={}", aug.dataset.len())?;
    writeln!(out, "tau={}", st.acfg.tau)?;
    for o in Origin::ALL {
        writeln!(out, "origin.{}={}", o.as_str(), count(o))?;
    }
    writeln!(out, "sha256={}", sha256_hex(output)?)?;
    Ok(())
}

fn train_matcher_cmd(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let train = load(input_path(&cfg.paths.train, "train")?, Split::Train)?;
    let output = output_path(&cfg.paths.output, "output")?;
    let ex = extractor(cfg, cfg.tokenizer, Some(&train))?;
    let model = train_matcher(&train, &ex, &cfg.matcher)?;
    model.save(output)?;
    if let Some(m) = &model.meta {
        writeln!(out, "initial_loss={}", m.initial_loss)?;
        writeln!(out, "final_loss={}", m.final_loss)?;
    }
    for (name, w) in FEATURE_NAMES.iter().zip(model.weights) {
        writeln!(out, "weight.{name}={w}")?;
    }
    writeln!(out, "bias={}", model.bias)?;
    Ok(())
}

fn eval(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let test = load(input_path(&cfg.paths.test, "test")?, Split::Test)?;
    let mpath = input_path(&cfg.paths.matcher, "matcher")?;
    let model = MatcherModel::load(mpath).with_context(|| format!("loading {}", mpath.display()))?;
    let ex = extractor(cfg, cfg.tokenizer, None)?;
    let report = evaluate(&test, Some(cfg.candidates), |c, r| model.score(c, r, &ex))?;
    if let Some(p) = cfg.paths.output.as_deref() {
        std::fs::write(p, report.to_key_values()).with_context(|| format!("writing {}", p.display()))?;
        let mut table = p.as_os_str().to_owned();
        table.push(".table.txt");
        std::fs::write(&table, report.to_table())?;
    }
    write!(out, "{}", report.to_table())?;
    Ok(())
}

fn stats(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    let ds = main_input(cfg)?;
    let s = corpus_stats(&ds)?;
    writeln!(out, "dialogs={}", s.dialog_count)?;
    writeln!(out, "avg_turns={:.3}", s.avg_turns)?;
    writeln!(out, "positives={}", s.positives)?;
    writeln!(out, "negatives={}", s.negatives)?;
    writeln!(out, "pos_neg_ratio={}:{}", s.pos_neg_ratio.0, s.pos_neg_ratio.1)?;
    Ok(())
}

fn print_record(out: &mut dyn Write, rec: &Value) -> Result<()> {
    let s = |v: &Value| match v {
        Value::Null => "-".to_string(),
        Value::String(x) => x.clone(),
        other => other.to_string(),
    };
    writeln!(out, "context {}  tau={}  ablation={}", s(&rec["context_id"]), s(&rec["tau"]), s(&rec["ablation"]))?;
    let sel = &rec["selection"];
    writeln!(
        out,
        "selected: origin={} index={} ppl={}  {}",
        s(&sel["origin"]),
        s(&sel["index"]),
        s(&sel["ppl"]),
        s(&sel["text"])
    )?;
    for c in rec["candidates"].as_array().map(Vec::as_slice).unwrap_or_default() {
        let keyword = match &c["keyword"] {
            Value::Array(k) => k.iter().map(&s).collect::<Vec<_>>().join(" "),
            _ => "-".into(),
        };
        let strategy = c["garble"].get("strategy").map(&s).unwrap_or_else(|| "none".into());
        writeln!(
            out,
            "  [{}] method={} garble={} keyword={} insert_step={} ppl={:.4}  {}",
            s(&c["index"]),
            s(&c["method"]),
            strategy,
            keyword,
            s(&c["insert_step"]),
            c["ppl"].as_f64().unwrap_or(f64::NAN),
            s(&c["text"])
        )?;
    }
    Ok(())
}

fn inspect(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<()> {
    if cfg.paths.audit.is_some() {
        let path = input_path(&cfg.paths.audit, "audit")?;
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut shown = 0usize;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            if v.get("header").is_some() {
                continue;
            }
            if cfg.context_id.as_deref().is_some_and(|id| v["context_id"] != id) {
                continue;
            }
            print_record(out, &v)?;
            shown += 1;
        }
        if shown == 0 {
            return Err(anyhow!("no matching audit records in {}", path.display()));
        }
        return Ok(());
    }

    let seed = cfg.require_seed("inspect")?;
    let ds = main_input(cfg)?;
    let train = match load_opt(&cfg.paths.train, "train", Split::Train)? {
        Some(t) => t,
        None => ds.clone(),
    };
    let st = stage(cfg, "inspect", train)?;
    let convs = selected(cfg, &ds)?;
    let conv = if cfg.context_id.is_some() {
        convs[0]
    } else {
        let i = (derive_seed(seed, "inspect", 0) % convs.len() as u64) as usize;
        convs[i]
    };
    let pool = UtterancePool::new(st.pool_ds.as_ref().unwrap_or(&st.train));
    let sel = select_for_context(&*st.lm, conv, &pool, &st.extractor, &st.acfg)?;
    for (i, t) in conv.texts().enumerate() {
        writeln!(out, "  u{}: {t}", i + 1)?;
    }
    let rec = AuditRecord::new(conv.id(), &st.acfg, &sel);
    print_record(out, &serde_json::to_value(&rec)?)
}
