//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Expected values come from oracles written here, not from
//! the library code under test.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;
use tempfile::TempDir;

use hardneg::corpus::{
    load_dataset, write_dataset, Conversation, Dataset, Example, Format, Label, Origin, Split, Tokenizer,
    TokenizerMode, Utterance, UtterancePool,
};
use hardneg::garble::{context_destruction, flow_distortion, GarbleRecord};
use hardneg::gen::{gen2_insert_tokens, generate_batch, GenConfig, Method};
use hardneg::keywords::{IdfTable, KeywordExtractor, Stopwords};
use hardneg::lm::{
    decode, perplexity, score_sequence, train_ngram, DecodeParams, LanguageModel, NGramLM, ProbDist, TokenId, Vocab,
    BOS, SEP,
};
use hardneg::matcher::{loss_and_grad, train_matcher, FeatureVector, TrainConfig, NUM_FEATURES};
use hardneg::metrics::{aggregate, evaluate, RankedList};
use hardneg::seed::{derive_seed, rng_from_seed};
use hardneg::select::{
    augment_dataset, resolve_threshold, select_negative, Ablation, AugmentConfig, Augmented, ScoredCandidate,
    ThresholdSpec,
};
use hardneg::synthetic::{one_to_one, SyntheticConfig};
use hardneg_cli::run_args;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// A fixed pseudo-random next-token table keyed by the last two context
/// tokens, so it behaves like a trigram model with arbitrary probabilities.
struct TableLm {
    tok: Tokenizer,
    salt: u64,
}

impl TableLm {
    fn new(regular: usize, salt: u64) -> Self {
        let words: Vec<String> = (0..regular).map(|i| format!("w{i}")).collect();
        Self {
            tok: Tokenizer::new(TokenizerMode::Whitespace, Vocab::from_tokens(words)),
            salt,
        }
    }

    fn raw(&self, ctx: &[TokenId]) -> Vec<f64> {
        let n = ctx.len();
        let a = if n >= 2 { ctx[n - 2] } else { BOS } as u64;
        let b = if n >= 1 { ctx[n - 1] } else { BOS } as u64;
        let mut rng = rng_from_seed(derive_seed(self.salt, "table", (a << 32) | b));
        let w: Vec<f64> = (0..self.tok.vocab().len())
            .map(|_| rng.random::<f64>().powi(3) + 1e-4)
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

impl LanguageModel for TableLm {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tok
    }
    fn next_token_dist(&self, ctx: &[TokenId]) -> hardneg::Result<ProbDist> {
        ProbDist::new(self.raw(ctx))
    }
}

struct UniformLm(Tokenizer);

impl UniformLm {
    fn new(v: usize) -> Self {
        let words: Vec<String> = (0..v - Vocab::RESERVED_COUNT).map(|i| format!("u{i}")).collect();
        let tok = Tokenizer::new(TokenizerMode::Whitespace, Vocab::from_tokens(words));
        assert_eq!(tok.vocab().len(), v);
        UniformLm(tok)
    }
}

impl LanguageModel for UniformLm {
    fn tokenizer(&self) -> &Tokenizer {
        &self.0
    }
    fn next_token_dist(&self, _: &[TokenId]) -> hardneg::Result<ProbDist> {
        Ok(ProbDist::uniform(self.vocab_size()))
    }
}

fn random_history<R: Rng>(rng: &mut R, regular: usize, id: &str) -> Conversation {
    let turns: Vec<String> = (0..rng.random_range(1..=5))
        .map(|_| {
            (0..rng.random_range(1..=6))
                .map(|_| format!("w{}", rng.random_range(0..regular)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Conversation::from_texts(id, &turns).unwrap()
}

/// `BOS u1 SEP ... uN SEP`, written out independently of the library.
fn encode(tok: &Tokenizer, h: &Conversation) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    for t in h.texts() {
        for w in t.split_whitespace() {
            ids.push(tok.vocab().id(w).expect("in vocabulary"));
        }
        ids.push(SEP);
    }
    ids
}

fn synthetic(dialogues: usize, seed: u64, split: Split) -> Dataset {
    one_to_one(&SyntheticConfig {
        dialogues,
        seed,
        vocab_seed: seed,
        split,
        ..Default::default()
    })
    .unwrap()
}

fn extractor(ds: &Dataset) -> KeywordExtractor {
    KeywordExtractor::new(
        IdfTable::build(ds, TokenizerMode::Whitespace),
        Stopwords::default_list(),
        TokenizerMode::Whitespace,
    )
}

/// The ascending-id-tie, descending-probability prefix reaching mass `p`.
fn oracle_nucleus(row: &[f64], p: f64) -> HashSet<TokenId> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0.0).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut out = HashSet::new();
    let mut mass = 0.0;
    for i in idx {
        out.insert(i as TokenId);
        mass += row[i];
        if mass >= p - 1e-12 {
            break;
        }
    }
    out
}

/// A CLI workspace with a 1000-context 1:1 corpus and a trained model.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        write_dataset(&synthetic(1000, 21, Split::Train), &dir.path().join("train.tsv"), Format::Tsv).unwrap();
        run_args([
            "train-lm",
            "--train",
            dir.path().join("train.tsv").to_str().unwrap(),
            "--output",
            dir.path().join("lm.txt").to_str().unwrap(),
        ])
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `augment` with extra flags; returns stdout.
    fn augment(&self, out: &str, extra: &[&str]) -> Result<String, String> {
        let mut args: Vec<String> = [
            "augment",
            "--train",
            self.path("train.tsv").to_str().unwrap(),
            "--lm",
            self.path("lm.txt").to_str().unwrap(),
            "--seed",
            "2024",
            "--output",
            self.path(out).to_str().unwrap(),
            "--audit",
            self.path(&format!("{out}.audit.jsonl")).to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        args.extend(extra.iter().map(|s| s.to_string()));
        run_args(args).map_err(|e| format!("{e:#}"))
    }

    fn audit(&self, out: &str) -> Vec<Value> {
        let text = std::fs::read_to_string(self.path(&format!("{out}.audit.jsonl"))).unwrap();
        text.lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v.get("header").is_none())
            .collect()
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn perplexity_oracle() -> Check {
    let start = Instant::now();
    let table = TableLm::new(40, 7);
    let corpus = synthetic(100, 3, Split::Train);
    let ngram = train_ngram(&corpus, 3, TokenizerMode::Whitespace).unwrap();
    let regular: Vec<String> = ngram.vocab().regular_tokens().to_vec();
    let mut rng = rng_from_seed(99);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let (lp, ppl, want_lp, want_ppl) = if i % 2 == 0 {
            let h = random_history(&mut rng, 40, "t");
            let resp: Vec<TokenId> = (0..rng.random_range(1..=30)).map(|_| rng.random_range(4..44)).collect();
            let mut ctx = encode(&table.tok, &h);
            let mut sum = 0.0;
            for &t in &resp {
                sum += table.raw(&ctx)[t as usize].ln();
                ctx.push(t);
            }
            let s = score_sequence(&table, &h, &resp).unwrap();
            (s.log_prob, perplexity(&s), sum, (-sum / resp.len() as f64).exp())
        } else {
            let g = &corpus.groups()[rng.random_range(0..100)];
            let h = g.conversation;
            let resp: Vec<TokenId> = (0..rng.random_range(1..=30))
                .map(|_| ngram.vocab().id(&regular[rng.random_range(0..regular.len())]).unwrap())
                .collect();
            let mut ctx = encode(ngram.tokenizer(), h);
            let mut sum = 0.0;
            for &t in &resp {
                sum += ngram.distribution(&ctx).prob(t).ln();
                ctx.push(t);
            }
            let s = score_sequence(&ngram, h, &resp).unwrap();
            (s.log_prob, perplexity(&s), sum, (-sum / resp.len() as f64).exp())
        };
        let rel = ((lp - want_lp) / want_lp).abs().max(((ppl - want_ppl) / want_ppl).abs());
        worst = worst.max(rel);
        ensure!(rel <= 1e-9, "triple {i}: log P {lp} vs {want_lp}, PPL {ppl} vs {want_ppl}");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {t:?}");
    Ok(format!("200 triples, max rel err {worst:.1e}, {:.2}s", t.as_secs_f64()))
}

fn uniform_identity() -> Check {
    let mut worst: f64 = 0.0;
    for v in [7usize, 10, 100] {
        let lm = UniformLm::new(v);
        let h = Conversation::from_texts("u", &["u0 u1", "u2"]).unwrap();
        for k in [1usize, 5, 30] {
            let resp: Vec<TokenId> = (0..k).map(|i| (4 + i % (v - 4)) as TokenId).collect();
            let ppl = perplexity(&score_sequence(&lm, &h, &resp).unwrap());
            worst = worst.max((ppl - v as f64).abs());
            ensure!((ppl - v as f64).abs() <= 1e-9, "V={v} K={k}: PPL {ppl}");
        }
    }
    Ok(format!("9 (V, K) pairs, max |PPL - V| = {worst:.1e}"))
}

fn nucleus_soundness() -> Check {
    let corpus = synthetic(300, 5, Split::Train);
    let lm = train_ngram(&corpus, 3, TokenizerMode::Whitespace).unwrap();
    let table = TableLm::new(30, 11);
    let groups = corpus.groups();
    let mut rng = rng_from_seed(5);
    let (mut steps, mut worst) = (0usize, 0f64);
    for i in 0..1000u64 {
        let top_p = [0.3, 0.5, 0.8, 0.9, 0.95, 1.0][i as usize % 6];
        let params = DecodeParams {
            top_p,
            max_length: 25,
            min_length: 1 + i as usize % 3,
            seed: i,
        };
        let out = if i % 4 == 3 {
            let h = random_history(&mut rng, 30, "r");
            decode(&table, &h, &params)
        } else {
            decode(&lm, groups[i as usize % groups.len()].conversation, &params)
        }
        .map_err(|e| e.to_string())?;
        ensure!(out.tokens.len() == out.prob_matrix.len(), "decode {i}: matrix rows != tokens");
        for (step, (row, &tok)) in out.prob_matrix.iter().zip(&out.tokens).enumerate() {
            let sum: f64 = row.as_slice().iter().sum();
            worst = worst.max((sum - 1.0).abs());
            ensure!((sum - 1.0).abs() <= 1e-9, "decode {i} step {step}: row sums to {sum}");
            ensure!(
                oracle_nucleus(row.as_slice(), top_p).contains(&tok),
                "decode {i} step {step}: token {tok} outside the top-{top_p} nucleus"
            );
            steps += 1;
        }
    }
    Ok(format!("1000 decodes, {steps} steps, max |row sum - 1| = {worst:.1e}"))
}

fn garbling_invariants() -> Check {
    let mut rng = rng_from_seed(4);
    let mut examples = Vec::new();
    for c in 0..300 {
        let n = rng.random_range(2..=8);
        let turns: Vec<String> = (0..n).map(|j| format!("c{c} turn{j} w{}", rng.random_range(0..50))).collect();
        let conv = Conversation::from_texts(format!("c{c}"), &turns).unwrap();
        examples.push(Example {
            context: conv,
            response: Utterance::new("r").unwrap(),
            label: Label::Positive,
            origin: Origin::Golden,
        });
    }
    let ds = Dataset::new(Split::Train, examples);
    let convs = ds.conversations();
    let by_id: HashMap<&str, &Conversation> = convs.iter().map(|c| (c.id(), *c)).collect();

    for run in 0..1000u64 {
        let conv = convs[run as usize % convs.len()];
        let n = conv.len();
        let g = flow_distortion(conv, &mut rng_from_seed(run)).map_err(|e| e.to_string())?;
        let GarbleRecord::FlowDistortion { swap_index, .. } = g.record else {
            return Err("flow distortion produced a different record".into());
        };
        let before: Vec<&str> = conv.texts().collect();
        let after: Vec<&str> = g.conversation.texts().collect();
        let (mut a, mut b) = (before.clone(), after.clone());
        a.sort();
        b.sort();
        ensure!(a == b, "run {run}: turn multiset changed");
        let changed: HashSet<usize> = (0..n).filter(|&k| before[k] != after[k]).map(|k| k + 1).collect();
        ensure!(
            changed == HashSet::from([swap_index, n]),
            "run {run}: changed positions {changed:?}, expected {{{swap_index}, {n}}}"
        );
    }

    let pool = UtterancePool::new(&ds);
    let eligible: Vec<&Conversation> = convs.iter().copied().filter(|c| c.len() >= 3).collect();
    for run in 0..10_000u64 {
        let conv = eligible[run as usize % eligible.len()];
        let n = conv.len();
        let g = context_destruction(conv, &pool, &mut rng_from_seed(run)).map_err(|e| e.to_string())?;
        let GarbleRecord::ContextDestruction { replaced } = &g.record else {
            return Err("context destruction produced a different record".into());
        };
        let r = replaced.len();
        ensure!((2..=3).contains(&r) && (n > 3 || r == 2), "run {run}: r = {r} for N = {n}");
        ensure!(g.conversation.len() == n, "run {run}: length changed");
        ensure!(
            conv.turns()[..n - r] == g.conversation.turns()[..n - r],
            "run {run}: first N - r turns altered"
        );
        let positions: Vec<usize> = replaced.iter().map(|x| x.position).collect();
        ensure!(positions == ((n - r + 1)..=n).collect::<Vec<_>>(), "run {run}: replaced {positions:?}");
        for x in replaced {
            ensure!(x.source_id != conv.id(), "run {run}: replacement drawn from the same conversation");
            let src = by_id[x.source_id.as_str()];
            ensure!(
                src.turns()[x.source_turn - 1] == g.conversation.turns()[x.position - 1],
                "run {run}: replacement text does not match its recorded source"
            );
        }
    }
    Ok("1000 flow-distortion runs, 10000 context-destruction runs".into())
}

fn brute_argmax_first(column: &[f64]) -> usize {
    let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    column.iter().position(|&p| p == max).unwrap() + 1
}

fn keyword_insertion() -> Check {
    let lm = TableLm::new(25, 3);
    let mut rng = rng_from_seed(55);
    let mut tied = 0;
    for run in 0..200u64 {
        let h = random_history(&mut rng, 25, "k");
        let kw: Vec<TokenId> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(4..29)).collect();
        let params = DecodeParams {
            top_p: 0.9,
            max_length: 20,
            min_length: 2,
            seed: run,
        };
        let (tokens, step) = gen2_insert_tokens(&lm, &h, &kw, &params).map_err(|e| e.to_string())?;
        let r0 = decode(&lm, &h, &params).map_err(|e| e.to_string())?;
        let column: Vec<f64> = r0.prob_matrix.iter().map(|row| row.prob(kw[0])).collect();
        let want = brute_argmax_first(&column);
        if column.iter().filter(|&&p| p == column[want - 1]).count() > 1 {
            tied += 1;
        }
        ensure!(step == want, "run {run}: insert step {step}, argmax {want} over {column:?}");
        ensure!(tokens[..step - 1] == r0.tokens[..step - 1], "run {run}: prefix before the keyword changed");
        ensure!(
            tokens[step - 1..].starts_with(&kw),
            "run {run}: keyword not contiguous at step {step}"
        );
    }

    // The recorded step of pipeline candidates obeys the same rule.
    let corpus = synthetic(200, 8, Split::Train);
    let ngram = train_ngram(&corpus, 3, TokenizerMode::Whitespace).unwrap();
    let ex = extractor(&corpus);
    let pool = UtterancePool::new(&corpus);
    let cfg = GenConfig::default();
    let mut checked = 0;
    for g in corpus.groups().iter().take(100) {
        for c in generate_batch(&ngram, g.conversation, &pool, &ex, &cfg, 17).map_err(|e| e.to_string())? {
            if c.method != Method::Gen2Insert {
                continue;
            }
            let r0 = decode(&ngram, &c.history, &cfg.decode.with_seed(c.seed)).map_err(|e| e.to_string())?;
            let column: Vec<f64> = r0.prob_matrix.iter().map(|row| row.prob(c.keyword_ids[0])).collect();
            let step = c.insert_step.ok_or("gen2-insert candidate without a step")?;
            ensure!(step == brute_argmax_first(&column), "{}: recorded step {step}", g.conversation.id());
            ensure!(c.tokens[step - 1..].starts_with(&c.keyword_ids), "{}: keyword not contiguous", g.conversation.id());
            checked += 1;
        }
    }
    ensure!(checked > 0, "no gen2-insert candidates produced by the pipeline");
    Ok(format!("200 toy-LM runs ({tied} with tied maxima), {checked} pipeline candidates"))
}

fn selection_contract() -> Check {
    let mut examples = Vec::new();
    for c in 0..20 {
        let conv = Conversation::from_texts(format!("p{c}"), &[format!("p{c} a"), format!("p{c} b")]).unwrap();
        examples.push(Example {
            context: conv,
            response: Utterance::new("r").unwrap(),
            label: Label::Positive,
            origin: Origin::Golden,
        });
    }
    let ds = Dataset::new(Split::Train, examples);
    let pool = UtterancePool::new(&ds);
    let hist = ds.conversations()[0].clone();
    let cand = |ppl: f64, i: usize| ScoredCandidate {
        candidate: hardneg::gen::CandidateResponse {
            tokens: vec![4],
            method: Method::Gen1,
            garble: None,
            history: hist.clone(),
            keyword: None,
            keyword_ids: Vec::new(),
            insert_step: None,
            seed: 0,
        },
        text: format!("cand {i}"),
        log_prob: -ppl.ln(),
        ppl,
    };
    let mut rng = rng_from_seed(6);
    let (mut fallbacks, mut picks) = (0, 0);
    for b in 0..500 {
        let n = rng.random_range(1..=8);
        // Coarse values force ties.
        let ppls: Vec<f64> = (0..n).map(|_| rng.random_range(1..=12) as f64).collect();
        let tau = rng.random_range(1..=14) as f64;
        let batch: Vec<ScoredCandidate> = ppls.iter().enumerate().map(|(i, &p)| cand(p, i)).collect();
        let exclude = "p0";
        let sel = select_negative(batch, tau, &pool, exclude, &mut rng).map_err(|e| e.to_string())?;

        let mut best = 0;
        for i in 1..n {
            if ppls[i] > ppls[best] {
                best = i;
            }
        }
        if ppls[best] < tau {
            fallbacks += 1;
            ensure!(sel.origin == Origin::FallbackRandom, "batch {b}: expected fallback, got {:?}", sel.origin);
            let src = sel.source.as_ref().ok_or("fallback without source")?;
            ensure!(src.conversation_id != exclude, "batch {b}: fallback drawn from the same conversation");
        } else {
            picks += 1;
            ensure!(sel.origin != Origin::FallbackRandom, "batch {b}: unexpected fallback");
            ensure!(sel.chosen_index == Some(best), "batch {b}: chose {:?}, brute force {best}", sel.chosen_index);
            ensure!(sel.response.text() == format!("cand {best}"), "batch {b}: wrong response");
        }
    }
    Ok(format!("500 batches: {picks} argmax picks, {fallbacks} fallbacks"))
}

fn ratio_contract(ws: &Workspace) -> Check {
    let start = Instant::now();
    let out = ws.augment("ratio.tsv", &["--workers", "1"])?;
    let t = start.elapsed();
    let ds = load_dataset(&ws.path("ratio.tsv"), Format::Tsv, Split::Train).map_err(|e| e.to_string())?;
    let groups = ds.groups();
    ensure!(groups.len() == 1000, "{} contexts", groups.len());
    ensure!(ds.len() == 3000, "{} examples", ds.len());
    for g in &groups {
        let pos = g.examples.iter().filter(|e| e.label.is_positive()).count();
        ensure!(
            pos == 1 && g.examples.len() == 3,
            "{}: {pos} positive of {}",
            g.conversation.id(),
            g.examples.len()
        );
    }
    ensure!(out.contains("examples=3000"), "summary: {out}");
    ensure!(t < Duration::from_secs(120), "took {t:?}");
    Ok(format!("1000 contexts -> 3000 examples, single worker {:.2}s", t.as_secs_f64()))
}

/// Brute-force ranking metrics for one list: ranks from pairwise counts.
fn brute_metrics(list: &[(f64, bool)]) -> Option<[f64; 6]> {
    let n = list.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| list[j].0 > list[i].0 || (list[j].0 == list[i].0 && j < i))
            .count()
    };
    let mut ranks: Vec<usize> = (0..n).filter(|&i| list[i].1).map(rank).collect();
    if ranks.is_empty() {
        return None;
    }
    ranks.sort();
    let ap = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
    let first = ranks[0];
    let at = |k: usize| if first <= k.min(n) { 1.0 } else { 0.0 };
    let top_relevant = (0..n).any(|i| rank(i) == 1 && list[i].1);
    Some([ap, 1.0 / first as f64, if top_relevant { 1.0 } else { 0.0 }, at(1), at(2), at(5)])
}

fn metrics_oracle() -> Check {
    let mut rng = rng_from_seed(8);
    let mut lists = Vec::new();
    let mut sums = [0.0; 6];
    let mut counted = 0usize;
    for l in 0..1000 {
        let cands: Vec<(f64, bool)> = (0..10)
            .map(|_| (rng.random_range(0..6) as f64 * 0.5, rng.random_bool(0.2)))
            .collect();
        let list = RankedList::new(format!("l{l}"), cands.clone()).map_err(|e| e.to_string())?;
        let single = aggregate(std::slice::from_ref(&list));
        ensure!(
            single.r_at_1 <= single.r_at_2 && single.r_at_2 <= single.r_at_5,
            "list {l}: recall not monotone"
        );
        if cands.iter().filter(|c| c.1).count() == 1 {
            ensure!(single.map == single.mrr, "list {l}: single relevant but MAP != MRR");
        }
        if let Some(m) = brute_metrics(&cands) {
            for (s, v) in sums.iter_mut().zip(m) {
                *s += v;
            }
            counted += 1;
        }
        lists.push(list);
    }
    let report = aggregate(&lists);
    let want = sums.map(|s| s / counted as f64);
    let got = [report.map, report.mrr, report.p_at_1, report.r_at_1, report.r_at_2, report.r_at_5];
    ensure!(got == want, "aggregate {got:?} vs brute force {want:?}");
    ensure!(report.contexts_evaluated == counted, "evaluated count");
    Ok(format!(
        "1000 lists ({counted} with a relevant candidate): MAP {:.4} MRR {:.4} R@1/2/5 {:.3}/{:.3}/{:.3}",
        got[0], got[1], got[3], got[4], got[5]
    ))
}

fn gradient_check() -> Check {
    let mut rng = rng_from_seed(9);
    let mut worst: f64 = 0.0;
    for point in 0..25 {
        let n = rng.random_range(5..40);
        let xs: Vec<FeatureVector> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let w: FeatureVector = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let b = rng.random_range(-1.0..1.0);
        let l2 = [0.0, 1e-3, 0.1][point % 3];
        let (_, gw, gb) = loss_and_grad(&w, b, &xs, &ys, l2);
        let h = 1e-5;
        let loss = |w: &FeatureVector, b: f64| loss_and_grad(w, b, &xs, &ys, l2).0;
        let mut numeric = [0.0; NUM_FEATURES + 1];
        for k in 0..NUM_FEATURES {
            let (mut up, mut down) = (w, w);
            up[k] += h;
            down[k] -= h;
            numeric[k] = (loss(&up, b) - loss(&down, b)) / (2.0 * h);
        }
        numeric[NUM_FEATURES] = (loss(&w, b + h) - loss(&w, b - h)) / (2.0 * h);
        let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
        for (k, (a, nu)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - nu).abs() / a.abs().max(nu.abs()).max(1e-8);
            worst = worst.max(rel);
            ensure!(rel <= 1e-5, "point {point} coord {k}: analytic {a} numeric {nu}");
        }
    }
    Ok(format!("25 points, max rel err {worst:.1e}"))
}

/// Idf mass of response tokens present in the context over the response's
/// idf mass.
fn idf_overlap(idf: &IdfTable, ctx: &Conversation, resp: &Utterance) -> f64 {
    let ctx_tokens: HashSet<&str> = ctx.texts().flat_map(str::split_whitespace).collect();
    let (mut shared, mut total) = (0.0, 0.0);
    for t in resp.text().split_whitespace() {
        let w = idf.idf(t);
        total += w;
        if ctx_tokens.contains(t) {
            shared += w;
        }
    }
    if total > 0.0 {
        shared / total
    } else {
        0.0
    }
}

struct SeedRun {
    ggs: Augmented,
    random: Augmented,
    lm: NGramLM,
    ex: KeywordExtractor,
    tau: f64,
    train: Dataset,
}

fn seed_run(seed: u64) -> SeedRun {
    let train = synthetic(500, seed, Split::Train);
    let lm = train_ngram(&train, 3, TokenizerMode::Whitespace).unwrap();
    let ex = extractor(&train);
    let tau = resolve_threshold(ThresholdSpec::default(), &lm, &train).unwrap();
    let pool = UtterancePool::new(&train);
    let cfg = |ablation| AugmentConfig {
        gen: GenConfig::default(),
        tau,
        seed,
        ablation,
    };
    let ggs = augment_dataset(&train, &lm, &pool, &ex, &cfg(Ablation::None)).unwrap();
    let random = augment_dataset(&train, &lm, &pool, &ex, &cfg(Ablation::RandomDa)).unwrap();
    SeedRun {
        ggs,
        random,
        lm,
        ex,
        tau,
        train,
    }
}

fn new_negatives(aug: &Augmented) -> Vec<&Example> {
    aug.dataset.groups().into_iter().map(|g| g.examples[2]).collect()
}

fn hardness(runs: &[SeedRun]) -> Check {
    let mut parts = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let mean = |aug: &Augmented| {
            let negs = new_negatives(aug);
            negs.iter().map(|e| idf_overlap(&r.ex.idf, &e.context, &e.response)).sum::<f64>() / negs.len() as f64
        };
        let (g, rnd) = (mean(&r.ggs), mean(&r.random));
        parts.push(format!("seed {}: {g:.3} vs {rnd:.3}", i + 1));
        ensure!(g - rnd > 0.0, "seed {}: generated {g:.4} <= random {rnd:.4}", i + 1);
    }
    Ok(format!("idf-weighted overlap, generated vs random: {}", parts.join("; ")))
}

/// Each test context ranks its golden response against one held-out
/// generated negative and eight golden responses of other test contexts.
fn test_set(r: &SeedRun, seed: u64) -> Dataset {
    let held_out = synthetic(200, seed + 100, Split::Test);
    let pool = UtterancePool::new(&held_out);
    let cfg = AugmentConfig {
        gen: GenConfig::default(),
        tau: r.tau,
        seed: seed + 7,
        ablation: Ablation::None,
    };
    let aug = augment_dataset(&held_out, &r.lm, &pool, &r.ex, &cfg).unwrap();
    let groups = aug.dataset.groups();
    let mut rng = rng_from_seed(seed);
    let mut examples = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        examples.push(g.examples[0].clone());
        examples.push(g.examples[2].clone());
        for _ in 0..8 {
            let mut j = rng.random_range(0..groups.len() - 1);
            if j >= i {
                j += 1;
            }
            examples.push(Example {
                context: g.conversation.clone(),
                response: groups[j].examples[0].response.clone(),
                label: Label::Negative,
                origin: Origin::Random,
            });
        }
    }
    Dataset::new(Split::Test, examples)
}

fn training_effect(runs: &[SeedRun], setup: Duration) -> Check {
    let start = Instant::now();
    let mut wins = 0;
    let mut parts = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let seed = i as u64 + 1;
        let test = test_set(r, seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let score = |train: &Dataset| {
            let m = train_matcher(train, &r.ex, &cfg).unwrap();
            evaluate(&test, Some(10), |c, resp| m.score(c, resp, &r.ex)).unwrap().r_at_1
        };
        let (g, rnd) = (score(&r.ggs.dataset), score(&r.random.dataset));
        ensure!(r.train.len() * 3 / 2 == r.ggs.dataset.len(), "augmented size");
        if g > rnd {
            wins += 1;
        }
        parts.push(format!("seed {seed}: {g:.3} vs {rnd:.3}"));
    }
    let t = start.elapsed() + setup;
    ensure!(wins >= 2, "R10@1 generated vs random-DA: {} ({wins}/3 wins)", parts.join("; "));
    ensure!(t < Duration::from_secs(300), "took {t:?}");
    Ok(format!(
        "R10@1 generated vs random-DA: {} ({wins}/3 wins), {:.2}s including augmentation",
        parts.join("; "),
        t.as_secs_f64()
    ))
}

fn ablation_plumbing(ws: &Workspace) -> Check {
    let train = load_dataset(&ws.path("train.tsv"), Format::Tsv, Split::Train).map_err(|e| e.to_string())?;
    let originals: HashMap<String, Vec<String>> = train
        .conversations()
        .into_iter()
        .map(|c| (c.id().to_string(), c.texts().map(str::to_string).collect()))
        .collect();
    let methods = |recs: &[Value]| -> Vec<String> {
        recs.iter()
            .flat_map(|r| r["candidates"].as_array().unwrap().iter())
            .map(|c| c["method"].as_str().unwrap().to_string())
            .collect()
    };
    let mut notes = Vec::new();

    ws.augment("abl-none.tsv", &[])?;
    let base = ws.audit("abl-none.tsv");
    ensure!(
        base.iter().any(|r| r["candidates"][0]["garble"].is_object()),
        "default run shows no garbling"
    );

    ws.augment("abl-no-garble.tsv", &["--no-garble"])?;
    let recs = ws.audit("abl-no-garble.tsv");
    for r in &recs {
        let orig = &originals[r["context_id"].as_str().unwrap()];
        for c in r["candidates"].as_array().unwrap() {
            ensure!(c["garble"].is_null(), "no-garble candidate carries a garble record");
            let hist: Vec<String> = serde_json::from_value(c["history"].clone()).unwrap();
            ensure!(&hist == orig, "no-garble candidate history differs from the original");
        }
    }
    notes.push(format!("no-garble: {} batches on original history", recs.len()));

    ws.augment("abl-no-filter.tsv", &["--no-filter"])?;
    let recs = ws.audit("abl-no-filter.tsv");
    let not_argmax = recs
        .iter()
        .filter(|r| {
            let ppls: Vec<f64> = r["candidates"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| c["ppl"].as_f64().unwrap())
                .collect();
            let Some(chosen) = r["selection"]["index"].as_u64() else {
                return false;
            };
            let mut best = 0;
            for i in 1..ppls.len() {
                if ppls[i] > ppls[best] {
                    best = i;
                }
            }
            chosen as usize != best
        })
        .count();
    ensure!(not_argmax >= 1, "no-filter always chose the argmax");
    notes.push(format!("no-filter: {not_argmax} non-argmax choices"));

    ws.augment("abl-no-gen1.tsv", &["--no-gen1"])?;
    let m = methods(&ws.audit("abl-no-gen1.tsv"));
    ensure!(!m.is_empty() && m.iter().all(|x| x != "gen1"), "no-gen1 still produced gen1 candidates");
    notes.push(format!("no-gen1: {} gen2 candidates", m.len()));

    ws.augment("abl-no-gen2.tsv", &["--no-gen2"])?;
    let m = methods(&ws.audit("abl-no-gen2.tsv"));
    ensure!(!m.is_empty() && m.iter().all(|x| x == "gen1"), "no-gen2 produced gen2 candidates");
    notes.push(format!("no-gen2: {} gen1 candidates", m.len()));

    ws.augment("abl-random-da.tsv", &["--random-da"])?;
    let recs = ws.audit("abl-random-da.tsv");
    ensure!(
        recs.iter()
            .all(|r| r["selection"]["origin"] == "random" && r["candidates"].as_array().unwrap().is_empty()),
        "random-da still generated candidates"
    );
    notes.push("random-da: all negatives random, no batches".into());
    Ok(notes.join("; "))
}

fn determinism(ws: &Workspace) -> Check {
    ws.augment("det-a.tsv", &["--workers", "1"])?;
    ws.augment("det-b.tsv", &["--workers", "4"])?;
    ws.augment("det-c.tsv", &[])?;
    let a = read(&ws.path("det-a.tsv"));
    ensure!(a == read(&ws.path("det-b.tsv")), "1 vs 4 workers differ");
    ensure!(a == read(&ws.path("det-c.tsv")), "1 worker vs default pool differ");
    ensure!(
        read(&ws.path("det-a.tsv.audit.jsonl")) == read(&ws.path("det-b.tsv.audit.jsonl")),
        "audit trails differ"
    );
    Ok(format!("3 runs (1, 4, default workers) byte-identical, {} bytes", a.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] AC{id:02} {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failures += 1;
                println!("[FAIL] AC{id:02} {name}: {why} [{secs:.2}s]");
            }
        }
    };

    report(1, "perplexity oracle", &mut perplexity_oracle);
    report(2, "uniform-model identity", &mut uniform_identity);
    report(3, "nucleus soundness", &mut nucleus_soundness);
    report(4, "garbling invariants", &mut garbling_invariants);
    report(5, "keyword-insertion optimality", &mut keyword_insertion);
    report(6, "selection contract", &mut selection_contract);
    let ws = Workspace::new();
    report(7, "ratio contract", &mut || ratio_contract(&ws));
    report(8, "metrics oracle", &mut metrics_oracle);
    report(9, "matcher gradient check", &mut gradient_check);
    let setup = Instant::now();
    let runs: Vec<SeedRun> = (1..=3).map(seed_run).collect();
    let setup = setup.elapsed();
    report(10, "hardness property", &mut || hardness(&runs));
    report(11, "training-effect property", &mut || training_effect(&runs, setup));
    report(12, "ablation plumbing", &mut || ablation_plumbing(&ws));
    report(13, "determinism", &mut || determinism(&ws));

    println!("acceptance: {} of 13 criteria passed", 13 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
