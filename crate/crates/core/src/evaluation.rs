//! Automatic response metrics and the factor analyses: perplexity, BLEU-2,
//! ROUGE-L, greedy embedding matching, conditional Hits@k and realization.
//!
//! Text metrics work on `text::tokenize` output (lowercased, punctuation
//! split off).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSet;
use crate::corpus::Conversation;
use crate::decoding::{generate, ChosenFactors, DecodeConfig, DecodeMode, Generation};
use crate::error::{Error, Result};
use crate::model::ComaeModel;
use crate::numerics::argmax;
use crate::taxonomy::{CommMechanism, FactorAxis, FactorTriple};
use crate::text::{tokenize, EOS_ID};
use crate::training::corpus_perplexity;

/// Used in place of a zero n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

pub fn perplexity(model: &ComaeModel, corpus: &[Conversation]) -> Result<f64> {
    let examples = corpus
        .iter()
        .map(|c| model.encode(c))
        .collect::<Result<Vec<_>>>()?;
    corpus_perplexity(model, &examples)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

fn modified_precision<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    let h = ngram_counts(hyp, n);
    let total: usize = h.values().sum();
    if total == 0 {
        return BLEU_EPSILON;
    }
    let r = ngram_counts(reference, n);
    let matched: usize = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    if matched == 0 {
        BLEU_EPSILON
    } else {
        matched as f64 / total as f64
    }
}

/// Sentence BLEU with uniform weights over 1- and 2-grams. An empty
/// hypothesis scores 0.
pub fn bleu2<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p1 = modified_precision(hyp, reference, 1);
    let p2 = modified_precision(hyp, reference, 2);
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (p1 * p2).sqrt()
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S], beta: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Word vectors for greedy matching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> Self {
        EmbeddingTable { vectors }
    }

    /// The model's own input word table, special tokens excluded.
    pub fn from_model(model: &ComaeModel) -> Self {
        let table = model.params().get(model.word_table());
        let vectors = model
            .vocab()
            .tokens()
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), table.row(i).to_vec()))
            .collect();
        EmbeddingTable { vectors }
    }

    /// One `token v1 v2 ...` line per word; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v = parts
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("embedding line {}: {e}", n + 1)))?;
            if v.is_empty() || *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::invalid(format!(
                    "embedding line {} has {} components",
                    n + 1,
                    v.len()
                )));
            }
            vectors.insert(token.to_lowercase(), v);
        }
        if vectors.is_empty() {
            return Err(Error::invalid("embedding file has no vectors"));
        }
        Ok(EmbeddingTable { vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Unit vector of a token; unknown and zero vectors give None.
    fn unit(&self, token: &str) -> Option<Vec<f64>> {
        let v = self.vectors.get(token)?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
    }
}

fn directional(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// Mean of the two directional greedy cosine scores. Tokens without a
/// usable vector are skipped.
pub fn greedy_matching<S: AsRef<str>>(hyp: &[S], reference: &[S], table: &EmbeddingTable) -> Result<f64> {
    let h: Vec<Vec<f64>> = hyp.iter().filter_map(|t| table.unit(t.as_ref())).collect();
    let r: Vec<Vec<f64>> = reference.iter().filter_map(|t| table.unit(t.as_ref())).collect();
    if h.is_empty() || r.is_empty() {
        return Err(Error::invalid(
            "greedy matching needs at least one known token on each side",
        ));
    }
    Ok(0.5 * (directional(&h, &r) + directional(&r, &h)))
}

/// Corpus-level text scores: means of sentence scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu2: f64,
    pub rouge_l: f64,
    pub greedy: Option<f64>,
    pub pairs: usize,
    pub empty_hypotheses: usize,
    /// Pairs left out of the greedy mean for lack of known tokens.
    pub greedy_skipped: usize,
}

pub fn score_texts(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    table: Option<&EmbeddingTable>,
    beta: f64,
) -> Result<TextScores> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let n = hypotheses.len() as f64;
    let mut s = TextScores {
        bleu2: 0.0,
        rouge_l: 0.0,
        greedy: None,
        pairs: hypotheses.len(),
        empty_hypotheses: 0,
        greedy_skipped: 0,
    };
    let mut greedy = Vec::new();
    for (h, r) in hypotheses.iter().zip(references) {
        if h.is_empty() {
            s.empty_hypotheses += 1;
        }
        s.bleu2 += bleu2(h, r) / n;
        s.rouge_l += rouge_l(h, r, beta) / n;
        if let Some(t) = table {
            match greedy_matching(h, r, t) {
                Ok(v) => greedy.push(v),
                Err(_) => s.greedy_skipped += 1,
            }
        }
    }
    if table.is_some() {
        if greedy.is_empty() {
            return Err(Error::invalid("no pair has known tokens for greedy matching"));
        }
        s.greedy = Some(greedy.iter().sum::<f64>() / greedy.len() as f64);
    }
    Ok(s)
}

/// Decodes one response per conversation. Each conversation gets its own
/// generator seeded from `cfg.seed` and its index.
pub fn generate_responses(
    model: &ComaeModel,
    corpus: &[Conversation],
    mode: DecodeMode,
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ex = model.encode(c)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            generate(model, &ex.context, mode, ex.triple, cfg, &mut rng)
        })
        .collect()
}

pub fn generation_tokens(model: &ComaeModel, g: &Generation) -> Vec<String> {
    g.tokens
        .iter()
        .filter(|&&t| t != EOS_ID)
        .map(|&t| model.vocab().token(t).to_string())
        .collect()
}

/// Conditional prediction result for one ordered factor pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsResult {
    pub x: FactorAxis,
    pub y: FactorAxis,
    pub k: usize,
    pub hits: f64,
    /// Share of responses whose X was predicted correctly.
    pub proportion: f64,
    pub support: usize,
}

fn cm_argmax(probs: &[[f64; 2]; 3]) -> CommMechanism {
    CommMechanism::from_bits(probs.map(|p| p[1] > p[0]))
}

/// Rank of `target` in descending order, ties broken towards lower indices.
fn rank_of(probs: &[f64], target: usize) -> usize {
    let t = probs[target];
    probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > t || (p == t && i < target))
        .count()
}

/// Among responses whose X argmax equals the truth, the share whose true Y
/// lies in the top `k` of the Y distribution. Upstream stages are fixed to
/// the ground truth.
pub fn hits_at_k(
    model: &ComaeModel,
    corpus: &[Conversation],
    x: FactorAxis,
    y: FactorAxis,
    k: usize,
) -> Result<HitsResult> {
    let order = |a: FactorAxis| a as usize;
    if order(x) >= order(y) {
        return Err(Error::invalid(format!("{x} must precede {y} in the hierarchy")));
    }
    let v = model.variant();
    let modeled = |a: FactorAxis| match a {
        FactorAxis::Cm => v.cm,
        FactorAxis::Da => v.da,
        FactorAxis::Em => v.em,
    };
    if !modeled(x) || !modeled(y) {
        return Err(Error::invalid(format!("variant {v} does not predict both {x} and {y}")));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("hits of an empty corpus"));
    }
    let (mut support, mut hits) = (0usize, 0usize);
    for c in corpus {
        let ex = model.encode(c)?;
        let truth: FactorTriple = c.response_triple();
        let enc = model.encode_context(&ex.context)?;
        let d = model.factor_distributions(&enc.h_x, &truth)?;
        let x_right = match x {
            FactorAxis::Cm => cm_argmax(&d.cm.expect("modeled")) == truth.cm,
            FactorAxis::Da => argmax(d.da.as_deref().expect("modeled")) == truth.da.index(),
            FactorAxis::Em => unreachable!("EM has no successor"),
        };
        if !x_right {
            continue;
        }
        support += 1;
        let (probs, target) = match y {
            FactorAxis::Da => (d.da.expect("modeled"), truth.da.index()),
            FactorAxis::Em => (d.em.expect("modeled"), truth.em.index()),
            FactorAxis::Cm => unreachable!("CM has no predecessor"),
        };
        if rank_of(&probs, target) < k {
            hits += 1;
        }
    }
    if support == 0 {
        return Err(Error::invalid(format!("no response has {x} predicted correctly")));
    }
    Ok(HitsResult {
        x,
        y,
        k,
        hits: hits as f64 / support as f64,
        proportion: support as f64 / corpus.len() as f64,
        support,
    })
}

/// A response together with the factors it was meant to express.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationItem {
    pub text: String,
    pub intended: ChosenFactors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationResult {
    pub axis: FactorAxis,
    pub ratio: f64,
    pub support: usize,
}

/// Share of responses whose classifier-identified factor equals the
/// intended one. Mechanisms are compared as the full triple; empty
/// responses count as misses.
pub fn realization_score(
    items: &[RealizationItem],
    classifiers: &ClassifierSet,
    axes: &[FactorAxis],
) -> Result<Vec<RealizationResult>> {
    if items.is_empty() {
        return Err(Error::invalid("no responses to score"));
    }
    axes.iter()
        .map(|&axis| {
            let mut right = 0usize;
            for it in items {
                let missing = || Error::invalid(format!("a response has no intended {axis}"));
                // an empty response realizes nothing
                if tokenize(&it.text).is_empty() {
                    match axis {
                        FactorAxis::Cm => it.intended.cm.map(|_| ()),
                        FactorAxis::Da => it.intended.da.map(|_| ()),
                        FactorAxis::Em => it.intended.em.map(|_| ()),
                    }
                    .ok_or_else(missing)?;
                    continue;
                }
                let ok = match axis {
                    FactorAxis::Cm => classifiers.identify_cm(&it.text)? == it.intended.cm.ok_or_else(missing)?,
                    FactorAxis::Da => classifiers.identify_da(&it.text)? == it.intended.da.ok_or_else(missing)?,
                    FactorAxis::Em => classifiers.identify_em(&it.text)? == it.intended.em.ok_or_else(missing)?,
                };
                right += ok as usize;
            }
            Ok(RealizationResult {
                axis,
                ratio: right as f64 / items.len() as f64,
                support: items.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub split: String,
    pub ppl: f64,
    pub text: Option<TextScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsEntry {
    pub split: String,
    pub hits_at_1: HitsResult,
    pub hits_at_3: HitsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationEntry {
    pub split: String,
    pub result: RealizationResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub splits: Vec<SplitScores>,
    pub hits: Vec<HitsEntry>,
    pub realization: Vec<RealizationEntry>,
    /// Analyses that were skipped and why.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// `model_id,split,metric,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,split,metric,value\n");
        let mut row = |split: &str, metric: String, value: f64| {
            writeln!(out, "{},{},{},{}", self.model_id, split, metric, value).expect("string write");
        };
        for s in &self.splits {
            row(&s.split, "ppl".into(), s.ppl);
            if let Some(t) = &s.text {
                row(&s.split, "bleu2".into(), t.bleu2);
                row(&s.split, "rouge_l".into(), t.rouge_l);
                if let Some(g) = t.greedy {
                    row(&s.split, "greedy".into(), g);
                }
            }
        }
        for h in &self.hits {
            let pair = format!("{}->{}", h.hits_at_1.x, h.hits_at_1.y);
            row(&h.split, format!("hits@1[{pair}]"), h.hits_at_1.hits);
            row(&h.split, format!("hits@3[{pair}]"), h.hits_at_3.hits);
            row(&h.split, format!("prop[{pair}]"), h.hits_at_1.proportion);
        }
        for r in &self.realization {
            row(&r.split, format!("realization[{}]", r.result.axis), r.result.ratio);
        }
        out
    }
}
