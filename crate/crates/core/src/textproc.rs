//! Word-level vocabulary, beam-search decoding and caption metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Lowercase, drop punctuation, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token/id bijection with five reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const UNK: usize = 4;
    pub const RESERVED: [&'static str; 5] = ["<pad>", "[CLS]", "<bos>", "<eos>", "<unk>"];

    /// Rebuilds a vocabulary from its token list, e.g. after loading.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED.len() || tokens[..5].iter().zip(Self::RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Data("token list does not start with the reserved tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < Self::RESERVED.len()
    }

    /// Word ids of `text`, without any special tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(Self::UNK))
            .collect()
    }

    /// Joins word tokens with single spaces, stopping at `<eos>` and
    /// skipping the other reserved ids except `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                Self::EOS => break,
                Self::PAD | Self::CLS | Self::BOS => {}
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }
}

/// Word-level vocabulary ordered by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for w in normalize(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !Vocabulary::RESERVED.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = Vocabulary::RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// A decoded caption with its length-normalized log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub score: f64,
}

/// Source of next-token log-probabilities for decoding.
pub trait NextTokenScorer {
    /// Log-probabilities over the vocabulary for the token following each
    /// sequence. Every sequence starts with the start token.
    fn next_log_probs(&mut self, sequences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum number of generated tokens, `<eos>` included.
    pub max_len: usize,
    pub start: usize,
    pub end: usize,
    /// Tokens never generated.
    pub banned: Vec<usize>,
}

impl BeamConfig {
    /// Settings for captioning with a [`Vocabulary`].
    pub fn captioning(beam_width: usize, max_len: usize) -> Self {
        Self {
            beam_width,
            max_len,
            start: Vocabulary::BOS,
            end: Vocabulary::EOS,
            banned: vec![Vocabulary::PAD, Vocabulary::CLS, Vocabulary::BOS, Vocabulary::UNK],
        }
    }
}

/// A finished hypothesis: generated ids (start token excluded, end token
/// included if emitted) and the total log-probability divided by their
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Beam search ranked by length-normalized log-probability.
///
/// Live hypotheses are pruned by cumulative log-probability (they all have
/// the same length). A hypothesis that emits the end token is finished;
/// the search stops once `beam_width` hypotheses are finished, no live
/// hypothesis remains, or `max_len` tokens have been generated, at which
/// point surviving live hypotheses are finished as they stand. Ties go to
/// the lower token id.
pub fn beam_search<S: NextTokenScorer>(scorer: &mut S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam_width and max_len must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![cfg.start], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let seqs: Vec<Vec<usize>> = live.iter().map(|(s, _)| s.clone()).collect();
        let scores = scorer.next_log_probs(&seqs)?;
        if scores.len() != seqs.len() {
            return Err(Error::contract("scorer returned the wrong number of rows"));
        }
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, row) in scores.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if !cfg.banned.contains(&t) && lp.is_finite() {
                    cands.push((b, t, live[b].1 + lp));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let len = (step + 1) as f64;
        let mut next = Vec::with_capacity(cfg.beam_width);
        for (b, t, lp) in cands {
            if next.len() == cfg.beam_width {
                break;
            }
            let mut seq = live[b].0.clone();
            seq.push(t);
            if t == cfg.end {
                finished.push(Hypothesis {
                    tokens: seq[1..].to_vec(),
                    log_prob: lp,
                    score: lp / len,
                });
            } else {
                next.push((seq, lp));
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= cfg.beam_width {
            break;
        }
        if step + 1 == cfg.max_len {
            for (seq, lp) in live.drain(..) {
                finished.push(Hypothesis {
                    tokens: seq[1..].to_vec(),
                    log_prob: lp,
                    score: lp / len,
                });
            }
        }
    }
    finished.sort_by(by_score);
    finished.truncate(cfg.beam_width);
    Ok(finished)
}

/// Argmax rollout until the end token or `max_len` tokens.
pub fn greedy_decode<S: NextTokenScorer>(scorer: &mut S, cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut seq = vec![cfg.start];
    let mut lp = 0.0;
    for _ in 0..cfg.max_len {
        let row = scorer.next_log_probs(core::slice::from_ref(&seq))?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (t, &v) in row.iter().enumerate() {
            if cfg.banned.contains(&t) || !v.is_finite() {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        let (t, v) = best.ok_or_else(|| Error::contract("no token available to decode"))?;
        seq.push(t);
        lp += v;
        if t == cfg.end {
            break;
        }
    }
    let n = (seq.len() - 1) as f64;
    Ok(Hypothesis {
        tokens: seq[1..].to_vec(),
        log_prob: lp,
        score: lp / n,
    })
}

fn ngram_counts(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(k);
        }
    }
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(totals) {
        // an order with no candidate n-grams is vacuously precise
        if t == 0 {
            continue;
        }
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / matched.len() as f64).exp()
}

fn check_n(max_n: usize) -> Result<()> {
    if (1..=4).contains(&max_n) {
        Ok(())
    } else {
        Err(Error::Config(format!("max_n must be 1..4, got {max_n}")))
    }
}

/// Sentence BLEU@`max_n` with clipped precisions and a closest-reference
/// brevity penalty. An empty candidate scores 0. Orders longer than the
/// candidate have precision 1, so they leave the geometric mean to the
/// brevity penalty.
pub fn bleu(candidate: &str, refs: &[&str], max_n: usize) -> Result<f64> {
    check_n(max_n)?;
    if refs.is_empty() {
        return Err(Error::Data("bleu needs at least one reference".into()));
    }
    let cand = normalize(candidate);
    let refs: Vec<Vec<String>> = refs.iter().map(|r| normalize(r)).collect();
    let (matched, totals): (Vec<usize>, Vec<usize>) = (1..=max_n).map(|n| clipped(&cand, &refs, n)).unzip();
    Ok(bleu_from_counts(&matched, &totals, cand.len(), closest_ref_len(cand.len(), &refs)))
}

/// Corpus BLEU: clipped counts, candidate totals and lengths summed over
/// all pairs before the geometric mean and brevity penalty.
pub fn corpus_bleu(candidates: &[String], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_n(max_n)?;
    check_corpus(candidates, refs)?;
    let mut matched = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, rs) in candidates.iter().zip(refs) {
        let cand = normalize(cand);
        let rs: Vec<Vec<String>> = rs.iter().map(|x| normalize(x)).collect();
        for n in 1..=max_n {
            let (m, t) = clipped(&cand, &rs, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), &rs);
    }
    Ok(bleu_from_counts(&matched, &totals, c, r))
}

fn check_corpus(candidates: &[String], refs: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() || candidates.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            refs.len()
        )));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }
    Ok(())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with β = 1.2, maximized over references.
pub fn rouge_l(candidate: &str, refs: &[&str]) -> f64 {
    let cand = normalize(candidate);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let r = normalize(r);
            let l = lcs(&cand, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / cand.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Per-candidate CIDEr scores and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_candidate: Vec<f64>,
    pub mean: f64,
}

type Counts = BTreeMap<Vec<String>, usize>;

fn owned_counts(words: &[String], n: usize) -> Counts {
    ngram_counts(words, n).into_iter().map(|(g, k)| (g.to_vec(), k)).collect()
}

/// CIDEr: for each n in 1..4 the TF-IDF cosine between candidate and each
/// reference, with candidate counts clipped to the reference counts in the
/// numerator, averaged over references and n, times 10. IDF is
/// `ln(N / df)` with N the number of reference sets. Orders where neither
/// sentence has an n-gram are left out of the average. When both vectors of
/// an order carry no IDF weight, the order scores 1 if their raw counts are
/// identical and 0 otherwise.
pub fn cider(candidates: &[String], refs: &[Vec<String>]) -> Result<CiderScores> {
    check_corpus(candidates, refs)?;
    let n_docs = refs.len() as f64;
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| normalize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = refs
        .iter()
        .map(|rs| rs.iter().map(|r| normalize(r)).collect())
        .collect();
    let mut sums: Vec<Vec<f64>> = refs.iter().map(|rs| vec![0.0; rs.len()]).collect();
    let mut orders: Vec<Vec<usize>> = refs.iter().map(|rs| vec![0; rs.len()]).collect();
    for n in 1..=4 {
        let ref_counts: Vec<Vec<Counts>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| owned_counts(r, n)).collect())
            .collect();
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for set in &ref_counts {
            let mut seen: Vec<&[String]> = set.iter().flat_map(|c| c.keys().map(Vec::as_slice)).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let norm = |c: &Counts| c.iter().map(|(g, &k)| (k as f64 * idf(g)).powi(2)).sum::<f64>().sqrt();
        for (i, cand) in cands.iter().enumerate() {
            let cc = owned_counts(cand, n);
            let cn = norm(&cc);
            for (j, rc) in ref_counts[i].iter().enumerate() {
                if cc.is_empty() && rc.is_empty() {
                    continue;
                }
                orders[i][j] += 1;
                let rn = norm(rc);
                sums[i][j] += if cn == 0.0 && rn == 0.0 {
                    if cc == *rc { 1.0 } else { 0.0 }
                } else if cn == 0.0 || rn == 0.0 {
                    0.0
                } else {
                    let dot: f64 = rc
                        .iter()
                        .map(|(g, &rk)| {
                            let ck = cc.get(g).copied().unwrap_or(0).min(rk);
                            let w = idf(g);
                            ck as f64 * w * rk as f64 * w
                        })
                        .sum();
                    dot / (cn * rn)
                };
            }
        }
    }
    let per_candidate: Vec<f64> = sums
        .iter()
        .zip(&orders)
        .map(|(s, o)| {
            let per_ref: f64 = s
                .iter()
                .zip(o)
                .map(|(&v, &k)| if k == 0 { 0.0 } else { v / k as f64 })
                .sum();
            10.0 * per_ref / s.len() as f64
        })
        .collect();
    let mean = per_candidate.iter().sum::<f64>() / per_candidate.len() as f64;
    Ok(CiderScores { per_candidate, mean })
}
