use bita_core::textproc::{beam_search, greedy_decode, BeamConfig, Hypothesis, NextTokenScorer};
use bita_core::Result;
use proptest::prelude::*;

/// Bigram LM: the next-token distribution depends only on the last token.
#[derive(Debug)]
struct Bigram {
    log_probs: Vec<Vec<f64>>,
}

impl Bigram {
    fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let log_probs = logits
            .into_iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                row.iter().map(|v| v - z).collect()
            })
            .collect();
        Self { log_probs }
    }
}

impl NextTokenScorer for Bigram {
    fn next_log_probs(&mut self, sequences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(sequences
            .iter()
            .map(|s| self.log_probs[*s.last().unwrap()].clone())
            .collect())
    }
}

/// Every sequence the decoder could produce, scored the same way: stop at
/// the end token or after `max_len` tokens.
fn enumerate(lm: &Bigram, cfg: &BeamConfig) -> Vec<Hypothesis> {
    let vocab = lm.log_probs.len();
    let mut out = Vec::new();
    let mut stack = vec![(vec![cfg.start], 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        for t in (0..vocab).filter(|t| !cfg.banned.contains(t)) {
            let lp = lp + lm.log_probs[*seq.last().unwrap()][t];
            let mut next = seq.clone();
            next.push(t);
            let n = next.len() - 1;
            if t == cfg.end || n == cfg.max_len {
                out.push(Hypothesis {
                    tokens: next[1..].to_vec(),
                    log_prob: lp,
                    score: lp / n as f64,
                });
            } else {
                stack.push((next, lp));
            }
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out
}

#[test]
fn width_two_finds_the_two_best_pairs() {
    // tokens 0 (start), 1, 2; no end token reachable, so every hypothesis
    // has exactly two tokens
    let lm = Bigram::from_logits(vec![
        vec![-9.0, 1.0, 0.5],
        vec![-9.0, 0.2, 1.5],
        vec![-9.0, 1.2, 0.1],
    ]);
    let cfg = BeamConfig {
        beam_width: 2,
        max_len: 2,
        start: 0,
        end: 99,
        banned: vec![0],
    };
    let mut lm = lm;
    let got = beam_search(&mut lm, &cfg).unwrap();
    let oracle = enumerate(&lm, &cfg);
    assert_eq!(got.len(), 2);
    for (g, o) in got.iter().zip(&oracle) {
        assert_eq!(g.tokens, o.tokens);
        assert!((g.score - o.score).abs() < 1e-12);
    }
    assert_eq!(got[0].tokens, vec![1, 2]);
    assert!(got[0].score >= got[1].score);
}

fn toy_lm(vocab: usize) -> impl Strategy<Value = Bigram> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, vocab), vocab).prop_map(Bigram::from_logits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exhaustive_width_matches_enumeration(
        (mut lm, vocab) in (2usize..=4).prop_flat_map(|v| (toy_lm(v), Just(v))),
        max_len in 1usize..=4,
    ) {
        // token 0 starts, the last token ends
        let cfg = BeamConfig { beam_width: vocab.pow(max_len as u32), max_len, start: 0, end: vocab - 1, banned: vec![0] };
        let got = beam_search(&mut lm, &cfg).unwrap();
        let oracle = enumerate(&lm, &cfg);
        prop_assert_eq!(got.len(), oracle.len());
        prop_assert!((got[0].score - oracle[0].score).abs() < 1e-12);
        prop_assert_eq!(&got[0].tokens, &oracle[0].tokens);
        for w in got.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn width_one_is_greedy(mut lm in toy_lm(4), max_len in 1usize..=6) {
        let cfg = BeamConfig { beam_width: 1, max_len, start: 0, end: 3, banned: vec![0] };
        let beam = beam_search(&mut lm, &cfg).unwrap();
        let greedy = greedy_decode(&mut lm, &cfg).unwrap();
        prop_assert_eq!(beam.len(), 1);
        prop_assert_eq!(&beam[0].tokens, &greedy.tokens);
        prop_assert!((beam[0].score - greedy.score).abs() < 1e-12);
    }

    #[test]
    fn results_sorted_and_bounded(mut lm in toy_lm(4), width in 1usize..=5, max_len in 1usize..=5) {
        let cfg = BeamConfig { beam_width: width, max_len, start: 0, end: 3, banned: vec![0] };
        let got = beam_search(&mut lm, &cfg).unwrap();
        prop_assert!(!got.is_empty() && got.len() <= width);
        for w in got.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for h in &got {
            prop_assert!(h.tokens.len() <= max_len);
        }
    }
}

#[test]
fn rejects_zero_width() {
    let mut lm = Bigram::from_logits(vec![vec![0.0; 2]; 2]);
    let cfg = BeamConfig {
        beam_width: 0,
        max_len: 2,
        start: 0,
        end: 1,
        banned: vec![],
    };
    assert!(beam_search(&mut lm, &cfg).is_err());
}
