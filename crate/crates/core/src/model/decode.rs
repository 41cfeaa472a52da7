use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::Image;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::textproc::{beam_search, BeamConfig, Caption, NextTokenScorer, Vocabulary};

use super::{build_prefix_causal_mask, BitaModel, Forward};

/// Next-token scorer over the frozen LM with a fixed visual prefix.
pub struct PrefixScorer<'a> {
    model: &'a BitaModel,
    prefix: Tensor,
}

impl<'a> PrefixScorer<'a> {
    /// Computes the visual prefix `[num_prompts × lm_dim]` for one image.
    pub fn new(model: &'a BitaModel, image: &Image) -> Result<Self> {
        let mut f = Forward::new(model, &[]);
        let feats = f.image_features(&[image])?;
        let z = f.image_branch(feats, 1)?;
        let p = f.project_to_lm(z)?;
        let prefix = f.graph.value(p).clone();
        Ok(Self { model, prefix })
    }

    pub fn prefix(&self) -> &Tensor {
        &self.prefix
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - z).collect()
}

impl NextTokenScorer for PrefixScorer<'_> {
    fn next_log_probs(&mut self, sequences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sequences.len());
        // sequences of equal length share one batched pass
        let mut start = 0;
        while start < sequences.len() {
            let len = sequences[start].len();
            let mut end = start + 1;
            while end < sequences.len() && sequences[end].len() == len {
                end += 1;
            }
            let batch = end - start;
            let ids: Vec<usize> = sequences[start..end].iter().flatten().copied().collect();
            let mut f = Forward::new(self.model, &[]);
            let p = f.graph.constant(self.prefix.clone());
            let p = f.graph.tile_rows(p, batch)?;
            let mask = build_prefix_causal_mask(self.prefix.rows(), len);
            let logits = f.lm_forward(Some(p), &ids, batch, &mask)?;
            let logits = f.graph.value(logits);
            for b in 0..batch {
                out.push(log_softmax(logits.row(b * len + len - 1)));
            }
            start = end;
        }
        Ok(out)
    }
}

impl BitaModel {
    /// Beam-search captions for one image, best first.
    pub fn caption(&self, vocab: &Vocabulary, image: &Image, beam_width: usize, max_len: usize) -> Result<Vec<Caption>> {
        let max_len = max_len.min(self.config().lm_text_capacity());
        let mut scorer = PrefixScorer::new(self, image)?;
        let hyps = beam_search(&mut scorer, &BeamConfig::captioning(beam_width, max_len))?;
        Ok(hyps
            .into_iter()
            .map(|h| Caption {
                text: vocab.decode(&h.tokens),
                token_ids: h.tokens,
                score: h.score,
            })
            .collect())
    }
}
