//! Image-text contrastive loss and prefix causal language modeling loss.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{GroupPool, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the prompt rows of one image are reduced to a single similarity
/// with a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SimilarityPooling {
    #[default]
    MaxOverPrompts,
    MeanOverPrompts,
}

impl SimilarityPooling {
    fn group_pool(self) -> GroupPool {
        match self {
            SimilarityPooling::MaxOverPrompts => GroupPool::Max,
            SimilarityPooling::MeanOverPrompts => GroupPool::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ItcConfig {
    pub temperature: f64,
    pub pooling: SimilarityPooling,
}

impl Default for ItcConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            pooling: SimilarityPooling::MaxOverPrompts,
        }
    }
}

impl ItcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn unit(row: &[f64]) -> Result<Vec<f64>> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

/// Cosine similarity between a text vector and each prompt row, pooled.
pub fn pair_similarity(z_hat: &Tensor, cls: &Tensor, pooling: SimilarityPooling) -> Result<f64> {
    if z_hat.shape().len() != 2 || z_hat.cols() != cls.len() {
        return Err(Error::shape("pair_similarity", z_hat.shape(), cls.shape()));
    }
    let c = unit(cls.data())?;
    let mut sims = Vec::with_capacity(z_hat.rows());
    for r in 0..z_hat.rows() {
        let p = unit(z_hat.row(r))?;
        sims.push(p.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>());
    }
    Ok(match pooling {
        SimilarityPooling::MaxOverPrompts => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SimilarityPooling::MeanOverPrompts => sims.iter().sum::<f64>() / sims.len() as f64,
    })
}

/// Graph nodes produced by [`itc_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ItcOutput {
    /// `L_g2t + L_t2g`.
    pub loss: Var,
    pub image_to_text: Var,
    pub text_to_image: Var,
    /// `S[i][j]`: image `i` against text `j`, `[B × B]`.
    pub similarity: Var,
}

/// Symmetric InfoNCE over a similarity matrix whose diagonal holds the
/// positives. Each direction is a mean over the batch.
pub fn contrastive_loss(g: &mut Graph<'_>, similarity: Var, temperature: f64) -> Result<ItcOutput> {
    ItcConfig {
        temperature,
        ..ItcConfig::default()
    }
    .validate()?;
    let shape = g.shape(similarity).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 2 {
        return Err(Error::shape("itc_loss", &shape, &[2, 2]));
    }
    let b = shape[0];
    let targets: Vec<usize> = (0..b).collect();
    let logits = g.scale(similarity, 1.0 / temperature);
    let image_to_text = g.cross_entropy(logits, &targets, None)?;
    let logits_t = g.transpose(logits)?;
    let text_to_image = g.cross_entropy(logits_t, &targets, None)?;
    let loss = g.add(image_to_text, text_to_image)?;
    Ok(ItcOutput {
        loss,
        image_to_text,
        text_to_image,
        similarity,
    })
}

/// Image-text contrastive loss. `prompt_outputs` is `[B·num_prompts × d]`
/// grouped per image, `cls_outputs` is `[B × d]`; pair `i` is image `i`
/// with text `i`.
pub fn itc_loss(g: &mut Graph<'_>, prompt_outputs: Var, cls_outputs: Var, cfg: &ItcConfig) -> Result<ItcOutput> {
    cfg.validate()?;
    let ps = g.shape(prompt_outputs).to_vec();
    let cs = g.shape(cls_outputs).to_vec();
    if ps.len() != 2 || cs.len() != 2 || ps[1] != cs[1] || cs[0] < 2 || ps[0] % cs[0] != 0 {
        return Err(Error::shape("itc_loss", &ps, &cs));
    }
    let num_prompts = ps[0] / cs[0];
    let p = g.l2_normalize_rows(prompt_outputs)?;
    let c = g.l2_normalize_rows(cls_outputs)?;
    // [texts × images·prompts], pooled to [texts × images]
    let all = g.matmul_nt(c, p)?;
    let text_by_image = g.pool_col_groups(all, num_prompts, cfg.pooling.group_pool())?;
    let similarity = g.transpose(text_by_image)?;
    contrastive_loss(g, similarity, cfg.temperature)
}

/// Mean next-token cross-entropy over the non-pad text positions.
///
/// `logits` is `[batch·(prefix_len + T) × vocab]`, grouped per sequence;
/// the first `prefix_len` rows of each sequence are dropped. `targets`
/// holds `batch·T` ids and rows whose target is `pad_id` are skipped.
pub fn pclm_loss(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[usize],
    batch: usize,
    prefix_len: usize,
    pad_id: usize,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || batch == 0 || shape[0] % batch != 0 {
        return Err(Error::shape("pclm_loss", &shape, &[batch]));
    }
    let rows_per_seq = shape[0] / batch;
    let (text_logits, text_len) = if prefix_len == 0 {
        (logits, rows_per_seq)
    } else if rows_per_seq > prefix_len {
        let t = rows_per_seq - prefix_len;
        (g.slice_blocks(logits, batch, prefix_len, t)?, t)
    } else {
        return Err(Error::shape("pclm_loss", &shape, &[batch * (prefix_len + 1)]));
    };
    if targets.len() != batch * text_len {
        return Err(Error::shape("pclm_loss", &[batch * text_len], &[targets.len()]));
    }
    let weights: Vec<f64> = targets.iter().map(|&t| if t == pad_id { 0.0 } else { 1.0 }).collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Data("every target position is padding".into()));
    }
    g.cross_entropy(text_logits, targets, Some(&weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s_loss(s: Tensor, tau: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(s);
        let out = contrastive_loss(&mut g, v, tau).unwrap();
        g.value(out.loss).data()[0]
    }

    #[test]
    fn similarity_examples() {
        let prompts = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let cls = Tensor::new(&[2], vec![3.0, 0.0]).unwrap();
        let m = SimilarityPooling::MaxOverPrompts;
        assert!((pair_similarity(&prompts, &cls, m).unwrap() - 1.0).abs() < 1e-15);
        let diag = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let v = pair_similarity(&prompts, &diag, m).unwrap();
        assert!((v - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let p3 = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        let orth = Tensor::new(&[3], vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pair_similarity(&p3, &orth, m).unwrap(), 0.0);
        let zero = Tensor::zeros(&[2]);
        assert!(matches!(pair_similarity(&prompts, &zero, m), Err(Error::ZeroNorm)));
    }

    #[test]
    fn identical_embeddings_give_two_ln_b() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[4 * 3, 5], 0.3));
        let c = g.constant(Tensor::full(&[4, 5], 0.7));
        let out = itc_loss(&mut g, p, c, &ItcConfig::default()).unwrap();
        let l = g.value(out.loss).data()[0];
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_similarity_closed_forms() {
        let e = core::f64::consts::E;
        let one = -(e / (e + 1.0)).ln();
        assert!((s_loss(Tensor::identity(2), 1.0) - 2.0 * one).abs() < 1e-12);
        assert!((s_loss(Tensor::identity(2), 1.0) - 0.6266).abs() < 1e-4);
        let k = (1.0f64 / 0.07).exp();
        let per = -(k / (k + 1.0)).ln();
        let l = s_loss(Tensor::identity(2), 0.07);
        assert!((l - 2.0 * per).abs() < 1e-15);
        assert!((l - 1.2e-6).abs() < 0.05e-6, "{l}");
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::identity(2));
        assert!(matches!(contrastive_loss(&mut g, s, 0.0), Err(Error::Config(_))));
        assert!(matches!(contrastive_loss(&mut g, s, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn pclm_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 1]));
        let loss = pclm_loss(&mut g, l, &[0, 0, 0], 1, 0, 99).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);

        let l = g.constant(Tensor::full(&[4, 10], 0.5));
        let loss = pclm_loss(&mut g, l, &[1, 2, 3, 0], 2, 0, 0).unwrap();
        assert!((g.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut hot = Tensor::zeros(&[2, 5]);
        hot.data_mut()[2] = 100.0;
        hot.data_mut()[5 + 4] = 100.0;
        let l = g.constant(hot);
        let loss = pclm_loss(&mut g, l, &[2, 4], 1, 0, 0).unwrap();
        assert!(g.value(loss).data()[0] < 1e-40);
    }

    #[test]
    fn pclm_all_padding_is_an_error() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        assert!(pclm_loss(&mut g, l, &[0, 0], 1, 0, 0).is_err());
        assert!(pclm_loss(&mut g, l, &[1], 1, 0, 0).is_err());
    }

    #[test]
    fn pclm_skips_prefix_rows() {
        // rows 0..2 are prefix, only rows 2..4 carry text
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[4, 3]);
        t.data_mut()[0] = 50.0;
        let l = g.leaf(t, true);
        let loss = pclm_loss(&mut g, l, &[1, 2], 1, 2, 0).unwrap();
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let d = grads.wrt(l);
        assert!(d.data()[..6].iter().all(|&v| v == 0.0));
    }
}
