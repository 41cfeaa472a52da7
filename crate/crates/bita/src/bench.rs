//! Wall-clock comparison of the Fourier and self-attention token mixers.

use std::time::Instant;

use bita_core::model::{BitaModel, Forward, ModelConfig};
use bita_core::train::Stage;
use bita_core::MixerKind;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub mixer: MixerKind,
    pub mean_us: f64,
    pub stddev_us: f64,
    /// Trainable parameters of the variant.
    pub params: usize,
}

pub fn mixer_name(m: MixerKind) -> &'static str {
    match m {
        MixerKind::FourierMix => "fourier",
        MixerKind::SelfAttention => "self-attn",
    }
}

/// One training iteration of the IFT text branch: forward over `batch`
/// sequences, sum, backward.
fn iteration(model: &BitaModel, tokens: &[usize], batch: usize) -> Result<()> {
    let mut f = Forward::new(model, Stage::Stage1.trainable_groups());
    let out = f.text_branch(tokens, batch)?;
    let loss = f.graph.sum(out);
    f.graph.backward(loss)?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times both mixers at each sequence length. Iterations alternate between
/// the two variants so slow drift affects both equally.
pub fn bench_mixer(base: &ModelConfig, seq_lens: &[usize], hidden: usize, reps: usize, batch: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &seq in seq_lens {
        let build = |mixer| {
            BitaModel::new(ModelConfig {
                hidden_dim: hidden,
                max_text_len: seq,
                mixer,
                ..base.clone()
            })
        };
        let models = [build(MixerKind::FourierMix)?, build(MixerKind::SelfAttention)?];
        let vocab = base.vocab_size;
        let tokens: Vec<usize> = (0..batch * seq).map(|i| (i * 7 + 1) % vocab).collect();
        for m in &models {
            iteration(m, &tokens, batch)?;
        }
        let mut times = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
        for _ in 0..reps {
            for (m, t) in models.iter().zip(times.iter_mut()) {
                let start = Instant::now();
                iteration(m, &tokens, batch)?;
                t.push(start.elapsed().as_secs_f64() * 1e6);
            }
        }
        for (m, t) in models.iter().zip(&times) {
            let (mean_us, stddev_us) = mean_std(t);
            rows.push(BenchRow {
                seq_len: seq,
                mixer: m.config().mixer,
                mean_us,
                stddev_us,
                params: m.total_params(true),
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("seq_len,mixer,mean_us,stddev_us,params\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3},{:.3},{}\n",
            r.seq_len,
            mixer_name(r.mixer),
            r.mean_us,
            r.stddev_us,
            r.params
        ));
    }
    s
}
