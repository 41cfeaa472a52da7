//! AdamW, learning-rate schedules, the two pre-training stages, fine-tuning
//! and evaluation helpers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::Var;
use crate::data::{augment, make_batches, Batch, Image, ImageTextPair};
use crate::error::{Error, Result};
use crate::model::{build_prefix_causal_mask, BitaModel, Forward, ParamGroup, ParamId, ParamStore};
use crate::objectives::{itc_loss, pair_similarity, pclm_loss, ItcConfig, SimilarityPooling};
use crate::tensor::Tensor;
use crate::textproc::{corpus_bleu, cider, rouge_l, Vocabulary};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter (empty until the parameter is
/// first updated) and the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            m: vec![Vec::new(); params.len()],
            v: vec![Vec::new(); params.len()],
        }
    }
}

impl AdamW {
    /// One bias-corrected update with decoupled weight decay:
    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
    pub fn step(&self, params: &mut ParamStore, grads: &[(ParamId, &[f64])], state: &mut OptimState, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if state.m.len() != params.len() {
            return Err(Error::contract("optimizer state belongs to a different model"));
        }
        for (id, g) in grads {
            if params.group(*id).is_frozen() {
                return Err(Error::contract(format!("{} is frozen", params.name(*id))));
            }
            if g.len() != params.get(*id).len() {
                return Err(Error::shape("adamw_step", params.get(*id).shape(), &[g.len()]));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (id, g) in grads {
            let i = id.index();
            let theta = params.get_mut(*id).data_mut();
            if state.m[i].is_empty() {
                state.m[i] = vec![0.0; theta.len()];
                state.v[i] = vec![0.0; theta.len()];
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for k in 0..theta.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                theta[k] = theta[k] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to
/// `lr_min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Pre-training constants: 1e-6 rising to 1e-4 over 5000 steps, then
    /// decaying to 1e-5.
    pub fn pretrain(total_steps: usize) -> Self {
        Self {
            warmup_steps: 5000,
            lr_start: 1e-6,
            lr_peak: 1e-4,
            lr_min: 1e-5,
            total_steps,
        }
    }

    /// Fine-tuning constants: 1e-8 rising to 1e-5 over 2000 steps, then
    /// decaying to 0.
    pub fn finetune(total_steps: usize) -> Self {
        Self {
            warmup_steps: 2000,
            lr_start: 1e-8,
            lr_peak: 1e-5,
            lr_min: 0.0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_start >= 0.0
            && self.lr_start <= self.lr_peak
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr_peak
            && self.warmup_steps < self.total_steps;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return Ok(self.lr_start + (self.lr_peak - self.lr_start) * f);
        }
        let p = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.lr_min + (self.lr_peak - self.lr_min) * (1.0 + (PI * p).cos()) / 2.0)
    }
}

/// Training stage; decides the loss and which groups are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    Stage1,
    Stage2,
    Finetune,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "s1",
            Stage::Stage2 => "s2",
            Stage::Finetune => "ft",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Stage::Stage1, Stage::Stage2, Stage::Finetune]
            .into_iter()
            .find(|s| s.tag() == tag)
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::Stage1 => &[ParamGroup::Prompts, ParamGroup::Ift, ParamGroup::TextEmbedding],
            Stage::Stage2 | Stage::Finetune => &[ParamGroup::Prompts, ParamGroup::Ift, ParamGroup::Projection],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// `None` derives a schedule from the stage constants, scaled to the
    /// run length.
    pub schedule: Option<ScheduleConfig>,
    pub optimizer: AdamW,
    pub itc: ItcConfig,
    pub augment: bool,
    pub data_seed: u64,
    pub augment_seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 5,
            max_steps: None,
            schedule: None,
            optimizer: AdamW::default(),
            itc: ItcConfig::default(),
            augment: true,
            data_seed: 0,
            augment_seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Total optimizer steps for a dataset of `n` pairs.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = if self.batch_size == 0 { 0 } else { n / self.batch_size };
        let all = per_epoch * self.epochs;
        self.max_steps.map_or(all, |m| m.min(all))
    }

    /// The configured schedule, or the stage constants with warmup shrunk to
    /// a tenth of the run when the run is shorter than the stage's warmup.
    pub fn schedule_for(&self, stage: Stage, total_steps: usize) -> ScheduleConfig {
        if let Some(s) = self.schedule {
            return s;
        }
        let mut s = match stage {
            Stage::Stage1 | Stage::Stage2 => ScheduleConfig::pretrain(total_steps),
            Stage::Finetune => ScheduleConfig::finetune(total_steps),
        };
        if s.warmup_steps >= total_steps {
            s.warmup_steps = total_steps / 10;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epoch_means: Vec<f64>,
}

/// Frozen image features for a set of images, computed once when
/// augmentation is off.
pub struct FeatureCache {
    rows_per_image: usize,
    feats: Tensor,
}

impl FeatureCache {
    pub fn new(model: &BitaModel, images: &[&Image]) -> Result<Self> {
        let mut data = Vec::new();
        // bounded chunks keep the encoder graph small
        for chunk in images.chunks(32) {
            data.extend_from_slice(model.encode_images(chunk)?.data());
        }
        let rows_per_image = model.config().image_patches;
        let cols = model.config().image_feat_dim;
        let feats = Tensor::new(&[images.len() * rows_per_image, cols], data)?;
        Ok(Self { rows_per_image, feats })
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.rows_per_image * self.feats.cols());
        for &i in indices {
            for r in 0..self.rows_per_image {
                data.extend_from_slice(self.feats.row(i * self.rows_per_image + r));
            }
        }
        Tensor::new(&[indices.len() * self.rows_per_image, self.feats.cols()], data)
    }
}

/// Loss of one batch for a stage, built on `f`.
pub fn batch_loss(f: &mut Forward<'_>, stage: Stage, batch: &Batch, feats: Tensor, itc: &ItcConfig) -> Result<Var> {
    let b = batch.len();
    let feats = f.graph.constant(feats);
    let z = f.image_branch(feats, b)?;
    match stage {
        Stage::Stage1 => {
            let t = f.text_branch(&batch.text_ids, b)?;
            let cls = f.cls_rows(t, b)?;
            Ok(itc_loss(&mut f.graph, z, cls, itc)?.loss)
        }
        Stage::Stage2 | Stage::Finetune => {
            let prefix = f.project_to_lm(z)?;
            let mask = build_prefix_causal_mask(f.model().config().num_prompts, batch.lm_len);
            let logits = f.lm_forward(Some(prefix), &batch.lm_inputs, b, &mask)?;
            pclm_loss(&mut f.graph, logits, &batch.lm_targets, b, 0, Vocabulary::PAD)
        }
    }
}

/// Forward, backward and one optimizer update. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut BitaModel,
    optim: &mut OptimState,
    stage: Stage,
    batch: &Batch,
    feats: Tensor,
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = {
        let mut f = Forward::new(model, stage.trainable_groups());
        let loss_var = batch_loss(&mut f, stage, batch, feats, &cfg.itc)?;
        let loss = f.graph.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = f.graph.backward(loss_var)?;
        let owned: Vec<(ParamId, Vec<f64>)> = f
            .bound_params()
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        (loss, owned)
    };
    let mut grads = grads;
    if let Some(clip) = cfg.grad_clip {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= s));
        }
    }
    let refs: Vec<(ParamId, &[f64])> = grads.iter().map(|(id, g)| (*id, g.as_slice())).collect();
    cfg.optimizer.step(model.params_mut(), &refs, optim, lr)?;
    Ok(loss)
}

/// Runs `stage` over the dataset for the configured epochs. `on_step` sees
/// every step as it completes.
pub fn train(
    model: &mut BitaModel,
    optim: &mut OptimState,
    stage: Stage,
    dataset: &[ImageTextPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainReport> {
    if vocab.len() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds model vocab_size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let total = cfg.total_steps(dataset.len());
    if total == 0 {
        return Err(Error::Config("run has no optimizer steps".into()));
    }
    let schedule = cfg.schedule_for(stage, total);
    schedule.validate()?;
    let size = model.config().image_size;
    let cache = if cfg.augment {
        None
    } else {
        let imgs: Vec<&Image> = dataset.iter().map(|p| &p.image).collect();
        Some(FeatureCache::new(model, &imgs)?)
    };
    let max_text = model.config().max_text_len;
    let mut report = TrainReport::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.data_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let batches = make_batches(dataset, cfg.batch_size, epoch_seed, vocab, max_text)?;
        let mut sum = 0.0;
        let mut count = 0;
        for batch in &batches {
            if step >= total {
                break 'epochs;
            }
            let feats = match &cache {
                Some(c) => c.gather(&batch.indices)?,
                None => {
                    let imgs: Vec<Image> = batch
                        .indices
                        .iter()
                        .map(|&i| {
                            let seed = cfg.augment_seed ^ ((epoch as u64) << 32) ^ i as u64;
                            augment(&dataset[i].image, seed, size)
                        })
                        .collect();
                    let refs: Vec<&Image> = imgs.iter().collect();
                    model.encode_images(&refs)?
                }
            };
            let lr = schedule.lr_at(step)?;
            let loss = train_step(model, optim, stage, batch, feats, lr, cfg, step)?;
            let rec = StepRecord { step, epoch, loss, lr };
            on_step(&rec);
            report.steps.push(rec);
            sum += loss;
            count += 1;
            step += 1;
        }
        if count > 0 {
            report.epoch_means.push(sum / count as f64);
        }
    }
    if count_partial(&report) {
        let last = report.steps.last().map_or(0, |s| s.epoch);
        let tail: Vec<f64> = report.steps.iter().filter(|s| s.epoch == last).map(|s| s.loss).collect();
        report.epoch_means.push(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    Ok(report)
}

/// True when the last epoch was cut short by `max_steps` and has no mean
/// recorded yet.
fn count_partial(report: &TrainReport) -> bool {
    report
        .steps
        .last()
        .is_some_and(|s| s.epoch + 1 > report.epoch_means.len())
}

pub fn run_stage1(
    model: &mut BitaModel,
    optim: &mut OptimState,
    dataset: &[ImageTextPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainReport> {
    train(model, optim, Stage::Stage1, dataset, vocab, cfg, on_step)
}

pub fn run_stage2(
    model: &mut BitaModel,
    optim: &mut OptimState,
    dataset: &[ImageTextPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainReport> {
    train(model, optim, Stage::Stage2, dataset, vocab, cfg, on_step)
}

pub fn finetune(
    model: &mut BitaModel,
    optim: &mut OptimState,
    dataset: &[ImageTextPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainReport> {
    train(model, optim, Stage::Finetune, dataset, vocab, cfg, on_step)
}

/// Image-by-text similarity matrix over a dataset, pairing image `i` with
/// its first caption.
pub fn similarity_matrix(
    model: &BitaModel,
    dataset: &[ImageTextPair],
    vocab: &Vocabulary,
    pooling: SimilarityPooling,
) -> Result<Tensor> {
    let n = dataset.len();
    let d = model.config().hidden_dim;
    let p = model.config().num_prompts;
    let mut prompts = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(16) {
        let mut f = Forward::new(model, &[]);
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &dataset[i].image).collect();
        let feats = f.image_features(&imgs)?;
        let z = f.image_branch(feats, chunk.len())?;
        let caps: Vec<String> = chunk.iter().map(|&i| dataset[i].captions[0].clone()).collect();
        let batch = crate::data::collate(chunk, &caps, vocab, model.config().max_text_len)?;
        let t = f.text_branch(&batch.text_ids, chunk.len())?;
        let cls = f.cls_rows(t, chunk.len())?;
        let (zv, cv) = (f.graph.value(z), f.graph.value(cls));
        for k in 0..chunk.len() {
            prompts.push(Tensor::new(&[p, d], zv.data()[k * p * d..(k + 1) * p * d].to_vec())?);
            texts.push(Tensor::new(&[d], cv.row(k).to_vec())?);
        }
    }
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            s.row_mut(i)[j] = pair_similarity(&prompts[i], &texts[j], pooling)?;
        }
    }
    Ok(s)
}

/// Fraction of images whose most similar text is their own caption.
pub fn retrieval_accuracy(similarity: &Tensor) -> f64 {
    let n = similarity.rows();
    let hits = (0..n)
        .filter(|&i| {
            let row = similarity.row(i);
            row.iter().enumerate().all(|(j, &v)| j == i || v < row[i])
        })
        .count();
    hits as f64 / n as f64
}

/// Caption-quality summary over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    /// Share of ground-truth shape nouns present in the best caption;
    /// `None` without scene ground truth.
    pub object_recall: Option<f64>,
    /// Same for color words.
    pub color_recall: Option<f64>,
    pub n_images: usize,
    pub captions: Vec<String>,
}

/// Decodes the best caption of every image and scores it against the
/// references.
pub fn evaluate(
    model: &BitaModel,
    vocab: &Vocabulary,
    dataset: &[ImageTextPair],
    beam_width: usize,
    max_len: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut captions = Vec::with_capacity(dataset.len());
    for pair in dataset {
        let best = model.caption(vocab, &pair.image, beam_width, max_len)?;
        captions.push(best.into_iter().next().map(|c| c.text).unwrap_or_default());
    }
    let refs: Vec<Vec<String>> = dataset.iter().map(|p| p.captions.clone()).collect();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&captions, &refs, n + 1)?;
    }
    let rouge = captions
        .iter()
        .zip(&refs)
        .map(|(c, r)| rouge_l(c, &r.iter().map(String::as_str).collect::<Vec<_>>()))
        .sum::<f64>()
        / captions.len() as f64;
    let cider = cider(&captions, &refs)?.mean;
    let recall = |ground_truth: fn(&crate::data::Scene) -> Vec<String>| {
        let mut found = 0usize;
        let mut wanted = 0usize;
        for (c, pair) in captions.iter().zip(dataset) {
            if let Some(scene) = &pair.scene {
                let words = crate::textproc::normalize(c);
                for w in ground_truth(scene) {
                    wanted += 1;
                    found += words.contains(&w) as usize;
                }
            }
        }
        (wanted > 0).then(|| found as f64 / wanted as f64)
    };
    let object_recall = recall(crate::data::Scene::object_words);
    let color_recall = recall(crate::data::Scene::color_words);
    Ok(EvalReport {
        bleu,
        rouge_l: rouge,
        cider,
        object_recall,
        color_recall,
        n_images: dataset.len(),
        captions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::string::ToString;

    fn store(values: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::default();
        let id = s.add("w".to_string(), ParamGroup::Ift, Tensor::new(&[values.len()], values.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn adamw_first_step() {
        let (mut s, id) = store(&[1.0]);
        let mut st = OptimState::new(&s);
        AdamW::default().step(&mut s, &[(id, &[1.0])], &mut st, 0.1).unwrap();
        let theta = s.get(id).data()[0];
        assert!((theta - (1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.05))).abs() < 1e-15);
        assert!((theta - 0.895).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_decay_only() {
        let (mut s, id) = store(&[0.7, -2.0]);
        let mut st = OptimState::new(&s);
        AdamW::default().step(&mut s, &[(id, &[0.0, 0.0])], &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[0.7 * (1.0 - 0.1 * 0.05), -2.0 * (1.0 - 0.1 * 0.05)]);

        let (mut s, id) = store(&[0.7]);
        let mut st = OptimState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, &[(id, &[0.0])], &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn adamw_rejects_bad_input() {
        let (mut s, id) = store(&[1.0, 2.0]);
        let mut st = OptimState::new(&s);
        assert!(AdamW::default().step(&mut s, &[(id, &[1.0])], &mut st, 0.1).is_err());
        let frozen = s.add("enc".to_string(), ParamGroup::ImageEncoder, Tensor::zeros(&[1]));
        let mut st = OptimState::new(&s);
        assert!(AdamW::default().step(&mut s, &[(frozen, &[1.0])], &mut st, 0.1).is_err());
    }

    #[test]
    fn pretrain_anchors() {
        let s = ScheduleConfig::pretrain(20_000);
        assert_eq!(s.lr_at(0).unwrap(), 1e-6);
        assert_eq!(s.lr_at(5000).unwrap(), 1e-4);
        assert!((s.lr_at(20_000).unwrap() - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(12_500).unwrap() - 5.5e-5).abs() < 1e-18);
        assert!(s.lr_at(20_001).is_err());
    }

    #[test]
    fn finetune_anchors() {
        let s = ScheduleConfig::finetune(10_000);
        assert_eq!(s.lr_at(0).unwrap(), 1e-8);
        assert_eq!(s.lr_at(2000).unwrap(), 1e-5);
        assert_eq!(s.lr_at(10_000).unwrap(), 0.0);
    }

    #[test]
    fn schedule_shape() {
        let s = ScheduleConfig::pretrain(8000);
        let inc = (s.lr_peak - s.lr_start) / s.warmup_steps as f64;
        assert!((s.lr_at(4999).unwrap() - s.lr_at(5000).unwrap()).abs() <= inc * (1.0 + 1e-9));
        let mut prev = f64::INFINITY;
        for step in 5000..=8000 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(ScheduleConfig::pretrain(5000).validate().is_err());
    }

    #[test]
    fn retrieval_counts_strict_row_maxima() {
        let s = Tensor::from_rows(&[&[0.9, 0.1, 0.2], &[0.5, 0.4, 0.1], &[0.3, 0.3, 0.3]]).unwrap();
        assert!((retrieval_accuracy(&s) - 1.0 / 3.0).abs() < 1e-15);
    }
}
