//! Stage drivers shared by the command line and the test suites.

use bita_core::data::ImageTextPair;
use bita_core::model::BitaModel;
use bita_core::textproc::{build_vocab, Vocabulary};
use bita_core::train::{train, OptimState, Stage, StepRecord, TrainReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{BitaError, Result};

/// Vocabulary over every caption of `data`.
pub fn vocab_for(data: &[ImageTextPair]) -> Result<Vocabulary> {
    let caps: Vec<&str> = data.iter().flat_map(|p| p.captions.iter().map(String::as_str)).collect();
    Ok(build_vocab(&caps)?)
}

/// Trains one stage. Without `init` the stage starts from fresh weights and
/// a vocabulary built from `data`; with it, weights and vocabulary come
/// from the checkpoint and the optimizer moments are kept only when the
/// checkpoint is from the same stage.
pub fn run_stage(
    stage: Stage,
    cfg: &RunConfig,
    data: &[ImageTextPair],
    init: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainReport)> {
    let mut model = BitaModel::new(cfg.model.clone())?;
    let mut optim = OptimState::new(model.params());
    let vocab = match init {
        Some(ckpt) => {
            let resume = ckpt.stage == stage;
            ckpt.restore(&mut model, resume.then_some(&mut optim))?;
            ckpt.vocabulary()?
        }
        None => vocab_for(data)?,
    };
    if data.len() < cfg.train.batch_size {
        return Err(BitaError::Core(bita_core::Error::Data(format!(
            "{} pairs cannot fill a batch of {}",
            data.len(),
            cfg.train.batch_size
        ))));
    }
    let tc = cfg.train_config(stage, data.len());
    let report = train(&mut model, &mut optim, stage, data, &vocab, &tc, on_step)?;
    Ok((Checkpoint::capture(&model, &optim, stage, &vocab), report))
}
