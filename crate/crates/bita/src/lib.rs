//! File formats, stage drivers and the command line for the BITA
//! image-captioning pipeline. The computation itself lives in `bita-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{BitaError, Result};

use bita_core::train::EvalReport;

/// Evaluation summary with every score at four decimals.
pub fn report_json(r: &EvalReport) -> String {
    format!(
        "{{\"bleu1\":{:.4},\"bleu2\":{:.4},\"bleu3\":{:.4},\"bleu4\":{:.4},\"rouge_l\":{:.4},\"cider\":{:.4},\"n_images\":{}}}\n",
        r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.cider, r.n_images
    )
}
