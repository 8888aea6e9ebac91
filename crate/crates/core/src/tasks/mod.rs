//! Downstream tasks: rendered sequence classification and patch-classification
//! QA with OCR-aligned labels.

pub mod fuzzy;
pub mod metrics;
pub mod ocr;
pub mod qa;
pub mod seq;
pub mod text;

use crate::degrade::DegradeError;
use crate::masking::MaskError;
use crate::render::RenderError;
use crate::scan::ImageError;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("scan carries no layout truth")]
    NoTruth,
    #[error("{preds} predictions for {truth} instances")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("test set holds only one class")]
    OneClassOnly,
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] ImageError),
}
