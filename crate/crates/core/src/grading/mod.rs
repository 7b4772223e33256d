//! Weak-label datasets, slide-level majority voting and corpus evaluation.

mod dataset;
mod eval;
mod patchset;
mod vote;

pub use dataset::{
    expected_verdict, split_for_label, train_class, DatasetEntry, DatasetManifest, GradeClass, Split, SplitCensus,
    KNOWN_LABELS,
};
pub use eval::{evaluate_with, record_for, Confusion, EvalRecord, EvalReport};
pub use patchset::{build_patch_dataset, slide_seed, PatchDataset, PatchSource, SlideContribution, PATCHSET_FORMAT_VERSION};
pub use vote::{
    grade_slide, hematoxylin_image, patch_input, verdict_from_votes, CnnClassifier, LoadedSlide, PatchClassifier,
    PatchSettings, PatchVote, SlideGrade, TruthClassifier, Verdict, DEFAULT_EVAL_PATCHES,
};

use crate::micro_cnn::CnnError;
use crate::slide_io::SlideError;
use crate::stain::StainError;
use crate::tumor_mask::TumorMaskError;

#[derive(Debug, thiserror::Error)]
pub enum GradingError {
    #[error("unknown Gleason label {0:?}")]
    UnknownLabel(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("empty train set: no training slide produced patches")]
    EmptyTrainSet,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    TumorMask(#[from] TumorMaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
