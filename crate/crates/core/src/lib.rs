//! Alignment-free dense distillation from a frozen teacher-modality classifier
//! into a student-modality classifier trained on misaligned image pairs.
//!
//! * [`model`]: residual backbones exposing multi-scale features, logits and
//!   class activation maps.
//! * [`affinity`]: relation-masked bidirectional affinities and the dense
//!   distillation loss, with a scalar reference in [`affinity::oracle`].
//! * [`srg`]: activation-map refinement, trinarization and relation matrices.
//! * [`objective`]: the composite loss and the training loops.
//! * [`data`]: manifests, patient-level folds and the synthetic pair generator.
//! * [`eval`]: metrics, ROC export and CAM renderings.
//! * [`experiment`]: oracle checks, correspondence recovery, cross-validation.
//! * [`cli`]: the `alignfree` command-line tool.

pub mod affinity;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod imaging;
pub mod model;
pub mod objective;
pub mod srg;

pub use error::{Error, Result};
