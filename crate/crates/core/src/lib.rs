//! Pedestrian-stress analysis toolkit: electrodermal signal processing,
//! response detection and labelling, crossing-scenario simulation and
//! mixed-model estimation.

// Negated comparisons are used on purpose: they reject NaN together with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod decomposition;
pub mod error;
pub mod lmm;
pub mod optim;
pub mod pipeline;
pub mod scr;
pub mod segmentation;
pub mod signal;
pub mod simulator;
mod util;

pub use annotation::{AnnotationRecord, AnnotationStore, LabelTaxonomy, Mark};
pub use decomposition::{Decomposition, ImpulseResponse};
pub use error::{Error, Result};
pub use lmm::{LmmFit, LmmSpec, PanelDataset};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineReport, SessionBundle};
pub use scr::{AmplitudeClass, ParticipantScrStats, ScrEvent};
pub use segmentation::{CrossingGeometry, Segment, Trajectory};
pub use signal::{ArtifactMask, EdaTrace};
pub use simulator::{ScenarioConfig, SimEvent};
