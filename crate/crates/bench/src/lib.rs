//! Shared inputs for the benchmarks.

use pedstress_core::pipeline::cohort::{generate_cohort, CohortConfig};
use pedstress_core::pipeline::{run_pipeline, PipelineConfig};
use pedstress_core::{EdaTrace, PanelDataset};

/// Raw 100 Hz EDA of one simulated 60 s session with its responses.
pub fn raw_session(seed: u64) -> EdaTrace {
    let cohort = generate_cohort(&CohortConfig { participants: 1, seed, ..Default::default() }).expect("cohort");
    cohort.bundles.into_iter().next().expect("one session").eda
}

/// Model panel of a processed cohort of `participants`.
pub fn cohort_panel(participants: usize, seed: u64) -> PanelDataset {
    let cohort = generate_cohort(&CohortConfig { participants, seed, ..Default::default() }).expect("cohort");
    run_pipeline(&cohort.bundles, &PipelineConfig::default()).expect("pipeline").panel
}
