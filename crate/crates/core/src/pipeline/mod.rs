//! End-to-end orchestration.
//!
//! [`run_pipeline`] takes session bundles through
//! sync → smooth → decompose → detect (per session, in parallel), then,
//! once every session of every participant is done, standardize → segment
//! → annotate → model over the whole cohort. A session that fails a stage
//! is logged in the report and excluded; it never aborts the batch.
//!
//! [`write_outputs`] persists the report together with each stage's
//! intermediate files, and [`rerun_from_cache`] restarts the pipeline at
//! any stage from those files.

mod bundle;
mod cache;
pub mod cohort;
mod config;
mod models;
mod report;
pub mod service;
mod stages;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bundle::{
    load_bundles, read_participants, session_keys, write_bundles, write_participants, Demographics, LoadFailure,
    SessionBundle, SessionKey, ANNOTATIONS_FILE, ARTIFACTS_FILE, EDA_FILE, EVENTS_FILE, GROUND_TRUTH_FILE,
    PARTICIPANTS_FILE, SCENARIO_FILE, SESSIONS_DIR, TRAJECTORY_FILE,
};
pub use cache::rerun_from_cache;
pub use config::{GeometryConfig, LabelSource, ModelEntry, PipelineConfig, ProcessingConfig, CONFIG_VERSION};
pub use models::{build_panel, fit_model, fit_models, FittedModel, ModelFailure, ModelOutcome, PANEL_RESPONSE};
pub use report::{write_outputs, CONFIG_FILE, PANEL_FILE, REPORT_FILE};
pub use stages::{
    ground_truth_records, prepare_annotations, stage_annotate, stage_decompose, stage_detect, stage_segment,
    stage_smooth, stage_standardize, stage_sync, AnnotationInput, SessionQuality, Stage, StageFailure, Synced,
    GROUND_TRUTH_CODER, LABEL_MATCH_TOLERANCE_S,
};

use crate::annotation::{label_frequencies, AnnotationRecord, ApplySummary, LabelFrequencies};
use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::lmm::PanelDataset;
use crate::scr::{GroundTruthRow, ScrEvent, Standardization};
use crate::segmentation::Trajectory;
use crate::signal::EdaTrace;
use crate::simulator::{ScenarioConfig, SimEvent};

/// Signal artifacts of the per-session stages. An artifact upstream of
/// the stage a cached rerun started from is absent.
#[derive(Debug, Clone, Default)]
pub struct SessionArtifacts {
    pub synced: Option<EdaTrace>,
    pub processed: Option<EdaTrace>,
    pub decomposition: Option<Decomposition>,
}

/// A session that passed the per-session stages.
#[derive(Debug, Clone)]
pub struct ProcessedSession {
    pub key: SessionKey,
    pub scenario: ScenarioConfig,
    pub demographics: Demographics,
    pub quality: SessionQuality,
    /// Trajectory cropped to the synchronized window.
    pub trajectory: Trajectory,
    pub events: Option<Vec<SimEvent>>,
    pub annotations: Vec<AnnotationRecord>,
    pub ground_truth: Option<Vec<GroundTruthRow>>,
    /// Detections as they left the detect stage.
    pub detected: Vec<ScrEvent>,
    pub artifacts: SessionArtifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSession {
    pub key: SessionKey,
    pub stage: Stage,
    /// Processing error rather than a data-quality rejection.
    pub hard: bool,
    pub reason: String,
}

/// How the annotate stage went.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationLog {
    pub source: LabelSource,
    pub coder: String,
    pub summary: ApplySummary,
    pub generated: usize,
    pub invalid: Vec<String>,
    pub dangling: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    /// Ordered by key.
    pub sessions: Vec<ProcessedSession>,
    pub dropped: Vec<DroppedSession>,
    /// Every detected event of the processed sessions after the cohort
    /// stages, ordered by participant, session and SCR number.
    pub events: Vec<ScrEvent>,
    pub standardization: Standardization,
    pub unlocatable: usize,
    pub annotations: AnnotationLog,
    pub labels: LabelFrequencies,
    pub panel: PanelDataset,
    pub models: Vec<ModelOutcome>,
}

impl PipelineReport {
    /// Hard session failures plus models that failed for reasons other
    /// than insufficient or degenerate data.
    pub fn hard_failures(&self) -> usize {
        self.dropped.iter().filter(|d| d.hard).count()
            + self.models.iter().filter(|m| matches!(&m.result, Err(f) if f.hard)).count()
    }

    pub fn model(&self, name: &str) -> Option<&ModelOutcome> {
        self.models.iter().find(|m| m.name == name)
    }

    /// The report text; identical inputs and configuration give identical
    /// bytes.
    pub fn render(&self) -> String {
        report::render(self)
    }
}

pub fn run_pipeline(bundles: &[SessionBundle], config: &PipelineConfig) -> Result<PipelineReport> {
    run_pipeline_with(bundles, Vec::new(), config)
}

/// Like [`run_pipeline`], also accounting for sessions that could not be
/// loaded.
pub fn run_pipeline_with(
    bundles: &[SessionBundle],
    load_failures: Vec<LoadFailure>,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    config.validate()?;
    if bundles.is_empty() && load_failures.is_empty() {
        return Err(Error::InsufficientData("no session bundles".into()));
    }
    let mut dropped: Vec<DroppedSession> = load_failures
        .into_iter()
        .map(|f| DroppedSession { key: f.key, stage: Stage::Sync, hard: true, reason: format!("unreadable: {}", f.error) })
        .collect();

    let mut order: Vec<(SessionKey, &SessionBundle)> = bundles.iter().map(|b| (b.key(), b)).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut unique = Vec::with_capacity(order.len());
    for (key, b) in order {
        if unique.last().is_some_and(|(k, _): &(SessionKey, _)| *k == key) {
            dropped.push(DroppedSession { key, stage: Stage::Sync, hard: true, reason: "duplicate session".into() });
        } else {
            unique.push((key, b));
        }
    }

    let results: Vec<std::result::Result<ProcessedSession, DroppedSession>> =
        unique.par_iter().map(|(key, b)| process_session(key, b, config)).collect();

    // Participant barrier: cohort stages start only after every session.
    let mut sessions = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => sessions.push(s),
            Err(d) => {
                log::warn!("session {} dropped at {}: {}", d.key, d.stage, d.reason);
                dropped.push(d);
            }
        }
    }
    finish(config, sessions, dropped, None)
}

fn process_session(
    key: &SessionKey,
    bundle: &SessionBundle,
    cfg: &PipelineConfig,
) -> std::result::Result<ProcessedSession, DroppedSession> {
    let drop = |f: StageFailure| DroppedSession { key: key.clone(), stage: f.stage, hard: f.hard, reason: f.reason };
    let hard = |stage| move |e: Error| StageFailure { stage, hard: true, reason: e.to_string() };
    let synced = stage_sync(bundle, cfg).map_err(drop)?;
    let processed = stage_smooth(&synced.eda, cfg).map_err(hard(Stage::Smooth)).map_err(drop)?;
    let decomposition = stage_decompose(&processed, cfg).map_err(hard(Stage::Decompose)).map_err(drop)?;
    let detected = stage_detect(&decomposition, cfg);
    let mut quality = SessionQuality::from_sync(&synced);
    quality.record(&decomposition);
    Ok(ProcessedSession {
        key: key.clone(),
        scenario: bundle.scenario.clone(),
        demographics: bundle.demographics.clone(),
        quality,
        trajectory: synced.trajectory,
        events: bundle.events.clone(),
        annotations: bundle.annotations.clone().unwrap_or_default(),
        ground_truth: bundle.ground_truth.clone(),
        detected,
        artifacts: SessionArtifacts {
            synced: Some(synced.eda),
            processed: Some(processed),
            decomposition: Some(decomposition),
        },
    })
}

/// Cohort stages over sessions already through detection. A supplied
/// `panel` replaces the one derived from the events (model-stage rerun).
pub(crate) fn finish(
    config: &PipelineConfig,
    mut sessions: Vec<ProcessedSession>,
    mut dropped: Vec<DroppedSession>,
    panel: Option<PanelDataset>,
) -> Result<PipelineReport> {
    sessions.sort_by(|a, b| a.key.cmp(&b.key));
    dropped.sort_by(|a, b| a.key.cmp(&b.key).then(a.stage.cmp(&b.stage)));

    let input = prepare_annotations(
        sessions.iter().map(|s| {
            (&s.key, s.detected.as_slice(), s.annotations.as_slice(), s.ground_truth.as_deref())
        }),
        config,
    );
    for msg in input.invalid.iter().chain(&input.dangling) {
        log::warn!("annotation record skipped: {msg}");
    }

    let mut events: Vec<ScrEvent> = sessions.iter().flat_map(|s| s.detected.iter().cloned()).collect();
    let standardization = stage_standardize(&mut events, &input, config)?;
    let tracks: BTreeMap<SessionKey, (&Trajectory, bool)> =
        sessions.iter().map(|s| (s.key.clone(), (&s.trajectory, s.scenario.median))).collect();
    let unlocatable = stage_segment(&mut events, &tracks, config);
    let summary = stage_annotate(&mut events, &input, config)?;
    let labels = label_frequencies(&events, &config.taxonomy);

    let panel = panel.unwrap_or_else(|| build_panel(&events, &sessions, &config.taxonomy));
    let models = fit_models(&panel, &config.models);
    for m in &models {
        if let Err(f) = &m.result {
            log::warn!("model {} not estimated: {}", m.name, f.reason);
        }
    }
    Ok(PipelineReport {
        config: config.clone(),
        sessions,
        dropped,
        events,
        standardization,
        unlocatable,
        annotations: AnnotationLog {
            source: config.processing.label_source,
            coder: input.coder,
            summary,
            generated: input.generated,
            invalid: input.invalid,
            dangling: input.dangling,
        },
        labels,
        panel,
        models,
    })
}
