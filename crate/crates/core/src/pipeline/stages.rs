//! Per-session stages (sync, smooth, decompose, detect) and the cohort
//! stages that follow the participant barrier (standardize, segment,
//! annotate). Every stage is a pure function of its upstream artifact and
//! the configuration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bundle::{SessionBundle, SessionKey};
use super::config::{LabelSource, PipelineConfig};
use crate::annotation::{apply_annotations, AnnotationRecord, AnnotationStore, ApplySummary, Mark};
use crate::decomposition::{decompose_with, optimize_taus, Decomposition, ImpulseResponse};
use crate::error::{Error, Result};
use crate::scr::{detect_scrs, standardize, GroundTruthRow, ScrEvent, Standardization};
use crate::segmentation::{attach_segments, Trajectory};
use crate::signal::{
    auto_flag_artifacts, downsample, gaussian_smooth, mask_artifacts, sync_epoch, ArtifactMask, EdaTrace,
    GaussianKernel,
};

/// Coder id of records derived from ground truth.
pub const GROUND_TRUTH_CODER: &str = "ground-truth";
/// Largest onset distance at which a detection inherits a true label.
pub const LABEL_MATCH_TOLERANCE_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Sync,
    Smooth,
    Decompose,
    Detect,
    Standardize,
    Segment,
    Annotate,
    Model,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Sync,
        Stage::Smooth,
        Stage::Decompose,
        Stage::Detect,
        Stage::Standardize,
        Stage::Segment,
        Stage::Annotate,
        Stage::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sync => "sync",
            Stage::Smooth => "smooth",
            Stage::Decompose => "decompose",
            Stage::Detect => "detect",
            Stage::Standardize => "standardize",
            Stage::Segment => "segment",
            Stage::Annotate => "annotate",
            Stage::Model => "model",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-session scalars recorded along the per-session stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionQuality {
    pub window_start: f64,
    pub window_end: f64,
    pub max_skew_s: f64,
    pub masked_samples: usize,
    pub masked_fraction: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub iterations: usize,
    pub negative_mass: f64,
    pub driver_l1: f64,
    pub residual_rms: f64,
    pub residual_max: f64,
    pub max_tonic_step: f64,
}

impl SessionQuality {
    pub(crate) fn from_sync(s: &Synced) -> Self {
        Self {
            window_start: s.window.0,
            window_end: s.window.1,
            max_skew_s: s.max_skew_s,
            masked_samples: s.masked_samples,
            masked_fraction: s.masked_fraction,
            tau1: f64::NAN,
            tau2: f64::NAN,
            iterations: 0,
            negative_mass: f64::NAN,
            driver_l1: f64::NAN,
            residual_rms: f64::NAN,
            residual_max: f64::NAN,
            max_tonic_step: f64::NAN,
        }
    }

    pub(crate) fn record(&mut self, d: &Decomposition) {
        self.tau1 = d.impulse.tau1;
        self.tau2 = d.impulse.tau2;
        self.iterations = d.iterations;
        self.negative_mass = d.negative_mass;
        self.driver_l1 = d.driver_l1;
        self.residual_rms = d.residual_rms;
        self.residual_max = d.residual_max;
        self.max_tonic_step = d.max_tonic_step;
    }
}

/// Output of the sync stage.
#[derive(Debug, Clone)]
pub struct Synced {
    pub eda: EdaTrace,
    pub trajectory: Trajectory,
    pub window: (f64, f64),
    pub max_skew_s: f64,
    pub masked_samples: usize,
    pub masked_fraction: f64,
}

/// A failure attributed to one stage of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    /// Processing error, as opposed to a data-quality rejection.
    pub hard: bool,
    pub reason: String,
}

impl StageFailure {
    fn error(stage: Stage, e: Error) -> Self {
        Self { stage, hard: true, reason: e.to_string() }
    }
}

/// Crops EDA and trajectory to their shared window, then replaces
/// supplied and auto-flagged artifact spans by interpolation.
pub fn stage_sync(bundle: &SessionBundle, cfg: &PipelineConfig) -> std::result::Result<Synced, StageFailure> {
    let fail = |e| StageFailure::error(Stage::Sync, e);
    bundle.validate().map_err(fail)?;
    let pair = sync_epoch(&bundle.eda, &bundle.trajectory).map_err(fail)?;
    let p = &cfg.processing;
    let auto = auto_flag_artifacts(&pair.eda, p.artifact_max_jump_us, p.artifact_pad_s);
    let (start, end) = (pair.eda.start(), pair.eda.end());
    let mut intervals: Vec<(f64, f64)> = bundle
        .mask
        .iter()
        .flat_map(|m| m.intervals().iter().copied())
        .filter(|&(a, b)| b >= start && a <= end)
        .map(|(a, b)| (a.max(start), b.min(end)))
        .chain(auto.intervals().iter().copied())
        .collect();
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let merged = intervals.into_iter().fold(Vec::<(f64, f64)>::new(), |mut acc, (a, b)| {
        match acc.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => acc.push((a, b)),
        }
        acc
    });
    let mask = ArtifactMask::new(merged).map_err(fail)?;
    let masked = mask_artifacts(&pair.eda, &mask).map_err(fail)?;
    if masked.masked_fraction > p.max_masked_fraction {
        return Err(StageFailure {
            stage: Stage::Sync,
            hard: false,
            reason: format!(
                "masked fraction {:.3} exceeds {:.3}",
                masked.masked_fraction, p.max_masked_fraction
            ),
        });
    }
    Ok(Synced {
        eda: masked.trace,
        trajectory: pair.trajectory,
        window: pair.window,
        max_skew_s: pair.max_skew_s,
        masked_samples: masked.masked_samples,
        masked_fraction: masked.masked_fraction,
    })
}

/// Downsamples to the processing rate and, unless smoothing is deferred,
/// applies the Gaussian filter.
pub fn stage_smooth(eda: &EdaTrace, cfg: &PipelineConfig) -> Result<EdaTrace> {
    let down = downsample(eda)?;
    if cfg.processing.smooth_before_decompose {
        gaussian_smooth(&down, cfg.processing.smooth_window)
    } else {
        Ok(down)
    }
}

/// Decomposes the processed trace. With deferred smoothing the driver and
/// phasic components are filtered afterwards.
pub fn stage_decompose(trace: &EdaTrace, cfg: &PipelineConfig) -> Result<Decomposition> {
    let ir = if cfg.processing.optimize_taus {
        optimize_taus(trace, &cfg.impulse()?)?.impulse
    } else {
        cfg.impulse()?
    };
    let mut d = decompose_with(trace, &ir, &cfg.decomposition)?;
    if !cfg.processing.smooth_before_decompose {
        let k = GaussianKernel::with_window(cfg.processing.smooth_window);
        d.driver = k.apply(&d.driver).into_iter().map(|v| v.max(0.0)).collect();
        d.phasic = k.apply(&d.phasic);
        refresh_residuals(&mut d);
    }
    Ok(d)
}

pub fn stage_detect(d: &Decomposition, cfg: &PipelineConfig) -> Vec<ScrEvent> {
    detect_scrs(d, &cfg.detection)
}

/// Recomputes residual statistics from the stored components.
pub(crate) fn refresh_residuals(d: &mut Decomposition) {
    let n = d.sc.len();
    d.residual = (0..n).map(|i| d.sc[i] - d.tonic[i] - d.phasic[i]).collect();
    d.residual_rms = (d.residual.iter().map(|r| r * r).sum::<f64>() / n.max(1) as f64).sqrt();
    d.residual_max = d.residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    d.max_tonic_step = d.tonic.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
}

/// Rebuilds a decomposition from its audit columns and recorded scalars.
pub(crate) fn decomposition_from_columns(
    key: &SessionKey,
    cols: crate::decomposition::DecompositionColumns,
    q: &SessionQuality,
) -> Result<Decomposition> {
    let mut d = Decomposition {
        participant_id: key.participant_id.clone(),
        session_id: key.session_id.clone(),
        t: cols.t,
        sc: cols.sc,
        tonic: cols.tonic,
        driver: cols.driver,
        phasic: cols.phasic,
        residual: Vec::new(),
        impulse: ImpulseResponse::new(q.tau1, q.tau2)?,
        residual_rms: 0.0,
        residual_max: 0.0,
        max_tonic_step: 0.0,
        negative_mass: q.negative_mass,
        driver_l1: q.driver_l1,
        iterations: q.iterations,
    };
    refresh_residuals(&mut d);
    Ok(d)
}

/// Outcome of cleaning the annotation input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationInput {
    pub store: AnnotationStore,
    /// Coder whose records are applied (adjudicated records always win).
    pub coder: String,
    /// Records derived from ground truth.
    pub generated: usize,
    /// Records whose label is outside the taxonomy.
    pub invalid: Vec<String>,
    /// Records naming an SCR that was not detected in a processed session.
    pub dangling: Vec<String>,
}

/// Labels detections from ground truth: each detection takes the label of
/// the nearest unused true onset within [`LABEL_MATCH_TOLERANCE_S`], or
/// `Unknown`.
pub fn ground_truth_records(detected: &[ScrEvent], truth: &[GroundTruthRow]) -> Vec<AnnotationRecord> {
    let mut used = vec![false; truth.len()];
    detected
        .iter()
        .map(|ev| {
            let best = truth
                .iter()
                .enumerate()
                .filter(|(i, g)| !used[*i] && (g.row.scr_onset_unix - ev.onset_unix).abs() <= LABEL_MATCH_TOLERANCE_S)
                .min_by(|a, b| {
                    (a.1.row.scr_onset_unix - ev.onset_unix)
                        .abs()
                        .total_cmp(&(b.1.row.scr_onset_unix - ev.onset_unix).abs())
                });
            let label = match best {
                Some((i, g)) => {
                    used[i] = true;
                    g.row.annotation.clone()
                }
                None => crate::annotation::UNKNOWN.to_string(),
            };
            AnnotationRecord {
                participant_id: ev.participant_id.clone(),
                session_id: ev.session_id.clone(),
                detected_scr_no: ev.detected_scr_no,
                label,
                coder_id: GROUND_TRUTH_CODER.to_string(),
                created_at_unix: 0,
            }
        })
        .collect()
}

/// Collects the records that will be applied, dropping and logging those
/// that cannot be.
pub fn prepare_annotations<'a>(
    sessions: impl IntoIterator<Item = (&'a SessionKey, &'a [ScrEvent], &'a [AnnotationRecord], Option<&'a [GroundTruthRow]>)>,
    cfg: &PipelineConfig,
) -> AnnotationInput {
    let coder = match cfg.processing.label_source {
        LabelSource::Records => cfg.processing.coder.clone(),
        LabelSource::GroundTruth => GROUND_TRUTH_CODER.to_string(),
    };
    let mut out = AnnotationInput { coder, ..Default::default() };
    for (key, detected, records, truth) in sessions {
        let present: BTreeSet<u32> = detected.iter().map(|e| e.detected_scr_no).collect();
        let mut candidates: Vec<AnnotationRecord> = records.to_vec();
        if cfg.processing.label_source == LabelSource::GroundTruth {
            if let Some(truth) = truth {
                let generated = ground_truth_records(detected, truth);
                out.generated += generated.len();
                candidates.extend(generated);
            }
        }
        for r in candidates {
            if cfg.taxonomy.resolve_mark(&r.label).is_err() {
                out.invalid.push(format!("{}: {:?}", r.describe(), r.label));
            } else if !present.contains(&r.detected_scr_no) {
                out.dangling.push(format!("{} (session {key} has {} SCRs)", r.describe(), present.len()));
            } else {
                out.store.upsert(r);
            }
        }
    }
    out.invalid.sort();
    out.dangling.sort();
    out
}

/// Marks deletions, then standardizes per participant over all sessions.
pub fn stage_standardize(events: &mut [ScrEvent], input: &AnnotationInput, cfg: &PipelineConfig) -> Result<Standardization> {
    let mut marked = events.to_vec();
    apply_annotations(&mut marked, &input.store, &input.coder, &cfg.taxonomy)?;
    for (ev, m) in events.iter_mut().zip(&marked) {
        ev.annotation = (m.annotation == Some(Mark::Delete)).then_some(Mark::Delete);
    }
    Ok(standardize(events, cfg.processing.sd_divisor))
}

/// Attaches segments session by session; returns the unlocatable count.
pub fn stage_segment(
    events: &mut [ScrEvent],
    sessions: &BTreeMap<SessionKey, (&Trajectory, bool)>,
    cfg: &PipelineConfig,
) -> usize {
    let mut unlocatable = 0;
    let mut start = 0;
    while start < events.len() {
        let key = SessionKey::new(&events[start].participant_id, &events[start].session_id);
        let len = events[start..]
            .iter()
            .take_while(|e| e.participant_id == key.participant_id && e.session_id == key.session_id)
            .count();
        let chunk = &mut events[start..start + len];
        match sessions.get(&key) {
            Some((traj, median)) => unlocatable += attach_segments(chunk, traj, cfg.geometry.for_session(*median)),
            None => {
                for ev in chunk.iter_mut() {
                    ev.unlocatable = true;
                }
                unlocatable += len;
            }
        }
        start += len;
    }
    unlocatable
}

pub fn stage_annotate(events: &mut [ScrEvent], input: &AnnotationInput, cfg: &PipelineConfig) -> Result<ApplySummary> {
    apply_annotations(events, &input.store, &input.coder, &cfg.taxonomy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::ADJUDICATOR;
    use crate::scr::ScrRow;

    fn det(no: u32, onset: f64) -> ScrEvent {
        ScrEvent::new("P1", "s1", no, onset, onset + 2.0, 0.3)
    }

    fn truth(onset: f64, label: &str) -> GroundTruthRow {
        GroundTruthRow {
            row: ScrRow {
                participant_id: "P1".into(),
                session_id: "s1".into(),
                unix: onset,
                elapsed_time: 0.0,
                position: None,
                scr_amplitude: 0.3,
                scr_onset_unix: onset,
                scr_t: None,
                position_f: None,
                amp_class: String::new(),
                detected_scr_no: 1,
                annotation: label.into(),
            },
            true_amplitude: 0.3,
        }
    }

    #[test]
    fn ground_truth_labels_match_nearest_unused_onset() {
        let d = [det(1, 10.0), det(2, 10.5), det(3, 30.0)];
        let t = [truth(10.4, "Crossing"), truth(11.5, "Fear of accident")];
        let recs = ground_truth_records(&d, &t);
        let labels: Vec<&str> = recs.iter().map(|r| r.label.as_str()).collect();
        // #1 takes the nearest onset; #2 falls back to the remaining one.
        assert_eq!(labels, ["Crossing", "Fear of accident", "Unknown"]);
        assert!(recs.iter().all(|r| r.coder_id == GROUND_TRUTH_CODER));
    }

    #[test]
    fn invalid_and_dangling_records_are_logged() {
        let key = SessionKey::new("P1", "s1");
        let d = [det(1, 10.0)];
        let rec = |no: u32, label: &str| AnnotationRecord {
            participant_id: "P1".into(),
            session_id: "s1".into(),
            detected_scr_no: no,
            label: label.into(),
            coder_id: ADJUDICATOR.into(),
            created_at_unix: 1,
        };
        let records = [rec(1, "Crossing"), rec(2, "Crossing"), rec(1, "Boredom")];
        let cfg = PipelineConfig::default();
        let input = prepare_annotations([(&key, &d[..], &records[..], None)], &cfg);
        assert_eq!(input.store.len(), 1);
        assert_eq!(input.dangling.len(), 1);
        assert_eq!(input.invalid.len(), 1);
    }

    #[test]
    fn deletions_are_excluded_from_standardization() {
        let key = SessionKey::new("P1", "s1");
        let mut events = vec![det(1, 1.0), det(2, 5.0), det(3, 9.0)];
        for (e, a) in events.iter_mut().zip([0.2, 0.4, 5.0]) {
            e.amplitude = a;
        }
        let records = [AnnotationRecord {
            participant_id: "P1".into(),
            session_id: "s1".into(),
            detected_scr_no: 3,
            label: "Delete".into(),
            coder_id: ADJUDICATOR.into(),
            created_at_unix: 1,
        }];
        let cfg = PipelineConfig::default();
        let input = prepare_annotations([(&key, &events.clone()[..], &records[..], None)], &cfg);
        let st = stage_standardize(&mut events, &input, &cfg).unwrap();
        assert_eq!(st.stats[0].n_scrs, 2);
        assert_eq!(events[0].t_score, Some(40.0));
        assert_eq!(events[1].t_score, Some(60.0));
        assert_eq!(events[2].t_score, None);
    }

    #[test]
    fn deferred_smoothing_keeps_components_consistent() {
        let cfg = PipelineConfig {
            processing: super::super::config::ProcessingConfig {
                smooth_before_decompose: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let t: Vec<f64> = (0..3000).map(|i| i as f64 * 0.01).collect();
        let sc: Vec<f64> = t.iter().map(|&x| 2.0 + if x > 10.0 { 0.3 * (1.0 - (-(x - 10.0)).exp()) } else { 0.0 }).collect();
        let raw = EdaTrace::new("p", "s", t, sc, 100.0).unwrap();
        let down = stage_smooth(&raw, &cfg).unwrap();
        assert_eq!(down.len(), 300);
        let d = stage_decompose(&down, &cfg).unwrap();
        assert!(d.driver.iter().all(|v| *v >= 0.0));
        for i in 0..d.t.len() {
            assert!((d.sc[i] - d.tonic[i] - d.phasic[i] - d.residual[i]).abs() < 1e-12);
        }
    }
}
