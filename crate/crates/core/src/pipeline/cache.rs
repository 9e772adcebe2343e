//! Restarting the pipeline from the intermediates of an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::bundle::{
    read_participants, read_text, session_keys, SessionKey, ANNOTATIONS_FILE, EVENTS_FILE, GROUND_TRUTH_FILE,
    PARTICIPANTS_FILE, SCENARIO_FILE, TRAJECTORY_FILE,
};
use super::report::{
    DECOMPOSITION_FILE, DETECTIONS_FILE, DETECTIONS_HEADER, DROPPED_FILE, PANEL_FILE, PROCESSED_EDA_FILE,
    QUALITY_FILE, SYNCED_EDA_FILE,
};
use super::stages::{decomposition_from_columns, stage_decompose, stage_detect, stage_smooth, SessionQuality, Stage};
use super::{finish, DroppedSession, PipelineConfig, PipelineReport, ProcessedSession, SessionArtifacts};
use crate::annotation::AnnotationStore;
use crate::decomposition::read_decomposition_csv;
use crate::error::{Error, Result};
use crate::lmm::PanelDataset;
use crate::scr::{read_ground_truth, ScrEvent};
use crate::segmentation::Trajectory;
use crate::signal::read_eda_csv;
use crate::simulator::{read_events_csv, ScenarioConfig};
use crate::util::{csv_reader, expect_header, open, parse_f64};

/// Recomputes `from` and every later stage from the files that `from`
/// consumes in `dir`, as written by [`super::write_outputs`]. With the
/// configuration used to write `dir`, the report is identical to the
/// original.
///
/// Sync consumes the raw bundles, which output directories do not hold;
/// rerun it with [`super::run_pipeline`].
pub fn rerun_from_cache(dir: &Path, config: &PipelineConfig, from: Stage) -> Result<PipelineReport> {
    config.validate()?;
    if from == Stage::Sync {
        return Err(Error::Config("the sync stage reads raw bundles; run the pipeline on the input directory".into()));
    }
    let people = read_participants(&dir.join(PARTICIPANTS_FILE))?;
    let store = AnnotationStore::read(open(&dir.join(ANNOTATIONS_FILE))?)?;
    let mut records: BTreeMap<SessionKey, Vec<_>> = BTreeMap::new();
    for r in store.records() {
        records.entry(SessionKey::new(&r.participant_id, &r.session_id)).or_default().push(r.clone());
    }
    let mut dropped = read_dropped(&dir.join(DROPPED_FILE))?;

    let keys = session_keys(dir)?;
    let results: Vec<Result<std::result::Result<ProcessedSession, DroppedSession>>> =
        keys.par_iter().map(|key| restore_session(dir, key, from, config)).collect();
    let mut sessions = Vec::with_capacity(keys.len());
    for r in results {
        match r? {
            Ok(mut s) => {
                s.demographics = people.get(&s.key.participant_id).cloned().unwrap_or_default();
                s.annotations = records.remove(&s.key).unwrap_or_default();
                sessions.push(s);
            }
            Err(d) => dropped.push(d),
        }
    }
    let panel = if from == Stage::Model {
        Some(PanelDataset::read_csv(open(&dir.join(PANEL_FILE))?)?)
    } else {
        None
    };
    finish(config, sessions, dropped, panel)
}

fn restore_session(
    dir: &Path,
    key: &SessionKey,
    from: Stage,
    cfg: &PipelineConfig,
) -> Result<std::result::Result<ProcessedSession, DroppedSession>> {
    let sdir = key.dir(dir);
    let scenario: ScenarioConfig = toml::from_str(&read_text(&sdir.join(SCENARIO_FILE))?)
        .map_err(|e| Error::format(SCENARIO_FILE, e.to_string()))?;
    let trajectory = Trajectory::read_csv(open(&sdir.join(TRAJECTORY_FILE))?, &key.session_id)?;
    let optional = |name: &str| {
        let p = sdir.join(name);
        p.exists().then_some(p)
    };
    let events = optional(EVENTS_FILE).map(|p| read_events_csv(open(&p)?)).transpose()?;
    let ground_truth = optional(GROUND_TRUTH_FILE).map(|p| read_ground_truth(open(&p)?)).transpose()?;
    let mut quality: SessionQuality = toml::from_str(&read_text(&sdir.join(QUALITY_FILE))?)
        .map_err(|e| Error::format(QUALITY_FILE, e.to_string()))?;

    let mut artifacts = SessionArtifacts::default();
    let fail = |stage: Stage, e: Error| DroppedSession { key: key.clone(), stage, hard: true, reason: e.to_string() };
    let eda = |name: &str| read_eda_csv(open(&sdir.join(name))?, &key.participant_id, &key.session_id);
    if from == Stage::Smooth {
        let synced = eda(SYNCED_EDA_FILE)?;
        match stage_smooth(&synced, cfg) {
            Ok(p) => artifacts.processed = Some(p),
            Err(e) => return Ok(Err(fail(Stage::Smooth, e))),
        }
        artifacts.synced = Some(synced);
    }
    if from <= Stage::Decompose {
        let processed = match artifacts.processed.take() {
            Some(p) => p,
            None => eda(PROCESSED_EDA_FILE)?,
        };
        match stage_decompose(&processed, cfg) {
            Ok(d) => {
                quality.record(&d);
                artifacts.decomposition = Some(d);
            }
            Err(e) => return Ok(Err(fail(Stage::Decompose, e))),
        }
        artifacts.processed = Some(processed);
    }
    let detected = if from <= Stage::Detect {
        let d = match artifacts.decomposition.take() {
            Some(d) => d,
            None => decomposition_from_columns(key, read_decomposition_csv(open(&sdir.join(DECOMPOSITION_FILE))?)?, &quality)?,
        };
        let detected = stage_detect(&d, cfg);
        artifacts.decomposition = Some(d);
        detected
    } else {
        read_detections(&sdir.join(DETECTIONS_FILE))?
    };
    Ok(Ok(ProcessedSession {
        key: key.clone(),
        scenario,
        demographics: Default::default(),
        quality,
        trajectory,
        events,
        annotations: Vec::new(),
        ground_truth,
        detected,
        artifacts,
    }))
}

fn read_detections(path: &Path) -> Result<Vec<ScrEvent>> {
    const CTX: &str = "detections";
    let mut r = csv_reader(open(path)?);
    expect_header(r.headers()?, &DETECTIONS_HEADER, CTX)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < DETECTIONS_HEADER.len() {
            return Err(Error::format(CTX, format!("line {line}: expected {} fields", DETECTIONS_HEADER.len())));
        }
        let no = rec[2].parse::<u32>().map_err(|_| Error::format(CTX, format!("line {line}: bad SCR number")))?;
        let f = |i: usize| parse_f64(&rec[i], CTX, line);
        let mut ev = ScrEvent::new(&rec[0], &rec[1], no, f(4)?, f(5)?, f(6)?);
        ev.session_start_unix = f(3)?;
        out.push(ev);
    }
    Ok(out)
}

fn read_dropped(path: &Path) -> Result<Vec<DroppedSession>> {
    const CTX: &str = "dropped sessions";
    let mut r = csv_reader(open(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(Error::format(CTX, "expected 5 fields"));
        }
        out.push(DroppedSession {
            key: SessionKey::new(&rec[0], &rec[1]),
            stage: rec[2].parse()?,
            hard: &rec[3] == "true",
            reason: rec[4].to_string(),
        });
    }
    Ok(out)
}
