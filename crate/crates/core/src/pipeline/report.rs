//! Report text and the on-disk output layout.
//!
//! ```text
//! <out>/report.txt               rendered report
//! <out>/config.toml              configuration the report was produced with
//! <out>/scr_table.csv            every event after the cohort stages
//! <out>/participant_stats.csv
//! <out>/label_frequencies.csv
//! <out>/panel.csv                model input
//! <out>/models/<name>.{txt,csv}
//! <out>/dropped.csv
//! <out>/participants.csv
//! <out>/annotations.csv          records supplied with the processed sessions
//! <out>/sessions.json            session index
//! <out>/sessions/<pid>/<sid>/    scenario.toml, trajectory.csv (synchronized
//!                                window), events.csv, ground_truth.csv,
//!                                synced_eda.csv, processed_eda.csv,
//!                                decomposition.csv, detections.csv,
//!                                stage.toml, scr_table.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{
    write_participants, write_text, Demographics, ANNOTATIONS_FILE, EVENTS_FILE, GROUND_TRUTH_FILE, PARTICIPANTS_FILE,
    SCENARIO_FILE, TRAJECTORY_FILE,
};
use super::{PipelineReport, ProcessedSession, CONFIG_VERSION};
use crate::annotation::AnnotationStore;
use crate::decomposition::write_decomposition_csv;
use crate::error::{Error, Result};
use crate::scr::{write_ground_truth, write_scr_table, ScrEvent, ScrRow};
use crate::signal::write_eda_csv;
use crate::simulator::{write_events_csv, ScenarioConfig};
use crate::util::{create, csv_writer};

pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SCR_TABLE_FILE: &str = "scr_table.csv";
pub const PARTICIPANT_STATS_FILE: &str = "participant_stats.csv";
pub const LABEL_FREQUENCIES_FILE: &str = "label_frequencies.csv";
pub const PANEL_FILE: &str = "panel.csv";
pub const MODELS_DIR: &str = "models";
pub const DROPPED_FILE: &str = "dropped.csv";
pub const INDEX_FILE: &str = "sessions.json";
pub const SYNCED_EDA_FILE: &str = "synced_eda.csv";
pub const PROCESSED_EDA_FILE: &str = "processed_eda.csv";
pub const DECOMPOSITION_FILE: &str = "decomposition.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const QUALITY_FILE: &str = "stage.toml";

pub(crate) const DETECTIONS_HEADER: [&str; 7] = [
    "participant_id",
    "session_id",
    "detected_scr_no",
    "session_start_unix",
    "onset_unix",
    "peak_unix",
    "amplitude",
];

/// Entry of the session index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub participant_id: String,
    pub session_id: String,
    pub scenario: ScenarioConfig,
    pub n_scrs: usize,
    pub masked_fraction: f64,
    pub window: (f64, f64),
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

pub(crate) fn render(r: &PipelineReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "PEDESTRIAN STRESS PIPELINE REPORT");
    let _ = writeln!(out, "config_version = {CONFIG_VERSION}");
    let _ = writeln!(out, "\n== Configuration ==\n{}", r.config.to_toml().trim_end());

    let hard = r.dropped.iter().filter(|d| d.hard).count();
    let _ = writeln!(out, "\n== Data quality ==");
    let _ = writeln!(
        out,
        "sessions: {} input, {} processed, {} dropped ({hard} hard)",
        r.sessions.len() + r.dropped.len(),
        r.sessions.len(),
        r.dropped.len()
    );
    for d in &r.dropped {
        let kind = if d.hard { "hard" } else { "soft" };
        let _ = writeln!(out, "  dropped {} at {} ({kind}): {}", d.key, d.stage, d.reason);
    }
    let _ = writeln!(out, "per session: window, max skew s, masked samples, masked fraction, tau1, tau2, residual rms, SCRs");
    for s in &r.sessions {
        let q = &s.quality;
        let _ = writeln!(
            out,
            "  {} [{}, {}] {} {} {} {} {} {:.6} {}",
            s.key,
            num(q.window_start),
            num(q.window_end),
            num(q.max_skew_s),
            q.masked_samples,
            num(q.masked_fraction),
            num(q.tau1),
            num(q.tau2),
            q.residual_rms,
            s.detected.len()
        );
    }
    let list = |v: &[String]| if v.is_empty() { "none".to_string() } else { v.join(", ") };
    let _ = writeln!(out, "unstandardizable participants: {}", list(&r.standardization.unstandardizable));
    let _ = writeln!(out, "unlocatable events: {}", r.unlocatable);
    let a = &r.annotations;
    let _ = writeln!(
        out,
        "annotations ({:?}, coder {}): {} labelled, {} deleted, {} defaulted to Unknown, {} skipped, {} generated",
        a.source, a.coder, a.summary.labelled, a.summary.deleted, a.summary.defaulted, a.summary.skipped, a.generated
    );
    for m in &a.invalid {
        let _ = writeln!(out, "  invalid label: {m}");
    }
    for m in &a.dangling {
        let _ = writeln!(out, "  no matching SCR: {m}");
    }

    let _ = writeln!(out, "\n== Participants ==");
    let _ = writeln!(out, "participant_id n_scrs mean_amplitude sd_amplitude");
    for s in &r.standardization.stats {
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6}",
            s.participant_id, s.n_scrs, s.mean_amplitude, s.sd_amplitude
        );
    }

    let _ = writeln!(out, "\n== Label frequencies ==");
    let _ = writeln!(out, "label count t_min t_q1 t_median t_q3 t_max");
    for l in &r.labels.labels {
        let five = l
            .t_scores
            .map(|f| [f.min, f.q1, f.median, f.q3, f.max].map(num).join(" "))
            .unwrap_or_else(|| "-- -- -- -- --".into());
        let _ = writeln!(out, "{} {} {five}", l.label, l.count);
    }
    let _ = writeln!(out, "deleted {}", r.labels.deleted);

    let _ = writeln!(out, "\n== Models ==");
    let _ = writeln!(out, "panel rows: {}", r.panel.rows.len());
    for m in &r.models {
        let _ = writeln!(out, "\n-- {} --", m.name);
        let _ = write!(out, "rows after filter: {}", m.rows_after_filter);
        match &m.result {
            Ok(f) => {
                let _ = writeln!(
                    out,
                    "; dropped (missing): {}; dropped (other level): {}; observations: {}",
                    f.fit.dropped_missing, f.fit.dropped_level, f.fit.n_obs
                );
                if !m.absent_levels.is_empty() {
                    let _ = writeln!(out, "levels without observations: {}", m.absent_levels.join(", "));
                }
                let _ = writeln!(
                    out,
                    "restricted log-likelihood {}; residual sd {}; converged {}",
                    num(f.fit.loglik),
                    num(f.fit.sigma_e),
                    f.fit.convergence.converged
                );
                out.push_str(&f.table.to_text());
            }
            Err(f) => {
                let _ = writeln!(out);
                let kind = if f.hard { "error" } else { "not estimated" };
                let _ = writeln!(out, "{kind}: {}", f.reason);
            }
        }
    }

    let _ = writeln!(out, "\n== SCR table ==");
    out.push_str(&scr_table_text(&r.events, r));
    out
}

fn scr_rows(events: &[ScrEvent], r: &PipelineReport) -> Vec<ScrRow> {
    events.iter().map(|e| e.to_row(&r.config.taxonomy)).collect()
}

fn scr_table_text(events: &[ScrEvent], r: &PipelineReport) -> String {
    let mut buf = Vec::new();
    write_scr_table(&mut buf, &scr_rows(events, r)).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8 table")
}

/// Writes the report, its tables and every session's intermediates below
/// `dir`.
pub fn write_outputs(report: &PipelineReport, dir: &Path) -> Result<()> {
    write_text(&dir.join(REPORT_FILE), &report.render())?;
    write_text(&dir.join(CONFIG_FILE), &report.config.to_toml())?;
    write_text(&dir.join(SCR_TABLE_FILE), &scr_table_text(&report.events, report))?;

    let mut w = csv_writer(create(&dir.join(PARTICIPANT_STATS_FILE))?);
    w.write_record(["participant_id", "n_scrs", "mean_amplitude", "sd_amplitude", "standardizable"])?;
    for s in &report.standardization.stats {
        w.write_record([
            s.participant_id.clone(),
            s.n_scrs.to_string(),
            s.mean_amplitude.to_string(),
            s.sd_amplitude.to_string(),
            s.is_standardizable().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(PARTICIPANT_STATS_FILE), e))?;

    let mut w = csv_writer(create(&dir.join(LABEL_FREQUENCIES_FILE))?);
    w.write_record(["label", "count", "t_min", "t_q1", "t_median", "t_q3", "t_max"])?;
    for l in &report.labels.labels {
        let five = l.t_scores.map(|f| [f.min, f.q1, f.median, f.q3, f.max].map(|v| v.to_string()));
        let mut rec = vec![l.label.clone(), l.count.to_string()];
        rec.extend(five.map_or_else(|| vec![String::new(); 5], Vec::from));
        w.write_record(&rec)?;
    }
    w.write_record(["Delete", &report.labels.deleted.to_string(), "", "", "", "", ""])?;
    w.flush().map_err(|e| Error::io(dir.join(LABEL_FREQUENCIES_FILE), e))?;

    report.panel.write_csv(create(&dir.join(PANEL_FILE))?)?;
    for m in &report.models {
        if let Ok(f) = &m.result {
            let base = dir.join(MODELS_DIR).join(&m.name);
            write_text(&base.with_extension("txt"), &f.table.to_text())?;
            write_text(&base.with_extension("csv"), &f.table.to_csv())?;
        }
    }

    let mut w = csv_writer(create(&dir.join(DROPPED_FILE))?);
    w.write_record(["participant_id", "session_id", "stage", "hard", "reason"])?;
    for d in &report.dropped {
        w.write_record([
            d.key.participant_id.as_str(),
            &d.key.session_id,
            d.stage.as_str(),
            if d.hard { "true" } else { "false" },
            &d.reason,
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(DROPPED_FILE), e))?;

    let people: BTreeMap<String, Demographics> = report
        .sessions
        .iter()
        .map(|s| (s.key.participant_id.clone(), s.demographics.clone()))
        .collect();
    write_participants(&dir.join(PARTICIPANTS_FILE), &people)?;

    let mut store = AnnotationStore::new();
    for r in report.sessions.iter().flat_map(|s| &s.annotations) {
        store.upsert(r.clone());
    }
    store.write(create(&dir.join(ANNOTATIONS_FILE))?)?;

    let index: Vec<SessionSummary> = report
        .sessions
        .iter()
        .map(|s| SessionSummary {
            participant_id: s.key.participant_id.clone(),
            session_id: s.key.session_id.clone(),
            scenario: s.scenario.clone(),
            n_scrs: s.detected.len(),
            masked_fraction: s.quality.masked_fraction,
            window: (s.quality.window_start, s.quality.window_end),
        })
        .collect();
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::format(INDEX_FILE, e.to_string()))?;
    write_text(&dir.join(INDEX_FILE), &json)?;

    for s in &report.sessions {
        let session_events: Vec<ScrEvent> = report
            .events
            .iter()
            .filter(|e| e.participant_id == s.key.participant_id && e.session_id == s.key.session_id)
            .cloned()
            .collect();
        write_session(s, &scr_table_text(&session_events, report), &s.key.dir(dir))?;
    }
    Ok(())
}

fn write_session(s: &ProcessedSession, scr_table: &str, dir: &Path) -> Result<()> {
    let scenario = toml::to_string(&s.scenario).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join(SCENARIO_FILE), &scenario)?;
    s.trajectory.write_csv(create(&dir.join(TRAJECTORY_FILE))?)?;
    if let Some(ev) = &s.events {
        write_events_csv(create(&dir.join(EVENTS_FILE))?, ev)?;
    }
    if let Some(gt) = &s.ground_truth {
        write_ground_truth(create(&dir.join(GROUND_TRUTH_FILE))?, gt)?;
    }
    if let Some(t) = &s.artifacts.synced {
        write_eda_csv(create(&dir.join(SYNCED_EDA_FILE))?, t)?;
    }
    if let Some(t) = &s.artifacts.processed {
        write_eda_csv(create(&dir.join(PROCESSED_EDA_FILE))?, t)?;
    }
    if let Some(d) = &s.artifacts.decomposition {
        write_decomposition_csv(create(&dir.join(DECOMPOSITION_FILE))?, d)?;
    }
    let quality = toml::to_string(&s.quality).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join(QUALITY_FILE), &quality)?;
    write_detections(&dir.join(DETECTIONS_FILE), &s.detected)?;
    write_text(&dir.join(SCR_TABLE_FILE), scr_table)
}

fn write_detections(path: &Path, events: &[ScrEvent]) -> Result<()> {
    let mut w = csv_writer(create(path)?);
    w.write_record(DETECTIONS_HEADER)?;
    for e in events {
        w.write_record([
            e.participant_id.clone(),
            e.session_id.clone(),
            e.detected_scr_no.to_string(),
            e.session_start_unix.to_string(),
            e.onset_unix.to_string(),
            e.peak_unix.to_string(),
            e.amplitude.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
