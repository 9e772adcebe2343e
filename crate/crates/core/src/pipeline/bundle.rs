//! Session bundles and their on-disk layout.
//!
//! ```text
//! <root>/participants.csv                      participant_id, age_group, gender
//! <root>/annotations.csv                       optional, cohort-wide records
//! <root>/sessions/<pid>/<sid>/scenario.toml
//! <root>/sessions/<pid>/<sid>/eda.csv          unix_time, sc_microsiemens
//! <root>/sessions/<pid>/<sid>/trajectory.csv
//! <root>/sessions/<pid>/<sid>/events.csv       optional
//! <root>/sessions/<pid>/<sid>/artifacts.csv    optional mask
//! <root>/sessions/<pid>/<sid>/ground_truth.csv optional
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationRecord, AnnotationStore};
use crate::error::{Error, Result};
use crate::scr::{read_ground_truth, write_ground_truth, GroundTruthRow};
use crate::segmentation::Trajectory;
use crate::signal::{read_artifact_mask, read_eda_csv, write_artifact_mask, write_eda_csv, ArtifactMask, EdaTrace};
use crate::simulator::{read_events_csv, write_events_csv, ScenarioConfig, SimEvent};
use crate::util::{create, csv_reader, csv_writer, expect_header, open};

pub const SESSIONS_DIR: &str = "sessions";
pub const PARTICIPANTS_FILE: &str = "participants.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const EDA_FILE: &str = "eda.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const ARTIFACTS_FILE: &str = "artifacts.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

const PARTICIPANTS_HEADER: [&str; 3] = ["participant_id", "age_group", "gender"];

/// `(participant_id, session_id)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub participant_id: String,
    pub session_id: String,
}

impl SessionKey {
    pub fn new(participant_id: &str, session_id: &str) -> Self {
        Self { participant_id: participant_id.to_string(), session_id: session_id.to_string() }
    }

    /// Directory of this session below `root`.
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(SESSIONS_DIR).join(&self.participant_id).join(&self.session_id)
    }
}

impl std::fmt::Display for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.participant_id, self.session_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_group: Option<String>,
    pub gender: Option<String>,
}

/// Everything recorded for one participant session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBundle {
    pub scenario: ScenarioConfig,
    pub eda: EdaTrace,
    pub trajectory: Trajectory,
    pub events: Option<Vec<SimEvent>>,
    pub annotations: Option<Vec<AnnotationRecord>>,
    pub mask: Option<ArtifactMask>,
    pub ground_truth: Option<Vec<GroundTruthRow>>,
    pub demographics: Demographics,
}

impl SessionBundle {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(&self.eda.participant_id, &self.eda.session_id)
    }

    /// Identity agreement across streams and overlapping time bases.
    pub fn validate(&self) -> Result<()> {
        let key = self.key();
        let mismatch = |what: &str, got: String| {
            Err(Error::Config(format!("{key}: {what} belongs to {got}")))
        };
        if self.trajectory.session_id != key.session_id {
            return mismatch("trajectory", self.trajectory.session_id.clone());
        }
        for r in self.annotations.iter().flatten() {
            if r.participant_id != key.participant_id || r.session_id != key.session_id {
                return mismatch("annotation record", format!("{}/{}", r.participant_id, r.session_id));
            }
        }
        for g in self.ground_truth.iter().flatten() {
            if g.row.participant_id != key.participant_id || g.row.session_id != key.session_id {
                return mismatch("ground-truth row", format!("{}/{}", g.row.participant_id, g.row.session_id));
            }
        }
        self.scenario.validate()?;
        self.eda.validate()?;
        let (t0, t1) = self
            .trajectory
            .time_span()
            .ok_or_else(|| Error::Config(format!("{key}: empty trajectory")))?;
        if self.eda.end() < t0 || self.eda.start() > t1 {
            return Err(Error::Config(format!(
                "{key}: EDA [{:.1}, {:.1}] and trajectory [{t0:.1}, {t1:.1}] do not overlap",
                self.eda.start(),
                self.eda.end()
            )));
        }
        Ok(())
    }

    /// Writes the session files below `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = self.key().dir(root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let toml = toml::to_string(&self.scenario).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&dir.join(SCENARIO_FILE), &toml)?;
        write_eda_csv(create(&dir.join(EDA_FILE))?, &self.eda)?;
        self.trajectory.write_csv(create(&dir.join(TRAJECTORY_FILE))?)?;
        if let Some(ev) = &self.events {
            write_events_csv(create(&dir.join(EVENTS_FILE))?, ev)?;
        }
        if let Some(m) = &self.mask {
            write_artifact_mask(create(&dir.join(ARTIFACTS_FILE))?, m)?;
        }
        if let Some(g) = &self.ground_truth {
            write_ground_truth(create(&dir.join(GROUND_TRUTH_FILE))?, g)?;
        }
        Ok(())
    }

    /// Reads one session directory. Annotations and demographics are
    /// cohort-level and attached by [`load_bundles`].
    pub fn read(root: &Path, key: &SessionKey) -> Result<Self> {
        let dir = key.dir(root);
        let scenario: ScenarioConfig = toml::from_str(&read_text(&dir.join(SCENARIO_FILE))?)
            .map_err(|e| Error::format(SCENARIO_FILE, e.to_string()))?;
        let eda = read_eda_csv(open(&dir.join(EDA_FILE))?, &key.participant_id, &key.session_id)?;
        let trajectory = Trajectory::read_csv(open(&dir.join(TRAJECTORY_FILE))?, &key.session_id)?;
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let events = optional(EVENTS_FILE).map(|p| read_events_csv(open(&p)?)).transpose()?;
        let mask = optional(ARTIFACTS_FILE).map(|p| read_artifact_mask(open(&p)?)).transpose()?;
        let ground_truth = optional(GROUND_TRUTH_FILE).map(|p| read_ground_truth(open(&p)?)).transpose()?;
        Ok(Self {
            scenario,
            eda,
            trajectory,
            events,
            annotations: None,
            mask,
            ground_truth,
            demographics: Demographics::default(),
        })
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Session keys found below `root`, sorted.
pub fn session_keys(root: &Path) -> Result<Vec<SessionKey>> {
    let base = root.join(SESSIONS_DIR);
    let mut keys = Vec::new();
    let subdirs = |p: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let entry = entry.map_err(|e| Error::io(p, e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    };
    for pid in subdirs(&base)? {
        for sid in subdirs(&base.join(&pid))? {
            keys.push(SessionKey::new(&pid, &sid));
        }
    }
    Ok(keys)
}

pub fn read_participants(path: &Path) -> Result<BTreeMap<String, Demographics>> {
    const CTX: &str = "participants file";
    let mut r = csv_reader(open(path)?);
    expect_header(r.headers()?, &PARTICIPANTS_HEADER, CTX)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let cell = |i: usize| rec.get(i).filter(|s| !s.is_empty()).map(str::to_string);
        out.insert(rec[0].to_string(), Demographics { age_group: cell(1), gender: cell(2) });
    }
    Ok(out)
}

pub fn write_participants(path: &Path, people: &BTreeMap<String, Demographics>) -> Result<()> {
    let mut w = csv_writer(create(path)?);
    w.write_record(PARTICIPANTS_HEADER)?;
    for (pid, d) in people {
        w.write_record([
            pid.as_str(),
            d.age_group.as_deref().unwrap_or(""),
            d.gender.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A session that could not be read.
#[derive(Debug)]
pub struct LoadFailure {
    pub key: SessionKey,
    pub error: Error,
}

/// Reads every session below `root`, attaching demographics and the
/// cohort annotation file. Unreadable sessions are returned separately.
pub fn load_bundles(root: &Path) -> Result<(Vec<SessionBundle>, Vec<LoadFailure>)> {
    let people = match root.join(PARTICIPANTS_FILE) {
        p if p.exists() => read_participants(&p)?,
        _ => BTreeMap::new(),
    };
    let mut by_session: BTreeMap<SessionKey, Vec<AnnotationRecord>> = BTreeMap::new();
    let ann_path = root.join(ANNOTATIONS_FILE);
    if ann_path.exists() {
        let store = AnnotationStore::read(open(&ann_path)?)?;
        for r in store.records() {
            by_session.entry(SessionKey::new(&r.participant_id, &r.session_id)).or_default().push(r.clone());
        }
    }
    let (mut ok, mut failed) = (Vec::new(), Vec::new());
    for key in session_keys(root)? {
        match SessionBundle::read(root, &key) {
            Ok(mut b) => {
                b.annotations = by_session.remove(&key);
                b.demographics = people.get(&key.participant_id).cloned().unwrap_or_default();
                ok.push(b);
            }
            Err(error) => failed.push(LoadFailure { key, error }),
        }
    }
    Ok((ok, failed))
}

/// Writes bundles, demographics and any annotation records under `root`.
pub fn write_bundles(root: &Path, bundles: &[SessionBundle]) -> Result<()> {
    let mut people = BTreeMap::new();
    let mut store = AnnotationStore::new();
    for b in bundles {
        b.write(root)?;
        people.insert(b.key().participant_id, b.demographics.clone());
        for r in b.annotations.iter().flatten() {
            store.upsert(r.clone());
        }
    }
    write_participants(&root.join(PARTICIPANTS_FILE), &people)?;
    if !store.is_empty() {
        store.write(create(&root.join(ANNOTATIONS_FILE))?)?;
    }
    Ok(())
}
