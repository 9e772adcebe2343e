//! Label taxonomy, coder records, agreement statistics and label summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scr::ScrEvent;
use crate::util::{csv_reader, csv_writer, expect_header, quantile_sorted};

/// Coder whose records override every other coder.
pub const ADJUDICATOR: &str = "adjudicated";
pub const DELETE: &str = "Delete";
pub const UNKNOWN: &str = "Unknown";
pub const IMMERSION: &str = "Immersion";

/// Outcome of coding one SCR: a taxonomy label, or removal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mark {
    Label(String),
    Delete,
}

impl Mark {
    pub fn unknown() -> Self {
        Mark::Label(UNKNOWN.to_string())
    }

    pub fn label_id(&self) -> Option<&str> {
        match self {
            Mark::Label(id) => Some(id),
            Mark::Delete => None,
        }
    }
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mark::Label(id) => f.write_str(id),
            Mark::Delete => f.write_str(DELETE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDef {
    pub id: String,
    pub display: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub definition: String,
    /// Immersion responses are coded but left out of model fits.
    #[serde(default = "yes")]
    pub in_models: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    pub labels: Vec<LabelDef>,
}

/// Lowercase alphanumerics only, so "Avatar's action" ≡ "AvatarsAction".
fn fold(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl Default for LabelTaxonomy {
    fn default() -> Self {
        let def = |id: &str, display: &str, aliases: &[&str], definition: &str| LabelDef {
            id: id.into(),
            display: display.into(),
            aliases: aliases.iter().map(|a| a.to_string()).collect(),
            definition: definition.into(),
            in_models: id != IMMERSION,
        };
        Self {
            labels: vec![
                def(IMMERSION, "Immersion", &[], "Response to entering or settling into the virtual scene."),
                def("AvatarsAction", "Avatar's action", &["Avatar action", "Avatars' action"], "Response to what a virtual pedestrian does."),
                def("TrafficSpeed", "Traffic speed", &[], "Response to the speed of approaching vehicles."),
                def("CheckingFarSideTraffic", "Checking the far-side traffic", &["Far-side traffic"], "Response while looking at traffic in the far lane."),
                def("HesitationToCross", "Hesitation to cross", &[], "Response while unsure whether to start crossing."),
                def("DecisionToCross", "Decision to cross", &[], "Response at the moment of committing to cross."),
                def("Crossing", "Crossing", &[], "Response while walking across the road."),
                def("FearOfAccident", "Fear of accident", &["Near miss"], "Response to a vehicle coming close."),
                def("Accident", "Accident", &["Collision"], "Response to being struck by a vehicle."),
                def(UNKNOWN, "Unknown", &[], "No identifiable trigger."),
            ],
        }
    }
}

impl LabelTaxonomy {
    /// Validates uniqueness and the reserved marker.
    pub fn new(labels: Vec<LabelDef>) -> Result<Self> {
        let tax = Self { labels };
        let mut seen = BTreeSet::new();
        for l in &tax.labels {
            let names = std::iter::once(&l.id).chain(std::iter::once(&l.display)).chain(&l.aliases);
            let keys: BTreeSet<String> = names.map(|n| fold(n)).collect();
            for k in keys {
                if k.is_empty() || k == fold(DELETE) {
                    return Err(Error::Config(format!("label {:?} uses a reserved or empty name", l.id)));
                }
                if !seen.insert(k.clone()) {
                    return Err(Error::Config(format!("label name {k:?} is not unique")));
                }
            }
        }
        if tax.get(UNKNOWN).is_none() {
            return Err(Error::Config("taxonomy must contain Unknown".into()));
        }
        Ok(tax)
    }

    /// Extends or replaces the default taxonomy from TOML (`[[labels]]` tables).
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: LabelTaxonomy = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(raw.labels)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    pub fn get(&self, id: &str) -> Option<&LabelDef> {
        self.labels.iter().find(|l| l.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.id.as_str())
    }

    /// Resolves an id, display name or alias; `Delete` resolves to the marker.
    pub fn resolve_mark(&self, text: &str) -> Result<Mark> {
        let key = fold(text);
        if key == fold(DELETE) {
            return Ok(Mark::Delete);
        }
        self.labels
            .iter()
            .find(|l| {
                fold(&l.id) == key || fold(&l.display) == key || l.aliases.iter().any(|a| fold(a) == key)
            })
            .map(|l| Mark::Label(l.id.clone()))
            .ok_or_else(|| Error::UnknownLabel(text.to_string()))
    }

    pub fn display(&self, mark: &Mark) -> String {
        match mark {
            Mark::Delete => DELETE.to_string(),
            Mark::Label(id) => self.get(id).map_or_else(|| id.clone(), |l| l.display.clone()),
        }
    }

    /// Whether events with this mark enter model fits.
    pub fn in_models(&self, mark: &Mark) -> bool {
        match mark {
            Mark::Delete => false,
            Mark::Label(id) => self.get(id).is_none_or(|l| l.in_models),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub participant_id: String,
    pub session_id: String,
    pub detected_scr_no: u32,
    /// Label text as entered; resolved through the taxonomy on use.
    pub label: String,
    pub coder_id: String,
    pub created_at_unix: i64,
}

type RecordKey = (String, String, u32, String);

impl AnnotationRecord {
    fn key(&self) -> RecordKey {
        (
            self.participant_id.clone(),
            self.session_id.clone(),
            self.detected_scr_no,
            self.coder_id.clone(),
        )
    }

    fn scr_key(&self) -> (String, String, u32) {
        (self.participant_id.clone(), self.session_id.clone(), self.detected_scr_no)
    }

    pub fn describe(&self) -> String {
        format!(
            "{}/{}/#{} by {}",
            self.participant_id, self.session_id, self.detected_scr_no, self.coder_id
        )
    }
}

/// Last-writer-wins store keyed by (participant, session, scr_no, coder).
/// Replacing a record keeps its original position, so a file without
/// duplicate keys saves back byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    records: Vec<AnnotationRecord>,
    index: HashMap<RecordKey, usize>,
}

pub const ANNOTATION_HEADER: [&str; 6] = [
    "participant_id",
    "session_id",
    "detected_scr_no",
    "label",
    "coder_id",
    "created_at_unix",
];

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn upsert(&mut self, rec: AnnotationRecord) {
        match self.index.get(&rec.key()) {
            Some(&i) => self.records[i] = rec,
            None => {
                self.index.insert(rec.key(), self.records.len());
                self.records.push(rec);
            }
        }
    }

    pub fn for_coder<'a>(&'a self, coder: &'a str) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.records.iter().filter(move |r| r.coder_id == coder)
    }

    pub fn coders(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.coder_id.as_str()).collect()
    }

    /// Every label must resolve; offenders are listed in the error.
    pub fn validate(&self, taxonomy: &LabelTaxonomy) -> Result<()> {
        let bad: Vec<String> = self
            .records
            .iter()
            .filter(|r| taxonomy.resolve_mark(&r.label).is_err())
            .map(|r| format!("{}: {:?}", r.describe(), r.label))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownLabel(bad.join("; ")))
        }
    }

    pub fn read<R: Read>(rdr: R) -> Result<Self> {
        let ctx = "annotation file";
        let mut rdr = csv_reader(rdr);
        expect_header(rdr.headers()?, &ANNOTATION_HEADER, ctx)?;
        let mut store = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() < 6 {
                return Err(Error::format(ctx, format!("line {line}: expected 6 fields")));
            }
            let int = |s: &str, what: &str| {
                s.parse::<i64>()
                    .map_err(|_| Error::format(ctx, format!("line {line}: bad {what} {s:?}")))
            };
            let no = int(&rec[2], "detected_scr_no")?;
            if no < 1 || no > u32::MAX as i64 {
                return Err(Error::format(ctx, format!("line {line}: detected_scr_no must be ≥ 1")));
            }
            store.upsert(AnnotationRecord {
                participant_id: rec[0].to_string(),
                session_id: rec[1].to_string(),
                detected_scr_no: no as u32,
                label: rec[3].to_string(),
                coder_id: rec[4].to_string(),
                created_at_unix: int(&rec[5], "created_at_unix")?,
            });
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w);
        wtr.write_record(ANNOTATION_HEADER)?;
        for r in &self.records {
            wtr.write_record([
                r.participant_id.clone(),
                r.session_id.clone(),
                r.detected_scr_no.to_string(),
                r.label.clone(),
                r.coder_id.clone(),
                r.created_at_unix.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<annotation writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplySummary {
    pub labelled: usize,
    pub deleted: usize,
    /// Events without a record, defaulted to Unknown.
    pub defaulted: usize,
    /// Records for sessions absent from the event set (e.g. failed sessions).
    pub skipped: usize,
}

/// Labels events from `coder`'s records, with adjudicated records taking
/// precedence. Unmatched events become `Unknown`.
pub fn apply_annotations(
    events: &mut [ScrEvent],
    store: &AnnotationStore,
    coder: &str,
    taxonomy: &LabelTaxonomy,
) -> Result<ApplySummary> {
    let sessions: BTreeSet<(String, String)> = events
        .iter()
        .map(|e| (e.participant_id.clone(), e.session_id.clone()))
        .collect();
    let present: BTreeSet<(String, String, u32)> = events
        .iter()
        .map(|e| (e.participant_id.clone(), e.session_id.clone(), e.detected_scr_no))
        .collect();

    let mut chosen: BTreeMap<(String, String, u32), Mark> = BTreeMap::new();
    let mut dangling = Vec::new();
    let mut summary = ApplySummary::default();
    for pass in [coder, ADJUDICATOR] {
        for r in store.for_coder(pass) {
            let mark = taxonomy.resolve_mark(&r.label)?;
            let key = r.scr_key();
            if !sessions.contains(&(key.0.clone(), key.1.clone())) {
                summary.skipped += 1;
                continue;
            }
            if !present.contains(&key) {
                dangling.push(r.describe());
                continue;
            }
            chosen.insert(key, mark);
        }
        if pass == ADJUDICATOR {
            break;
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingAnnotations(dangling));
    }
    for ev in events.iter_mut() {
        let key = (ev.participant_id.clone(), ev.session_id.clone(), ev.detected_scr_no);
        match chosen.get(&key) {
            Some(m) => {
                if *m == Mark::Delete {
                    summary.deleted += 1;
                } else {
                    summary.labelled += 1;
                }
                ev.annotation = Some(m.clone());
            }
            None => {
                summary.defaulted += 1;
                ev.annotation = Some(Mark::unknown());
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub shared: usize,
    pub percent_agreement: f64,
    pub kappa: f64,
}

/// Percent agreement and Cohen's kappa over the SCR keys both coders rated.
pub fn coder_agreement(
    a: &[AnnotationRecord],
    b: &[AnnotationRecord],
    taxonomy: &LabelTaxonomy,
) -> Result<Agreement> {
    let index = |rs: &[AnnotationRecord]| -> Result<BTreeMap<(String, String, u32), Mark>> {
        rs.iter()
            .map(|r| Ok((r.scr_key(), taxonomy.resolve_mark(&r.label)?)))
            .collect()
    };
    let (ma, mb) = (index(a)?, index(b)?);
    let pairs: Vec<(&Mark, &Mark)> = ma
        .iter()
        .filter_map(|(k, x)| mb.get(k).map(|y| (x, y)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::DisjointCoders);
    }
    let n = pairs.len() as f64;
    let p_o = pairs.iter().filter(|(x, y)| x == y).count() as f64 / n;
    let mut count_a: BTreeMap<&Mark, f64> = BTreeMap::new();
    let mut count_b: BTreeMap<&Mark, f64> = BTreeMap::new();
    for (x, y) in &pairs {
        *count_a.entry(*x).or_default() += 1.0;
        *count_b.entry(*y).or_default() += 1.0;
    }
    let p_e: f64 = count_a
        .iter()
        .map(|(m, ca)| ca / n * count_b.get(m).copied().unwrap_or(0.0) / n)
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        if p_o == 1.0 { 1.0 } else { 0.0 }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(Agreement {
        shared: pairs.len(),
        percent_agreement: p_o,
        kappa,
    })
}

/// Five-number summary of T scores (type-7 quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelFrequency {
    pub label: String,
    pub count: usize,
    pub t_scores: Option<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelFrequencies {
    pub labels: Vec<LabelFrequency>,
    pub deleted: usize,
}

/// Per-label counts and T-score summaries, in taxonomy order. Unannotated
/// events count as Unknown; deleted events only in `deleted`.
pub fn label_frequencies(events: &[ScrEvent], taxonomy: &LabelTaxonomy) -> LabelFrequencies {
    let mut by_label: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    let mut deleted = 0;
    for ev in events {
        match ev.mark() {
            Mark::Delete => deleted += 1,
            Mark::Label(id) => {
                let e = by_label.entry(id).or_default();
                e.0 += 1;
                e.1.extend(ev.t_score);
            }
        }
    }
    let mut labels: Vec<LabelFrequency> = taxonomy
        .ids()
        .map(|id| {
            let (count, ts) = by_label.remove(id).unwrap_or_default();
            LabelFrequency { label: id.to_string(), count, t_scores: FiveNumber::of(&ts) }
        })
        .collect();
    // Labels outside the taxonomy still have to be accounted for.
    labels.extend(by_label.into_iter().map(|(id, (count, ts))| LabelFrequency {
        label: id,
        count,
        t_scores: FiveNumber::of(&ts),
    }));
    LabelFrequencies { labels, deleted }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(sid: &str, no: u32, label: &str, coder: &str) -> AnnotationRecord {
        AnnotationRecord {
            participant_id: "0001".into(),
            session_id: sid.into(),
            detected_scr_no: no,
            label: label.into(),
            coder_id: coder.into(),
            created_at_unix: 1_677_282_100 + no as i64,
        }
    }

    fn events(n: u32) -> Vec<ScrEvent> {
        (1..=n)
            .map(|k| ScrEvent::new("0001", "session_4", k, k as f64 * 5.0, k as f64 * 5.0 + 2.0, 0.2 + 0.1 * k as f64))
            .collect()
    }

    #[test]
    fn taxonomy_has_ten_labels_and_resolves_display_names() {
        let tax = LabelTaxonomy::default();
        assert_eq!(tax.labels.len(), 10);
        assert_eq!(tax.resolve_mark("Avatar's action").unwrap(), Mark::Label("AvatarsAction".into()));
        assert_eq!(tax.resolve_mark("Checking the far-side traffic").unwrap(), Mark::Label("CheckingFarSideTraffic".into()));
        assert_eq!(tax.resolve_mark("Delete").unwrap(), Mark::Delete);
        assert!(matches!(tax.resolve_mark("Boredom"), Err(Error::UnknownLabel(_))));
        assert!(!tax.in_models(&Mark::Label(IMMERSION.into())));
        assert!(tax.in_models(&Mark::Label("Crossing".into())));
    }

    #[test]
    fn taxonomy_extends_from_toml() {
        let mut tax = LabelTaxonomy::default();
        tax.labels.push(LabelDef {
            id: "Horn".into(),
            display: "Vehicle horn".into(),
            aliases: vec![],
            definition: String::new(),
            in_models: true,
        });
        let back = LabelTaxonomy::from_toml(&tax.to_toml()).unwrap();
        assert_eq!(back, tax);
        assert_eq!(back.resolve_mark("vehicle horn").unwrap(), Mark::Label("Horn".into()));
        let clash = "[[labels]]\nid = \"Unknown\"\ndisplay = \"Unknown\"\n[[labels]]\nid = \"Other\"\ndisplay = \"unknown\"\n";
        assert!(LabelTaxonomy::from_toml(clash).is_err());
        assert!(LabelTaxonomy::from_toml("[[labels]]\nid = \"Delete\"\ndisplay = \"x\"\n").is_err());
    }

    #[test]
    fn apply_labels_and_deletes() {
        let tax = LabelTaxonomy::default();
        let mut evs = events(4);
        let mut store = AnnotationStore::new();
        store.upsert(rec("session_4", 1, "Avatar's action", "a"));
        store.upsert(rec("session_4", 3, "Delete", "a"));
        let s = apply_annotations(&mut evs, &store, "a", &tax).unwrap();
        assert_eq!(evs[0].annotation, Some(Mark::Label("AvatarsAction".into())));
        assert!(evs[2].is_deleted());
        assert_eq!(evs[1].mark(), Mark::unknown());
        assert_eq!(s, ApplySummary { labelled: 1, deleted: 1, defaulted: 2, skipped: 0 });
        // Idempotent.
        let before = evs.clone();
        apply_annotations(&mut evs, &store, "a", &tax).unwrap();
        assert_eq!(before, evs);
    }

    #[test]
    fn empty_store_defaults_to_unknown() {
        let mut evs = events(3);
        apply_annotations(&mut evs, &AnnotationStore::new(), "a", &LabelTaxonomy::default()).unwrap();
        assert!(evs.iter().all(|e| e.mark() == Mark::unknown()));
    }

    #[test]
    fn dangling_record_is_reported() {
        let mut evs = events(2);
        let mut store = AnnotationStore::new();
        store.upsert(rec("session_4", 9, "Crossing", "a"));
        match apply_annotations(&mut evs, &store, "a", &LabelTaxonomy::default()) {
            Err(Error::DanglingAnnotations(v)) => assert_eq!(v, vec!["0001/session_4/#9 by a".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adjudicator_overrides_coder() {
        let mut evs = events(1);
        let mut store = AnnotationStore::new();
        store.upsert(rec("session_4", 1, "Crossing", "a"));
        store.upsert(rec("session_4", 1, "Accident", ADJUDICATOR));
        apply_annotations(&mut evs, &store, "a", &LabelTaxonomy::default()).unwrap();
        assert_eq!(evs[0].mark(), Mark::Label("Accident".into()));
    }

    #[test]
    fn last_writer_wins_in_place() {
        let mut store = AnnotationStore::new();
        store.upsert(rec("s", 1, "Crossing", "a"));
        store.upsert(rec("s", 2, "Crossing", "a"));
        store.upsert(rec("s", 1, "Accident", "a"));
        assert_eq!(store.len(), 2);
        assert_eq!(store.records()[0].label, "Accident");
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let text = "participant_id,session_id,detected_scr_no,label,coder_id,created_at_unix\n\
                    0001,session_4,2,Avatar's action,b,1677282101\n\
                    0001,session_4,1,\"Checking the far-side traffic\",a,1677282100\n\
                    0001,session_4,3,Delete,a,1677282102\n";
        let store = AnnotationStore::read(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        store.write(&mut out).unwrap();
        let again = AnnotationStore::read(out.as_slice()).unwrap();
        let mut out2 = Vec::new();
        again.write(&mut out2).unwrap();
        assert_eq!(out, out2);
        assert_eq!(again, store);
        // Unquoted input stays unquoted.
        let plain = "participant_id,session_id,detected_scr_no,label,coder_id,created_at_unix\n0001,s,1,Crossing,a,5\n";
        let mut o = Vec::new();
        AnnotationStore::read(plain.as_bytes()).unwrap().write(&mut o).unwrap();
        assert_eq!(String::from_utf8(o).unwrap(), plain);
    }

    #[test]
    fn validate_lists_unknown_labels() {
        let mut store = AnnotationStore::new();
        store.upsert(rec("s", 1, "Crossing", "a"));
        store.upsert(rec("s", 2, "Boredom", "a"));
        let err = store.validate(&LabelTaxonomy::default()).unwrap_err();
        assert!(err.to_string().contains("Boredom"));
    }

    #[test]
    fn kappa_hand_computed() {
        // 10 items, labels X/Y at 50/50 for both coders, 8 agreements.
        let tax = LabelTaxonomy::default();
        let la = ["Crossing", "Crossing", "Crossing", "Crossing", "Crossing", "Accident", "Accident", "Accident", "Accident", "Accident"];
        let lb = ["Crossing", "Crossing", "Crossing", "Crossing", "Accident", "Crossing", "Accident", "Accident", "Accident", "Accident"];
        let a: Vec<_> = la.iter().enumerate().map(|(i, l)| rec("s", i as u32 + 1, l, "a")).collect();
        let b: Vec<_> = lb.iter().enumerate().map(|(i, l)| rec("s", i as u32 + 1, l, "b")).collect();
        let ag = coder_agreement(&a, &b, &tax).unwrap();
        assert!((ag.percent_agreement - 0.8).abs() < 1e-12);
        assert!((ag.kappa - 0.6).abs() < 1e-12);
    }

    #[test]
    fn identical_and_disjoint_coders() {
        let tax = LabelTaxonomy::default();
        let a = vec![rec("s", 1, "Crossing", "a"), rec("s", 2, "Accident", "a")];
        let ag = coder_agreement(&a, &a, &tax).unwrap();
        assert_eq!((ag.percent_agreement, ag.kappa), (1.0, 1.0));
        let single = vec![rec("s", 1, "Crossing", "a")];
        assert_eq!(coder_agreement(&single, &single, &tax).unwrap().kappa, 1.0);
        let b = vec![rec("t", 1, "Crossing", "b")];
        assert!(matches!(coder_agreement(&a, &b, &tax), Err(Error::DisjointCoders)));
    }

    #[test]
    fn all_unknown_coder_agrees_on_unknown_fraction() {
        let tax = LabelTaxonomy::default();
        let five = ["Crossing", "Accident", "TrafficSpeed", "Unknown", "DecisionToCross"];
        let a: Vec<_> = (0..20).map(|i| rec("s", i + 1, five[i as usize % 5], "a")).collect();
        let b: Vec<_> = (0..20).map(|i| rec("s", i + 1, "Unknown", "b")).collect();
        let ag = coder_agreement(&a, &b, &tax).unwrap();
        assert!((ag.percent_agreement - 0.2).abs() < 1e-12);
        assert!(ag.kappa <= ag.percent_agreement);
    }

    #[test]
    fn frequencies_account_for_every_event() {
        let tax = LabelTaxonomy::default();
        let mut evs = events(6);
        for (i, ev) in evs.iter_mut().enumerate() {
            ev.t_score = Some(40.0 + i as f64 * 4.0);
        }
        evs[0].annotation = Some(Mark::Label("Crossing".into()));
        evs[1].annotation = Some(Mark::Label("Crossing".into()));
        evs[2].annotation = Some(Mark::Delete);
        let f = label_frequencies(&evs, &tax);
        assert_eq!(f.deleted, 1);
        assert_eq!(f.labels.iter().map(|l| l.count).sum::<usize>() + f.deleted, 6);
        let crossing = f.labels.iter().find(|l| l.label == "Crossing").unwrap();
        assert_eq!(crossing.count, 2);
        let t = crossing.t_scores.unwrap();
        assert_eq!((t.min, t.median, t.max), (40.0, 42.0, 44.0));
        assert_eq!(f.labels.iter().find(|l| l.label == UNKNOWN).unwrap().count, 3);
    }

    proptest! {
        #[test]
        fn kappa_never_exceeds_agreement(
            la in proptest::collection::vec(0usize..4, 1..40),
            flips in proptest::collection::vec(proptest::option::of(0usize..4), 1..40),
        ) {
            let tax = LabelTaxonomy::default();
            let names = ["Crossing", "Accident", "Unknown", "TrafficSpeed"];
            let n = la.len().min(flips.len());
            let a: Vec<_> = (0..n).map(|i| rec("s", i as u32 + 1, names[la[i]], "a")).collect();
            let b: Vec<_> = (0..n).map(|i| rec("s", i as u32 + 1, names[flips[i].unwrap_or(la[i])], "b")).collect();
            let ag = coder_agreement(&a, &b, &tax).unwrap();
            prop_assert!(ag.kappa <= ag.percent_agreement + 1e-12);
            let identical = (0..n).all(|i| flips[i].is_none_or(|f| f == la[i]));
            prop_assert_eq!(ag.kappa == 1.0, identical);
        }
    }
}
