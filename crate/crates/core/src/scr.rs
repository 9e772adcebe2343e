//! Skin conductance response detection and per-participant standardization.
//!
//! Responses are read off the nonnegative driver of a [`Decomposition`]:
//! every driver excursion is one candidate, and it becomes an event when the
//! phasic rise it produces reaches the detection threshold. Amplitudes are
//! then standardized per participant into z and T scores, pooling every
//! session of that participant.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{LabelTaxonomy, Mark};
use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::segmentation::Segment;
use crate::util::{csv_reader, csv_writer, expect_header, mean, parse_f64, std_dev};

/// Detection threshold on phasic amplitude, µS.
pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Smallest rise (µS/s) of a driver peak above the trough that separates it
/// from a neighbouring peak for the two to count as separate responses.
pub const MIN_PROMINENCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AmplitudeClass {
    /// 0.1 ≤ SCR < 0.4
    Small,
    /// 0.4 ≤ SCR < 0.7
    Medium,
    /// 0.7 ≤ SCR < 1.0
    Large,
    /// SCR ≥ 1.0
    VeryLarge,
}

impl AmplitudeClass {
    pub const ALL: [AmplitudeClass; 4] = [
        AmplitudeClass::Small,
        AmplitudeClass::Medium,
        AmplitudeClass::Large,
        AmplitudeClass::VeryLarge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AmplitudeClass::Small => "0.1 ≤ SCR < 0.4",
            AmplitudeClass::Medium => "0.4 ≤ SCR < 0.7",
            AmplitudeClass::Large => "0.7 ≤ SCR < 1.0",
            AmplitudeClass::VeryLarge => "SCR ≥ 1.0",
        }
    }

    fn ascii_key(self) -> &'static str {
        match self {
            AmplitudeClass::Small => "0.1<=scr<0.4",
            AmplitudeClass::Medium => "0.4<=scr<0.7",
            AmplitudeClass::Large => "0.7<=scr<1.0",
            AmplitudeClass::VeryLarge => "scr>=1.0",
        }
    }
}

impl fmt::Display for AmplitudeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AmplitudeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .replace('≤', "<=")
            .replace('≥', ">=")
            .replace("\\leq", "<=")
            .replace("\\geq", ">=")
            .replace("\\ge", ">=")
            .replace("\\textless", "<")
            .replace("\\textgreater", ">")
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '$')
            .collect::<String>()
            .to_ascii_lowercase();
        AmplitudeClass::ALL
            .into_iter()
            .find(|c| c.ascii_key() == key)
            .ok_or_else(|| Error::format("amplitude class", format!("unrecognized class {s:?}")))
    }
}

/// Half-open, left-closed amplitude bins. `None` below the detection floor.
pub fn classify_amplitude(amplitude: f64) -> Option<AmplitudeClass> {
    match amplitude {
        a if a >= 1.0 => Some(AmplitudeClass::VeryLarge),
        a if a >= 0.7 => Some(AmplitudeClass::Large),
        a if a >= 0.4 => Some(AmplitudeClass::Medium),
        a if a >= DEFAULT_THRESHOLD => Some(AmplitudeClass::Small),
        _ => None,
    }
}

/// One detected skin conductance response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrEvent {
    pub participant_id: String,
    pub session_id: String,
    /// 1-based ordinal within the session, in onset order.
    pub detected_scr_no: u32,
    pub session_start_unix: f64,
    pub onset_unix: f64,
    pub peak_unix: f64,
    /// Phasic peak minus phasic value at onset, µS.
    pub amplitude: f64,
    pub z_score: Option<f64>,
    pub t_score: Option<f64>,
    /// Segment at the matched participant frame; `None` when out of course
    /// or unlocatable.
    pub position: Option<Segment>,
    pub position_unix: Option<f64>,
    pub unlocatable: bool,
    pub annotation: Option<Mark>,
}

impl ScrEvent {
    pub fn new(
        participant_id: &str,
        session_id: &str,
        detected_scr_no: u32,
        onset_unix: f64,
        peak_unix: f64,
        amplitude: f64,
    ) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            session_id: session_id.to_string(),
            detected_scr_no,
            session_start_unix: onset_unix,
            onset_unix,
            peak_unix,
            amplitude,
            z_score: None,
            t_score: None,
            position: None,
            position_unix: None,
            unlocatable: false,
            annotation: None,
        }
    }

    pub fn amplitude_class(&self) -> Option<AmplitudeClass> {
        classify_amplitude(self.amplitude)
    }

    /// Label in effect; unannotated events count as `Unknown`.
    pub fn mark(&self) -> Mark {
        self.annotation.clone().unwrap_or_else(Mark::unknown)
    }

    pub fn is_deleted(&self) -> bool {
        matches!(self.annotation, Some(Mark::Delete))
    }

    pub fn to_row(&self, taxonomy: &LabelTaxonomy) -> ScrRow {
        let unix = self.position_unix.unwrap_or(self.onset_unix);
        ScrRow {
            participant_id: self.participant_id.clone(),
            session_id: self.session_id.clone(),
            unix,
            elapsed_time: unix - self.session_start_unix,
            position: self.position,
            scr_amplitude: self.amplitude,
            scr_onset_unix: self.onset_unix,
            scr_t: self.t_score,
            position_f: self.position.map(Segment::merged),
            amp_class: self.amplitude_class().map(|c| c.label().to_string()).unwrap_or_default(),
            detected_scr_no: self.detected_scr_no,
            annotation: self
                .annotation
                .as_ref()
                .map(|m| taxonomy.display(m))
                .unwrap_or_default(),
        }
    }
}

/// Tuning for [`detect_scrs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub threshold: f64,
    /// Driver level (µS/s) separating excursions from the resting floor.
    pub driver_floor: f64,
    /// See [`MIN_PROMINENCE`].
    pub min_prominence: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            driver_floor: 1e-3,
            min_prominence: MIN_PROMINENCE,
        }
    }
}

/// Splits the driver into excursions `(start, end)` (sample indices): runs
/// above `p.driver_floor`, cut at every trough that both neighbouring peaks
/// clear by at least `p.min_prominence`.
fn driver_excursions(driver: &[f64], p: &DetectionParams) -> Vec<(usize, usize)> {
    let floor = p.driver_floor;
    let n = driver.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if driver[i] <= floor {
            i += 1;
            continue;
        }
        let start = i.saturating_sub(1);
        let mut end = i;
        while end < n && driver[end] > floor {
            end += 1;
        }
        let end = end.min(n - 1);
        split_run(driver, start, end, p.min_prominence, &mut out);
        i = end + 1;
    }
    out
}

fn split_run(driver: &[f64], start: usize, end: usize, min_prominence: f64, out: &mut Vec<(usize, usize)>) {
    let mut cuts: Vec<usize> = vec![start];
    cuts.extend((start + 1..end).filter(|&m| driver[m] < driver[m - 1] && driver[m] <= driver[m + 1]));
    cuts.push(end);
    let peak = |a: usize, b: usize| driver[a..=b].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut peaks: Vec<f64> = cuts.windows(2).map(|w| peak(w[0], w[1])).collect();
    // Dissolve the least prominent trough until every remaining one is clear.
    loop {
        let weakest = (1..cuts.len() - 1)
            .map(|k| (k, peaks[k - 1].min(peaks[k]) - driver[cuts[k]]))
            .filter(|&(_, rise)| rise < min_prominence)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((k, _)) = weakest else { break };
        cuts.remove(k);
        let merged = peaks[k - 1].max(peaks[k]);
        peaks.splice(k - 1..=k, [merged]);
    }
    out.extend(cuts.windows(2).map(|w| (w[0], w[1])));
}

/// Detects responses whose phasic rise reaches `params.threshold`.
///
/// Within each excursion the response starts at the last driver minimum
/// before the excursion's driver peak. Its share of the driver is the part
/// above the straight line joining the driver at that onset and at the
/// excursion end, so a slow pedestal left by tonic drift is not counted.
/// That share, convolved with the impulse response on its own, is the
/// event's phasic component: the amplitude is its rise from the onset to
/// its maximum, which overlapping neighbours cannot inflate.
pub fn detect_scrs(decomp: &Decomposition, params: &DetectionParams) -> Vec<ScrEvent> {
    let driver = &decomp.driver;
    let excursions = driver_excursions(driver, params);
    let dt = decomp.dt();
    // A partial response peaks at most one kernel rise time after its last
    // driver sample.
    let lag = (decomp.impulse.peak_time() / dt).ceil() as usize + 2;
    let n = driver.len();
    let mut events = Vec::new();
    for &(start, end) in &excursions {
        let top = (start..=end).fold(start, |best, i| if driver[i] > driver[best] { i } else { best });
        let mut onset = top;
        while onset > start && driver[onset - 1] < driver[onset] {
            onset -= 1;
        }
        if top == onset {
            continue;
        }
        let stop = (end + lag).min(n - 1);
        let (d0, d1) = (driver[onset], driver[end]);
        let span = (end - onset) as f64;
        let share: Vec<f64> = (onset..=stop)
            .map(|i| {
                if i > end {
                    return 0.0;
                }
                let pedestal = d0 + (d1 - d0) * (i - onset) as f64 / span;
                (driver[i] - pedestal).max(0.0)
            })
            .collect();
        let response = decomp.impulse.respond(&share, dt);
        let (peak, amplitude) = response
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        if peak == 0 || amplitude < params.threshold {
            continue;
        }
        let mut ev = ScrEvent::new(
            &decomp.participant_id,
            &decomp.session_id,
            events.len() as u32 + 1,
            decomp.t[onset],
            decomp.t[onset + peak],
            amplitude,
        );
        ev.session_start_unix = decomp.t[0];
        events.push(ev);
    }
    events
}

/// Divisor used for the per-participant standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdDivisor {
    /// Divide by n, so standardized scores have unit standard deviation
    /// under the same convention.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

impl SdDivisor {
    fn ddof(self) -> usize {
        match self {
            SdDivisor::Population => 0,
            SdDivisor::Sample => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScrStats {
    pub participant_id: String,
    pub mean_amplitude: f64,
    pub sd_amplitude: f64,
    pub n_scrs: usize,
}

impl ParticipantScrStats {
    pub fn from_amplitudes(participant_id: &str, amps: &[f64], sd: SdDivisor) -> Self {
        Self {
            participant_id: participant_id.to_string(),
            mean_amplitude: mean(amps),
            sd_amplitude: std_dev(amps, sd.ddof()),
            n_scrs: amps.len(),
        }
    }

    pub fn is_standardizable(&self) -> bool {
        self.n_scrs >= 2 && self.sd_amplitude.is_finite() && self.sd_amplitude > 0.0
    }

    pub fn z(&self, amplitude: f64) -> f64 {
        (amplitude - self.mean_amplitude) / self.sd_amplitude
    }
}

pub fn t_from_z(z: f64) -> f64 {
    50.0 + 10.0 * z
}

#[derive(Debug, Clone, Default)]
pub struct Standardization {
    pub stats: Vec<ParticipantScrStats>,
    /// Participants with fewer than two usable events or zero spread.
    pub unstandardizable: Vec<String>,
}

/// Attaches z and T scores to every non-deleted event, pooling all sessions
/// of each participant. Deleted events and events of unstandardizable
/// participants get `None`.
pub fn standardize(events: &mut [ScrEvent], sd: SdDivisor) -> Standardization {
    let mut by_participant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ev in events.iter().filter(|e| !e.is_deleted()) {
        by_participant
            .entry(ev.participant_id.clone())
            .or_default()
            .push(ev.amplitude);
    }
    let mut out = Standardization::default();
    let mut lookup = BTreeMap::new();
    for (pid, amps) in &by_participant {
        let stats = ParticipantScrStats::from_amplitudes(pid, amps, sd);
        if !stats.is_standardizable() {
            out.unstandardizable.push(pid.clone());
        }
        lookup.insert(pid.clone(), stats.clone());
        out.stats.push(stats);
    }
    for ev in events.iter_mut() {
        let stats = lookup.get(&ev.participant_id).filter(|s| s.is_standardizable());
        match stats {
            Some(s) if !ev.is_deleted() => {
                let z = s.z(ev.amplitude);
                ev.z_score = Some(z);
                ev.t_score = Some(t_from_z(z));
            }
            _ => {
                ev.z_score = None;
                ev.t_score = None;
            }
        }
    }
    out
}

/// One row of the SCR table (the per-session labelling sheet layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ScrRow {
    pub participant_id: String,
    pub session_id: String,
    /// Participant frame matched to the onset.
    pub unix: f64,
    pub elapsed_time: f64,
    pub position: Option<Segment>,
    pub scr_amplitude: f64,
    pub scr_onset_unix: f64,
    pub scr_t: Option<f64>,
    pub position_f: Option<Segment>,
    /// Class as written in the table; compare with [`ScrRow::computed_class`].
    pub amp_class: String,
    pub detected_scr_no: u32,
    /// Label text as written; empty when unlabelled.
    pub annotation: String,
}

pub const SCR_TABLE_HEADER: [&str; 12] = [
    "participant_id",
    "session_id",
    "unix",
    "elapsed_time",
    "position",
    "scr_amplitude",
    "scr_onset_unix",
    "scr_t",
    "position_f",
    "amp_class",
    "detected_scr_no",
    "annotation",
];

impl ScrRow {
    pub fn computed_class(&self) -> Option<AmplitudeClass> {
        classify_amplitude(self.scr_amplitude)
    }

    pub fn stated_class(&self) -> Option<AmplitudeClass> {
        self.amp_class.parse().ok()
    }

    pub fn mark(&self, taxonomy: &LabelTaxonomy) -> Result<Option<Mark>> {
        if self.annotation.trim().is_empty() {
            Ok(None)
        } else {
            taxonomy.resolve_mark(&self.annotation).map(Some)
        }
    }

    fn fields(&self) -> [String; 12] {
        let seg = |s: Option<Segment>| s.map(|s| s.display_name().to_string()).unwrap_or_default();
        [
            self.participant_id.clone(),
            self.session_id.clone(),
            self.unix.to_string(),
            self.elapsed_time.to_string(),
            seg(self.position),
            self.scr_amplitude.to_string(),
            self.scr_onset_unix.to_string(),
            self.scr_t.map(|t| t.to_string()).unwrap_or_default(),
            seg(self.position_f),
            self.amp_class.clone(),
            self.detected_scr_no.to_string(),
            self.annotation.clone(),
        ]
    }

    fn parse(rec: &csv::StringRecord, ctx: &str) -> Result<Self> {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 12 {
            return Err(Error::format(ctx, format!("line {line}: expected 12 fields, got {}", rec.len())));
        }
        let seg = |s: &str| -> Result<Option<Segment>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some)
            }
        };
        let opt_f64 = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s, ctx, line).map(Some)
            }
        };
        Ok(Self {
            participant_id: rec[0].to_string(),
            session_id: rec[1].to_string(),
            unix: parse_f64(&rec[2], ctx, line)?,
            elapsed_time: parse_f64(&rec[3], ctx, line)?,
            position: seg(&rec[4])?,
            scr_amplitude: parse_f64(&rec[5], ctx, line)?,
            scr_onset_unix: parse_f64(&rec[6], ctx, line)?,
            scr_t: opt_f64(&rec[7])?,
            position_f: seg(&rec[8])?,
            amp_class: rec[9].to_string(),
            detected_scr_no: rec[10]
                .parse()
                .map_err(|_| Error::format(ctx, format!("line {line}: bad detected_scr_no {:?}", &rec[10])))?,
            annotation: rec[11].to_string(),
        })
    }
}

pub fn write_scr_table<W: Write>(w: W, rows: &[ScrRow]) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(SCR_TABLE_HEADER)?;
    for r in rows {
        wtr.write_record(r.fields())?;
    }
    wtr.flush().map_err(|e| Error::io("<scr writer>", e))?;
    Ok(())
}

pub fn read_scr_table<R: Read>(rdr: R) -> Result<Vec<ScrRow>> {
    let mut rdr = csv_reader(rdr);
    expect_header(rdr.headers()?, &SCR_TABLE_HEADER, "SCR table")?;
    rdr.records()
        .map(|rec| ScrRow::parse(&rec?, "SCR table"))
        .collect()
}

/// Ground-truth SCR row: the SCR table layout plus the injected amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRow {
    pub row: ScrRow,
    pub true_amplitude: f64,
}

pub fn write_ground_truth<W: Write>(w: W, rows: &[GroundTruthRow]) -> Result<()> {
    let mut wtr = csv_writer(w);
    let mut header: Vec<&str> = SCR_TABLE_HEADER.to_vec();
    header.push("true_amplitude");
    wtr.write_record(&header)?;
    for r in rows {
        let mut fields = r.row.fields().to_vec();
        fields.push(r.true_amplitude.to_string());
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<ground truth writer>", e))?;
    Ok(())
}

pub fn read_ground_truth<R: Read>(rdr: R) -> Result<Vec<GroundTruthRow>> {
    let ctx = "ground-truth table";
    let mut rdr = csv_reader(rdr);
    let headers = rdr.headers()?.clone();
    expect_header(&headers, &SCR_TABLE_HEADER, ctx)?;
    if headers.get(12).map(|h| h.eq_ignore_ascii_case("true_amplitude")) != Some(true) {
        return Err(Error::format(ctx, "missing true_amplitude column"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok(GroundTruthRow {
                row: ScrRow::parse(&rec, ctx)?,
                true_amplitude: parse_f64(rec.get(12).unwrap_or(""), ctx, line)?,
            })
        })
        .collect()
}

/// Outcome of checking a labelling sheet against the amplitude bins.
#[derive(Debug, Clone, PartialEq)]
pub struct TableAudit {
    /// Recomputed class per row, in input order.
    pub classes: Vec<Option<AmplitudeClass>>,
    /// `(detected_scr_no, stated, computed)` where the sheet disagrees.
    pub class_mismatches: Vec<(u32, String, Option<AmplitudeClass>)>,
    pub deleted: usize,
    /// Per-participant amplitude statistics over non-deleted rows.
    pub stats: Vec<ParticipantScrStats>,
}

/// Re-derives amplitude classes and per-participant statistics from an SCR
/// table, dropping rows marked `Delete`.
pub fn audit_scr_table(rows: &[ScrRow], taxonomy: &LabelTaxonomy, sd: SdDivisor) -> Result<TableAudit> {
    let mut classes = Vec::with_capacity(rows.len());
    let mut mismatches = Vec::new();
    let mut deleted = 0;
    let mut amps: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let computed = r.computed_class();
        classes.push(computed);
        if r.stated_class() != computed {
            mismatches.push((r.detected_scr_no, r.amp_class.clone(), computed));
        }
        if matches!(r.mark(taxonomy)?, Some(Mark::Delete)) {
            deleted += 1;
        } else {
            amps.entry(&r.participant_id).or_default().push(r.scr_amplitude);
        }
    }
    Ok(TableAudit {
        classes,
        class_mismatches: mismatches,
        deleted,
        stats: amps
            .into_iter()
            .map(|(pid, a)| ParticipantScrStats::from_amplitudes(pid, &a, sd))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn class_boundaries() {
        assert_eq!(classify_amplitude(0.31), Some(AmplitudeClass::Small));
        assert_eq!(classify_amplitude(0.4), Some(AmplitudeClass::Medium));
        assert_eq!(classify_amplitude(0.50), Some(AmplitudeClass::Medium));
        assert_eq!(classify_amplitude(0.7), Some(AmplitudeClass::Large));
        assert_eq!(classify_amplitude(1.00), Some(AmplitudeClass::VeryLarge));
        assert_eq!(classify_amplitude(0.1), Some(AmplitudeClass::Small));
        assert_eq!(classify_amplitude(0.099), None);
    }

    #[test]
    fn class_labels_parse_in_several_spellings() {
        for c in AmplitudeClass::ALL {
            assert_eq!(c.label().parse::<AmplitudeClass>().unwrap(), c);
        }
        assert_eq!("0.4 <= SCR < 0.7".parse::<AmplitudeClass>().unwrap(), AmplitudeClass::Medium);
        assert_eq!("SCR $\\ge$ 1.0".parse::<AmplitudeClass>().unwrap(), AmplitudeClass::VeryLarge);
        assert!("big".parse::<AmplitudeClass>().is_err());
    }

    fn ev(pid: &str, amp: f64) -> ScrEvent {
        ScrEvent::new(pid, "s", 1, 0.0, 1.0, amp)
    }

    #[test]
    fn two_amplitudes_standardize_to_plus_minus_one() {
        let mut evs = vec![ev("a", 1.0), ev("a", 3.0)];
        let st = standardize(&mut evs, SdDivisor::Population);
        assert!(st.unstandardizable.is_empty());
        assert!((evs[0].z_score.unwrap() + 1.0).abs() < 1e-12);
        assert!((evs[1].z_score.unwrap() - 1.0).abs() < 1e-12);
        assert!((evs[0].t_score.unwrap() - 40.0).abs() < 1e-12);
        assert!((evs[1].t_score.unwrap() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn amplitude_at_mean_is_t50() {
        let mut evs = vec![ev("a", 1.0), ev("a", 2.0), ev("a", 3.0)];
        standardize(&mut evs, SdDivisor::Population);
        assert!(evs[1].z_score.unwrap().abs() < 1e-12);
        assert!((evs[1].t_score.unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn single_event_is_unstandardizable() {
        let mut evs = vec![ev("a", 1.0), ev("b", 0.5), ev("b", 0.7)];
        let st = standardize(&mut evs, SdDivisor::Population);
        assert_eq!(st.unstandardizable, vec!["a".to_string()]);
        assert!(evs[0].t_score.is_none());
        assert!(evs[1].t_score.is_some());
    }

    #[test]
    fn deleted_events_excluded_from_stats() {
        let mut evs = vec![ev("a", 1.0), ev("a", 3.0), ev("a", 100.0)];
        evs[2].annotation = Some(Mark::Delete);
        let st = standardize(&mut evs, SdDivisor::Population);
        assert_eq!(st.stats[0].n_scrs, 2);
        assert!((st.stats[0].mean_amplitude - 2.0).abs() < 1e-12);
        assert!(evs[2].t_score.is_none());
    }

    #[test]
    fn sample_divisor_is_configurable() {
        let mut evs = vec![ev("a", 1.0), ev("a", 3.0)];
        standardize(&mut evs, SdDivisor::Sample);
        assert!((evs[1].z_score.unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn excursions_split_on_deep_trough() {
        let p = DetectionParams::default();
        let d = [0.0, 1.0, 2.0, 1.0, 0.1, 0.5, 1.5, 0.5, 0.0];
        assert_eq!(driver_excursions(&d, &p), vec![(0, 4), (4, 8)]);
        // Small responses on a raised pedestal still separate.
        let d = [0.0, 0.03, 0.06, 0.03, 0.02, 0.05, 0.03, 0.0];
        assert_eq!(driver_excursions(&d, &p), vec![(0, 4), (4, 7)]);
        // A ripple below the prominence floor stays in its excursion.
        let d = [0.0, 1.0, 2.0, 1.0, 0.5, 0.502, 0.4, 0.0];
        assert_eq!(driver_excursions(&d, &p), vec![(0, 7)]);
    }

    proptest! {
        #[test]
        fn standardized_scores_have_unit_moments(amps in proptest::collection::vec(0.1f64..5.0, 2..40)) {
            let mut evs: Vec<ScrEvent> = amps.iter().map(|&a| ev("p", a)).collect();
            let st = standardize(&mut evs, SdDivisor::Population);
            if st.unstandardizable.is_empty() {
                let ts: Vec<f64> = evs.iter().map(|e| e.t_score.unwrap()).collect();
                prop_assert!((mean(&ts) - 50.0).abs() < 1e-9);
                prop_assert!((std_dev(&ts, 0) - 10.0).abs() < 1e-9);
            }
        }

        #[test]
        fn scores_invariant_to_positive_affine_maps(
            amps in proptest::collection::vec(0.1f64..5.0, 3..30),
            c in 0.01f64..100.0,
            d in -10.0f64..10.0,
        ) {
            let mut a: Vec<ScrEvent> = amps.iter().map(|&x| ev("p", x)).collect();
            let mut b: Vec<ScrEvent> = amps.iter().map(|&x| ev("p", c * x + d)).collect();
            let sa = standardize(&mut a, SdDivisor::Population);
            standardize(&mut b, SdDivisor::Population);
            if sa.unstandardizable.is_empty() {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x.t_score.unwrap() - y.t_score.unwrap()).abs() < 1e-9);
                }
            }
        }
    }
}
