//! Crossing-course geometry and the mapping from participant positions to
//! analysis segments.
//!
//! Course frame: the L-shaped approach is collapsed onto route distance, so
//! `y` grows from the route start across the road and `x` runs along the
//! road. Regions are axis-aligned rectangles listed in route order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scr::ScrEvent;
use crate::util::{csv_reader, csv_writer, expect_header, parse_f64};

pub const PARTICIPANT_ID: &str = "participant";
/// Events further than this from any participant frame cannot be located.
pub const MAX_LOCATE_GAP_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    Sidewalk,
    WaitingToCross,
    CrossingLane1,
    Median,
    CrossingLane2,
    Finished,
}

impl Segment {
    pub const ALL: [Segment; 6] = [
        Segment::Sidewalk,
        Segment::WaitingToCross,
        Segment::CrossingLane1,
        Segment::Median,
        Segment::CrossingLane2,
        Segment::Finished,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Segment::Sidewalk => "Sidewalk",
            Segment::WaitingToCross => "Waiting to cross",
            Segment::CrossingLane1 => "Crossing lane 1",
            Segment::Median => "Median",
            Segment::CrossingLane2 => "Crossing lane 2",
            Segment::Finished => "Finished",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Segment::Sidewalk => "Sidewalk",
            Segment::WaitingToCross => "WaitingToCross",
            Segment::CrossingLane1 => "CrossingLane1",
            Segment::Median => "Median",
            Segment::CrossingLane2 => "CrossingLane2",
            Segment::Finished => "Finished",
        }
    }

    /// Segment used by the four-segment models: the median strip counts as
    /// part of the first lane.
    pub fn merged(self) -> Segment {
        match self {
            Segment::Median => Segment::CrossingLane1,
            s => s,
        }
    }

    pub fn is_crossing(self) -> bool {
        matches!(
            self,
            Segment::CrossingLane1 | Segment::Median | Segment::CrossingLane2
        )
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Segment::ALL
            .into_iter()
            .find(|seg| seg.id().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::format("segment", format!("unknown segment {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn interiors_overlap(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub segment: Segment,
    #[serde(flatten)]
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingGeometry {
    pub name: String,
    pub lane_width: f64,
    #[serde(default)]
    pub median_width: f64,
    pub crossing_length: f64,
    pub regions: Vec<Region>,
}

impl CrossingGeometry {
    /// Two 3.0 m lanes, no refuge.
    pub fn no_median() -> Self {
        Self::strip_course("no-median", &[
            (Segment::Sidewalk, 4.0),
            (Segment::WaitingToCross, 0.6),
            (Segment::CrossingLane1, 3.0),
            (Segment::CrossingLane2, 3.0),
            (Segment::Finished, 4.0),
        ], 3.0, 0.0)
    }

    /// Two 2.5 m lanes around a 1.0 m median.
    pub fn with_median() -> Self {
        Self::strip_course("median", &[
            (Segment::Sidewalk, 4.0),
            (Segment::WaitingToCross, 0.6),
            (Segment::CrossingLane1, 2.5),
            (Segment::Median, 1.0),
            (Segment::CrossingLane2, 2.5),
            (Segment::Finished, 4.0),
        ], 2.5, 1.0)
    }

    pub fn preset(median: bool) -> Self {
        if median {
            Self::with_median()
        } else {
            Self::no_median()
        }
    }

    fn strip_course(name: &str, strips: &[(Segment, f64)], lane_width: f64, median_width: f64) -> Self {
        let mut y = 0.0;
        let regions = strips
            .iter()
            .map(|&(segment, depth)| {
                let rect = Rect {
                    x_min: -2.0,
                    x_max: 2.0,
                    y_min: y,
                    y_max: y + depth,
                };
                y += depth;
                Region { segment, rect }
            })
            .collect();
        Self {
            name: name.to_string(),
            lane_width,
            median_width,
            crossing_length: 2.0 * lane_width + median_width,
            regions,
        }
    }

    pub fn has_median(&self) -> bool {
        self.regions.iter().any(|r| r.segment == Segment::Median)
    }

    pub fn region(&self, segment: Segment) -> Option<&Rect> {
        self.regions
            .iter()
            .find(|r| r.segment == segment)
            .map(|r| &r.rect)
    }

    pub fn bounds(&self) -> Rect {
        let mut b = Rect {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for r in &self.regions {
            b.x_min = b.x_min.min(r.rect.x_min);
            b.x_max = b.x_max.max(r.rect.x_max);
            b.y_min = b.y_min.min(r.rect.y_min);
            b.y_max = b.y_max.max(r.rect.y_max);
        }
        b
    }

    /// Route distance where the roadway begins.
    pub fn curb_y(&self) -> f64 {
        self.region(Segment::CrossingLane1).map_or(f64::NAN, |r| r.y_min)
    }

    /// Route distance of the far curb.
    pub fn far_curb_y(&self) -> f64 {
        self.region(Segment::CrossingLane2).map_or(f64::NAN, |r| r.y_max)
    }

    /// Lateral band `(y_min, y_max)` of lane 1 or 2.
    pub fn lane_band(&self, lane: u8) -> (f64, f64) {
        let seg = if lane == 1 {
            Segment::CrossingLane1
        } else {
            Segment::CrossingLane2
        };
        self.region(seg).map_or((f64::NAN, f64::NAN), |r| (r.y_min, r.y_max))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Geometry(format!("{}: {m}", self.name)));
        if self.regions.is_empty() {
            return err("no regions".into());
        }
        for r in &self.regions {
            let q = &r.rect;
            if !(q.x_min < q.x_max && q.y_min < q.y_max) {
                return err(format!("degenerate rectangle for {}", r.segment));
            }
        }
        for w in self.regions.windows(2) {
            if w[1].segment <= w[0].segment {
                return err("regions must be listed once each, in route order".into());
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                if a.rect.interiors_overlap(&b.rect) {
                    return err(format!("{} overlaps {}", a.segment, b.segment));
                }
            }
        }
        let total: f64 = self.regions.iter().map(|r| r.rect.area()).sum();
        let bbox = self.bounds().area();
        if (total - bbox).abs() > 1e-9 * bbox.max(1.0) {
            return err(format!("regions cover {total} m² of a {bbox} m² course"));
        }
        for seg in [
            Segment::Sidewalk,
            Segment::WaitingToCross,
            Segment::CrossingLane1,
            Segment::CrossingLane2,
            Segment::Finished,
        ] {
            if self.region(seg).is_none() {
                return err(format!("missing {seg} region"));
            }
        }
        let depth = |s: Segment| self.region(s).map_or(0.0, |r| r.y_max - r.y_min);
        for lane in [Segment::CrossingLane1, Segment::CrossingLane2] {
            if (depth(lane) - self.lane_width).abs() > 1e-9 {
                return err(format!("{lane} is {} m, expected {} m", depth(lane), self.lane_width));
            }
        }
        if (depth(Segment::Median) - self.median_width).abs() > 1e-9 {
            return err(format!("median is {} m, expected {} m", depth(Segment::Median), self.median_width));
        }
        let crossing = self.far_curb_y() - self.curb_y();
        let parts = 2.0 * self.lane_width + self.median_width;
        if (crossing - self.crossing_length).abs() > 1e-9 || (parts - self.crossing_length).abs() > 1e-9 {
            return err(format!(
                "crossing spans {crossing} m (lanes + median = {parts} m), expected {} m",
                self.crossing_length
            ));
        }
        Ok(())
    }

    /// Segment containing `(x, y)`, or `None` when the point is outside the
    /// course. Points on a shared boundary go to the segment further along
    /// the route.
    pub fn segment_of(&self, x: f64, y: f64) -> Option<Segment> {
        if !self.bounds().contains(x, y) {
            return None;
        }
        self.regions
            .iter()
            .rev()
            .find(|r| r.rect.contains(x, y))
            .map(|r| r.segment)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let geom: Self = toml::from_str(text).map_err(|e| Error::Geometry(e.to_string()))?;
        geom.validate()?;
        Ok(geom)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("geometry serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Participant,
    Vehicle,
    Avatar,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Participant => "participant",
            EntityKind::Vehicle => "vehicle",
            EntityKind::Avatar => "avatar",
        }
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "participant" => Ok(EntityKind::Participant),
            "vehicle" => Ok(EntityKind::Vehicle),
            "avatar" => Ok(EntityKind::Avatar),
            _ => Err(Error::format("trajectory", format!("unknown entity kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub unix: f64,
    pub entity_id: String,
    pub kind: EntityKind,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Positions of the participant and every simulated object, sampled at 10 Hz.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub session_id: String,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let first = self.samples.first()?.unix;
        let (lo, hi) = self
            .samples
            .iter()
            .fold((first, first), |(lo, hi), s| (lo.min(s.unix), hi.max(s.unix)));
        Some((lo, hi))
    }

    pub fn crop(&self, start: f64, end: f64) -> Trajectory {
        Trajectory {
            session_id: self.session_id.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| s.unix >= start && s.unix <= end)
                .cloned()
                .collect(),
        }
    }

    /// Distinct frame timestamps in ascending order.
    pub fn frame_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.samples.iter().map(|s| s.unix).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }

    /// `(unix, x, y)` of the participant, ascending in time.
    pub fn participant_track(&self) -> Vec<(f64, f64, f64)> {
        let mut track: Vec<(f64, f64, f64)> = self
            .samples
            .iter()
            .filter(|s| s.kind == EntityKind::Participant)
            .map(|s| (s.unix, s.x, s.y))
            .collect();
        track.sort_by(|a, b| a.0.total_cmp(&b.0));
        track
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.frame_times();
        let track = self.participant_track();
        if track.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::format("trajectory", "participant timestamps not strictly increasing"));
        }
        if track.len() != frames.len() {
            return Err(Error::format(
                "trajectory",
                format!("participant present in {} of {} frames", track.len(), frames.len()),
            ));
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(rdr: R, session_id: &str) -> Result<Self> {
        let ctx = "trajectory file";
        let mut rdr = csv_reader(rdr);
        expect_header(rdr.headers()?, &TRAJECTORY_HEADER, ctx)?;
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() < 6 {
                return Err(Error::format(ctx, format!("line {line}: expected 6 fields")));
            }
            samples.push(TrajectorySample {
                unix: parse_f64(&rec[0], ctx, line)?,
                entity_id: rec[1].to_string(),
                kind: rec[2].parse()?,
                x: parse_f64(&rec[3], ctx, line)?,
                y: parse_f64(&rec[4], ctx, line)?,
                heading: parse_f64(&rec[5], ctx, line)?,
            });
        }
        Ok(Self {
            session_id: session_id.to_string(),
            samples,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w);
        wtr.write_record(TRAJECTORY_HEADER)?;
        for s in &self.samples {
            wtr.write_record([
                s.unix.to_string(),
                s.entity_id.clone(),
                s.kind.as_str().to_string(),
                s.x.to_string(),
                s.y.to_string(),
                s.heading.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<trajectory writer>", e))?;
        Ok(())
    }
}

const TRAJECTORY_HEADER: [&str; 6] = ["unix", "entity_id", "entity_kind", "x", "y", "heading"];

/// Labels each event with the segment at the participant frame nearest to its
/// onset. Returns the number of events that could not be located.
pub fn attach_segments(events: &mut [ScrEvent], traj: &Trajectory, geom: &CrossingGeometry) -> usize {
    let track = traj.participant_track();
    let mut unlocatable = 0;
    for ev in events.iter_mut() {
        let idx = track.partition_point(|p| p.0 < ev.onset_unix);
        let nearest = [idx.checked_sub(1), (idx < track.len()).then_some(idx)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (track[a].0 - ev.onset_unix)
                    .abs()
                    .total_cmp(&(track[b].0 - ev.onset_unix).abs())
            });
        match nearest {
            Some(i) if (track[i].0 - ev.onset_unix).abs() <= MAX_LOCATE_GAP_S => {
                let (unix, x, y) = track[i];
                ev.position_unix = Some(unix);
                ev.position = geom.segment_of(x, y);
                ev.unlocatable = false;
            }
            _ => {
                ev.position_unix = None;
                ev.position = None;
                ev.unlocatable = true;
                unlocatable += 1;
            }
        }
    }
    unlocatable
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_satisfy_width_invariants() {
        let nm = CrossingGeometry::no_median();
        nm.validate().unwrap();
        assert_eq!(nm.lane_width, 3.0);
        assert!(!nm.has_median());
        assert!((nm.far_curb_y() - nm.curb_y() - 6.0).abs() < 1e-12);

        let m = CrossingGeometry::with_median();
        m.validate().unwrap();
        assert_eq!(m.lane_width, 2.5);
        assert_eq!(m.median_width, 1.0);
        assert!((m.far_curb_y() - m.curb_y() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mid_lane_point() {
        let g = CrossingGeometry::no_median();
        let y = g.curb_y() + g.lane_width / 2.0;
        assert_eq!(g.segment_of(0.0, y), Some(Segment::CrossingLane1));
    }

    #[test]
    fn median_strip_point() {
        let g = CrossingGeometry::with_median();
        let y = g.curb_y() + 2.5 + 0.5;
        assert_eq!(g.segment_of(0.3, y), Some(Segment::Median));
    }

    #[test]
    fn boundaries_resolve_forward() {
        let g = CrossingGeometry::no_median();
        let waiting = *g.region(Segment::WaitingToCross).unwrap();
        // Edge of the tactile paving strip.
        assert_eq!(g.segment_of(0.0, waiting.y_min), Some(Segment::WaitingToCross));
        // Curb line itself.
        assert_eq!(g.segment_of(0.0, g.curb_y()), Some(Segment::CrossingLane1));
        assert_eq!(g.segment_of(0.0, g.bounds().y_max), Some(Segment::Finished));
    }

    #[test]
    fn outside_is_out_of_course() {
        let g = CrossingGeometry::no_median();
        assert_eq!(g.segment_of(5.0, 1.0), None);
        assert_eq!(g.segment_of(0.0, -0.01), None);
    }

    #[test]
    fn geometry_toml_round_trip_and_validation() {
        let g = CrossingGeometry::with_median();
        let back = CrossingGeometry::from_toml(&g.to_toml()).unwrap();
        assert_eq!(back, g);

        let mut bad = g.clone();
        bad.regions[2].rect.y_max += 0.5; // lane 1 now overlaps the median
        assert!(bad.validate().is_err());

        let mut gap = CrossingGeometry::no_median();
        gap.regions.remove(1);
        assert!(gap.validate().is_err());
    }

    #[test]
    fn segment_names_parse() {
        assert_eq!("Crossing Lane 1".parse::<Segment>().unwrap(), Segment::CrossingLane1);
        assert_eq!("crossing lane 2".parse::<Segment>().unwrap(), Segment::CrossingLane2);
        assert_eq!("Sidewalk".parse::<Segment>().unwrap(), Segment::Sidewalk);
        assert_eq!("WaitingToCross".parse::<Segment>().unwrap(), Segment::WaitingToCross);
        assert!("Road".parse::<Segment>().is_err());
        assert_eq!(Segment::Median.merged(), Segment::CrossingLane1);
    }

    fn sample(unix: f64, x: f64, y: f64) -> TrajectorySample {
        TrajectorySample {
            unix,
            entity_id: PARTICIPANT_ID.into(),
            kind: EntityKind::Participant,
            x,
            y,
            heading: 0.0,
        }
    }

    #[test]
    fn attaches_nearest_frame() {
        let g = CrossingGeometry::no_median();
        let traj = Trajectory {
            session_id: "s".into(),
            samples: (0..100).map(|i| sample(100.0 + i as f64 * 0.1, 0.0, i as f64 * 0.1)).collect(),
        };
        let mut evs = vec![
            ScrEvent::new("p", "s", 1, 100.52, 101.5, 0.5),
            ScrEvent::new("p", "s", 2, 105.0, 106.0, 0.5),
            ScrEvent::new("p", "s", 3, 130.0, 131.0, 0.5),
        ];
        let missing = attach_segments(&mut evs, &traj, &g);
        assert_eq!(missing, 1);
        assert_eq!(evs[0].position, Some(Segment::Sidewalk));
        assert!((evs[0].position_unix.unwrap() - 100.5).abs() < 1e-9);
        assert_eq!(evs[1].position, Some(Segment::CrossingLane1));
        assert!(evs[2].unlocatable);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let traj = Trajectory {
            session_id: "s".into(),
            samples: vec![sample(1.0, 0.5, 1.25), sample(1.1, 0.5, 1.5)],
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), "s").unwrap();
        assert_eq!(back, traj);
        back.validate().unwrap();
    }

    #[test]
    fn monotone_walk_visits_segments_in_order() {
        for g in [CrossingGeometry::no_median(), CrossingGeometry::with_median()] {
            let b = g.bounds();
            let mut seen: Vec<Segment> = Vec::new();
            let steps = 2000;
            for i in 0..=steps {
                let y = b.y_min + (b.y_max - b.y_min) * i as f64 / steps as f64;
                let s = g.segment_of(0.0, y).unwrap();
                if seen.last() != Some(&s) {
                    seen.push(s);
                }
            }
            let expected: Vec<Segment> = g.regions.iter().map(|r| r.segment).collect();
            assert_eq!(seen, expected);
        }
    }

    proptest! {
        #[test]
        fn every_point_in_bounds_has_one_segment(
            fx in 0.0f64..=1.0, fy in 0.0f64..=1.0, median in any::<bool>(),
        ) {
            let g = CrossingGeometry::preset(median);
            let b = g.bounds();
            let x = b.x_min + fx * (b.x_max - b.x_min);
            let y = b.y_min + fy * (b.y_max - b.y_min);
            let hits: Vec<Segment> = g.regions.iter().filter(|r| r.rect.contains(x, y)).map(|r| r.segment).collect();
            prop_assert!(!hits.is_empty());
            prop_assert_eq!(g.segment_of(x, y), hits.iter().max().copied());
        }
    }
}
