//! Linear mixed models on per-participant panels.
//!
//! `y = Xβ + Zu + ε` with participants as the only grouping factor,
//! reference-coded factor dummies in `X`, and independent random slopes
//! (optionally a random intercept) per participant: `G` is diagonal.

mod design;
mod reml;
mod table;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{csv_reader, csv_writer, parse_f64};

pub use design::{build_design, Design, Term};
pub use reml::{fit_reml, fit_reml_with, gls_at, ConvergenceRecord, GlsSolution, LmmFit, RemlOptions};
pub use table::{emit_table, ModelTable, TableRow};

/// Column name that holds the grouping identity in panel files.
pub const PARTICIPANT_COLUMN: &str = "participant_id";

/// One categorical predictor with its admissible levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    /// Heading shown above the factor's rows; defaults to `name`.
    #[serde(default)]
    pub display: Option<String>,
    pub levels: Vec<String>,
    pub reference: String,
    /// Row labels per level; a level without one is shown verbatim.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// Drop rows at levels outside `levels` instead of rejecting them.
    #[serde(default)]
    pub drop_other_levels: bool,
}

impl FactorSpec {
    pub fn new(name: &str, levels: &[&str], reference: &str) -> Self {
        Self {
            name: name.to_string(),
            display: None,
            levels: levels.iter().map(|s| s.to_string()).collect(),
            reference: reference.to_string(),
            labels: BTreeMap::new(),
            drop_other_levels: false,
        }
    }

    pub fn display_name(&self) -> &str {
        self.display.as_deref().unwrap_or(&self.name)
    }

    pub fn level_label<'a>(&'a self, level: &'a str) -> &'a str {
        self.labels.get(level).map_or(level, String::as_str)
    }

    /// Levels that receive a dummy column, in declaration order.
    pub fn contrasts(&self) -> impl Iterator<Item = &str> {
        self.levels.iter().map(String::as_str).filter(move |l| *l != self.reference)
    }
}

/// Model specification: response, factors and random terms.
///
/// Random terms name either a whole factor (every non-reference level gets
/// a random slope) or a single `factor:level` indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub name: String,
    #[serde(default)]
    pub title: String,
    pub response: String,
    pub factors: Vec<FactorSpec>,
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub random_intercept: bool,
}

impl LmmSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.factors {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::ModelSpec(format!("factor {:?} declared twice", f.name)));
            }
            if f.name == PARTICIPANT_COLUMN || f.name == self.response {
                return Err(Error::ModelSpec(format!("factor name {:?} is reserved", f.name)));
            }
            if !f.levels.contains(&f.reference) {
                return Err(Error::ModelSpec(format!(
                    "reference level {:?} is not a level of {:?}",
                    f.reference, f.name
                )));
            }
            let mut lv = std::collections::BTreeSet::new();
            if let Some(dup) = f.levels.iter().find(|l| !lv.insert(l.as_str())) {
                return Err(Error::ModelSpec(format!("level {dup:?} of {:?} repeated", f.name)));
            }
        }
        self.random_columns().map(|_| ())
    }

    /// Fixed-effect column names after the intercept, `factor:level`.
    pub fn fixed_columns(&self) -> Vec<String> {
        self.factors
            .iter()
            .flat_map(|f| f.contrasts().map(move |l| format!("{}:{l}", f.name)))
            .collect()
    }

    /// Random-slope columns, expanded and checked against the fixed terms.
    pub fn random_columns(&self) -> Result<Vec<String>> {
        let fixed = self.fixed_columns();
        let mut out: Vec<String> = Vec::new();
        for term in &self.random {
            let expanded: Vec<String> = match term.split_once(':') {
                Some(_) => vec![term.clone()],
                None => match self.factors.iter().find(|f| &f.name == term) {
                    Some(f) => f.contrasts().map(|l| format!("{}:{l}", f.name)).collect(),
                    None => {
                        return Err(Error::ModelSpec(format!("random term {term:?} names no factor")))
                    }
                },
            };
            for col in expanded {
                if !fixed.contains(&col) {
                    return Err(Error::ModelSpec(format!(
                        "random term {col:?} is not a fixed term (reference levels have no slope)"
                    )));
                }
                if !out.contains(&col) {
                    out.push(col);
                }
            }
        }
        // Keep fixed-column order so output is independent of listing order.
        out.sort_by_key(|c| fixed.iter().position(|f| f == c));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub participant_id: String,
    pub response: f64,
    /// Missing entries are `None`; such rows are dropped per model.
    pub factors: BTreeMap<String, Option<String>>,
}

/// Long-format panel: one row per observation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanelDataset {
    pub response: String,
    pub rows: Vec<PanelRow>,
}

impl PanelDataset {
    pub fn new(response: &str) -> Self {
        Self { response: response.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, participant: &str, response: f64, factors: &[(&str, Option<&str>)]) {
        self.rows.push(PanelRow {
            participant_id: participant.to_string(),
            response,
            factors: factors
                .iter()
                .map(|(k, v)| (k.to_string(), v.map(str::to_string)))
                .collect(),
        });
    }

    pub fn n_participants(&self) -> usize {
        let ids: std::collections::BTreeSet<&str> =
            self.rows.iter().map(|r| r.participant_id.as_str()).collect();
        ids.len()
    }

    fn factor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.factors.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    }

    /// Header: `participant_id, <response>, <factor>...`; empty cells are
    /// missing values.
    pub fn read_csv<R: Read>(rdr: R) -> Result<Self> {
        const CTX: &str = "panel";
        let mut r = csv_reader(rdr);
        let headers = r.headers()?.clone();
        if headers.len() < 2 || !headers[0].eq_ignore_ascii_case(PARTICIPANT_COLUMN) {
            return Err(Error::format(
                CTX,
                format!("header must start with {PARTICIPANT_COLUMN:?} and a response column"),
            ));
        }
        let factor_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut out = Self::new(&headers[1]);
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let response = if rec[1].is_empty() { f64::NAN } else { parse_f64(&rec[1], CTX, line)? };
            let factors = factor_names
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let v = rec.get(k + 2).unwrap_or("");
                    (name.clone(), (!v.is_empty()).then(|| v.to_string()))
                })
                .collect();
            out.rows.push(PanelRow { participant_id: rec[0].to_string(), response, factors });
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let names = self.factor_names();
        let mut wr = csv_writer(w);
        let mut header = vec![PARTICIPANT_COLUMN.to_string(), self.response.clone()];
        header.extend(names.iter().cloned());
        wr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.participant_id.clone(), fmt_response(row.response)];
            for n in &names {
                rec.push(row.factors.get(n).cloned().flatten().unwrap_or_default());
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<panel>", e))
    }
}

fn fmt_response(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment_spec() -> LmmSpec {
        LmmSpec {
            name: "segments".into(),
            title: String::new(),
            response: "t".into(),
            factors: vec![FactorSpec::new(
                "segment",
                &["Sidewalk", "WaitingToCross", "CrossingLane1", "CrossingLane2"],
                "Sidewalk",
            )],
            random: vec!["segment".into()],
            random_intercept: false,
        }
    }

    #[test]
    fn random_terms_expand_in_fixed_order() {
        let mut spec = segment_spec();
        spec.random = vec!["segment:CrossingLane2".into(), "segment:WaitingToCross".into()];
        assert_eq!(
            spec.random_columns().unwrap(),
            vec!["segment:WaitingToCross", "segment:CrossingLane2"]
        );
        spec.random = vec!["segment".into()];
        assert_eq!(spec.random_columns().unwrap().len(), 3);
    }

    #[test]
    fn random_term_on_reference_level_is_rejected() {
        let mut spec = segment_spec();
        spec.random = vec!["segment:Sidewalk".into()];
        assert!(matches!(spec.validate(), Err(Error::ModelSpec(_))));
        spec.random = vec!["weather".into()];
        assert!(matches!(spec.validate(), Err(Error::ModelSpec(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let mut spec = segment_spec();
        spec.factors[0].labels.insert("WaitingToCross".into(), "Waiting to cross".into());
        spec.factors[0].drop_other_levels = true;
        let back = LmmSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn panel_csv_round_trip_keeps_missing_values() {
        let mut ds = PanelDataset::new("t");
        ds.push("p1", 51.5, &[("age", Some("25-34")), ("segment", Some("Sidewalk"))]);
        ds.push("p2", 47.0, &[("age", None), ("segment", Some("CrossingLane1"))]);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "participant_id,t,age,segment");
        let back = PanelDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }
}
