//! Panel assembly and per-model estimation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::config::ModelEntry;
use super::ProcessedSession;
use crate::annotation::LabelTaxonomy;
use crate::error::{Error, Result};
use crate::lmm::{build_design, emit_table, fit_reml, LmmFit, LmmSpec, ModelTable, PanelDataset};
use crate::scr::ScrEvent;

/// Response column of the panel.
pub const PANEL_RESPONSE: &str = "t_score";

/// One panel row per standardized event whose label enters models.
///
/// Columns: the scenario factors, `gender`, `age_group`, `segment` (median
/// merged into the first lane), `position` (unmerged), `label` and
/// `session_id`. Unknown demographics and unlocated events leave the cell
/// missing.
pub fn build_panel(events: &[ScrEvent], sessions: &[ProcessedSession], taxonomy: &LabelTaxonomy) -> PanelDataset {
    let by_key: BTreeMap<(&str, &str), &ProcessedSession> = sessions
        .iter()
        .map(|s| ((s.key.participant_id.as_str(), s.key.session_id.as_str()), s))
        .collect();
    let mut panel = PanelDataset::new(PANEL_RESPONSE);
    for ev in events {
        let Some(t) = ev.t_score else { continue };
        let mark = ev.mark();
        if !taxonomy.in_models(&mark) {
            continue;
        }
        let Some(s) = by_key.get(&(ev.participant_id.as_str(), ev.session_id.as_str())) else {
            continue;
        };
        let sc = &s.scenario;
        panel.push(
            &ev.participant_id,
            t,
            &[
                ("vehicle_type", Some(sc.vehicle_type.as_str())),
                ("avatar", Some(sc.avatar.as_str())),
                ("traffic_regime", Some(sc.traffic_regime.as_str())),
                ("median", Some(if sc.median { "Median" } else { "NoMedian" })),
                ("time_of_day", Some(sc.time_of_day.as_str())),
                ("weather", Some(sc.weather.as_str())),
                ("gender", s.demographics.gender.as_deref()),
                ("age_group", s.demographics.age_group.as_deref()),
                ("segment", ev.position.map(|p| p.merged().id())),
                ("position", ev.position.map(|p| p.id())),
                ("label", mark.label_id()),
                ("session_id", Some(ev.session_id.as_str())),
            ],
        );
    }
    panel
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub fit: LmmFit,
    pub table: ModelTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFailure {
    /// Anything but insufficient or degenerate data.
    pub hard: bool,
    pub reason: String,
}

impl From<Error> for ModelFailure {
    fn from(e: Error) -> Self {
        let hard = !matches!(e, Error::InsufficientData(_) | Error::Collinear(_));
        Self { hard, reason: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutcome {
    pub name: String,
    pub title: String,
    pub rows_in_panel: usize,
    /// Rows left after the model's filter; the fit's observation count is
    /// this minus its missing-value and undeclared-level drops.
    pub rows_after_filter: usize,
    /// Declared `factor:level`s without observations, left out of the fit.
    pub absent_levels: Vec<String>,
    pub result: std::result::Result<FittedModel, ModelFailure>,
}

pub fn fit_models(panel: &PanelDataset, entries: &[ModelEntry]) -> Vec<ModelOutcome> {
    entries.par_iter().map(|e| fit_model(panel, e)).collect()
}

pub fn fit_model(panel: &PanelDataset, entry: &ModelEntry) -> ModelOutcome {
    let rows = panel
        .rows
        .iter()
        .filter(|r| {
            entry.filter.iter().all(|(col, allowed)| {
                r.factors.get(col).and_then(Option::as_ref).is_some_and(|v| allowed.contains(v))
            })
        })
        .cloned()
        .collect();
    let filtered = PanelDataset { response: panel.response.clone(), rows };
    let mut absent_levels = Vec::new();
    let result = prune_levels(&entry.spec, &filtered, &mut absent_levels)
        .and_then(|spec| {
            let design = build_design(&filtered, &spec)?;
            let fit = fit_reml(&design)?;
            // Rendered against the full spec: pruned levels show as blanks.
            let table = emit_table(&fit, &entry.spec);
            Ok(FittedModel { fit, table })
        })
        .map_err(ModelFailure::from);
    ModelOutcome {
        name: entry.spec.name.clone(),
        title: entry.spec.title.clone(),
        rows_in_panel: panel.rows.len(),
        rows_after_filter: filtered.rows.len(),
        absent_levels,
        result,
    }
}

/// Removes non-reference levels that no complete row uses, together with
/// random slopes naming them. A reference level without rows leaves the
/// contrasts undefined.
fn prune_levels(spec: &LmmSpec, data: &PanelDataset, absent: &mut Vec<String>) -> Result<LmmSpec> {
    let complete = data.rows.iter().filter(|r| {
        spec.factors.iter().all(|f| {
            r.factors.get(&f.name).and_then(Option::as_ref).is_some_and(|v| f.levels.contains(v))
        })
    });
    let mut used: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut any = false;
    for r in complete {
        any = true;
        for f in &spec.factors {
            let v = r.factors[&f.name].as_deref().expect("complete row");
            used.insert((f.name.as_str(), v));
        }
    }
    if !any {
        return Err(Error::InsufficientData(format!("no complete rows for model {:?}", spec.name)));
    }
    let mut out = spec.clone();
    for f in &mut out.factors {
        if !used.contains(&(f.name.as_str(), f.reference.as_str())) {
            return Err(Error::InsufficientData(format!(
                "reference level {:?} of {:?} has no observations",
                f.reference, f.name
            )));
        }
        let name = f.name.clone();
        f.levels.retain(|l| {
            let keep = used.contains(&(name.as_str(), l.as_str()));
            if !keep {
                absent.push(format!("{name}:{l}"));
            }
            keep
        });
    }
    out.random.retain(|term| !absent.contains(term));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::FactorSpec;

    fn entry(filter: &[(&str, &[&str])]) -> ModelEntry {
        let mut spec = LmmSpec {
            name: "m".into(),
            title: String::new(),
            response: PANEL_RESPONSE.into(),
            factors: vec![FactorSpec::new("segment", &["Sidewalk", "CrossingLane1", "CrossingLane2"], "Sidewalk")],
            random: vec!["segment:CrossingLane2".into()],
            random_intercept: false,
        };
        spec.factors[0].drop_other_levels = true;
        ModelEntry {
            spec,
            filter: filter.iter().map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect())).collect(),
        }
    }

    fn panel() -> PanelDataset {
        let mut p = PanelDataset::new(PANEL_RESPONSE);
        for pid in 0..6 {
            for k in 0..8 {
                let (seg, y) = if k % 2 == 0 { ("Sidewalk", 45.0) } else { ("CrossingLane1", 55.0) };
                let noise = ((pid * 8 + k) as f64 * 1.7).sin() * 3.0;
                let median = if k < 4 { "Median" } else { "NoMedian" };
                p.push(&format!("P{pid}"), y + noise, &[("segment", Some(seg)), ("median", Some(median))]);
            }
            p.push(&format!("P{pid}"), 50.0, &[("segment", Some("Finished")), ("median", Some("Median"))]);
            p.push(&format!("P{pid}"), 50.0, &[("segment", None), ("median", Some("Median"))]);
        }
        p
    }

    #[test]
    fn unused_levels_are_pruned_and_counts_reconcile() {
        let out = fit_model(&panel(), &entry(&[]));
        assert_eq!(out.absent_levels, ["segment:CrossingLane2"]);
        let fitted = out.result.expect("estimable");
        assert_eq!(fitted.fit.n_obs, out.rows_after_filter - fitted.fit.dropped_missing - fitted.fit.dropped_level);
        assert_eq!((fitted.fit.dropped_missing, fitted.fit.dropped_level), (6, 6));
        assert!(fitted.fit.random_terms.is_empty());
        let (b, _) = fitted.fit.coefficient("segment:CrossingLane1").unwrap();
        assert!(b > 5.0);
        assert_eq!(fitted.table.row("CrossingLane2"), Some([None; 4]));
    }

    #[test]
    fn filter_selects_rows() {
        let out = fit_model(&panel(), &entry(&[("median", &["NoMedian"])]));
        assert_eq!(out.rows_in_panel, 60);
        assert_eq!(out.rows_after_filter, 24);
        assert_eq!(out.result.unwrap().fit.n_obs, 24);
    }

    #[test]
    fn missing_reference_is_soft() {
        let mut p = panel();
        p.rows.retain(|r| r.factors["segment"].as_deref() != Some("Sidewalk"));
        let out = fit_model(&p, &entry(&[]));
        let f = out.result.unwrap_err();
        assert!(!f.hard);
        assert!(f.reason.contains("Sidewalk"));
        let empty = fit_model(&PanelDataset::new(PANEL_RESPONSE), &entry(&[]));
        assert!(!empty.result.unwrap_err().hard);
    }
}
