use std::fmt::Write as _;

use super::design::INTERCEPT;
use super::reml::LmmFit;
use super::LmmSpec;

const DASH: &str = "--";
const COLUMNS: [&str; 4] = ["Fixed (β)", "t-value", "Random (σ)", "t-value"];

#[derive(Debug, Clone, PartialEq)]
pub enum TableRow {
    /// Factor heading without values.
    Heading(String),
    /// Estimate row; `None` cells render as `--`.
    Values { label: String, cells: [Option<f64>; 4] },
    /// Count footer (participants, observations).
    Count { label: String, value: usize },
}

/// Coefficient table: intercept, one block per factor with the reference
/// level first, then participant and observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

pub fn emit_table(fit: &LmmFit, spec: &LmmSpec) -> ModelTable {
    let random_cells = |term: &str| -> [Option<f64>; 2] {
        match fit.random_sd(term) {
            Some((sd, t)) => [Some(sd), t],
            None => [None, None],
        }
    };
    let fixed_cells = |term: &str| -> [Option<f64>; 4] {
        let (b, t) = fit.coefficient(term).map_or((None, None), |(b, t)| (Some(b), Some(t)));
        let [s, st] = random_cells(term);
        [b, t, s, st]
    };
    let mut rows = vec![TableRow::Values { label: INTERCEPT.into(), cells: fixed_cells(INTERCEPT) }];
    for f in &spec.factors {
        rows.push(TableRow::Heading(f.display_name().to_string()));
        rows.push(TableRow::Values { label: f.level_label(&f.reference).to_string(), cells: [None; 4] });
        for level in f.contrasts() {
            rows.push(TableRow::Values {
                label: f.level_label(level).to_string(),
                cells: fixed_cells(&format!("{}:{level}", f.name)),
            });
        }
    }
    rows.push(TableRow::Count { label: "Number of participants".into(), value: fit.n_participants });
    rows.push(TableRow::Count { label: "Number of observations".into(), value: fit.n_obs });
    let title = if spec.title.is_empty() { spec.name.clone() } else { spec.title.clone() };
    ModelTable { title, rows }
}

fn cell(v: Option<f64>) -> String {
    match v {
        // Rounds to two decimals; a rounded zero never carries a sign.
        Some(v) => {
            let s = format!("{v:.2}");
            if s == "-0.00" {
                "0.00".into()
            } else {
                s
            }
        }
        None => DASH.into(),
    }
}

impl ModelTable {
    fn label_width(&self) -> usize {
        self.rows
            .iter()
            .map(|r| match r {
                TableRow::Heading(l) => l.chars().count(),
                TableRow::Values { label, .. } | TableRow::Count { label, .. } => label.chars().count() + 2,
            })
            .max()
            .unwrap_or(0)
            .max("Independent variable".len())
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let w = self.label_width();
        let cw = 12;
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let mut header = format!("{:<w$}", "Independent variable");
        for c in COLUMNS {
            let _ = write!(header, "{:>cw$}", c);
        }
        let rule = "-".repeat(w + 4 * cw);
        let _ = writeln!(out, "{rule}\n{header}\n{rule}");
        for row in &self.rows {
            match row {
                TableRow::Heading(l) => {
                    let _ = writeln!(out, "{l}");
                }
                TableRow::Values { label, cells } => {
                    let indent = if label == INTERCEPT { "" } else { "  " };
                    let mut line = format!("{:<w$}", format!("{indent}{label}"));
                    for c in cells {
                        let _ = write!(line, "{:>cw$}", cell(*c));
                    }
                    let _ = writeln!(out, "{line}");
                }
                TableRow::Count { label, value } => {
                    if matches!(row, TableRow::Count { .. }) && label.ends_with("participants") {
                        let _ = writeln!(out, "{rule}");
                    }
                    let _ = writeln!(out, "{:<w$}{:>cw$}", label, value);
                }
            }
        }
        let _ = writeln!(out, "{rule}");
        out
    }

    /// Delimited rendering with the same cells as the text form.
    pub fn to_csv(&self) -> String {
        let mut wr = csv::WriterBuilder::new().from_writer(Vec::new());
        let _ = wr.write_record(["variable", "fixed_beta", "fixed_t", "random_sigma", "random_t"]);
        for row in &self.rows {
            let rec: Vec<String> = match row {
                TableRow::Heading(l) => vec![l.clone(), String::new(), String::new(), String::new(), String::new()],
                TableRow::Values { label, cells } => {
                    std::iter::once(label.clone()).chain(cells.iter().map(|c| cell(*c))).collect()
                }
                TableRow::Count { label, value } => {
                    vec![label.clone(), value.to_string(), String::new(), String::new(), String::new()]
                }
            };
            let _ = wr.write_record(&rec);
        }
        String::from_utf8(wr.into_inner().expect("in-memory writer")).expect("utf-8 cells")
    }

    /// Cells of the row labelled `label`.
    pub fn row(&self, label: &str) -> Option<[Option<f64>; 4]> {
        self.rows.iter().find_map(|r| match r {
            TableRow::Values { label: l, cells } if l == label => Some(*cells),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_design, fit_reml, FactorSpec, PanelDataset};
    use super::*;

    #[test]
    fn reference_row_is_dashes_and_footers_match_fit() {
        let mut f = FactorSpec::new("segment", &["Sidewalk", "CrossingLane1"], "Sidewalk");
        f.display = Some("Segment".into());
        f.labels.insert("CrossingLane1".into(), "Crossing lane 1".into());
        let spec = LmmSpec {
            name: "segments".into(),
            title: "T scores by segment".into(),
            response: "t".into(),
            factors: vec![f],
            random: vec!["segment".into()],
            random_intercept: false,
        };
        let mut ds = PanelDataset::new("t");
        for i in 0..8 {
            for k in 0..6 {
                let lv = if k % 2 == 0 { "Sidewalk" } else { "CrossingLane1" };
                let y = 48.0 + if k % 2 == 1 { 6.0 + i as f64 } else { 0.0 } + ((i * 7 + k * 3) % 5) as f64;
                ds.push(&format!("p{i}"), y, &[("segment", Some(lv))]);
            }
        }
        let fit = fit_reml(&build_design(&ds, &spec).unwrap()).unwrap();
        let table = emit_table(&fit, &spec);
        let text = table.to_text();
        let side = text.lines().find(|l| l.trim_start().starts_with("Sidewalk")).unwrap();
        assert_eq!(side.split_whitespace().filter(|c| *c == "--").count(), 4);
        assert!(text.contains("Number of participants"));
        assert_eq!(table.rows.last(), Some(&TableRow::Count { label: "Number of observations".into(), value: 48 }));
        let intercept = table.row("(Intercept)").unwrap();
        assert!(intercept[2].is_none() && intercept[0].is_some());
        assert!(table.row("Crossing lane 1").unwrap().iter().all(Option::is_some));
        let csv = table.to_csv();
        assert!(csv.lines().any(|l| l == "Sidewalk,--,--,--,--"));
        assert!(csv.lines().any(|l| l == "Number of participants,8,,,"));
    }

    #[test]
    fn negative_zero_renders_unsigned() {
        assert_eq!(cell(Some(-0.001)), "0.00");
        assert_eq!(cell(Some(-0.006)), "-0.01");
        assert_eq!(cell(None), "--");
    }
}
