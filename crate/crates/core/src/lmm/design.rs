use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::{LmmSpec, PanelDataset};
use crate::error::{Error, Result};

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    /// `(Intercept)` or `factor:level`.
    pub name: String,
    pub factor: Option<String>,
    pub level: Option<String>,
}

/// Fixed-effect design with rows grouped contiguously by participant.
///
/// Rows are put in a canonical order (participant id, then levels, then
/// response), so the fit does not depend on input row order.
#[derive(Debug, Clone)]
pub struct Design {
    pub columns: Vec<Term>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Sorted participant ids; `groups[i]` is the row range of `participants[i]`.
    pub participants: Vec<String>,
    pub groups: Vec<Range<usize>>,
    /// Columns of `x` that carry a per-participant random effect.
    pub random: Vec<usize>,
    /// Rows dropped for a missing response or factor value.
    pub dropped_missing: usize,
    /// Rows dropped because a factor level is outside the declared set.
    pub dropped_level: usize,
}

impl Design {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_participants(&self) -> usize {
        self.participants.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn random_names(&self) -> Vec<String> {
        self.random.iter().map(|&c| self.columns[c].name.clone()).collect()
    }

    /// Random-effects block `Z_i` of participant `i`.
    pub fn z_block(&self, i: usize) -> DMatrix<f64> {
        let rows = self.groups[i].clone();
        DMatrix::from_fn(rows.len(), self.random.len(), |r, c| self.x[(rows.start + r, self.random[c])])
    }

    /// Names of columns that are linear combinations of earlier columns,
    /// by modified Gram–Schmidt with reorthogonalization.
    pub fn collinear_columns(&self) -> Vec<String> {
        let (n, p) = self.x.shape();
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
        let mut bad = Vec::new();
        for j in 0..p {
            let col = self.x.column(j).into_owned();
            let norm0 = col.norm();
            let mut v = col;
            for _ in 0..2 {
                for q in &basis {
                    let proj = q.dot(&v);
                    v -= q * proj;
                }
            }
            let norm = v.norm();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 * (n as f64).sqrt().max(1.0) {
                bad.push(self.columns[j].name.clone());
            } else {
                basis.push(v / norm);
            }
        }
        bad
    }
}

/// Reference-level dummy coding of `dataset` under `spec`, after listwise
/// removal of rows with missing values.
pub fn build_design(dataset: &PanelDataset, spec: &LmmSpec) -> Result<Design> {
    spec.validate()?;
    for f in &spec.factors {
        if !dataset.rows.iter().any(|r| r.factors.contains_key(&f.name)) {
            return Err(Error::ModelSpec(format!("factor {:?} is absent from the dataset", f.name)));
        }
    }

    // (participant, level index per factor, response)
    let mut kept: Vec<(&str, Vec<usize>, f64)> = Vec::with_capacity(dataset.rows.len());
    let (mut dropped_missing, mut dropped_level) = (0, 0);
    'rows: for (k, row) in dataset.rows.iter().enumerate() {
        if !row.response.is_finite() {
            dropped_missing += 1;
            continue;
        }
        let mut levels = Vec::with_capacity(spec.factors.len());
        for f in &spec.factors {
            let Some(Some(value)) = row.factors.get(&f.name) else {
                dropped_missing += 1;
                continue 'rows;
            };
            match f.levels.iter().position(|l| l == value) {
                Some(ix) => levels.push(ix),
                None if f.drop_other_levels => {
                    dropped_level += 1;
                    continue 'rows;
                }
                None => {
                    return Err(Error::ModelSpec(format!(
                        "row {} (participant {}): level {value:?} of factor {:?} is not declared",
                        k + 1,
                        row.participant_id,
                        f.name
                    )))
                }
            }
        }
        kept.push((row.participant_id.as_str(), levels, row.response));
    }
    kept.sort_by(|a, b| a.0.cmp(b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.total_cmp(&b.2)));

    let mut columns = vec![Term { name: INTERCEPT.into(), factor: None, level: None }];
    // (factor index, level index) per non-intercept column
    let mut coding = Vec::new();
    for (fi, f) in spec.factors.iter().enumerate() {
        for (li, level) in f.levels.iter().enumerate() {
            if *level == f.reference {
                continue;
            }
            columns.push(Term {
                name: format!("{}:{level}", f.name),
                factor: Some(f.name.clone()),
                level: Some(level.clone()),
            });
            coding.push((fi, li));
        }
    }
    let n = kept.len();
    let x = DMatrix::from_fn(n, columns.len(), |r, c| {
        if c == 0 {
            1.0
        } else {
            let (fi, li) = coding[c - 1];
            if kept[r].1[fi] == li {
                1.0
            } else {
                0.0
            }
        }
    });
    let y = DVector::from_iterator(n, kept.iter().map(|k| k.2));

    let mut participants: Vec<String> = Vec::new();
    let mut groups: Vec<Range<usize>> = Vec::new();
    for (r, k) in kept.iter().enumerate() {
        if participants.last().map(String::as_str) != Some(k.0) {
            participants.push(k.0.to_string());
            groups.push(r..r + 1);
        } else {
            groups.last_mut().expect("group open").end = r + 1;
        }
    }

    let mut random = Vec::new();
    if spec.random_intercept {
        random.push(0);
    }
    for name in spec.random_columns()? {
        random.push(columns.iter().position(|c| c.name == name).expect("validated random column"));
    }

    Ok(Design { columns, x, y, participants, groups, random, dropped_missing, dropped_level })
}
