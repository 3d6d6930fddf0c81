use log::warn;

use super::{Dataset, ExprState, GenePanel};
use crate::error::{Error, Result};

/// Per-spot total after normalization, before `ln(1 + x)`.
pub const TARGET_SUM: f64 = 1e4;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreprocessReport {
    pub genes_removed: usize,
    pub spots_removed: usize,
}

/// Drops genes with zero total expression, drops spots with zero total
/// counts, scales every spot to [`TARGET_SUM`] and applies `ln(1 + x)`.
///
/// Input that is already log-normalized is returned unchanged.
pub fn preprocess_expression(mut ds: Dataset) -> Result<(Dataset, PreprocessReport)> {
    if ds.expr_state == ExprState::LogNormalized {
        return Ok((ds, PreprocessReport::default()));
    }
    let d = ds.panel.d();
    let mut totals = vec![0.0; d];
    for s in &ds.spots {
        for (t, &v) in totals.iter_mut().zip(&s.expr) {
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "spot {}: negative expression value {v}",
                    s.spot_id
                )));
            }
            *t += v;
        }
    }
    let keep: Vec<usize> = (0..d).filter(|&j| totals[j] > 0.0).collect();
    if keep.is_empty() {
        return Err(Error::Data("every gene has zero total expression".into()));
    }
    let mut report = PreprocessReport {
        genes_removed: d - keep.len(),
        spots_removed: 0,
    };
    if keep.len() != d {
        let names = keep.iter().map(|&j| ds.panel.names()[j].clone()).collect();
        ds.panel = GenePanel::new(names)?;
        for s in &mut ds.spots {
            s.expr = keep.iter().map(|&j| s.expr[j]).collect();
        }
    }
    let before = ds.spots.len();
    ds.spots.retain(|s| s.expr.iter().sum::<f64>() > 0.0);
    report.spots_removed = before - ds.spots.len();
    if report.spots_removed > 0 {
        warn!("removed {} spots with zero total expression", report.spots_removed);
    }
    normalize_log1p(&mut ds);
    Ok((ds, report))
}

fn normalize_log1p(ds: &mut Dataset) {
    for s in &mut ds.spots {
        let total: f64 = s.expr.iter().sum();
        if total > 0.0 {
            let f = TARGET_SUM / total;
            for v in &mut s.expr {
                *v = (*v * f).ln_1p();
            }
        }
    }
    ds.expr_state = ExprState::LogNormalized;
}

/// Reorders raw counts onto `panel` (missing genes become zero) and
/// log-normalizes without gene filtering. Used to score new data with a
/// model trained on `panel`.
pub fn align_to_panel(mut ds: Dataset, panel: &GenePanel) -> Result<Dataset> {
    if ds.expr_state != ExprState::RawCounts {
        return Err(Error::Data("panel alignment expects raw counts".into()));
    }
    let cols: Vec<Option<usize>> = panel.names().iter().map(|g| ds.panel.index_of(g)).collect();
    let missing = cols.iter().filter(|c| c.is_none()).count();
    if missing > 0 {
        warn!("{missing} model genes are absent from the data; filled with zeros");
    }
    for s in &mut ds.spots {
        if let Some(v) = s.expr.iter().find(|v| **v < 0.0) {
            return Err(Error::Data(format!("spot {}: negative expression value {v}", s.spot_id)));
        }
        s.expr = cols.iter().map(|c| c.map_or(0.0, |j| s.expr[j])).collect();
    }
    ds.panel = panel.clone();
    normalize_log1p(&mut ds);
    Ok(ds)
}
