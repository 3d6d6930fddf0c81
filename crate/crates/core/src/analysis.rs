//! High-confidence selection, one-vs-rest Wilcoxon rank-sum differential
//! expression and the tabular report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::midranks;
use crate::training::Prediction;

pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_TOP_N: usize = 10;
/// Largest total sample size for which p-values are enumerated exactly.
pub const EXACT_MAX_N: usize = 20;

/// Spots whose top softmax probability is at least `tau`, as
/// `(spot, predicted class)`.
pub fn select_high_confidence(preds: &[Prediction], tau: f64, classes: usize) -> Result<Vec<(usize, usize)>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("confidence threshold {tau} not in (0, 1]")));
    }
    let kept: Vec<(usize, usize)> = preds
        .iter()
        .filter(|p| p.confidence >= tau)
        .map(|p| (p.spot, p.pred))
        .collect();
    for c in 0..classes {
        if !kept.iter().any(|&(_, k)| k == c) {
            warn!("no prediction of class {c} reaches confidence {tau}; class excluded from DGE");
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first group.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

fn exact_p(doubled_ranks: &[u64], n_a: usize, doubled_sum_a: u64) -> f64 {
    let n = doubled_ranks.len() as u64;
    let total_sum: u64 = doubled_ranks.iter().sum();
    let max = total_sum as usize;
    // ways[j][s]: subsets of size j with doubled rank sum s
    let mut ways = vec![vec![0u64; max + 1]; n_a + 1];
    ways[0][0] = 1;
    for &r in doubled_ranks {
        let r = r as usize;
        for j in (1..=n_a).rev() {
            let (lo, hi) = ways.split_at_mut(j);
            for s in (r..=max).rev() {
                hi[0][s] += lo[j - 1][s - r];
            }
        }
    }
    // mean doubled rank sum is n_a * (n + 1)
    let centre = n_a as i64 * (n as i64 + 1);
    let obs = (doubled_sum_a as i64 - centre).abs();
    let mut hit = 0u64;
    let mut all = 0u64;
    for (s, &w) in ways[n_a].iter().enumerate() {
        all += w;
        if (s as i64 - centre).abs() >= obs {
            hit += w;
        }
    }
    hit as f64 / all as f64
}

/// Test from precomputed midranks of the pooled sample; `in_a[i]` marks
/// membership of the first group. `tie_term` is `sum(t^3 - t)` over tie
/// groups.
fn rank_sum_from_ranks(ranks: &[f64], in_a: &[bool], tie_term: f64, exact: bool) -> RankSumResult {
    let n = ranks.len();
    let n_a = in_a.iter().filter(|&&b| b).count();
    let n_b = n - n_a;
    let r_a: f64 = ranks.iter().zip(in_a).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    let u = r_a - (n_a * (n_a + 1)) as f64 / 2.0;
    if exact {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let p = exact_p(&doubled, n_a, (2.0 * r_a).round() as u64);
        return RankSumResult { u, p, exact: true };
    }
    let (na, nb, nf) = (n_a as f64, n_b as f64, n as f64);
    let mu = na * nb / 2.0;
    let var = na * nb / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    RankSumResult { u, p, exact: false }
}

fn tie_term(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        out += t * t * t - t;
        i = j + 1;
    }
    out
}

/// Two-sided Wilcoxon rank-sum test with midranks for ties. Exact
/// enumeration when the pooled size is at most [`EXACT_MAX_N`], otherwise
/// the normal approximation with tie and continuity corrections.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    rank_sum_test(a, b, a.len() + b.len() <= EXACT_MAX_N)
}

/// [`wilcoxon_rank_sum`] forced onto the normal approximation.
pub fn wilcoxon_rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    rank_sum_test(a, b, false)
}

fn rank_sum_test(a: &[f64], b: &[f64], exact: bool) -> Result<RankSumResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("rank-sum test needs two non-empty groups".into()));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rank-sum input {v}")));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let in_a: Vec<bool> = (0..pooled.len()).map(|i| i < a.len()).collect();
    Ok(rank_sum_from_ranks(&ranks, &in_a, tie_term(&pooled), exact))
}

/// Benjamini-Hochberg adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        out[i] = running;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneStat {
    pub gene: usize,
    pub name: String,
    pub u: f64,
    /// Raw, or BH-adjusted within the class when requested.
    pub p: f64,
    /// Mean in the class minus mean in the rest.
    pub effect: f64,
    pub fraction_expressing: f64,
    pub mean_expression: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDge {
    pub class: usize,
    pub n_spots: usize,
    /// Up-regulated genes (positive effect) first, each part sorted by
    /// ascending p, then descending effect, then gene index.
    pub genes: Vec<GeneStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgeResult {
    pub classes: Vec<ClassDge>,
}

/// One-vs-rest rank-sum test of every gene for every group present in
/// `groups` (`(spot, class)` pairs). Expression must be normalized.
pub fn rank_genes_groups(ds: &Dataset, groups: &[(usize, usize)], bh: bool) -> Result<DgeResult> {
    let c = ds.n_classes();
    let mut present: Vec<usize> = groups.iter().map(|g| g.1).collect();
    present.sort_unstable();
    present.dedup();
    if let Some(&bad) = present.iter().find(|&&k| k >= c) {
        return Err(Error::Invalid(format!("group {bad} >= class count {c}")));
    }
    if present.len() < 2 {
        return Err(Error::Data(format!(
            "differential expression needs at least two groups, found {}",
            present.len()
        )));
    }
    let n = groups.len();
    let mut per_class: Vec<Vec<GeneStat>> = vec![Vec::new(); present.len()];
    let members: Vec<Vec<bool>> = present
        .iter()
        .map(|&k| groups.iter().map(|g| g.1 == k).collect())
        .collect();
    let mut values = vec![0.0; n];
    for (j, name) in ds.panel.names().iter().enumerate() {
        for (v, &(spot, _)) in values.iter_mut().zip(groups) {
            *v = ds.spots[spot].expr[j];
        }
        let ranks = midranks(&values);
        let ties = tie_term(&values);
        for (ci, in_a) in members.iter().enumerate() {
            let test = rank_sum_from_ranks(&ranks, in_a, ties, n <= EXACT_MAX_N);
            let (mut s_in, mut s_out, mut n_in, mut expressing) = (0.0, 0.0, 0usize, 0usize);
            for (&v, &m) in values.iter().zip(in_a) {
                if m {
                    s_in += v;
                    n_in += 1;
                    expressing += usize::from(v > 0.0);
                } else {
                    s_out += v;
                }
            }
            let mean_in = s_in / n_in as f64;
            per_class[ci].push(GeneStat {
                gene: j,
                name: name.clone(),
                u: test.u,
                p: test.p,
                effect: mean_in - s_out / (n - n_in) as f64,
                fraction_expressing: expressing as f64 / n_in as f64,
                mean_expression: mean_in,
            });
        }
    }
    let classes = present
        .iter()
        .zip(per_class)
        .zip(&members)
        .map(|((&class, mut genes), m)| {
            if bh {
                let adj = benjamini_hochberg(&genes.iter().map(|g| g.p).collect::<Vec<_>>());
                genes.iter_mut().zip(adj).for_each(|(g, p)| g.p = p);
            }
            genes.sort_by(|a, b| {
                (b.effect > 0.0)
                    .cmp(&(a.effect > 0.0))
                    .then(a.p.total_cmp(&b.p))
                    .then(b.effect.total_cmp(&a.effect))
                    .then(a.gene.cmp(&b.gene))
            });
            ClassDge {
                class,
                n_spots: m.iter().filter(|&&b| b).count(),
                genes,
            }
        })
        .collect();
    Ok(DgeResult { classes })
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_g(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `spot_id, x, y, truth, predicted, confidence` for every prediction.
pub fn write_prediction_map(ds: &Dataset, preds: &[Prediction], path: &Path) -> Result<()> {
    let mut out = String::from("spot_id\tx\ty\ttruth\tpredicted\tconfidence\n");
    for p in preds {
        let s = &ds.spots[p.spot];
        let truth = p.truth.map_or("", |t| ds.class_names[t].as_str());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{truth}\t{}\t{}",
            s.spot_id,
            fmt_g(s.x),
            fmt_g(s.y),
            ds.class_names[p.pred],
            fmt_g(p.confidence)
        );
    }
    write(path, out)
}

/// `class, gene, p, fraction_expressing, mean_expression` for the top
/// `top_n` genes of each class.
pub fn write_dotplot(ds: &Dataset, dge: &DgeResult, top_n: usize, path: &Path) -> Result<()> {
    let mut out = String::from("class\tgene\tp\tfraction_expressing\tmean_expression\n");
    for cd in &dge.classes {
        for g in cd.genes.iter().take(top_n) {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                ds.class_names[cd.class],
                g.name,
                fmt_g(g.p),
                fmt_g(g.fraction_expressing),
                fmt_g(g.mean_expression)
            );
        }
    }
    write(path, out)
}

/// Writes `prediction_map.tsv` and `dge_dotplot.tsv` into `dir`.
pub fn emit_reports(
    ds: &Dataset,
    preds: &[Prediction],
    dge: &DgeResult,
    top_n: usize,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_prediction_map(ds, preds, &dir.join("prediction_map.tsv"))?;
    write_dotplot(ds, dge, top_n, &dir.join("dge_dotplot.tsv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(spot: usize, pred: usize, confidence: f64) -> Prediction {
        Prediction {
            spot,
            truth: None,
            pred,
            confidence,
            probs: vec![],
        }
    }

    #[test]
    fn confidence_threshold_is_inclusive() {
        let p = [pred(0, 0, 0.96), pred(1, 1, 0.95), pred(2, 0, 0.94)];
        assert_eq!(select_high_confidence(&p, 0.95, 2).unwrap(), [(0, 0), (1, 1)]);
        assert!(select_high_confidence(&p, 0.0, 2).is_err());
    }

    #[test]
    fn wilcoxon_fixtures() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 1.0 / 3.0).abs() < 1e-15);
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p, 1.0);
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
    }

    #[test]
    fn large_sample_uses_normal_path() {
        let a: Vec<f64> = (0..15).map(f64::from).collect();
        let b: Vec<f64> = (10..25).map(f64::from).collect();
        let r = wilcoxon_rank_sum(&a, &b).unwrap();
        assert!(!r.exact && r.p > 0.0 && r.p < 0.01);
    }

    #[test]
    fn all_tied_large_sample_has_p_one() {
        let r = wilcoxon_rank_sum(&[2.0; 15], &[2.0; 15]).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn bh_hand_values() {
        // sorted: 0.01*4/1, 0.03*4/2, 0.04*4/3, 0.5*4/4 then running minimum from the top
        let adj = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.5]);
        let expect = [0.04, 0.16 / 3.0, 0.16 / 3.0, 0.5];
        for (a, e) in adj.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{adj:?}");
        }
    }

    #[test]
    fn fmt_g_matches_printf() {
        assert_eq!(fmt_g(0.0), "0");
        assert_eq!(fmt_g(1.0), "1");
        assert_eq!(fmt_g(0.123456789), "0.123457");
        assert_eq!(fmt_g(123456.7), "123457");
        assert_eq!(fmt_g(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g(0.0001), "0.0001");
        assert_eq!(fmt_g(0.00001234), "1.234e-05");
        assert_eq!(fmt_g(-2.5), "-2.5");
        assert_eq!(fmt_g(1e-300), "1e-300");
    }
}
