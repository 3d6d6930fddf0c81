//! Clinical (database-driven) and learnable (top-k gated) pathway encoders.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::data::{GenePanel, PathwayDb};
use crate::error::{Error, Result};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.9;
pub const DEFAULT_PATHWAY_COUNT: usize = 200;
pub const DEFAULT_TOP_FRAC: f64 = 0.05;

/// Selected database pathways and their gene indices in the panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalPathwayMask {
    pub names: Vec<String>,
    pub indices: Vec<Vec<usize>>,
    pub d: usize,
}

impl ClinicalPathwayMask {
    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// Membership matrix `[d, k]`; `G * M` gives the per-pathway sums.
    pub fn membership(&self) -> Tensor {
        let k = self.k();
        let mut m = vec![0.0; self.d * k];
        for (j, idx) in self.indices.iter().enumerate() {
            for &g in idx {
                m[g * k + j] = 1.0;
            }
        }
        Tensor::matrix(self.d, k, m).expect("membership shape")
    }

    /// `[B, d] -> [B, k]` on the tape.
    pub fn encode(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        let m = tape.input(self.membership());
        tape.matmul(g, m)
    }
}

/// Fraction of the pathway's genes present in the panel.
pub fn overlap(genes: &BTreeSet<String>, panel: &GenePanel) -> f64 {
    let hit = genes.iter().filter(|g| panel.index_of(g).is_some()).count();
    hit as f64 / genes.len() as f64
}

/// Keeps pathways whose overlap is at least `threshold`, in database order.
pub fn select_pathways(
    db: &PathwayDb,
    panel: &GenePanel,
    threshold: f64,
) -> Result<ClinicalPathwayMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("overlap threshold {threshold} not in (0, 1]")));
    }
    let mut names = Vec::new();
    let mut indices = Vec::new();
    for (name, genes) in db.iter() {
        if overlap(genes, panel) >= threshold {
            let mut idx: Vec<usize> = genes.iter().filter_map(|g| panel.index_of(g)).collect();
            idx.sort_unstable();
            names.push(name.to_string());
            indices.push(idx);
        }
    }
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no pathway reaches overlap {threshold} with the {}-gene panel; try a lower --threshold",
            panel.d()
        )));
    }
    Ok(ClinicalPathwayMask {
        names,
        indices,
        d: panel.d(),
    })
}

/// `z_j = sum of g over pathway j's genes`.
pub fn clinical_encode(g: &[f64], mask: &ClinicalPathwayMask) -> Result<Vec<f64>> {
    if g.len() != mask.d {
        return Err(Error::Shape {
            op: "clinical_encode",
            lhs: vec![g.len()],
            rhs: vec![mask.d],
        });
    }
    Ok(mask.indices.iter().map(|idx| idx.iter().map(|&i| g[i]).sum()).collect())
}

/// `max(1, ceil(frac * d))`.
pub fn k_selected(frac: f64, d: usize) -> usize {
    // guard against 0.05 * 100 landing a hair above 5
    ((frac * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Indices of the `k` largest entries, ties by ascending index, returned in
/// ascending index order.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Trainable gene weights `W: [a, d]`; each row keeps its top `frac` genes.
#[derive(Clone, Copy, Debug)]
pub struct LearnablePathwayLayer {
    pub w: ParamId,
    pub a: usize,
    pub d: usize,
    pub frac: f64,
    /// Softmax over the whole masked row (zeros included) instead of over
    /// the selected genes only.
    pub literal_softmax: bool,
}

impl LearnablePathwayLayer {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        a: usize,
        d: usize,
        frac: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if a == 0 || !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Config(format!(
                "learnable pathways need a >= 1 and frac in (0, 1], got a = {a}, frac = {frac}"
            )));
        }
        Ok(Self {
            w: ps.add_normal(name, &[a, d], std, rng)?,
            a,
            d,
            frac,
            literal_softmax: false,
        })
    }

    fn selection(&self, w: &Tensor) -> Result<Rc<Vec<Vec<usize>>>> {
        if let Some(v) = w.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("learnable pathway weight {v}")));
        }
        let k = k_selected(self.frac, self.d);
        Ok(Rc::new((0..self.a).map(|i| top_k(w.row(i), k)).collect()))
    }

    /// Normalized gene weights `A: [a, d]`; the top-k mask is a constant.
    pub fn weights(&self, tape: &mut Tape) -> Result<Var> {
        let idx = self.selection(tape.params().value(self.w))?;
        let w = tape.param(self.w);
        let sel = tape.gather(w, idx.clone())?;
        if self.literal_softmax {
            let masked = tape.scatter(sel, idx, self.d)?;
            Ok(tape.softmax(masked))
        } else {
            let s = tape.softmax(sel);
            tape.scatter(s, idx, self.d)
        }
    }

    /// `[B, d] -> [B, a]`.
    pub fn encode(&self, tape: &mut Tape, g: Var) -> Result<Var> {
        let a = self.weights(tape)?;
        let at = tape.transpose(a)?;
        tape.matmul(g, at)
    }
}

/// Reference evaluation of the learnable encoder for one expression vector.
pub fn learnable_encode(g: &[f64], w: &Tensor, frac: f64, literal_softmax: bool) -> Result<Vec<f64>> {
    let d = w.cols();
    if g.len() != d {
        return Err(Error::Shape {
            op: "learnable_encode",
            lhs: vec![g.len()],
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(v) = w.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("learnable pathway weight {v}")));
    }
    let k = k_selected(frac, d);
    Ok((0..w.rows())
        .map(|i| {
            let row = w.row(i);
            let idx = top_k(row, k);
            if literal_softmax {
                let mut masked = vec![0.0; d];
                for &j in &idx {
                    masked[j] = row[j];
                }
                let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = masked.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().zip(g).map(|(e, g)| e / s * g).sum()
            } else {
                let max = idx.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = idx.iter().map(|&j| (row[j] - max).exp()).collect();
                let s: f64 = e.iter().sum();
                idx.iter().zip(&e).map(|(&j, e)| e / s * g[j]).sum()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Entries};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn panel(n: usize) -> GenePanel {
        GenePanel::new((0..n).map(|i| format!("G{i}")).collect()).unwrap()
    }

    fn db_with(present: usize, total: usize) -> PathwayDb {
        let mut db = PathwayDb::new();
        let genes = (0..total).map(|i| if i < present { format!("G{i}") } else { format!("X{i}") });
        db.insert("P", genes).unwrap();
        db
    }

    #[test]
    fn overlap_threshold_boundary() {
        let p = panel(20);
        assert!(select_pathways(&db_with(9, 10), &p, 0.9).is_ok());
        assert!(select_pathways(&db_with(8, 10), &p, 0.9).is_err());
        assert_eq!(select_pathways(&db_with(10, 10), &p, 0.9).unwrap().k(), 1);
    }

    #[test]
    fn selection_keeps_only_present_genes() {
        let m = select_pathways(&db_with(9, 10), &panel(20), 0.9).unwrap();
        assert_eq!(m.indices[0], (0..9).collect::<Vec<_>>());
        assert!(select_pathways(&db_with(9, 10), &panel(20), 0.0).is_err());
    }

    #[test]
    fn clinical_hand_sum() {
        let m = ClinicalPathwayMask {
            names: vec!["a".into()],
            indices: vec![vec![0, 2]],
            d: 4,
        };
        assert_eq!(clinical_encode(&[1.0, 2.0, 3.0, 4.0], &m).unwrap(), [4.0]);
        assert_eq!(clinical_encode(&[0.0; 4], &m).unwrap(), [0.0]);
        assert!(clinical_encode(&[0.0; 3], &m).is_err());
    }

    #[test]
    fn clinical_tape_matches_reference() {
        let m = ClinicalPathwayMask {
            names: vec!["a".into(), "b".into()],
            indices: vec![vec![0, 2], vec![1, 3]],
            d: 4,
        };
        let ps = ParamSet::new();
        let mut t = Tape::inference(&ps);
        let g = t.input(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = m.encode(&mut t, g).unwrap();
        assert_eq!(t.value(z).data(), [4.0, 6.0]);
    }

    #[test]
    fn k_selected_rounding() {
        assert_eq!(k_selected(0.05, 20), 1);
        assert_eq!(k_selected(0.05, 100), 5);
        assert_eq!(k_selected(0.05, 101), 6);
        assert_eq!(k_selected(0.05, 500), 25);
        assert_eq!(k_selected(0.001, 10), 1);
    }

    #[test]
    fn singleton_selection_picks_argmax() {
        let mut w = vec![0.0; 20];
        w[7] = 3.0;
        let w = Tensor::matrix(1, 20, w).unwrap();
        let g: Vec<f64> = (0..20).map(|i| i as f64 * 10.0).collect();
        assert_eq!(learnable_encode(&g, &w, 0.05, false).unwrap(), [70.0]);
    }

    #[test]
    fn uniform_row_takes_first_five() {
        let w = Tensor::matrix(1, 100, vec![0.3; 100]).unwrap();
        let g: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let z = learnable_encode(&g, &w, 0.05, false).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_reference_both_modes() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = LearnablePathwayLayer::init(&mut ps, "lp", 6, 40, 0.1, 1.0, &mut rng).unwrap();
        let g: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() * 3.0).collect();
        for literal in [false, true] {
            layer.literal_softmax = literal;
            let expect = learnable_encode(&g, ps.value(layer.w), 0.1, literal).unwrap();
            let mut t = Tape::inference(&ps);
            let gv = t.input(Tensor::matrix(1, 40, g.clone()).unwrap());
            let z = layer.encode(&mut t, gv).unwrap();
            assert_eq!(t.value(z).shape(), [1, 6]);
            for (a, b) in t.value(z).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_weight_is_error() {
        let w = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap().map(|_| f64::NAN);
        assert!(learnable_encode(&[1.0, 1.0], &w, 0.5, false).is_err());
    }

    #[test]
    fn fd_through_learnable_weights() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = LearnablePathwayLayer::init(&mut ps, "lp", 3, 30, 0.2, 1.0, &mut rng).unwrap();
        let g: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
        // only selected entries carry gradient; perturb those
        let k = k_selected(0.2, 30);
        let wv = ps.value(layer.w).clone();
        let entries: Vec<_> = (0..3)
            .flat_map(|i| top_k(wv.row(i), k).into_iter().map(move |j| (layer.w, i * 30 + j)))
            .collect();
        let r = finite_diff_check(
            &mut ps,
            |t| {
                let gv = t.input(Tensor::matrix(2, 30, g.clone()).unwrap());
                let z = layer.encode(t, gv)?;
                let z2 = t.mul(z, z)?;
                Ok(t.sum(z2))
            },
            1e-7,
            &Entries::Explicit(entries),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
