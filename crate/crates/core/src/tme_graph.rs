//! Per-spot microenvironment graphs and the star-graph GCN encoder.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Aggregation, ParamId, ParamSet, Tape, Tensor, Var};
use crate::data::{Dataset, MORPH_DIM};
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 8;
pub const DEFAULT_EDGE_EPS: f64 = 1e-6;
/// Width of the GCN output and of every hidden layer.
pub const GCN_DIM: usize = 512;
pub const SELF_WEIGHT: f64 = 1.0;

/// A center spot with its nearest same-sample neighbors and edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroenvGraph {
    pub center: usize,
    pub neighbors: Vec<usize>,
    pub edge_weights: Vec<f64>,
    /// Self-loop weight; [`SELF_WEIGHT`] for built graphs.
    pub self_weight: f64,
}

impl MicroenvGraph {
    /// Sum-normalized weights over the center (self-loop) and its
    /// neighbors, as `(spot, weight)` pairs sorted by spot index.
    pub fn normalized(&self) -> Vec<(usize, f64)> {
        let mut terms: Vec<(usize, f64)> = std::iter::once((self.center, self.self_weight))
            .chain(self.neighbors.iter().copied().zip(self.edge_weights.iter().copied()))
            .collect();
        terms.sort_by_key(|t| t.0);
        let total: f64 = terms.iter().map(|t| t.1).sum();
        for t in &mut terms {
            t.1 /= total;
        }
        terms
    }
}

fn nearest(ds: &Dataset, center: usize, pool: &[usize], k: usize) -> Vec<usize> {
    let c = &ds.spots[center];
    let mut cand: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&j| j != center)
        .map(|&j| {
            let s = &ds.spots[j];
            ((s.x - c.x).powi(2) + (s.y - c.y).powi(2), j)
        })
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(k);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// The `k` nearest spots to `center` in the same sample by Euclidean
/// distance on (x, y), ties broken by ascending spot index.
pub fn find_neighbors(ds: &Dataset, center: usize, k: usize) -> Result<Vec<usize>> {
    let sample = &ds.spots[center].sample_id;
    let pool: Vec<usize> = (0..ds.spots.len())
        .filter(|&j| &ds.spots[j].sample_id == sample)
        .collect();
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "sample {sample} has a single spot; spot {} has no microenvironment",
            ds.spots[center].spot_id
        )));
    }
    Ok(nearest(ds, center, &pool, k))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `e_i = (1 / (MSE(x_c, x_i) + eps) + 1 / (MSE(g_c, g_i) + eps)) / 2`.
pub fn compute_edge_weights(
    x_c: &[f64],
    x_nbrs: &[&[f64]],
    g_c: &[f64],
    g_nbrs: &[&[f64]],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("edge eps must be > 0, got {eps}")));
    }
    if x_nbrs.len() != g_nbrs.len() {
        return Err(Error::Invalid(format!(
            "{} morphology neighbors but {} expression neighbors",
            x_nbrs.len(),
            g_nbrs.len()
        )));
    }
    x_nbrs
        .iter()
        .zip(g_nbrs)
        .map(|(x, g)| {
            if x.len() != x_c.len() || g.len() != g_c.len() || x_c.is_empty() || g_c.is_empty() {
                return Err(Error::Invalid(format!(
                    "edge weight length mismatch: morphology {} vs {}, expression {} vs {}",
                    x_c.len(),
                    x.len(),
                    g_c.len(),
                    g.len()
                )));
            }
            Ok((1.0 / (mse(x_c, x) + eps) + 1.0 / (mse(g_c, g) + eps)) / 2.0)
        })
        .collect()
}

/// Builds one graph per spot. Expression should already be normalized.
pub fn build_graphs(ds: &Dataset, k: usize, eps: f64) -> Result<Vec<MicroenvGraph>> {
    if k == 0 {
        return Err(Error::Invalid("neighbor count must be >= 1".into()));
    }
    let mut pools: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.spots.iter().enumerate() {
        pools.entry(s.sample_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::with_capacity(ds.spots.len());
    for (i, s) in ds.spots.iter().enumerate() {
        let pool = &pools[s.sample_id.as_str()];
        if pool.len() < 2 {
            return Err(Error::Data(format!(
                "sample {} has a single spot; spot {} has no microenvironment",
                s.sample_id, s.spot_id
            )));
        }
        let neighbors = nearest(ds, i, pool, k);
        let xs: Vec<&[f64]> = neighbors.iter().map(|&j| ds.spots[j].morph.as_slice()).collect();
        let gs: Vec<&[f64]> = neighbors.iter().map(|&j| ds.spots[j].expr.as_slice()).collect();
        let edge_weights = compute_edge_weights(&s.morph, &xs, &s.expr, &gs, eps)?;
        out.push(MicroenvGraph {
            center: i,
            neighbors,
            edge_weights,
            self_weight: SELF_WEIGHT,
        });
    }
    Ok(out)
}

/// `sum_j ê_j * feat_j` over the center and its neighbors.
pub fn aggregate_features<'f>(g: &MicroenvGraph, feat: impl Fn(usize) -> &'f [f64]) -> Vec<f64> {
    let mut out = vec![0.0; feat(g.center).len()];
    for (j, w) in g.normalized() {
        for (o, v) in out.iter_mut().zip(feat(j)) {
            *o += w * v;
        }
    }
    out
}

/// Two-layer GCN, 1024 -> 512 -> 512.
#[derive(Clone, Copy, Debug)]
pub struct GcnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GcnParams {
    pub fn init<R: Rng>(ps: &mut ParamSet, prefix: &str, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: ps.add_normal(format!("{prefix}.w1"), &[MORPH_DIM, GCN_DIM], std, rng)?,
            b1: ps.add_const(format!("{prefix}.b1"), &[GCN_DIM], 0.0)?,
            w2: ps.add_normal(format!("{prefix}.w2"), &[GCN_DIM, GCN_DIM], std, rng)?,
            b2: ps.add_const(format!("{prefix}.b2"), &[GCN_DIM], 0.0)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Encodes each graph's center spot; returns `[graphs.len(), 512]`.
///
/// Edges point into the center. Layer 1 gives the center
/// `relu(W1 * sum_j ê_j x_j + b1)` and each neighbor `relu(W1 x_i + b1)`;
/// layer 2 re-aggregates those with the same ê. With `center_only` the
/// neighbors are dropped (ê = 1 on the center).
pub fn gcn_forward<'f>(
    tape: &mut Tape,
    p: &GcnParams,
    graphs: &[&MicroenvGraph],
    feat: impl Fn(usize) -> &'f [f64],
    center_only: bool,
) -> Result<Var> {
    if graphs.is_empty() {
        return Err(Error::Invalid("gcn_forward on an empty batch".into()));
    }
    let weights: Vec<Vec<(usize, f64)>> = graphs
        .iter()
        .map(|g| {
            if center_only {
                Ok(vec![(g.center, 1.0)])
            } else if g.neighbors.is_empty() {
                Err(Error::Invalid(format!("spot {} has no neighbors", g.center)))
            } else if !(g.self_weight > 0.0 && g.self_weight.is_finite()) {
                Err(Error::Invalid(format!("spot {}: self-loop weight {}", g.center, g.self_weight)))
            } else {
                Ok(g.normalized())
            }
        })
        .collect::<Result<_>>()?;

    let mut nodes: Vec<usize> = weights.iter().flatten().map(|t| t.0).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let local = |j: usize| nodes.binary_search(&j).unwrap();
    let mut x = Vec::with_capacity(nodes.len() * MORPH_DIM);
    for &j in &nodes {
        let f = feat(j);
        if f.len() != MORPH_DIM {
            return Err(Error::Shape {
                op: "gcn_forward",
                lhs: vec![f.len()],
                rhs: vec![MORPH_DIM],
            });
        }
        x.extend_from_slice(f);
    }
    let b = graphs.len();
    // rows 0..b: aggregated centers; rows b..: every node on its own
    let mut agg1 = Aggregation::default();
    agg1.rows.extend(weights.iter().map(|ws| ws.iter().map(|&(j, w)| (local(j), w)).collect()));
    agg1.rows.extend((0..nodes.len()).map(|u| vec![(u, 1.0)]));
    let agg2 = Aggregation {
        rows: weights
            .iter()
            .zip(graphs)
            .enumerate()
            .map(|(r, (ws, g))| {
                ws.iter()
                    .map(|&(j, w)| if j == g.center { (r, w) } else { (b + local(j), w) })
                    .collect()
            })
            .collect(),
    };

    let xv = tape.input(Tensor::matrix(nodes.len(), MORPH_DIM, x)?);
    let (w1, b1, w2, b2) = (tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2));
    let y = tape.matmul(xv, w1)?;
    let y = tape.add(y, b1)?;
    let z1 = tape.aggregate(y, Rc::new(agg1))?;
    let z1 = tape.relu(z1);
    let z2 = tape.aggregate(z1, Rc::new(agg2))?;
    let z2 = tape.matmul(z2, w2)?;
    let z2 = tape.add(z2, b2)?;
    Ok(tape.relu(z2))
}
