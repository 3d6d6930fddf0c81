//! Finite-difference verification of every tape primitive and of the full
//! network loss on a small synthetic micro-batch.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_diff_check, Aggregation, Entries, FdReport, ParamId, ParamSet, Tape, Tensor, Var};
use crate::data::{preprocess_expression, synth_generate, Split, SynthConfig};
use crate::error::Result;
use crate::fusion::{Network, SpotView};
use crate::pathway::select_pathways;
use crate::seed::substream;
use crate::tme_graph::build_graphs;
use crate::training::{class_weights, TrainConfig};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;
pub const MICRO_BATCH: usize = 4;

fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, v).unwrap()
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output entry gets a distinct upstream gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let (r, c) = match shape.as_slice() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (1, 1),
    };
    let mut rng = substream(seed, "projection");
    let mut w = randn(&mut rng, r, c);
    if shape.len() == 1 {
        w = Tensor::vector(w.data().to_vec())?;
    } else if shape.is_empty() {
        w = Tensor::scalar(w.data()[0]);
    }
    let w = t.input(w);
    let prod = t.mul(y, w)?;
    Ok(t.sum(prod))
}

type Case = (&'static str, Vec<(usize, usize)>, Box<dyn Fn(&mut Tape, &[ParamId]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let heads = 4;
    vec![
        ("matmul", vec![(3, 4), (4, 5)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.matmul(a, b)
        })),
        ("transpose", vec![(3, 4)], Box::new(|t, p| {
            let a = t.param(p[0]);
            t.transpose(a)
        })),
        ("add_broadcast", vec![(3, 4), (1, 4)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.add(a, b)
        })),
        ("mul", vec![(3, 4), (3, 4)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.mul(a, b)
        })),
        ("scale", vec![(2, 3)], Box::new(|t, p| {
            let a = t.param(p[0]);
            Ok(t.scale(a, -1.7))
        })),
        ("relu", vec![(4, 5)], Box::new(|t, p| {
            let a = t.param(p[0]);
            Ok(t.relu(a))
        })),
        ("layer_norm", vec![(3, 6)], Box::new(|t, p| {
            let a = t.param(p[0]);
            Ok(t.layer_norm(a))
        })),
        ("softmax", vec![(3, 5)], Box::new(|t, p| {
            let a = t.param(p[0]);
            Ok(t.softmax(a))
        })),
        ("dropout_eval", vec![(3, 4)], Box::new(|t, p| {
            let a = t.param(p[0]);
            t.dropout(a, 0.5, 0)
        })),
        ("mse", vec![(3, 4), (3, 4)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.mse(a, b)
        })),
        ("mean", vec![(3, 4)], Box::new(|t, p| {
            let a = t.param(p[0]);
            Ok(t.mean(a))
        })),
        ("concat", vec![(2, 3), (2, 2)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.concat(&[a, b])
        })),
        ("concat_rows", vec![(2, 3), (1, 3)], Box::new(|t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.concat_rows(&[a, b])
        })),
        ("weighted_sum", vec![(3, 2), (3, 4), (3, 4)], Box::new(|t, p| {
            let w = t.param(p[0]);
            let w = t.softmax(w);
            let (a, b) = (t.param(p[1]), t.param(p[2]));
            t.weighted_sum(w, &[a, b])
        })),
        ("aggregate", vec![(3, 4)], Box::new(|t, p| {
            let a = t.param(p[0]);
            let agg = Rc::new(Aggregation {
                rows: vec![vec![(0, 0.5), (2, 1.5)], vec![(1, 1.0)], vec![(0, 0.25), (1, 0.25), (2, 0.5)]],
            });
            t.aggregate(a, agg)
        })),
        ("gather_scatter", vec![(2, 5)], Box::new(|t, p| {
            let a = t.param(p[0]);
            let idx = Rc::new(vec![vec![0, 3], vec![4, 1]]);
            let g = t.gather(a, idx.clone())?;
            let g = t.softmax(g);
            t.scatter(g, idx, 5)
        })),
        ("weighted_cross_entropy", vec![(4, 3)], Box::new(|t, p| {
            let a = t.param(p[0]);
            t.weighted_cross_entropy(a, &[0, 2, 1, 2], &[0.5, 1.0, 2.0])
        })),
        ("attention_single_key", vec![(2, 8), (2, 8), (2, 8)], Box::new(move |t, p| {
            let (q, k, v) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            let l = t.head_logits(q, k, heads, false)?;
            let a = t.softmax(l);
            t.head_mix(a, v, heads, false)
        })),
        ("attention_tokens", vec![(2, 8), (2, 8), (2, 8)], Box::new(move |t, p| {
            let (q, k, v) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
            let l = t.head_logits(q, k, heads, true)?;
            let a = t.softmax(l);
            t.head_mix(a, v, heads, true)
        })),
    ]
}

/// Checks every primitive on random inputs; returns one report per case.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
    let mut rng = substream(seed, "gradcheck");
    let mut out = Vec::new();
    for (ci, (name, shapes, f)) in cases().into_iter().enumerate() {
        let mut ps = ParamSet::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| ps.add(format!("{name}.{i}"), randn(&mut rng, r, c)))
            .collect::<Result<_>>()?;
        let proj_seed = seed.wrapping_add(ci as u64);
        let report = finite_diff_check(
            &mut ps,
            |t| {
                let y = f(t, &ids)?;
                project(t, y, proj_seed)
            },
            FD_STEP,
            &Entries::All,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

/// Finite-difference check of the weighted cross-entropy of the full network
/// on `MICRO_BATCH` training spots of a small synthetic dataset, dropout off.
/// `per_param` entries of every parameter tensor are perturbed.
pub fn check_full_model(seed: u64, per_param: usize) -> Result<FdReport> {
    let synth = SynthConfig {
        spots: 120,
        genes: 80,
        pathways: 8,
        samples: 4,
        val_samples: 1,
        test_samples: 1,
        markers_per_class: 4,
        seed,
        ..SynthConfig::default()
    };
    let (raw, db, _) = synth_generate(&synth)?;
    let (ds, _) = preprocess_expression(raw)?;
    let cfg = TrainConfig {
        pathway_count: 16,
        seed,
        ..TrainConfig::default()
    };
    let clinical = select_pathways(&db, &ds.panel, cfg.overlap_threshold)?;
    let graphs = build_graphs(&ds, cfg.neighbors, cfg.edge_eps)?;
    let train_idx = ds.split_indices(Split::Train);
    let weights = class_weights(&ds.labels(&train_idx)?, ds.n_classes())?.weights;
    let batch: Vec<usize> = train_idx.into_iter().take(MICRO_BATCH).collect();
    let labels = ds.labels(&batch)?;

    let mut ps = ParamSet::new();
    let net = Network::new(
        cfg.model_config(ds.n_classes(), ds.panel.d()),
        Some(clinical),
        &mut ps,
        &mut substream(seed, "init"),
    )?;
    let view = SpotView { ds: &ds, graphs: &graphs };
    finite_diff_check(
        &mut ps,
        |t| {
            let logits = net.forward(t, view, &batch)?;
            t.weighted_cross_entropy(logits, &labels, &weights)
        },
        FD_STEP,
        &Entries::Sample { per_param, seed },
    )
}
