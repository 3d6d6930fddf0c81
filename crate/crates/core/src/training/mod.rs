//! Class-weighted training with AdamW, validation-based checkpoint
//! selection, evaluation and checkpoint I/O.

mod adamw;
mod checkpoint;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::data::{align_to_panel, preprocess_expression, Dataset, ExprState, GenePanel, PathwayDb, Split};
use crate::error::{Error, Result};
use crate::fusion::{Ablation, ModelConfig, Network, SpotView};
use crate::metrics::{argmax, balanced_accuracy, compute_metrics, confusion_matrix, MetricsBundle};
use crate::pathway::select_pathways;
use crate::seed::{substream, substream_seed};
use crate::tme_graph::{build_graphs, MicroenvGraph};

pub use adamw::AdamW;
pub use checkpoint::{load_checkpoint, save_checkpoint, PARAMS_BIN, PARAMS_JSON};

const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pathway_count: usize,
    pub top_frac: f64,
    pub overlap_threshold: f64,
    pub neighbors: usize,
    pub edge_eps: f64,
    pub literal_softmax: bool,
    pub token_attention: bool,
    pub init_std: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 60,
            batch: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pathway_count: crate::pathway::DEFAULT_PATHWAY_COUNT,
            top_frac: crate::pathway::DEFAULT_TOP_FRAC,
            overlap_threshold: crate::pathway::DEFAULT_OVERLAP_THRESHOLD,
            neighbors: crate::tme_graph::DEFAULT_NEIGHBORS,
            edge_eps: crate::tme_graph::DEFAULT_EDGE_EPS,
            literal_softmax: false,
            token_attention: false,
            init_std: crate::fusion::INIT_STD,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("AdamW needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.pathway_count == 0 || !(self.top_frac > 0.0 && self.top_frac <= 1.0) {
            return bad("pathway_count must be >= 1 and top_frac in (0, 1]");
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return bad("overlap_threshold must be in (0, 1]");
        }
        if self.neighbors == 0 || !(self.edge_eps > 0.0) {
            return bad("neighbors must be >= 1 and edge_eps > 0");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0");
        }
        self.ablation.validate()
    }

    pub fn model_config(&self, classes: usize, genes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            genes,
            pathway_count: self.pathway_count,
            top_frac: self.top_frac,
            literal_softmax: self.literal_softmax,
            token_attention: self.token_attention,
            init_std: self.init_std,
            ablation: self.ablation,
        }
    }
}

/// `W_i = N / (C * N_i)` with the per-class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    pub n: usize,
}

pub fn class_weights(labels: &[usize], c: usize) -> Result<ClassWeights> {
    let mut counts = vec![0; c];
    for &l in labels {
        if l >= c {
            return Err(Error::Invalid(format!("label {l} >= class count {c}")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {k} has no training samples")));
    }
    let n = labels.len();
    Ok(ClassWeights {
        weights: counts.iter().map(|&ni| n as f64 / (c * ni) as f64).collect(),
        counts,
        n,
    })
}

/// `-W[label] * ln softmax(logits)[label]`, via log-sum-exp.
pub fn weighted_ce(logits: &[f64], label: usize, weights: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    -weights[label] * (logits[label] - lse)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(skip)]
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bal_acc: f64,
}

/// A trained network with everything needed to score new data.
#[derive(Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamSet,
    pub panel: GenePanel,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl Model {
    /// Puts raw counts on the model's gene panel and log-normalizes them.
    pub fn prepare(&self, ds: &Dataset) -> Result<Dataset> {
        match ds.expr_state {
            ExprState::RawCounts => align_to_panel(ds.clone(), &self.panel),
            ExprState::LogNormalized if ds.panel == self.panel => Ok(ds.clone()),
            ExprState::LogNormalized => Err(Error::Data(
                "normalized input must already use the model's gene panel".into(),
            )),
        }
    }

    /// Class probabilities for `idx`, in order, with dropout off.
    pub fn predict_proba(&self, view: SpotView, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_CHUNK) {
            let mut tape = Tape::inference(&self.params);
            let logits = self.net.forward(&mut tape, view, chunk)?;
            let p = tape.softmax(logits);
            let pv = tape.value(p);
            for r in 0..pv.rows() {
                out.push(pv.row(r).to_vec());
            }
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

fn labeled(ds: &Dataset, split: Split) -> Vec<usize> {
    ds.split_indices(split)
        .into_iter()
        .filter(|&i| ds.spots[i].label.is_some())
        .collect()
}

/// Trains on the train split and keeps the epoch with the best validation
/// balanced accuracy (earliest on ties). Raw counts are preprocessed first.
pub fn train(ds: &Dataset, db: Option<&PathwayDb>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = match ds.expr_state {
        ExprState::RawCounts => preprocess_expression(ds.clone())?.0,
        ExprState::LogNormalized => ds.clone(),
    };
    let c = ds.n_classes();
    let clinical = if cfg.ablation.pathways.clinic() {
        let db = db.ok_or_else(|| Error::Config("clinical pathways enabled but no gene-set file given".into()))?;
        let m = select_pathways(db, &ds.panel, cfg.overlap_threshold)?;
        info!("selected {} of {} pathways", m.k(), db.len());
        Some(m)
    } else {
        None
    };
    let graphs = build_graphs(&ds, cfg.neighbors, cfg.edge_eps)?;
    let train_idx = labeled(&ds, Split::Train);
    let val_idx = labeled(&ds, Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data(format!(
            "need labeled train and val spots, got {} and {}",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let cw = class_weights(&ds.labels(&train_idx)?, c)?;
    let val_labels = ds.labels(&val_idx)?;

    let mut params = ParamSet::new();
    let net = Network::new(
        cfg.model_config(c, ds.panel.d()),
        clinical,
        &mut params,
        &mut substream(cfg.seed, "init"),
    )?;
    let mut model = Model {
        net,
        params,
        panel: ds.panel.clone(),
        class_names: ds.class_names.clone(),
        config: cfg.clone(),
        best_epoch: 0,
    };
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut shuffle = substream(cfg.seed, "shuffle");
    let dropout_seed = substream_seed(cfg.seed, "dropout");
    let view = SpotView { ds: &ds, graphs: &graphs };

    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            let labels = ds.labels(batch)?;
            let loss = {
                let mut tape = Tape::new(&model.params, crate::autodiff::Mode::Train)
                    .with_dropout(dropout_seed, opt.steps());
                let logits = model.net.forward(&mut tape, view, batch)?;
                let loss = tape.weighted_cross_entropy(logits, &labels, &cw.weights)?;
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, step: step + 1, loss: lv });
                }
                tape.backward(loss)?;
                lv
            };
            opt.step(&mut model.params);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let probs = model.predict_proba(view, &val_idx)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let val_bal_acc = balanced_accuracy(&confusion_matrix(&val_labels, &pred, c)?)?;
        debug!("epoch {epoch}: train loss {train_loss:.5}, val balanced accuracy {val_bal_acc:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_bal_acc,
        });
        if best.as_ref().map_or(true, |(b, _)| val_bal_acc > *b) {
            best = Some((val_bal_acc, model.params.values()));
            model.best_epoch = epoch;
        }
    }
    let (acc, values) = best.expect("at least one epoch");
    model.params.load_values(&values)?;
    info!("kept epoch {} (val balanced accuracy {acc:.4})", model.best_epoch);
    Ok(TrainOutcome { model, history })
}

/// One scored spot.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub spot: usize,
    pub truth: Option<usize>,
    pub pred: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
}

pub struct Evaluation {
    /// The prepared (normalized, panel-aligned) data the predictions index.
    pub data: Dataset,
    pub predictions: Vec<Prediction>,
    /// Metrics over the labeled predictions, if there are any.
    pub metrics: Option<MetricsBundle>,
}

/// Scores the spots of `split` (all spots when `None`) with dropout off.
pub fn evaluate(model: &Model, ds: &Dataset, split: Option<Split>) -> Result<Evaluation> {
    let data = model.prepare(ds)?;
    let graphs: Vec<MicroenvGraph> = build_graphs(&data, model.config.neighbors, model.config.edge_eps)?;
    let idx: Vec<usize> = match split {
        Some(s) => data.split_indices(s),
        None => (0..data.spots.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::Data(format!(
            "no spots to evaluate in split {}",
            split.map_or("all", Split::name)
        )));
    }
    let has_labels = idx.iter().any(|&i| data.spots[i].label.is_some());
    if has_labels && data.class_names != model.class_names {
        return Err(Error::Data(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            data.class_names, model.class_names
        )));
    }
    let probs = model.predict_proba(SpotView { ds: &data, graphs: &graphs }, &idx)?;
    let predictions: Vec<Prediction> = idx
        .iter()
        .zip(probs)
        .map(|(&i, p)| {
            let pred = argmax(&p);
            Prediction {
                spot: i,
                truth: data.spots[i].label,
                pred,
                confidence: p[pred],
                probs: p,
            }
        })
        .collect();
    let scored: Vec<&Prediction> = predictions.iter().filter(|p| p.truth.is_some()).collect();
    let metrics = if scored.is_empty() {
        None
    } else {
        let truth: Vec<usize> = scored.iter().map(|p| p.truth.unwrap()).collect();
        let prob: Vec<Vec<f64>> = scored.iter().map(|p| p.probs.clone()).collect();
        Some(compute_metrics(&truth, &prob, model.class_names.len())?)
    };
    Ok(Evaluation {
        data,
        predictions,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_fixtures() {
        assert_eq!(class_weights(&[0, 1].repeat(50), 2).unwrap().weights, [1.0, 1.0]);
        let w = class_weights(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2], 3).unwrap().weights;
        assert!((w[0] - 0.6667).abs() < 1e-4 && w[1] == 1.0 && w[2] == 2.0);
        assert_eq!(class_weights(&[0, 0, 0], 1).unwrap().weights, [1.0]);
        let err = class_weights(&[0, 0, 2], 3).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn weighted_ce_fixtures() {
        assert!((weighted_ce(&[0.0, 0.0], 0, &[1.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((weighted_ce(&[0.0, 0.0], 1, &[1.0, 2.0]) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(weighted_ce(&[800.0, -800.0], 0, &[1.0, 1.0]) < 1e-300);
        assert!(weighted_ce(&[-800.0, 800.0], 0, &[1.0, 1.0]).is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { top_frac: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.1, "bogus": 1}"#);
        assert!(parsed.is_err());
    }
}
