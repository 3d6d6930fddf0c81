use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Builder, CrossAttention, Gate, LateGate, MlpEncoder, DIM};
use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::data::{Dataset, MORPH_DIM};
use crate::error::{Error, Result};
use crate::pathway::{ClinicalPathwayMask, LearnablePathwayLayer};
use crate::tme_graph::{gcn_forward, GcnParams, MicroenvGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageMode {
    None,
    Seq,
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathwayMode {
    None,
    Clinic,
    Learnable,
    Both,
}

impl PathwayMode {
    pub fn clinic(self) -> bool {
        matches!(self, PathwayMode::Clinic | PathwayMode::Both)
    }

    pub fn learnable(self) -> bool {
        matches!(self, PathwayMode::Learnable | PathwayMode::Both)
    }
}

/// Which entities feed the late gate. Disabled entities are replaced by
/// zeros and their parameters frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub image: ImageMode,
    pub pathways: PathwayMode,
    pub st: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        image: ImageMode::Graph,
        pathways: PathwayMode::Both,
        st: true,
    };

    /// The named rows of the ablation table, weakest first.
    pub const ROWS: [(&'static str, Ablation); 7] = [
        ("seq-image", Ablation { image: ImageMode::Seq, pathways: PathwayMode::None, st: false }),
        ("st-only", Ablation { image: ImageMode::None, pathways: PathwayMode::None, st: true }),
        ("seq-image+st", Ablation { image: ImageMode::Seq, pathways: PathwayMode::None, st: true }),
        ("graph+st", Ablation { image: ImageMode::Graph, pathways: PathwayMode::None, st: true }),
        ("graph+clinic+st", Ablation { image: ImageMode::Graph, pathways: PathwayMode::Clinic, st: true }),
        ("graph+learnable+st", Ablation { image: ImageMode::Graph, pathways: PathwayMode::Learnable, st: true }),
        ("full", Ablation::FULL),
    ];

    pub fn validate(&self) -> Result<()> {
        if self.image == ImageMode::None && self.pathways != PathwayMode::None {
            return Err(Error::Config(
                "pathway fusion needs the morphology stream; enable an image mode".into(),
            ));
        }
        if self.image == ImageMode::None && self.pathways == PathwayMode::None && !self.st {
            return Err(Error::Config("every entity is disabled".into()));
        }
        Ok(())
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ROWS
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, a)| *a)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ROWS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match Self::ROWS.iter().find(|(_, a)| a == self) {
            Some((n, _)) => f.write_str(n),
            None => write!(f, "{self:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub genes: usize,
    pub pathway_count: usize,
    pub top_frac: f64,
    pub literal_softmax: bool,
    pub token_attention: bool,
    pub init_std: f64,
    pub ablation: Ablation,
}

/// Read-only data a forward pass draws spot features from.
#[derive(Clone, Copy)]
pub struct SpotView<'a> {
    pub ds: &'a Dataset,
    pub graphs: &'a [MicroenvGraph],
}

fn gather_rows<'a>(idx: &[usize], width: usize, f: impl Fn(usize) -> &'a [f64]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(idx.len() * width);
    idx.iter().for_each(|&i| v.extend_from_slice(f(i)));
    Tensor::matrix(idx.len(), width, v)
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub clinical: Option<ClinicalPathwayMask>,
    pub gcn: GcnParams,
    pub morph_enc: MlpEncoder,
    pub clinic_enc: MlpEncoder,
    pub clinic_attn: CrossAttention,
    pub learnable: LearnablePathwayLayer,
    pub learn_enc: MlpEncoder,
    pub learn_attn: CrossAttention,
    pub branch_gate: Gate,
    pub st_enc: MlpEncoder,
    pub late: LateGate,
}

impl Network {
    /// Registers every parameter (disabled branches included, frozen) in
    /// `ps`, which must be empty.
    pub fn new<R: Rng>(
        cfg: ModelConfig,
        clinical: Option<ClinicalPathwayMask>,
        ps: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.ablation.validate()?;
        if cfg.classes < 2 || cfg.genes == 0 {
            return Err(Error::Config(format!(
                "model needs >= 2 classes and >= 1 gene, got {} and {}",
                cfg.classes, cfg.genes
            )));
        }
        if !ps.is_empty() {
            return Err(Error::Invalid("network parameters need an empty ParamSet".into()));
        }
        if let Some(m) = &clinical {
            if m.d != cfg.genes {
                return Err(Error::Config(format!(
                    "clinical mask indexes {} genes, model has {}",
                    m.d, cfg.genes
                )));
            }
        } else if cfg.ablation.pathways.clinic() {
            return Err(Error::Config("clinical pathways enabled but no pathway mask given".into()));
        }
        let k = clinical.as_ref().map_or(1, ClinicalPathwayMask::k);
        let std = cfg.init_std;
        let gcn = GcnParams::init(ps, "gcn", std, rng)?;
        let mut learnable = LearnablePathwayLayer::init(
            ps,
            "learnable.w",
            cfg.pathway_count,
            cfg.genes,
            cfg.top_frac,
            std,
            rng,
        )?;
        learnable.literal_softmax = cfg.literal_softmax;
        let mut b = Builder::new(ps, rng, std);
        let net = Self {
            gcn,
            morph_enc: MlpEncoder::new(&mut b, "morph_enc", MORPH_DIM)?,
            clinic_enc: MlpEncoder::new(&mut b, "clinic_enc", k)?,
            clinic_attn: CrossAttention::new(&mut b, "clinic_attn", cfg.token_attention)?,
            learnable,
            learn_enc: MlpEncoder::new(&mut b, "learn_enc", cfg.pathway_count)?,
            learn_attn: CrossAttention::new(&mut b, "learn_attn", cfg.token_attention)?,
            branch_gate: Gate::new(&mut b, "branch_gate", 2)?,
            st_enc: MlpEncoder::new(&mut b, "st_enc", cfg.genes)?,
            late: LateGate::new(&mut b, "late", cfg.classes)?,
            cfg,
            clinical,
        };
        for id in net.disabled_params() {
            ps.set_frozen(id, true);
        }
        Ok(net)
    }

    /// Parameters of switched-off branches.
    pub fn disabled_params(&self) -> Vec<ParamId> {
        let a = self.cfg.ablation;
        let mut out = Vec::new();
        if a.image == ImageMode::None {
            out.extend(self.gcn.ids());
        }
        if a.pathways == PathwayMode::None {
            out.extend(self.morph_enc.ids());
            out.extend(self.branch_gate.ids());
        }
        if !a.pathways.clinic() {
            out.extend(self.clinic_enc.ids());
            out.extend(self.clinic_attn.ids());
        }
        if !a.pathways.learnable() {
            out.push(self.learnable.w);
            out.extend(self.learn_enc.ids());
            out.extend(self.learn_attn.ids());
        }
        if !a.st {
            out.extend(self.st_enc.ids());
        }
        out
    }

    /// Logits `[idx.len(), classes]` for the spots `idx`.
    pub fn forward(&self, tape: &mut Tape, view: SpotView, idx: &[usize]) -> Result<Var> {
        let ds = view.ds;
        if idx.is_empty() {
            return Err(Error::Invalid("forward on an empty batch".into()));
        }
        if ds.panel.d() != self.cfg.genes {
            return Err(Error::Config(format!(
                "data has {} genes, model expects {}",
                ds.panel.d(),
                self.cfg.genes
            )));
        }
        let a = self.cfg.ablation;
        let b = idx.len();
        let zeros = |t: &mut Tape| t.input(Tensor::zeros(&[b, DIM]));

        let h = match a.image {
            ImageMode::None => zeros(tape),
            mode => {
                let graphs: Vec<&MicroenvGraph> = idx.iter().map(|&i| &view.graphs[i]).collect();
                gcn_forward(
                    tape,
                    &self.gcn,
                    &graphs,
                    |j| ds.spots[j].morph.as_slice(),
                    mode == ImageMode::Seq,
                )?
            }
        };
        let needs_expr = a.st || a.pathways != PathwayMode::None;
        let g = if needs_expr {
            Some(tape.input(gather_rows(idx, ds.panel.d(), |i| &ds.spots[i].expr)?))
        } else {
            None
        };
        let fused = if a.pathways == PathwayMode::None {
            zeros(tape)
        } else {
            let g = g.unwrap();
            let x = tape.input(gather_rows(idx, MORPH_DIM, |i| &ds.spots[i].morph)?);
            let x = self.morph_enc.encode(tape, x)?;
            let f1 = match &self.clinical {
                Some(mask) if a.pathways.clinic() => {
                    let z = mask.encode(tape, g)?;
                    let p = self.clinic_enc.encode(tape, z)?;
                    self.clinic_attn.fuse(tape, x, p)?
                }
                _ => zeros(tape),
            };
            let f2 = if a.pathways.learnable() {
                let z = self.learnable.encode(tape, g)?;
                let p = self.learn_enc.encode(tape, z)?;
                self.learn_attn.fuse(tape, x, p)?
            } else {
                zeros(tape)
            };
            self.branch_gate.pool(tape, &[f1, f2])?.0
        };
        let st = match g {
            Some(g) if a.st => self.st_enc.encode(tape, g)?,
            _ => zeros(tape),
        };
        self.late.classify(tape, h, fused, st)
    }
}
