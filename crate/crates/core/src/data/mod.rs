//! Spot-level datasets: morphology features, expression, labels and splits.

mod gmt;
mod io;
mod preprocess;
mod synth;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gmt::{parse_gmt, write_gmt, PathwayDb};
pub use io::{load_dataset, load_datasets, write_dataset, Manifest};
pub use preprocess::{align_to_panel, preprocess_expression, PreprocessReport, TARGET_SUM};
pub use synth::{synth_generate, PlantedTruth, SynthConfig};

/// Width of the per-patch morphology feature vector.
pub const MORPH_DIM: usize = 1024;

/// Ordered, duplicate-free list of measured genes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenePanel {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl GenePanel {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("gene panel is empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate gene name {n}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, gene: &str) -> Option<usize> {
        self.index.get(gene).copied()
    }
}

/// One spatial spot.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub sample_id: String,
    pub x: f64,
    pub y: f64,
    pub morph: Vec<f64>,
    pub expr: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Whether `expr` holds raw counts or log-normalized values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExprState {
    RawCounts,
    LogNormalized,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub panel: GenePanel,
    pub spots: Vec<SpotRecord>,
    pub class_names: Vec<String>,
    /// Sample id to split.
    pub splits: BTreeMap<String, Split>,
    pub expr_state: ExprState,
}

impl Dataset {
    /// Validates every structural invariant: feature widths, finite
    /// coordinates, label range and split coverage.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("class list is empty".into()));
        }
        let d = self.panel.d();
        for (i, s) in self.spots.iter().enumerate() {
            if s.morph.len() != MORPH_DIM {
                return Err(Error::Data(format!(
                    "spot {} (row {}): morphology width {} != {MORPH_DIM}",
                    s.spot_id,
                    i + 1,
                    s.morph.len()
                )));
            }
            if s.expr.len() != d {
                return Err(Error::Data(format!(
                    "spot {} (row {}): expression width {} != {d}",
                    s.spot_id,
                    i + 1,
                    s.expr.len()
                )));
            }
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(Error::Data(format!("spot {}: non-finite coordinates", s.spot_id)));
            }
            if let Some(l) = s.label {
                if l >= self.class_names.len() {
                    return Err(Error::Data(format!("spot {}: label {l} out of range", s.spot_id)));
                }
            }
            if !self.splits.contains_key(&s.sample_id) {
                return Err(Error::Data(format!(
                    "spot {}: sample {} has no split assignment",
                    s.spot_id, s.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_of(&self, spot: usize) -> Split {
        self.splits[&self.spots[spot].sample_id]
    }

    /// Indices of spots in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.spots.len())
            .filter(|&i| self.split_of(i) == split)
            .collect()
    }

    /// Spot indices grouped by sample id, in dataset order within a sample.
    pub fn samples(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.spots.iter().enumerate() {
            out.entry(s.sample_id.as_str()).or_default().push(i);
        }
        out
    }

    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.spots[i]
                    .label
                    .ok_or_else(|| Error::Data(format!("spot {} is unlabeled", self.spots[i].spot_id)))
            })
            .collect()
    }
}
