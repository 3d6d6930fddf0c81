//! Planted-signal surrogate for paired morphology + spatial expression data.
//!
//! Each sample is a square grid of spots split into contiguous class regions
//! (Voronoi cells of one seed point per class). Morphology is a per-class
//! prototype plus Gaussian noise; expression is Poisson counts in which each
//! class's marker genes are multiplied by `marker_fold`; markers are never
//! among the weakly expressed genes. Markers are grouped
//! into class pathways that appear in the emitted gene-set database next to
//! background pathways of unrelated genes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, ExprState, GenePanel, PathwayDb, SpotRecord, Split, MORPH_DIM};
use crate::error::{Error, Result};
use crate::seed::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub spots: usize,
    pub genes: usize,
    pub pathways: usize,
    pub samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub markers_per_class: usize,
    /// Per-dimension standard deviation of class prototype offsets.
    pub morph_signal: f64,
    /// Per-dimension standard deviation of spot-level morphology noise.
    pub morph_noise: f64,
    /// Per-dimension standard deviation of a per-sample morphology shift.
    pub sample_shift: f64,
    /// Mean library size (total counts per spot).
    pub depth: f64,
    pub marker_fold: f64,
    /// Fraction of each class's markers placed in its planted pathways.
    pub pathway_coverage: f64,
    /// Genes that are never expressed.
    pub zero_genes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            spots: 2000,
            genes: 500,
            pathways: 20,
            samples: 7,
            val_samples: 2,
            test_samples: 2,
            markers_per_class: 10,
            morph_signal: 0.08,
            morph_noise: 1.0,
            sample_shift: 0.0,
            depth: 1500.0,
            marker_fold: 1.6,
            pathway_coverage: 1.0,
            zero_genes: 0,
            seed: 0,
        }
    }
}

/// What the generator planted, for checking recovery downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// Marker gene names per class.
    pub markers: Vec<Vec<String>>,
    /// Pathway names whose members are the class's markers.
    pub class_pathways: Vec<Vec<String>>,
    /// Noise-free morphology vector per class.
    pub prototypes: Vec<Vec<f64>>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("infeasible synthetic config: {m}")));
        let c = self.classes;
        if c < 2 {
            return bad(format!("classes = {c} < 2"));
        }
        if self.spots < 9 * c {
            return bad(format!("spots = {} < 9 * classes", self.spots));
        }
        if self.pathways < c {
            return bad(format!("pathways = {} < classes", self.pathways));
        }
        if self.markers_per_class == 0 {
            return bad("markers_per_class must be >= 1".into());
        }
        if self.genes < c * self.markers_per_class + self.zero_genes + 1 {
            return bad(format!(
                "genes = {} cannot hold {} markers per class plus {} zero genes",
                self.genes, self.markers_per_class, self.zero_genes
            ));
        }
        if self.samples < self.val_samples + self.test_samples + 1 || self.val_samples == 0 || self.test_samples == 0 {
            return bad("need at least one train, one val and one test sample".into());
        }
        if self.spots / self.samples < 3 * c {
            return bad(format!("fewer than {} spots per sample", 3 * c));
        }
        for (name, v) in [
            ("morph_signal", self.morph_signal),
            ("morph_noise", self.morph_noise),
            ("sample_shift", self.sample_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.pathway_coverage > 0.0 && self.pathway_coverage <= 1.0) {
            return bad("pathway_coverage must be in (0, 1]".into());
        }
        if !(self.depth > 0.0 && self.marker_fold > 0.0) {
            return bad("depth and marker_fold must be > 0".into());
        }
        Ok(())
    }
}

fn voronoi_layout<R: Rng>(rng: &mut R, n: usize, classes: usize) -> Result<(Vec<(f64, f64)>, Vec<usize>)> {
    let w = (n as f64).sqrt().ceil() as usize;
    let h = n.div_ceil(w);
    let pos: Vec<(f64, f64)> = (0..n).map(|i| ((i % w) as f64, (i / w) as f64)).collect();
    let min_count = (n / (4 * classes)).max(1);
    for _ in 0..1000 {
        let seeds: Vec<(f64, f64)> = (0..classes)
            .map(|_| (rng.gen::<f64>() * w as f64, rng.gen::<f64>() * h as f64))
            .collect();
        let labels: Vec<usize> = pos
            .iter()
            .map(|&(x, y)| {
                (0..classes)
                    .min_by(|&a, &b| {
                        let da = (x - seeds[a].0).powi(2) + (y - seeds[a].1).powi(2);
                        let db = (x - seeds[b].0).powi(2) + (y - seeds[b].1).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap()
            })
            .collect();
        let mut counts = vec![0; classes];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.iter().all(|&k| k >= min_count) {
            return Ok((pos, labels));
        }
    }
    Err(Error::Config("could not place class regions; use more spots per sample".into()))
}

/// Generates a dataset with raw counts, its gene-set database and the
/// planted truth. Output is a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, PathwayDb, PlantedTruth)> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "data");
    let c = cfg.classes;

    let gene_names: Vec<String> = (0..cfg.genes).map(|j| format!("G{j:04}")).collect();
    let mut order: Vec<usize> = (0..cfg.genes).collect();
    order.shuffle(&mut rng);
    let zero: BTreeSet<usize> = order[..cfg.zero_genes].iter().copied().collect();
    let mut next = cfg.zero_genes;
    let marker_idx: Vec<Vec<usize>> = (0..c)
        .map(|_| {
            let m = order[next..next + cfg.markers_per_class].to_vec();
            next += cfg.markers_per_class;
            m
        })
        .collect();
    let background: Vec<usize> = order[next..].to_vec();

    // gene-set database
    let covered = ((cfg.pathway_coverage * cfg.markers_per_class as f64).ceil() as usize).max(1);
    let per_class = (cfg.pathways / (2 * c)).clamp(1, covered);
    let mut planted: Vec<(usize, Vec<usize>)> = Vec::new();
    for (cls, markers) in marker_idx.iter().enumerate() {
        for k in 0..per_class {
            let genes = markers[..covered].iter().skip(k).step_by(per_class).copied().collect();
            planted.push((cls, genes));
        }
    }
    let n_background = cfg.pathways.saturating_sub(planted.len());
    let mut sets: Vec<(Option<usize>, Vec<String>)> = planted
        .into_iter()
        .map(|(cls, g)| (Some(cls), g.iter().map(|&j| gene_names[j].clone()).collect()))
        .collect();
    let mut ghost = 0;
    for _ in 0..n_background {
        let size = rng.gen_range(8..=30).min(background.len()).max(1);
        let mut genes: Vec<String> = background
            .choose_multiple(&mut rng, size)
            .map(|&j| gene_names[j].clone())
            .collect();
        // some sets are only partly measured and fail the overlap filter
        if rng.gen::<f64>() < 0.3 {
            for _ in 0..(size / 4).max(1) {
                genes.push(format!("NOTMEASURED{ghost:04}"));
                ghost += 1;
            }
        }
        sets.push((None, genes));
    }
    sets.shuffle(&mut rng);
    let mut db = PathwayDb::new();
    let mut class_pathways = vec![Vec::new(); c];
    for (i, (cls, genes)) in sets.into_iter().enumerate() {
        let name = format!("PW{i:03}");
        if let Some(cls) = cls {
            class_pathways[cls].push(name.clone());
        }
        db.insert(name, genes)?;
    }

    // morphology prototypes
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let base: Vec<f64> = (0..MORPH_DIM).map(|_| std_normal.sample(&mut rng)).collect();
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            base.iter()
                .map(|b| b + cfg.morph_signal * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();

    // expression base proportions
    let mut rates: Vec<f64> = (0..cfg.genes)
        .map(|j| if zero.contains(&j) { 0.0 } else { (0.8 * std_normal.sample(&mut rng)).exp() })
        .collect();
    for &j in marker_idx.iter().flatten() {
        rates[j] = rates[j].max(1.0);
    }
    let total: f64 = rates.iter().sum();
    rates.iter_mut().for_each(|r| *r /= total);
    let mut fold = vec![vec![1.0; cfg.genes]; c];
    for (cls, markers) in marker_idx.iter().enumerate() {
        for &j in markers {
            fold[cls][j] = cfg.marker_fold;
        }
    }

    // samples and splits
    let sample_ids: Vec<String> = (1..=cfg.samples).map(|s| format!("S{s}")).collect();
    let mut shuffled = sample_ids.clone();
    shuffled.shuffle(&mut rng);
    let mut splits = BTreeMap::new();
    for (i, s) in shuffled.iter().enumerate() {
        let split = if i < cfg.test_samples {
            Split::Test
        } else if i < cfg.test_samples + cfg.val_samples {
            Split::Val
        } else {
            Split::Train
        };
        splits.insert(s.clone(), split);
    }

    let mut spots = Vec::with_capacity(cfg.spots);
    for (si, sample) in sample_ids.iter().enumerate() {
        let n_s = cfg.spots / cfg.samples + usize::from(si < cfg.spots % cfg.samples);
        let (pos, labels) = voronoi_layout(&mut rng, n_s, c)?;
        let shift: Vec<f64> = (0..MORPH_DIM)
            .map(|_| cfg.sample_shift * std_normal.sample(&mut rng))
            .collect();
        for (i, (&(x, y), &label)) in pos.iter().zip(&labels).enumerate() {
            let morph = prototypes[label]
                .iter()
                .zip(&shift)
                .map(|(p, s)| {
                    let v = p + s + cfg.morph_noise * std_normal.sample(&mut rng);
                    (v * 1e6).round() / 1e6
                })
                .collect();
            let library = cfg.depth * (0.2 * std_normal.sample(&mut rng)).exp();
            let expr = rates
                .iter()
                .zip(&fold[label])
                .map(|(&r, &f)| {
                    let lambda = library * r * f;
                    if lambda > 0.0 {
                        Poisson::new(lambda).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            spots.push(SpotRecord {
                spot_id: format!("{sample}_{i:04}"),
                sample_id: sample.clone(),
                x,
                y,
                morph,
                expr,
                label: Some(label),
            });
        }
    }

    let ds = Dataset {
        panel: GenePanel::new(gene_names.clone())?,
        spots,
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
        splits,
        expr_state: ExprState::RawCounts,
    };
    ds.validate()?;
    let truth = PlantedTruth {
        markers: marker_idx
            .iter()
            .map(|m| m.iter().map(|&j| gene_names[j].clone()).collect())
            .collect(),
        class_pathways,
        prototypes,
    };
    Ok((ds, db, truth))
}
