//! The `morphpath` command line.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given with `--config`, then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{rank_genes_groups, select_high_confidence, write_dotplot, write_prediction_map};
use crate::data::{load_datasets, parse_gmt, synth_generate, write_dataset, write_gmt, Dataset, PathwayDb, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::fusion::Ablation;
use crate::gradcheck::{check_full_model, check_primitives, MODEL_TOLERANCE};
use crate::metrics::MetricsReport;
use crate::training::{evaluate, load_checkpoint, save_checkpoint, train, Evaluation, TrainConfig};

/// Everything a subcommand may read from `--config`. Unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Vec<PathBuf>,
    pub gmt: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub tau: Option<f64>,
    pub top_n: Option<usize>,
    pub bh: bool,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// `table2` or a comma-separated list of row names.
    pub rows: Option<String>,
    pub seeds: usize,
    pub pathway_counts: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            rows: None,
            seeds: 5,
            pathway_counts: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn tau(&self) -> f64 {
        self.tau.unwrap_or(crate::analysis::DEFAULT_TAU)
    }

    fn top_n(&self) -> usize {
        self.top_n.unwrap_or(crate::analysis::DEFAULT_TOP_N)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("a checkpoint directory is required (--checkpoint)".into()))
    }

    fn dataset(&self) -> Result<Dataset> {
        if self.data.is_empty() {
            return Err(Error::Config("no dataset given (--data)".into()));
        }
        load_datasets(&self.data)
    }

    fn pathway_db(&self) -> Result<Option<PathwayDb>> {
        self.gmt.as_ref().map(parse_gmt).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if let Some(t) = self.tau {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("tau {t} not in (0, 1]")));
            }
        }
        if self.top_n == Some(0) {
            return Err(Error::Config("top_n must be >= 1".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.ablate.pathway_counts.contains(&0) {
            return Err(Error::Config("pathway counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "morphpath", version, about = "Multimodal tissue classification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with planted class signal
    Synth(Common),
    /// Train a model and write a checkpoint, history.json and metrics.json
    Train(Common),
    /// Score a labeled split; writes metrics.json and prediction_map.tsv
    Eval(Common),
    /// Score every spot of a (possibly unlabeled) dataset; writes predictions.tsv
    Predict(Common),
    /// Differential expression between high-confidence predicted classes
    Dge(Common),
    /// Ablation rows and learnable pathway count sweep over several seeds
    Ablate(Common),
    /// Finite-difference gradient check of the primitives and the full model
    Gradcheck(Common),
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (data, init, shuffle, dropout) [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest; repeat to merge several
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Gene-set file in GMT format
    #[arg(long)]
    pub gmt: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of learnable pathways [default: 200]
    #[arg(long)]
    pub pathway_count: Option<usize>,
    /// Ablation row: seq-image, st-only, seq-image+st, graph+st, graph+clinic+st, graph+learnable+st, full [default: full]
    #[arg(long)]
    pub ablation: Option<String>,
    /// Minimum pathway overlap with the gene panel [default: 0.9]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Training epochs [default: 60]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Split to evaluate: train, val, test or all [default: test]
    #[arg(long)]
    pub split: Option<String>,
    /// Minimum confidence for a prediction to enter DGE [default: 0.95]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Genes per class in the dot-plot table [default: 10]
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Report Benjamini-Hochberg adjusted p-values
    #[arg(long)]
    pub bh: bool,
    /// Ablation rows: table2 or a comma-separated list of row names
    #[arg(long)]
    pub rows: Option<String>,
    /// Number of seeds (0..seeds) for ablate [default: 5]
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated learnable pathway counts for the sweep, e.g. 50,100,200,400
    #[arg(long, value_delimiter = ',')]
    pub pathway_counts: Vec<usize>,
    /// Entries perturbed per parameter tensor in the full-model gradient check [default: 2]
    #[arg(long)]
    pub per_param: Option<usize>,
}

impl Common {
    /// Defaults, then `--config`, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            rc.train.seed = s;
            rc.synth.seed = s;
        }
        if self.out.is_some() {
            rc.out = self.out.clone();
        }
        if !self.data.is_empty() {
            rc.data = self.data.clone();
        }
        if self.gmt.is_some() {
            rc.gmt = self.gmt.clone();
        }
        if self.checkpoint.is_some() {
            rc.checkpoint = self.checkpoint.clone();
        }
        if let Some(a) = self.pathway_count {
            rc.train.pathway_count = a;
        }
        if let Some(a) = &self.ablation {
            rc.train.ablation = a.parse()?;
        }
        if let Some(t) = self.threshold {
            rc.train.overlap_threshold = t;
        }
        if let Some(e) = self.epochs {
            rc.train.epochs = e;
        }
        if self.tau.is_some() {
            rc.tau = self.tau;
        }
        if self.top_n.is_some() {
            rc.top_n = self.top_n;
        }
        rc.bh |= self.bh;
        if self.rows.is_some() {
            rc.ablate.rows = self.rows.clone();
        }
        if let Some(s) = self.seeds {
            rc.ablate.seeds = s;
        }
        if !self.pathway_counts.is_empty() {
            rc.ablate.pathway_counts = self.pathway_counts.clone();
        }
        rc.validate()?;
        Ok(rc)
    }

    fn split(&self, default: Option<Split>) -> Result<Option<Split>> {
        match self.split.as_deref() {
            None => Ok(default),
            Some("all") => Ok(None),
            Some("train") => Ok(Some(Split::Train)),
            Some("val") => Ok(Some(Split::Val)),
            Some("test") => Ok(Some(Split::Test)),
            Some(other) => Err(Error::Config(format!(
                "unknown split {other:?}; expected train, val, test or all"
            ))),
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(rc: &RunConfig) -> Result<()> {
    let out = rc.out()?;
    let (ds, db, truth) = synth_generate(&rc.synth)?;
    write_dataset(&ds, out)?;
    write_gmt(&db, out.join("pathways.gmt"))?;
    write_json(&truth, &out.join("planted_truth.json"))?;
    info!("wrote {} spots to {}", ds.spots.len(), out.display());
    Ok(())
}

fn run_train(rc: &RunConfig) -> Result<()> {
    let out = rc.out()?;
    let ds = rc.dataset()?;
    let db = rc.pathway_db()?;
    let outcome = train(&ds, db.as_ref(), &rc.train)?;
    create_dir(out)?;
    save_checkpoint(&outcome.model, out)?;
    write_json(&outcome.history, &out.join("history.json"))?;
    let test_labeled = ds
        .split_indices(Split::Test)
        .iter()
        .any(|&i| ds.spots[i].label.is_some());
    if test_labeled {
        let ev = evaluate(&outcome.model, &ds, Some(Split::Test))?;
        let report = ev.metrics.expect("labeled test split").report;
        write_json(&report, &out.join("metrics.json"))?;
        print_report("test", &report);
    }
    Ok(())
}

fn print_report(label: &str, r: &MetricsReport) {
    println!(
        "{label}: bal_acc {:.4}  w_f1 {:.4}  auprc {:.4}  auroc {:.4}  mean {:.4}",
        r.bal_acc, r.w_f1, r.auprc, r.auroc, r.mean
    );
}

fn run_eval(rc: &RunConfig, split: Option<Split>) -> Result<()> {
    let out = rc.out()?;
    let model = load_checkpoint(rc.checkpoint()?)?;
    let ev = evaluate(&model, &rc.dataset()?, split)?;
    let bundle = ev
        .metrics
        .as_ref()
        .ok_or_else(|| Error::Data("evaluated spots carry no labels; use predict".into()))?;
    create_dir(out)?;
    write_json(&bundle.report, &out.join("metrics.json"))?;
    write_prediction_map(&ev.data, &ev.predictions, &out.join("prediction_map.tsv"))?;
    print_report(split.map_or("all", Split::name), &bundle.report);
    Ok(())
}

fn run_predict(rc: &RunConfig, split: Option<Split>) -> Result<()> {
    let out = rc.out()?;
    let model = load_checkpoint(rc.checkpoint()?)?;
    let ev = evaluate(&model, &rc.dataset()?, split)?;
    create_dir(out)?;
    let mut text = String::from("spot_id\tpredicted\tconfidence");
    for c in &model.class_names {
        let _ = write!(text, "\tp_{c}");
    }
    text.push('\n');
    for p in &ev.predictions {
        let _ = write!(
            text,
            "{}\t{}\t{}",
            ev.data.spots[p.spot].spot_id,
            model.class_names[p.pred],
            crate::analysis::fmt_g(p.confidence)
        );
        for v in &p.probs {
            let _ = write!(text, "\t{}", crate::analysis::fmt_g(*v));
        }
        text.push('\n');
    }
    let path = out.join("predictions.tsv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    info!("scored {} spots", ev.predictions.len());
    Ok(())
}

fn run_dge(rc: &RunConfig, split: Option<Split>) -> Result<()> {
    let out = rc.out()?;
    let model = load_checkpoint(rc.checkpoint()?)?;
    let Evaluation { data, predictions, .. } = evaluate(&model, &rc.dataset()?, split)?;
    let groups = select_high_confidence(&predictions, rc.tau(), model.class_names.len())?;
    info!("{} of {} spots pass confidence {}", groups.len(), predictions.len(), rc.tau());
    let dge = rank_genes_groups(&data, &groups, rc.bh)?;
    create_dir(out)?;
    write_dotplot(&data, &dge, rc.top_n(), &out.join("dge_dotplot.tsv"))?;
    Ok(())
}

/// One ablation configuration averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

fn average(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport::new(avg(|r| r.bal_acc), avg(|r| r.w_f1), avg(|r| r.auprc), avg(|r| r.auroc))
}

/// Trains `cfg` once and returns its test-split metrics.
pub fn train_and_test(ds: &Dataset, db: Option<&PathwayDb>, cfg: &TrainConfig) -> Result<MetricsReport> {
    let outcome = train(ds, db, cfg)?;
    let ev = evaluate(&outcome.model, ds, Some(Split::Test))?;
    ev.metrics
        .map(|m| m.report)
        .ok_or_else(|| Error::Data("test split has no labeled spots".into()))
}

/// The configurations requested by `rows` and `pathway_counts`.
pub fn ablation_plan(rows: Option<&str>, pathway_counts: &[usize], base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let mut plan = Vec::new();
    let names: Vec<String> = match rows {
        None if !pathway_counts.is_empty() => Vec::new(),
        None | Some("table2") => Ablation::ROWS.iter().map(|(n, _)| n.to_string()).collect(),
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    for name in names {
        let ablation: Ablation = name.parse()?;
        plan.push((name, TrainConfig { ablation, ..base.clone() }));
    }
    for &a in pathway_counts {
        plan.push((
            format!("full(a={a})"),
            TrainConfig {
                ablation: Ablation::FULL,
                pathway_count: a,
                ..base.clone()
            },
        ));
    }
    Ok(plan)
}

/// Runs every planned configuration for seeds `0..seeds`. With no dataset
/// given, each seed also draws its own synthetic dataset.
pub fn run_ablation(rc: &RunConfig) -> Result<Vec<AblationRow>> {
    let plan = ablation_plan(rc.ablate.rows.as_deref(), &rc.ablate.pathway_counts, &rc.train)?;
    let fixed = if rc.data.is_empty() {
        None
    } else {
        Some((rc.dataset()?, rc.pathway_db()?))
    };
    let mut per_row: Vec<Vec<MetricsReport>> = vec![Vec::new(); plan.len()];
    for seed in 0..rc.ablate.seeds as u64 {
        let generated;
        let (ds, db) = match &fixed {
            Some((ds, db)) => (ds, db.as_ref()),
            None => {
                let (ds, db, _) = synth_generate(&SynthConfig { seed, ..rc.synth.clone() })?;
                generated = (ds, db);
                (&generated.0, Some(&generated.1))
            }
        };
        for ((name, cfg), reports) in plan.iter().zip(per_row.iter_mut()) {
            let r = train_and_test(ds, db, &TrainConfig { seed, ..cfg.clone() })?;
            info!("seed {seed} {name}: mean {:.4}", r.mean);
            reports.push(r);
        }
    }
    Ok(plan
        .into_iter()
        .zip(per_row)
        .map(|((name, _), per_seed)| AblationRow {
            mean: average(&per_seed),
            name,
            per_seed,
        })
        .collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    use crate::analysis::fmt_g;
    let mut out = String::from("config\tseeds\tbal_acc\tw_f1\tauprc\tauroc\tmean\n");
    for r in rows {
        let m = &r.mean;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            r.per_seed.len(),
            fmt_g(m.bal_acc),
            fmt_g(m.w_f1),
            fmt_g(m.auprc),
            fmt_g(m.auroc),
            fmt_g(m.mean)
        );
    }
    out
}

fn run_ablate(rc: &RunConfig) -> Result<()> {
    let out = rc.out()?;
    let rows = run_ablation(rc)?;
    let table = ablation_table(&rows);
    create_dir(out)?;
    let path = out.join("ablation_summary.tsv");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(())
}

fn run_gradcheck(rc: &RunConfig, per_param: usize) -> Result<bool> {
    let mut ok = true;
    for (name, r) in check_primitives(rc.train.seed)? {
        println!("{name:<24} max rel error {:.3e} ({} entries)", r.max_rel_error, r.checked);
        ok &= r.max_rel_error < MODEL_TOLERANCE;
    }
    let r = check_full_model(rc.train.seed, per_param)?;
    println!("{:<24} max rel error {:.3e} ({} entries)", "full model", r.max_rel_error, r.checked);
    ok &= r.max_rel_error < MODEL_TOLERANCE;
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(c) => synth(&c.resolve()?).map(|_| true),
        Command::Train(c) => run_train(&c.resolve()?).map(|_| true),
        Command::Eval(c) => run_eval(&c.resolve()?, c.split(Some(Split::Test))?).map(|_| true),
        Command::Predict(c) => run_predict(&c.resolve()?, c.split(None)?).map(|_| true),
        Command::Dge(c) => run_dge(&c.resolve()?, c.split(Some(Split::Test))?).map(|_| true),
        Command::Ablate(c) => run_ablate(&c.resolve()?).map(|_| true),
        Command::Gradcheck(c) => run_gradcheck(&c.resolve()?, c.per_param.unwrap_or(2)),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded the tolerance");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"train": {"epochs": 7, "lr": 0.01}, "tau": 0.9}"#).unwrap();
        let c = Common {
            config: Some(path),
            epochs: Some(3),
            seed: Some(5),
            ..Default::default()
        };
        let rc = c.resolve().unwrap();
        assert_eq!(rc.train.epochs, 3);
        assert_eq!(rc.train.lr, 0.01);
        assert_eq!(rc.tau, Some(0.9));
        assert_eq!((rc.train.seed, rc.synth.seed), (5, 5));
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"train": {"epochs": 7}, "learning_rate": 1}"#).unwrap();
        let c = Common {
            config: Some(path),
            ..Default::default()
        };
        assert!(c.resolve().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for c in [
            Common { tau: Some(0.0), ..Default::default() },
            Common { epochs: Some(0), ..Default::default() },
            Common { ablation: Some("nope".into()), ..Default::default() },
            Common { seeds: Some(0), ..Default::default() },
        ] {
            assert!(c.resolve().is_err(), "{c:?}");
        }
    }

    #[test]
    fn plan_table2_and_sweep() {
        let base = TrainConfig::default();
        let plan = ablation_plan(Some("table2"), &[50, 100], &base).unwrap();
        assert_eq!(plan.len(), Ablation::ROWS.len() + 2);
        assert_eq!(plan.last().unwrap().1.pathway_count, 100);
        assert_eq!(ablation_plan(None, &[50], &base).unwrap().len(), 1);
        assert!(ablation_plan(Some("full,bogus"), &[], &base).is_err());
    }

    #[test]
    fn unknown_flag_is_an_error() {
        assert_eq!(run(["morphpath", "train", "--bogus"]), ExitCode::from(2));
        assert_eq!(run(["morphpath", "train"]), ExitCode::FAILURE);
    }

    #[test]
    fn help_lists_flags_with_defaults() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let help = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for flag in ["--config", "--seed", "--out", "--data", "--gmt", "--pathway-count", "--ablation", "--threshold", "--tau"] {
            assert!(help.contains(flag), "{flag}");
        }
        assert!(help.contains("[default: 0.95]"));
    }
}
