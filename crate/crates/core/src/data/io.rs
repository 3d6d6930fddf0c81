use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, ExprState, GenePanel, SpotRecord, Split, MORPH_DIM};
use crate::error::{Error, Result};

/// Dataset manifest. File paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub spots_file: String,
    pub features_file: String,
    pub expression_file: String,
    pub sample_splits: BTreeMap<Split, Vec<String>>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_tsv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split('\t').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::parse(
                path,
                i + 2,
                format!("expected {} columns, found {}", header.len(), row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn parse_num(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("malformed number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite number {field:?}")));
    }
    Ok(v)
}

fn numeric_matrix(path: &Path, table: &Table) -> Result<Vec<Vec<f64>>> {
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|f| parse_num(path, i + 2, f)).collect())
        .collect()
}

/// Loads a dataset from a manifest and validates it. Expression values are
/// taken as raw counts.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |f: &str| -> PathBuf { base.join(f) };

    let spots_path = resolve(&manifest.spots_file);
    let spots = read_tsv(&spots_path)?;
    let want = ["spot_id", "sample_id", "x", "y", "label"];
    if spots.header != want {
        return Err(Error::parse(
            &spots_path,
            1,
            format!("header must be {want:?}, got {:?}", spots.header),
        ));
    }

    let feat_path = resolve(&manifest.features_file);
    let feats = read_tsv(&feat_path)?;
    if feats.header.len() != MORPH_DIM {
        return Err(Error::parse(
            &feat_path,
            1,
            format!("expected {MORPH_DIM} feature columns, found {}", feats.header.len()),
        ));
    }
    let expr_path = resolve(&manifest.expression_file);
    let expr = read_tsv(&expr_path)?;
    let n = spots.rows.len();
    for (p, t) in [(&feat_path, &feats), (&expr_path, &expr)] {
        if t.rows.len() != n {
            return Err(Error::Data(format!(
                "{}: {} rows but spots table has {n}",
                p.display(),
                t.rows.len()
            )));
        }
    }
    let panel = GenePanel::new(expr.header.clone())?;
    let feat_rows = numeric_matrix(&feat_path, &feats)?;
    let expr_rows = numeric_matrix(&expr_path, &expr)?;

    let class_index: HashMap<&str, usize> = manifest
        .class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut records = Vec::with_capacity(n);
    for (i, ((row, morph), ex)) in spots.rows.iter().zip(feat_rows).zip(expr_rows).enumerate() {
        let line = i + 2;
        let label = match row[4].trim() {
            "" => None,
            name => Some(*class_index.get(name).ok_or_else(|| {
                Error::parse(&spots_path, line, format!("label {name:?} not in class list"))
            })?),
        };
        records.push(SpotRecord {
            spot_id: row[0].clone(),
            sample_id: row[1].clone(),
            x: parse_num(&spots_path, line, &row[2])?,
            y: parse_num(&spots_path, line, &row[3])?,
            morph,
            expr: ex,
            label,
        });
    }

    let mut splits = BTreeMap::new();
    for (split, samples) in &manifest.sample_splits {
        for s in samples {
            if splits.insert(s.clone(), *split).is_some() {
                return Err(Error::Data(format!("sample {s} assigned to more than one split")));
            }
        }
    }
    let ds = Dataset {
        panel,
        spots: records,
        class_names: manifest.class_names.clone(),
        splits,
        expr_state: ExprState::RawCounts,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads several manifests and merges them, keeping only genes measured in
/// every panel (order of the first panel). Class lists must agree and sample
/// ids must be distinct.
pub fn load_datasets<P: AsRef<Path>>(manifests: &[P]) -> Result<Dataset> {
    let mut all = manifests
        .iter()
        .map(load_dataset)
        .collect::<Result<Vec<_>>>()?;
    if all.is_empty() {
        return Err(Error::Data("no manifests given".into()));
    }
    if all.len() == 1 {
        return Ok(all.pop().unwrap());
    }
    let common: Vec<String> = all[0]
        .panel
        .names()
        .iter()
        .filter(|g| all.iter().all(|d| d.panel.index_of(g).is_some()))
        .cloned()
        .collect();
    let panel = GenePanel::new(common)?;
    let mut merged = Dataset {
        panel: panel.clone(),
        spots: Vec::new(),
        class_names: all[0].class_names.clone(),
        splits: BTreeMap::new(),
        expr_state: ExprState::RawCounts,
    };
    for ds in all {
        if ds.class_names != merged.class_names {
            return Err(Error::Data("class lists differ between manifests".into()));
        }
        let cols: Vec<usize> = panel
            .names()
            .iter()
            .map(|g| ds.panel.index_of(g).unwrap())
            .collect();
        for (s, split) in ds.splits {
            if merged.splits.insert(s.clone(), split).is_some() {
                return Err(Error::Data(format!("sample {s} appears in more than one manifest")));
            }
        }
        for mut spot in ds.spots {
            spot.expr = cols.iter().map(|&c| spot.expr[c]).collect();
            merged.spots.push(spot);
        }
    }
    merged.validate()?;
    Ok(merged)
}

/// Writes `manifest.json`, `spots.tsv`, `features.tsv` and
/// `expression.tsv` into `dir`. Numbers use shortest round-trip formatting.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut sample_splits: BTreeMap<Split, Vec<String>> = BTreeMap::new();
    for (s, split) in &ds.splits {
        sample_splits.entry(*split).or_default().push(s.clone());
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        spots_file: "spots.tsv".into(),
        features_file: "features.tsv".into(),
        expression_file: "expression.tsv".into(),
        sample_splits,
    };

    let mut spots = String::from("spot_id\tsample_id\tx\ty\tlabel\n");
    let mut feats = (0..MORPH_DIM)
        .map(|i| format!("f{i}"))
        .collect::<Vec<_>>()
        .join("\t");
    feats.push('\n');
    let mut expr = ds.panel.names().join("\t");
    expr.push('\n');
    for s in &ds.spots {
        let label = s.label.map(|l| ds.class_names[l].as_str()).unwrap_or("");
        let _ = writeln!(spots, "{}\t{}\t{}\t{}\t{}", s.spot_id, s.sample_id, s.x, s.y, label);
        push_row(&mut feats, &s.morph);
        push_row(&mut expr, &s.expr);
    }

    let write = |name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write("manifest.json", &manifest_json)?;
    write("spots.tsv", &spots)?;
    write("features.tsv", &feats)?;
    write("expression.tsv", &expr)?;
    Ok(dir.join("manifest.json"))
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push('\t');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize, d: usize) -> Dataset {
        let spots = (0..n)
            .map(|i| SpotRecord {
                spot_id: format!("s{i}"),
                sample_id: if i < n / 2 { "A".into() } else { "B".into() },
                x: (i % 3) as f64,
                y: (i / 3) as f64,
                morph: (0..MORPH_DIM).map(|j| ((i * 7 + j) % 11) as f64 * 0.125).collect(),
                expr: (0..d).map(|j| ((i + j) % 4) as f64).collect(),
                label: Some(i % 2),
            })
            .collect();
        Dataset {
            panel: GenePanel::new((0..d).map(|j| format!("G{j}")).collect()).unwrap(),
            spots,
            class_names: vec!["tumor".into(), "stroma".into()],
            splits: [("A".to_string(), Split::Train), ("B".to_string(), Split::Test)].into(),
            expr_state: ExprState::RawCounts,
        }
    }

    #[test]
    fn round_trip_ten_spots() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(10, 4);
        let m = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&m).unwrap();
        assert_eq!(back.spots.len(), 10);
        assert_eq!(back.panel.d(), 4);
        assert_eq!(back.spots, ds.spots);
        assert_eq!(back.splits, ds.splits);
    }

    #[test]
    fn short_feature_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&fixture(4, 3), dir.path()).unwrap();
        let p = dir.path().join("features.tsv");
        let text = fs::read_to_string(&p).unwrap();
        let cut: String = text
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split('\t').collect();
                f.pop();
                f.join("\t") + "\n"
            })
            .collect();
        fs::write(&p, cut).unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("1023"), "{err}");
    }

    #[test]
    fn unknown_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&fixture(4, 3), dir.path()).unwrap();
        let p = dir.path().join("spots.tsv");
        let text = fs::read_to_string(&p).unwrap().replacen("tumor", "necrosis", 1);
        fs::write(&p, text).unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("necrosis") && err.contains("spots.tsv"), "{err}");
    }

    #[test]
    fn malformed_number_cites_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&fixture(4, 3), dir.path()).unwrap();
        let p = dir.path().join("expression.tsv");
        let mut lines: Vec<String> = fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
        lines[3] = lines[3].replacen('0', "x0", 1);
        fs::write(&p, lines.join("\n")).unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("expression.tsv:4"), "{err}");
    }

    #[test]
    fn row_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&fixture(4, 3), dir.path()).unwrap();
        let p = dir.path().join("expression.tsv");
        let text = fs::read_to_string(&p).unwrap();
        let trimmed: Vec<&str> = text.lines().take(3).collect();
        fs::write(&p, trimmed.join("\n")).unwrap();
        assert!(load_dataset(&m).is_err());
    }

    #[test]
    fn merging_intersects_panels() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = fixture(4, 4);
        let mut b = fixture(4, 3);
        b.splits = [("C".to_string(), Split::Val), ("D".to_string(), Split::Val)].into();
        for s in &mut b.spots {
            s.sample_id = if s.sample_id == "A" { "C".into() } else { "D".into() };
            s.expr.reverse();
        }
        b.panel = GenePanel::new(vec!["G2".into(), "G1".into(), "G0".into()]).unwrap();
        let m1 = write_dataset(&a, d1.path()).unwrap();
        let m2 = write_dataset(&b, d2.path()).unwrap();
        let merged = load_datasets(&[m1, m2]).unwrap();
        assert_eq!(merged.panel.names(), ["G0", "G1", "G2"]);
        assert_eq!(merged.spots.len(), 8);
        // gene columns follow names, not positions
        assert_eq!(merged.spots[4].expr, fixture(4, 3).spots[0].expr);
    }
}
