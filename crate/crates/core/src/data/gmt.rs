use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Named gene sets in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathwayDb {
    pathways: Vec<(String, BTreeSet<String>)>,
}

impl PathwayDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pathway. Names must be unique and the gene set non-empty.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        genes: impl IntoIterator<Item = String>,
    ) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Data(format!("duplicate pathway name {name}")));
        }
        let genes: BTreeSet<String> = genes.into_iter().collect();
        if genes.is_empty() {
            return Err(Error::Data(format!("pathway {name} has no genes")));
        }
        self.pathways.push((name, genes));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.pathways.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.pathways.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.pathways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty()
    }

    /// Parses GMT text: `name <TAB> description <TAB> gene...` per line.
    /// Blank lines are skipped; `path` only labels errors.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut db = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected name, description and at least one gene, got {} fields", fields.len()),
                ));
            }
            let genes = fields[2..]
                .iter()
                .map(|g| g.trim())
                .filter(|g| !g.is_empty())
                .map(str::to_string);
            let name = fields[0].trim();
            if db.get(name).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate pathway name {name}")));
            }
            db.insert(name, genes)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(db)
    }

    /// GMT text with an empty description column. Genes are written in
    /// sorted order.
    pub fn to_gmt_string(&self) -> String {
        let mut out = String::new();
        for (name, genes) in &self.pathways {
            let _ = write!(out, "{name}\t");
            for g in genes {
                let _ = write!(out, "\t{g}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_gmt(path: impl AsRef<Path>) -> Result<PathwayDb> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PathwayDb::parse_str(&text, path)
}

pub fn write_gmt(db: &PathwayDb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, db.to_gmt_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PathwayDb> {
        PathwayDb::parse_str(s, Path::new("test.gmt"))
    }

    #[test]
    fn parses_genes_and_drops_description() {
        let db = parse("PW1\tdesc\tTP53\tBRCA1\n").unwrap();
        let g = db.get("PW1").unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.contains("TP53") && g.contains("BRCA1"));
        assert!(!g.contains("desc"));
    }

    #[test]
    fn duplicate_genes_collapse() {
        let db = parse("PW2\tdesc\tTP53\tTP53\n").unwrap();
        assert_eq!(db.get("PW2").unwrap().len(), 1);
    }

    #[test]
    fn line_without_genes_is_error_with_line_number() {
        let err = parse("PW1\td\tA\nPW3\tdesc\n").unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn duplicate_pathway_name_is_error() {
        assert!(parse("P\td\tA\nP\td\tB\n").is_err());
    }

    #[test]
    fn order_follows_file() {
        let db = parse("B\t\tX\nA\t\tY\n").unwrap();
        let names: Vec<_> = db.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["B", "A"]);
    }
}
