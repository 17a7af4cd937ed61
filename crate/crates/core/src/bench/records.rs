//! Result rows shared by every CLI command, and the mean-robustness score.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated cell. Clean evaluations use `attack = "clean"`; corruption
/// rows carry the corruption name in `attack` and a `severity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub attack: String,
    pub norm: String,
    pub strength: f64,
    pub severity: Option<u8>,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

pub const COLUMNS: [&str; 9] = ["model", "attack", "norm", "strength", "severity", "accuracy", "n", "seed", "wall_ms"];

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::invalid("RunRecord", format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        if self.n == 0 {
            return Err(Error::invalid("RunRecord", "example count must be > 0"));
        }
        Ok(())
    }

    /// Counts toward the mean-robustness score: an attack at positive strength.
    pub fn is_attack_cell(&self) -> bool {
        self.attack != "clean" && self.severity.is_none() && self.strength > 0.0
    }
}

pub fn write_csv<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(COLUMNS)?;
    for r in records {
        r.validate()?;
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::invalid("read_csv", format!("unexpected header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_json<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    serde_json::to_writer_pretty(w, records)?;
    Ok(())
}

pub fn read_json<R: Read>(r: R) -> Result<Vec<RunRecord>> {
    Ok(serde_json::from_reader(r)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

pub fn emit_results(records: &[RunRecord], path: &Path, format: Format) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let w = std::io::BufWriter::new(file);
    match format {
        Format::Csv => write_csv(records, w),
        Format::Json => write_json(records, w),
    }
}

pub fn load_results(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match Format::from_path(path) {
        Format::Csv => read_csv(file),
        Format::Json => read_json(file),
    }
}

/// Mean accuracy over distinct `(model, attack, norm, strength)` cells of
/// attack rows; repeated rows of one cell (e.g. seeds) are averaged first.
pub fn mean_robustness(records: &[RunRecord]) -> Result<f64> {
    let mut cells: BTreeMap<(String, String, String, u64), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_attack_cell()) {
        let e = cells
            .entry((r.model.clone(), r.attack.clone(), r.norm.clone(), r.strength.to_bits()))
            .or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    if cells.is_empty() {
        return Err(Error::invalid("mean_robustness", "no attack records to average"));
    }
    Ok(cells.values().map(|(s, k)| s / *k as f64).sum::<f64>() / cells.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(attack: &str, strength: f64, accuracy: f64) -> RunRecord {
        RunRecord {
            model: "ep".into(),
            attack: attack.into(),
            norm: "linf".into(),
            strength,
            severity: None,
            accuracy,
            n: 100,
            seed: 0,
            wall_ms: 5,
        }
    }

    #[test]
    fn mean_robustness_cases() {
        assert_eq!(mean_robustness(&[rec("pgd", 0.1, 0.5)]).unwrap(), 0.5);
        assert_eq!(mean_robustness(&[rec("pgd", 0.1, 0.4), rec("square", 0.1, 0.6)]).unwrap(), 0.5);
        let with_clean = [rec("clean", 0.0, 0.9), rec("pgd", 0.0, 0.9), rec("pgd", 0.05, 0.3)];
        assert_eq!(mean_robustness(&with_clean).unwrap(), 0.3);
        assert!(mean_robustness(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "model,attack,norm,strength,severity,accuracy,n,seed,wall_ms\n");
        let mut corr = rec("gaussian_noise", 0.0, 0.75);
        corr.severity = Some(3);
        corr.norm = String::new();
        let rows = vec![rec("pgd", 0.1, 1.0 / 3.0), corr];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
        let mut buf = Vec::new();
        write_json(&rows, &mut buf).unwrap();
        assert_eq!(read_json(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn names_with_commas_are_quoted() {
        let mut r = rec("pgd", 0.25, 0.5);
        r.model = "ep,seed=1".into();
        let mut buf = Vec::new();
        write_csv(&[r.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let fixture = "model,attack,norm,strength,severity,accuracy,n,seed,wall_ms\n\"ep,seed=1\",pgd,linf,0.25,,0.5,100,0,5\n";
        assert_eq!(text, fixture);
        assert_eq!(read_csv(fixture.as_bytes()).unwrap(), vec![r]);
    }

    #[test]
    fn invalid_rows_are_refused() {
        assert!(write_csv(&[rec("pgd", 0.1, 1.5)], Vec::new()).is_err());
        let mut r = rec("pgd", 0.1, 0.5);
        r.n = 0;
        assert!(r.validate().is_err());
    }
}
