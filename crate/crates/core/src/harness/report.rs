//! Per-condition evaluation results and their TSV and JSON-lines forms.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::noise::NoiseCategory;
use super::scoring::{EditCounts, Unit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Audio only: the visual stream is zeroed.
    A,
    /// Audio and video.
    AV,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::A => "A",
            EvalMode::AV => "AV",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(EvalMode::A),
            "AV" | "av" => Ok(EvalMode::AV),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: EvalMode,
    /// `clean` or a noise label such as `babble@5dB`.
    pub condition: String,
    pub category: Option<NoiseCategory>,
    pub snr_db: Option<f64>,
    /// `WER` or `CER`.
    pub metric: String,
    pub rate: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
}

impl EvalRow {
    pub fn new(
        mode: EvalMode,
        condition: String,
        noise: Option<(NoiseCategory, f64)>,
        unit: Unit,
        counts: EditCounts,
    ) -> Result<Self> {
        let rate = counts
            .rate()
            .ok_or_else(|| Error::Input("reference corpus has no tokens".into()))?;
        Ok(Self {
            mode,
            condition,
            category: noise.map(|n| n.0),
            snr_db: noise.map(|n| n.1),
            metric: unit.metric().to_string(),
            rate,
            substitutions: counts.substitutions,
            deletions: counts.deletions,
            insertions: counts.insertions,
            n_ref: counts.n_ref,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

const TSV_HEADER: &str = "mode\tcondition\tmetric\trate\tS\tD\tI\tN_ref";

impl EvalReport {
    pub fn row(&self, mode: EvalMode, condition: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.condition == condition)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{TSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\n",
                r.mode, r.condition, r.metric, r.rate, r.substitutions, r.deletions, r.insertions, r.n_ref
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialise") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("report row: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Writes `report.tsv` and `report.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.tsv", self.to_tsv()), ("report.jsonl", self.to_jsonl())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialisations() {
        let counts = EditCounts {
            substitutions: 1,
            deletions: 0,
            insertions: 1,
            n_ref: 4,
        };
        let report = EvalReport {
            rows: vec![
                EvalRow::new(EvalMode::AV, "clean".into(), None, Unit::Char, counts).unwrap(),
                EvalRow::new(
                    EvalMode::A,
                    "music@5dB".into(),
                    Some((NoiseCategory::Music, 5.0)),
                    Unit::Word,
                    counts,
                )
                .unwrap(),
            ],
        };
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], TSV_HEADER);
        assert_eq!(lines[1], "AV\tclean\tCER\t0.500000\t1\t0\t1\t4");
        assert_eq!(EvalReport::from_jsonl(&report.to_jsonl()).unwrap(), report);
        assert_eq!(report.row(EvalMode::A, "music@5dB").unwrap().metric, "WER");
        assert!(EvalRow::new(EvalMode::A, "c".into(), None, Unit::Word, EditCounts::default()).is_err());
    }
}
