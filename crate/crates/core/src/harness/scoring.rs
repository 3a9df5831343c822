//! Levenshtein alignment counts and pooled corpus error rates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Substitutions, deletions and insertions of one alignment, plus the
/// reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference token; `None` for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.n_ref > 0).then(|| self.errors() as f64 / self.n_ref as f64)
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.n_ref += o.n_ref;
    }
}

/// Minimum-cost alignment of `hyp` against `reference` with unit costs.
///
/// Among equal-cost alignments the backtrace prefers, at every cell, a
/// diagonal move (match or substitution), then a deletion, then an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        n_ref: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    c.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

impl Unit {
    /// Whitespace-separated words, or every non-whitespace character.
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Unit::Word => text.split_whitespace().map(str::to_string).collect(),
            Unit::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    /// Name of the error rate in this unit.
    pub fn metric(self) -> &'static str {
        match self {
            Unit::Word => "WER",
            Unit::Char => "CER",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Word => "word",
            Unit::Char => "char",
        })
    }
}

impl FromStr for Unit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Unit::Word),
            "char" => Ok(Unit::Char),
            _ => Err(Error::Config(format!("unknown scoring unit {s:?}"))),
        }
    }
}

/// Counts pooled over every (reference, hypothesis) pair, so the corpus rate
/// is total errors over total reference tokens.
pub fn score_corpus<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    unit: Unit,
) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (r, h) in pairs {
        total.add(&edit_distance(&unit.tokenize(r), &unit.tokenize(h)));
    }
    if total.n_ref == 0 {
        return Err(Error::Input("reference corpus has no tokens".into()));
    }
    Ok(total)
}
