//! Output token inventories for fine-tuning.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Marks the start of a word in subword pieces.
pub const WORD_BOUNDARY: char = '▁';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Character,
    Subword,
}

/// Dense id ↔ token table. Ids 0..4 are `<pad>`, `<s>`, `</s>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub kind: UnitKind,
    tokens: Vec<String>,
    /// Unigram log-probabilities of subword pieces, aligned with `tokens`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    scores: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_parts(kind: UnitKind, tokens: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("token {t:?} appears twice in the vocabulary")));
            }
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        Ok(Self {
            kind,
            tokens,
            scores,
            index,
        })
    }

    /// Every distinct character of the transcripts, in code point order.
    pub fn characters<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = transcripts.into_iter().flat_map(str::chars).collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(chars.into_iter().map(String::from))
            .collect();
        Self::from_parts(UnitKind::Character, tokens, Vec::new()).expect("distinct tokens")
    }

    /// Reads a precomputed unigram table: one `piece\tlogprob` per line.
    pub fn subword_table(text: &str) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut scores = vec![0.0; SPECIALS.len()];
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (piece, score) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("subword table line {}: expected piece\\tlogprob", n + 1)))?;
            if SPECIALS.contains(&piece) {
                continue;
            }
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("subword table line {}: bad log-probability", n + 1)))?;
            tokens.push(piece.to_string());
            scores.push(score);
        }
        Self::from_parts(UnitKind::Subword, tokens, scores)
    }

    pub fn load_subword_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::subword_table(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            UnitKind::Character => text
                .chars()
                .map(|c| self.id(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK))
                .collect(),
            UnitKind::Subword => text.split_whitespace().flat_map(|w| self.segment(w)).collect(),
        }
    }

    /// Highest-scoring segmentation of one word into pieces (Viterbi over the
    /// unigram scores). Characters no piece covers become `<unk>`.
    fn segment(&self, word: &str) -> Vec<usize> {
        let text: Vec<char> = std::iter::once(WORD_BOUNDARY).chain(word.chars()).collect();
        let n = text.len();
        let unk_score = self.scores.iter().cloned().fold(0.0, f64::min) - 10.0;
        let mut best = vec![(f64::NEG_INFINITY, 0usize, UNK); n + 1];
        best[0].0 = 0.0;
        for end in 1..=n {
            for start in 0..end {
                if best[start].0 == f64::NEG_INFINITY {
                    continue;
                }
                let piece: String = text[start..end].iter().collect();
                let cand = match self.id(&piece) {
                    Some(id) if id >= SPECIALS.len() => Some((self.scores[id], id)),
                    _ if end - start == 1 => Some((unk_score, UNK)),
                    _ => None,
                };
                if let Some((s, id)) = cand {
                    let total = best[start].0 + s;
                    if total > best[end].0 {
                        best[end] = (total, start, id);
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut end = n;
        while end > 0 {
            let (_, start, id) = best[end];
            out.push(id);
            end = start;
        }
        out.reverse();
        out
    }

    /// Text of `ids`, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let body: String = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect();
        match self.kind {
            UnitKind::Character => body,
            UnitKind::Subword => body.replace(WORD_BOUNDARY, " ").trim().to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vocab =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("vocabulary: {e}")))?;
        Self::from_parts(raw.kind, raw.tokens, raw.scores)
    }
}
