//! Pseudo-label phases: how many clusters each pre-training phase predicts and
//! which features are clustered to produce them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::kmeans::{kmeans_restarts, standardize_columns};

/// Cluster counts of the five pre-training phases.
pub const PAPER_CLUSTERS: [usize; 5] = [100, 100, 500, 1000, 2000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FeatureSource {
    /// MFCC-39 stacked to the video frame rate.
    Mfcc39,
    /// Output of encoder block `l` (1-based) of the previous phase's model.
    EncoderLayer(usize),
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mfcc39 => write!(f, "mfcc39"),
            Self::EncoderLayer(l) => write!(f, "encoder_layer:{l}"),
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mfcc39" {
            return Ok(Self::Mfcc39);
        }
        s.strip_prefix("encoder_layer:")
            .and_then(|l| l.parse().ok())
            .map(Self::EncoderLayer)
            .ok_or_else(|| Error::Config(format!("unknown feature source {s:?}")))
    }
}

impl From<FeatureSource> for String {
    fn from(s: FeatureSource) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for FeatureSource {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub clusters: usize,
    pub source: FeatureSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl PhaseSchedule {
    /// Phase 1 clusters MFCC-39; every later phase clusters encoder block `layer`.
    pub fn from_clusters(clusters: &[usize], layer: usize) -> Result<Self> {
        let phases = clusters
            .iter()
            .enumerate()
            .map(|(i, &k)| Phase {
                clusters: k,
                source: if i == 0 {
                    FeatureSource::Mfcc39
                } else {
                    FeatureSource::EncoderLayer(layer)
                },
            })
            .collect();
        let s = Self { phases };
        s.validate()?;
        Ok(s)
    }

    /// The five-phase schedule, clustering the middle block of a `blocks`-deep encoder.
    pub fn paper(blocks: usize) -> Self {
        Self::from_clusters(&PAPER_CLUSTERS, (blocks / 2).max(1)).expect("paper schedule is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("phase schedule is empty".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.clusters < 2 {
                return Err(Error::Config(format!(
                    "phase {} has {} clusters, need at least 2",
                    i + 1,
                    p.clusters
                )));
            }
            match (i, p.source) {
                (0, FeatureSource::EncoderLayer(_)) => {
                    return Err(Error::Config("phase 1 has no encoder to cluster".into()))
                }
                (_, FeatureSource::EncoderLayer(0)) => {
                    return Err(Error::Config("encoder layers are numbered from 1".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Phase `n`, counted from 1.
    pub fn phase(&self, n: usize) -> Result<Phase> {
        n.checked_sub(1)
            .and_then(|i| self.phases.get(i))
            .copied()
            .ok_or_else(|| {
                Error::Config(format!("phase {n} outside schedule of {}", self.phases.len()))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// One label sequence per utterance, aligned with its frames.
    pub labels: Vec<Vec<usize>>,
    pub centroids: Tensor,
    pub inertia: f64,
}

impl PseudoLabelSet {
    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }
}

/// Clusters the frames of every utterance jointly after standardising each
/// feature dimension over the whole corpus.
pub fn cluster_utterances(
    features: &[Tensor],
    k: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<PseudoLabelSet> {
    let f = features
        .first()
        .ok_or_else(|| Error::Input("no utterances to cluster".into()))?
        .last_dim();
    let mut data = Vec::new();
    let mut lens = Vec::with_capacity(features.len());
    for x in features {
        if x.ndim() != 2 || x.last_dim() != f {
            return Err(Error::Input(format!(
                "utterance features {:?} do not match width {f}",
                x.dims()
            )));
        }
        lens.push(x.rows());
        data.extend_from_slice(x.data());
    }
    let n = lens.iter().sum::<usize>();
    let all = standardize_columns(&Tensor::new([n, f], data)?);
    let r = kmeans_restarts(&all, k, max_iters, restarts, seed)?;
    let mut labels = Vec::with_capacity(lens.len());
    let mut at = 0;
    for len in lens {
        labels.push(r.labels[at..at + len].to_vec());
        at += len;
    }
    Ok(PseudoLabelSet {
        labels,
        centroids: r.centroids,
        inertia: r.inertia,
    })
}
