//! The staged pipeline: featurize, cluster, pretrain, finetune, decode,
//! evaluate. Every stage reads and writes files under one output directory:
//!
//! ```text
//! config.resolved.toml
//! manifest.tsv
//! features/<id>.{audio,video,mfcc}.avht
//! labels/phase<n>/<id>.avht, centroids.avht, summary.json
//! pretrain/phase<n>/checkpoint/, metrics.jsonl
//! finetune/checkpoint/, vocab.json, metrics.jsonl
//! decode/hypotheses.tsv
//! eval/report.tsv, report.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::eval::{decode_corpus, run_eval, RawCorpus};
use super::report::{EvalMode, EvalReport};
use crate::corpus::{featurize, mfcc_features, read_samples, read_video, Manifest, Utterance};
use crate::error::{Error, Result};
use crate::fusion::Dropped;
use crate::model::{encoder_side_plan, full_decoder_plan, pretrain_head_plan, ModelConfig};
use crate::numerics::avht::{self, Dtype};
use crate::numerics::{checkpoint, ParamStore, Tensor};
use crate::objectives::phases::{cluster_utterances, FeatureSource, PseudoLabelSet};
use crate::objectives::train::{encoder_states, finetune, pretrain, MetricsRecord};
use crate::objectives::{UnitKind, Vocab};

/// Offsets that give every stage its own random stream.
#[derive(Debug, Clone, Copy)]
enum Stage {
    Init = 1,
    Cluster = 2,
    Pretrain = 3,
    Head = 4,
    Finetune = 5,
    Decoder = 6,
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Streams metrics records to a JSON-lines file.
struct MetricsLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        if r.step.is_multiple_of(50) {
            log::info!("step {} loss {:.4} lr {:.2e} acc {:.3}", r.step, r.loss, r.lr, r.masked_acc);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Serialize)]
struct LabelSummary {
    phase: usize,
    clusters: usize,
    source: String,
    frames: usize,
    inertia: f64,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Pipeline {
    /// Validates the configuration and records it, resolved, in the output directory.
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        ensure_dir(&out)?;
        write_file(&out.join("config.resolved.toml"), cfg.to_toml())?;
        Ok(Self { cfg, out })
    }

    fn seed(&self, stage: Stage, phase: usize) -> u64 {
        self.cfg
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(stage as u64 * 1000 + phase as u64)
    }

    fn model(&self) -> &ModelConfig {
        &self.cfg.model
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.tsv")
    }

    fn feature_path(&self, id: &str, kind: &str) -> PathBuf {
        self.out.join("features").join(format!("{id}.{kind}.avht"))
    }

    pub fn labels_dir(&self, phase: usize) -> PathBuf {
        self.out.join("labels").join(format!("phase{phase}"))
    }

    pub fn pretrain_dir(&self, phase: usize) -> PathBuf {
        self.out.join("pretrain").join(format!("phase{phase}"))
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.out.join("finetune")
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::read(self.manifest_path())
    }

    /// Extracts model-ready features and MFCC-39 clustering features for every
    /// utterance of `manifest`, and keeps a copy of the manifest.
    pub fn featurize(&self, manifest: &Path) -> Result<usize> {
        let m = Manifest::read(manifest)?;
        for e in &m.entries {
            let samples = read_samples(e)?;
            let u = featurize(&e.utt_id, &samples, &read_video(e)?, &e.transcript, self.model())?;
            let mfcc = mfcc_features(&samples, self.model(), u.len())?;
            ensure_dir(&self.out.join("features"))?;
            avht::write_tensor(self.feature_path(&u.id, "audio"), &u.audio, Dtype::F64)?;
            avht::write_tensor(self.feature_path(&u.id, "video"), &u.video, Dtype::F64)?;
            avht::write_tensor(self.feature_path(&u.id, "mfcc"), &mfcc, Dtype::F64)?;
        }
        m.write(self.manifest_path())?;
        log::info!("featurized {} utterances", m.entries.len());
        Ok(m.entries.len())
    }

    /// The featurized corpus, in manifest order.
    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        self.manifest()?
            .entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    id: e.utt_id.clone(),
                    audio: avht::read_tensor(self.feature_path(&e.utt_id, "audio"))?,
                    video: avht::read_tensor(self.feature_path(&e.utt_id, "video"))?,
                    transcript: e.transcript.clone(),
                })
            })
            .collect()
    }

    fn checkpoint_dir(&self, phase: usize) -> PathBuf {
        self.pretrain_dir(phase).join("checkpoint")
    }

    fn previous_checkpoint(&self, phase: usize, purpose: &str) -> Result<ParamStore> {
        let dir = self.checkpoint_dir(phase - 1);
        if !dir.join(checkpoint::MANIFEST).exists() {
            return Err(Error::Pipeline(format!(
                "phase {phase} {purpose} needs the phase {} checkpoint at {}",
                phase - 1,
                dir.display()
            )));
        }
        checkpoint::load(dir)
    }

    /// Assigns pseudo-labels for `phase` (1-based) and writes one label file
    /// per utterance plus the centroids.
    pub fn cluster(&self, phase: usize) -> Result<PseudoLabelSet> {
        let p = self.cfg.schedule()?.phase(phase)?;
        let ids: Vec<String> = self.manifest()?.entries.into_iter().map(|e| e.utt_id).collect();
        let features: Vec<Tensor> = match p.source {
            FeatureSource::Mfcc39 => ids
                .iter()
                .map(|id| avht::read_tensor(self.feature_path(id, "mfcc")))
                .collect::<Result<_>>()?,
            FeatureSource::EncoderLayer(layer) => {
                let store = self.previous_checkpoint(phase, "clustering")?;
                self.utterances()?
                    .iter()
                    .map(|u| {
                        let (_, layers) = encoder_states(&store, self.model(), u, Dropped::Neither)?;
                        layers.into_iter().nth(layer - 1).ok_or_else(|| {
                            Error::Config(format!("encoder has no block {layer}"))
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let set = cluster_utterances(
            &features,
            p.clusters,
            self.cfg.phases.kmeans_iters,
            self.cfg.phases.kmeans_restarts,
            self.seed(Stage::Cluster, phase),
        )?;
        let dir = self.labels_dir(phase);
        ensure_dir(&dir)?;
        for (id, labels) in ids.iter().zip(&set.labels) {
            let l: Vec<i32> = labels.iter().map(|&v| v as i32).collect();
            avht::write_labels(dir.join(format!("{id}.avht")), &l)?;
        }
        avht::write_tensor(dir.join("centroids.avht"), &set.centroids, Dtype::F64)?;
        let summary = LabelSummary {
            phase,
            clusters: set.clusters(),
            source: p.source.to_string(),
            frames: set.labels.iter().map(Vec::len).sum(),
            inertia: set.inertia,
        };
        write_file(
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n",
        )?;
        log::info!("phase {phase}: {} clusters from {}", set.clusters(), p.source);
        Ok(set)
    }

    pub fn read_labels(&self, phase: usize) -> Result<Vec<Vec<usize>>> {
        let dir = self.labels_dir(phase);
        if !dir.is_dir() {
            return Err(Error::Pipeline(format!(
                "phase {phase} needs its labels at {}; run cluster first",
                dir.display()
            )));
        }
        self.manifest()?
            .entries
            .iter()
            .map(|e| {
                let l = avht::read_labels(dir.join(format!("{}.avht", e.utt_id)))?;
                l.into_iter()
                    .map(|v| {
                        usize::try_from(v)
                            .map_err(|_| Error::Data(format!("{}: negative label {v}", e.utt_id)))
                    })
                    .collect()
            })
            .collect()
    }

    /// Masked-prediction training against the labels of `phase`. Phase 1
    /// starts from a fresh model; later phases continue from the previous
    /// phase's checkpoint with a new prediction head.
    pub fn pretrain(&self, phase: usize) -> Result<Vec<MetricsRecord>> {
        let k = self.cfg.schedule()?.phase(phase)?.clusters;
        let mut store = if phase == 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(Stage::Init, 0));
            encoder_side_plan(self.model())?.build(&mut rng)?
        } else {
            let mut s = self.previous_checkpoint(phase, "pre-training")?;
            s.remove_prefix("pretrain.");
            s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(Stage::Head, phase));
        store.merge(pretrain_head_plan(self.model(), k).build(&mut rng)?);
        let data = self.utterances()?;
        let labels = self.read_labels(phase)?;
        let dir = self.pretrain_dir(phase);
        let mut log = MetricsLog::create(dir.join("metrics.jsonl"))?;
        let records = pretrain(
            &mut store,
            self.model(),
            &self.cfg.pretrain,
            &data,
            &labels,
            self.seed(Stage::Pretrain, phase),
            |r| log.record(r),
        )?;
        log.finish()?;
        checkpoint::save(self.checkpoint_dir(phase), &store)?;
        Ok(records)
    }

    /// Clusters and pre-trains every phase of the schedule in turn.
    pub fn run_phases(&self) -> Result<()> {
        for phase in 1..=self.cfg.schedule()?.len() {
            self.cluster(phase)?;
            self.pretrain(phase)?;
        }
        Ok(())
    }

    fn latest_pretrained(&self) -> Result<Option<ParamStore>> {
        let n = self.cfg.schedule()?.len();
        for phase in (1..=n).rev() {
            let dir = self.checkpoint_dir(phase);
            if dir.join(checkpoint::MANIFEST).exists() {
                log::info!("fine-tuning from {}", dir.display());
                return checkpoint::load(dir).map(Some);
            }
        }
        Ok(None)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        match self.cfg.vocab.unit {
            UnitKind::Character => Ok(Vocab::characters(
                self.manifest()?.transcripts().collect::<Vec<_>>(),
            )),
            UnitKind::Subword => {
                let table = self.cfg.vocab.table.as_ref().ok_or_else(|| {
                    Error::Config("subword units need vocab.table".into())
                })?;
                Vocab::load_subword_table(table)
            }
        }
    }

    /// Seq2seq fine-tuning from the latest pre-trained checkpoint, or from a
    /// fresh encoder when no phase has been run.
    pub fn finetune(&self) -> Result<Vec<MetricsRecord>> {
        let vocab = self.vocab()?;
        let mut store = match self.latest_pretrained()? {
            Some(s) => s,
            None => {
                log::warn!("no pre-trained checkpoint; fine-tuning a freshly initialised encoder");
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed(Stage::Init, 0));
                encoder_side_plan(self.model())?.build(&mut rng)?
            }
        };
        store.remove_prefix("pretrain.");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(Stage::Decoder, 0));
        store.merge(full_decoder_plan(self.model(), vocab.len())?.build(&mut rng)?);
        let data = self.utterances()?;
        let targets: Vec<Vec<usize>> = data.iter().map(|u| vocab.encode(&u.transcript)).collect();
        let dir = self.finetune_dir();
        let mut log = MetricsLog::create(dir.join("metrics.jsonl"))?;
        let records = finetune(
            &mut store,
            self.model(),
            &self.cfg.finetune,
            &data,
            &targets,
            self.seed(Stage::Finetune, 0),
            |r| log.record(r),
        )?;
        log.finish()?;
        checkpoint::save(dir.join("checkpoint"), &store)?;
        write_file(&dir.join("vocab.json"), vocab.to_json())?;
        Ok(records)
    }

    /// The fine-tuned model and its vocabulary.
    pub fn load_finetuned(&self) -> Result<(ParamStore, Vocab)> {
        let dir = self.finetune_dir();
        let ck = dir.join("checkpoint");
        if !ck.join(checkpoint::MANIFEST).exists() {
            return Err(Error::Pipeline(format!(
                "no fine-tuned checkpoint at {}; run finetune first",
                ck.display()
            )));
        }
        let store = checkpoint::load(ck)?;
        let path = dir.join("vocab.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok((store, Vocab::from_json(&text)?))
    }

    fn eval_manifest(&self, manifest: Option<&Path>) -> Result<Manifest> {
        match manifest {
            Some(p) => Manifest::read(p),
            None => self.manifest(),
        }
    }

    /// Clean audio-visual transcripts of every utterance, written as
    /// `utt_id \t hypothesis` lines.
    pub fn decode(&self, manifest: Option<&Path>) -> Result<Vec<(String, String)>> {
        let (store, vocab) = self.load_finetuned()?;
        let corpus = RawCorpus::read(&self.eval_manifest(manifest)?)?;
        let hyps = decode_corpus(&store, &self.cfg, &vocab, &corpus, EvalMode::AV, None)?;
        let pairs: Vec<(String, String)> = corpus
            .items
            .iter()
            .map(|u| u.id.clone())
            .zip(hyps)
            .collect();
        let body: String = pairs.iter().map(|(id, h)| format!("{id}\t{h}\n")).collect();
        write_file(&self.out.join("decode").join("hypotheses.tsv"), body)?;
        Ok(pairs)
    }

    pub fn evaluate(&self, manifest: Option<&Path>) -> Result<EvalReport> {
        let (store, vocab) = self.load_finetuned()?;
        let corpus = RawCorpus::read(&self.eval_manifest(manifest)?)?;
        let report = run_eval(&store, &self.cfg, &vocab, &corpus)?;
        report.write(self.out.join("eval"))?;
        Ok(report)
    }
}

/// Parameter totals of the pre-training model (frontends, fusion, encoder),
/// per top-level component, plus the decoder added for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub components: BTreeMap<String, usize>,
    pub decoder: usize,
}

/// Counts parameters without allocating them.
pub fn param_report(cfg: &ModelConfig, vocab_size: usize) -> Result<ParamReport> {
    let plan = encoder_side_plan(cfg)?;
    Ok(ParamReport {
        total: plan.num_params(),
        components: plan.count_by_prefix(1),
        decoder: full_decoder_plan(cfg, vocab_size)?.num_params(),
    })
}
