use std::path::PathBuf;
use std::process::ExitCode;

use avsr_core::encoder::EncoderKind;
use avsr_core::harness::synth::{synth_corpus, write_corpus, SynthSpec};
use avsr_core::harness::{param_report, Pipeline, RunConfig};
use avsr_core::model::ModelConfig;
use avsr_core::visual::Backbone;
use avsr_core::Error;
use clap::{Parser, Subcommand};

/// Audio-visual speech recognition pipeline: featurize, cluster, pretrain,
/// finetune, decode and evaluate.
#[derive(Parser)]
#[command(name = "avsr", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "avsr-run")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_parser = ["resnet", "mobilenet"])]
    visual_backbone: Option<String>,
    #[arg(long, global = true, value_parser = ["concat", "glu"])]
    fusion: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural audio-visual corpus and its manifest.
    Synth {
        /// Destination directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        #[arg(long, default_value_t = 8)]
        letters: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 32)]
        frame_size: usize,
    },
    /// Extract features for every utterance of a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assign pseudo-labels for one phase.
    Cluster {
        #[arg(long)]
        phase: usize,
    },
    /// Masked-prediction pre-training for one phase.
    Pretrain {
        #[arg(long)]
        phase: usize,
    },
    /// Cluster and pre-train every phase of the schedule in order.
    Phases,
    /// Seq2seq fine-tuning from the latest pre-trained phase.
    Finetune,
    /// Transcribe a manifest (the featurized one by default).
    Decode {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score clean and noisy conditions in audio-only and audio-visual modes.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Count model parameters without allocating them.
    ParamCount {
        /// Count the full-size systems instead of the configured one.
        #[arg(long)]
        paper: bool,
        /// Output vocabulary size of the decoder.
        #[arg(long, default_value_t = 1000)]
        vocab: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Pipeline(_) => 2,
        Error::Data(_)
        | Error::Input(_)
        | Error::Alignment { .. }
        | Error::Shape(_)
        | Error::Io { .. } => 3,
        Error::Contract(_) | Error::NonFinite(_) => 1,
    }
}

fn resolve_config(cli: &Cli) -> avsr_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &cli.visual_backbone {
        cfg.model.visual.backbone = b.parse()?;
    }
    if let Some(f) = &cli.fusion {
        cfg.model.fusion.mode = f.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn paper_counts(vocab: usize) -> avsr_core::Result<serde_json::Value> {
    let mut systems = serde_json::Map::new();
    for (name, enc) in [
        ("transformer", EncoderKind::Transformer),
        ("conformer", EncoderKind::Conformer),
    ] {
        for backbone in [Backbone::Resnet, Backbone::Mobilenet] {
            let r = param_report(&ModelConfig::paper(enc, backbone), vocab)?;
            systems.insert(format!("{name}+{backbone}"), serde_json::to_value(r).expect("report"));
        }
    }
    Ok(serde_json::Value::Object(systems))
}

fn run(cli: Cli) -> avsr_core::Result<()> {
    if let Command::Synth {
        dir,
        utterances,
        letters,
        jitter,
        frame_size,
    } = &cli.command
    {
        let spec = SynthSpec {
            utterances: *utterances,
            letters: *letters,
            jitter: *jitter,
            frame_size: *frame_size,
            seed: cli.seed.unwrap_or(0),
            ..SynthSpec::default()
        };
        let m = write_corpus(dir, &synth_corpus(&spec)?)?;
        println!("wrote {} utterances to {}", m.entries.len(), dir.display());
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    if let Command::ParamCount { paper, vocab } = cli.command {
        let value = if paper {
            paper_counts(vocab)?
        } else {
            serde_json::to_value(param_report(&cfg.model, vocab)?).expect("report")
        };
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        return Ok(());
    }
    let p = Pipeline::new(cfg, &cli.out_dir)?;
    match cli.command {
        Command::Featurize { manifest } => {
            let n = p.featurize(&manifest)?;
            println!("featurized {n} utterances");
        }
        Command::Cluster { phase } => {
            let set = p.cluster(phase)?;
            println!("phase {phase}: {} clusters, inertia {:.4}", set.clusters(), set.inertia);
        }
        Command::Pretrain { phase } => {
            let r = p.pretrain(phase)?;
            if let Some(last) = r.last() {
                println!("phase {phase}: loss {:.4}, masked accuracy {:.3}", last.loss, last.masked_acc);
            }
        }
        Command::Phases => p.run_phases()?,
        Command::Finetune => {
            let r = p.finetune()?;
            if let Some(last) = r.last() {
                println!("fine-tuned: loss {:.4}, token accuracy {:.3}", last.loss, last.masked_acc);
            }
        }
        Command::Decode { manifest } => {
            for (id, hyp) in p.decode(manifest.as_deref())? {
                println!("{id}\t{hyp}");
            }
        }
        Command::Evaluate { manifest } => {
            print!("{}", p.evaluate(manifest.as_deref())?.to_tsv());
        }
        Command::Synth { .. } | Command::ParamCount { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
