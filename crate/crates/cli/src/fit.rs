use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use jamt::model::{AsrModel, JointModel, LanguageModel, MtModel, TransformerConfig};
use jamt::pipeline::{fit_asr, fit_joint, fit_lm, fit_mt, FitLog};
use jamt::synth::{read_text_pairs, read_triplets, Triplet};
use jamt::train::{average_checkpoints, load_checkpoint, save_checkpoint, TrainConfig};
use jamt::{Error, Result};

use crate::manifest::{self, Manifest};
use crate::TokenizerArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// ASR on transcribed speech.
    Asr,
    /// MT on text pairs.
    Mt,
    /// Joint multi-task fine-tuning on speech translation triplets.
    Joint,
    /// Joint training alternated with text-only adaptation updates.
    Adapt,
    /// Source-side language model for shallow fusion.
    Lm,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: TrainMode,
    /// `key=value` training config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub tok: TokenizerArgs,
    /// Training corpus directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation corpus directory, used for checkpoint selection.
    #[arg(long)]
    pub valid: PathBuf,
    /// Text-only corpus for `--mode adapt`.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Joint checkpoint to start from.
    #[arg(long, conflicts_with_all = ["init_asr", "init_mt"])]
    pub init: Option<PathBuf>,
    /// ASR (or joint) checkpoint to start the ASR side from.
    #[arg(long)]
    pub init_asr: Option<PathBuf>,
    /// MT (or joint) checkpoint to start the MT side from.
    #[arg(long)]
    pub init_mt: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Built-in defaults, then the config file, then `--set`, then flags.
pub fn effective_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&fs::read_to_string(p)?)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn feature_dim(corpus: &[Triplet]) -> Result<usize> {
    corpus
        .first()
        .map(|t| t.features.cols())
        .ok_or_else(|| Error::Config("empty training corpus".into()))
}

fn load_asr(path: &Path) -> Result<AsrModel> {
    AsrModel::from_tensors(&load_checkpoint(path)?)
}

fn load_mt(path: &Path) -> Result<MtModel> {
    MtModel::from_tensors(&load_checkpoint(path)?)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = effective_config(a)?;
    let vocab = a.tok.load()?;
    let (sv, tv) = (vocab.source.vocab_size(), vocab.target.vocab_size());
    let mut m = Manifest::new("train");
    m.set("mode", format!("{:?}", a.mode).to_lowercase());
    m.set("seed", cfg.seed);
    m.config(&cfg.to_text());
    a.tok.record(&mut m)?;
    for p in [Some(&a.train), Some(&a.valid), a.text.as_ref(), a.init.as_ref(), a.init_asr.as_ref(), a.init_mt.as_ref()]
        .into_iter()
        .flatten()
    {
        m.input(p)?;
    }
    if a.text.is_some() != (a.mode == TrainMode::Adapt) {
        return Err(Error::Config("--text is required by, and only used with, --mode adapt".into()));
    }

    let (tensors, log) = match a.mode {
        TrainMode::Asr => {
            let train = read_triplets(&a.train)?;
            let valid = read_triplets(&a.valid)?;
            let mut asr = match &a.init_asr {
                Some(p) => load_asr(p)?,
                None => AsrModel::new(cfg.model(sv, tv, feature_dim(&train)?), cfg.seed)?,
            };
            let log = fit_asr(&mut asr, vocab.triplets(&train), &vocab.triplets(&valid), &cfg)?;
            (asr.to_tensors(), log)
        }
        TrainMode::Mt => {
            let train = read_text_pairs(&a.train)?;
            let valid = read_text_pairs(&a.valid)?;
            let mut mt = match &a.init_mt {
                Some(p) => load_mt(p)?,
                None => MtModel::new(cfg.model(sv, tv, TransformerConfig::default().feature_dim), cfg.seed)?,
            };
            let log = fit_mt(&mut mt, vocab.pairs(&train), &vocab.pairs(&valid), &cfg)?;
            (mt.to_tensors(), log)
        }
        TrainMode::Lm => {
            let seqs = |dir: &Path| -> Result<Vec<Vec<usize>>> {
                Ok(read_text_pairs(dir)?.iter().map(|p| vocab.encode_source(&p.source)).collect())
            };
            let mut lm = LanguageModel::new(cfg.model(sv, sv, TransformerConfig::default().feature_dim), cfg.seed)?;
            let log = fit_lm(&mut lm, seqs(&a.train)?, &seqs(&a.valid)?, &cfg)?;
            (lm.to_tensors(), log)
        }
        TrainMode::Joint | TrainMode::Adapt => {
            let train = read_triplets(&a.train)?;
            let valid = read_triplets(&a.valid)?;
            let mut joint = match &a.init {
                Some(p) => JointModel::from_tensors(&load_checkpoint(p)?)?,
                None => {
                    let shape = cfg.model(sv, tv, feature_dim(&train)?);
                    let asr = match &a.init_asr {
                        Some(p) => load_asr(p)?,
                        None => AsrModel::new(shape.clone(), cfg.seed)?,
                    };
                    let mt = match &a.init_mt {
                        Some(p) => load_mt(p)?,
                        None => MtModel::new(shape, cfg.seed.wrapping_add(1))?,
                    };
                    JointModel::new(asr, mt)?
                }
            };
            let text = match &a.text {
                Some(dir) => Some(vocab.pairs(&read_text_pairs(dir)?)),
                None => None,
            };
            let log = fit_joint(&mut joint, vocab.triplets(&train), text, &vocab.triplets(&valid), &cfg)?;
            (joint.to_tensors(), log)
        }
    };
    save_checkpoint(&a.output, &tensors)?;
    report(&log, &mut m);
    m.write(&manifest::path_for(&a.output, false))
}

fn report(log: &FitLog, m: &mut Manifest) {
    m.set("result.updates", log.losses.len());
    m.set("result.stopped_early", log.stopped_early);
    m.set("result.averaged", log.averaged);
    if let Some((step, v)) = log.validation.last() {
        m.set("result.final_validation_loss", format!("{v:.6}"));
        eprintln!(
            "{} updates, validation loss {v:.4} at step {step}, {} checkpoints averaged{}",
            log.losses.len(),
            log.averaged,
            if log.stopped_early { ", stopped early" } else { "" }
        );
    }
}

#[derive(Args, Debug)]
pub struct AvgArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

pub fn avg_ckpt(a: &AvgArgs) -> Result<()> {
    let mut m = Manifest::new("avg-ckpt");
    m.set("seed", "none");
    let mut snaps = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        m.input(p)?;
        snaps.push(load_checkpoint(p)?);
    }
    let refs: Vec<&[_]> = snaps.iter().map(Vec::as_slice).collect();
    save_checkpoint(&a.output, &average_checkpoints(&refs)?)?;
    m.set("config.count", a.inputs.len());
    m.write(&manifest::path_for(&a.output, false))
}
