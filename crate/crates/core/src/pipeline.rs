//! End-to-end recipes: tokenizers, example preparation, training loops
//! with checkpoint averaging, and corpus-level evaluation.

use crate::decode::{Cascade, CascadeOutput};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, corpus_wer};
use crate::model::{AsrModel, JointModel, LanguageModel, MtModel};
use crate::synth::{TextPair, Triplet};
use crate::text::{strip_punctuation, BpeModel};
use crate::train::{
    alternate_train, early_stop, eval, BatchKind, BatchStream, CheckpointSet, Example, NamedTensors, Snapshot,
    StepKind, TrainBatch, TrainConfig, Trainer,
};

/// Whether transcripts keep punctuation and case (`Punc`) or are
/// lowercased and stripped of punctuation (`Norm`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceStyle {
    Punc,
    Norm,
}

impl SourceStyle {
    pub fn apply(self, text: &str) -> String {
        match self {
            SourceStyle::Punc => text.to_string(),
            SourceStyle::Norm => strip_punctuation(text),
        }
    }
}

/// Source (transcript) and target (translation) tokenizers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub source: BpeModel,
    pub target: BpeModel,
    pub style: SourceStyle,
}

impl Vocabularies {
    /// Trains both tokenizers; `merges` large enough merges every word
    /// into a single token.
    pub fn train(sources: &[&str], targets: &[&str], style: SourceStyle, merges: usize) -> Result<Self> {
        let styled: Vec<String> = sources.iter().map(|s| style.apply(s)).collect();
        Ok(Vocabularies {
            source: BpeModel::train(&styled, merges)?,
            target: BpeModel::train(targets, merges)?,
            style,
        })
    }

    pub fn encode_source(&self, text: &str) -> Vec<usize> {
        self.source.encode(&self.style.apply(text))
    }

    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        self.target.encode(text)
    }

    pub fn triplet(&self, t: &Triplet) -> Example {
        Example {
            features: Some(t.features.clone()),
            source: self.encode_source(&t.source),
            target: self.encode_target(&t.target),
        }
    }

    pub fn pair(&self, p: &TextPair) -> Example {
        Example {
            features: None,
            source: self.encode_source(&p.source),
            target: self.encode_target(&p.target),
        }
    }

    pub fn triplets(&self, ts: &[Triplet]) -> Vec<Example> {
        ts.iter().map(|t| self.triplet(t)).collect()
    }

    pub fn pairs(&self, ps: &[TextPair]) -> Vec<Example> {
        ps.iter().map(|p| self.pair(p)).collect()
    }
}

/// Loss curve and validation history of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitLog {
    pub losses: Vec<f64>,
    /// `(step, validation loss)` at every checkpoint.
    pub validation: Vec<(u64, f64)>,
    pub stopped_early: bool,
    /// Number of snapshots averaged into the final parameters.
    pub averaged: usize,
}

/// Validation loss averaged over batches.
fn mean_loss(batches: &[TrainBatch], mut loss: impl FnMut(&TrainBatch) -> Result<f64>) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches {
        total += loss(b)? * b.len() as f64;
        n += b.len();
    }
    Ok(total / n as f64)
}

fn batches(kind: BatchKind, examples: &[Example], size: usize) -> Result<Vec<TrainBatch>> {
    examples
        .chunks(size.max(1))
        .map(|c| TrainBatch::new(kind, &c.iter().collect::<Vec<_>>()))
        .collect()
}

/// Shared bookkeeping: checkpoints every `ckpt_interval` updates and at
/// the end, early stopping, and averaging of the best snapshots.
struct Keeper<'c> {
    cfg: &'c TrainConfig,
    set: CheckpointSet,
    log: FitLog,
}

impl<'c> Keeper<'c> {
    fn new(cfg: &'c TrainConfig) -> Result<Self> {
        Ok(Keeper {
            cfg,
            set: CheckpointSet::new(cfg.ckpt_keep)?,
            log: FitLog::default(),
        })
    }

    fn due(&self, step: u64) -> bool {
        step.is_multiple_of(self.cfg.ckpt_interval as u64)
    }

    /// Records a checkpoint; returns whether training should stop.
    fn checkpoint(&mut self, step: u64, val_loss: f64, tensors: NamedTensors) -> Result<bool> {
        if self.log.validation.last().is_some_and(|&(s, _)| s == step) {
            return Ok(false);
        }
        self.log.validation.push((step, val_loss));
        self.set.push(Snapshot {
            step,
            val_loss,
            tensors,
        })?;
        let history: Vec<f64> = self.log.validation.iter().map(|v| v.1).collect();
        early_stop(&history, self.cfg.patience)
    }

    fn finish(mut self) -> Result<(NamedTensors, FitLog)> {
        let k = self.cfg.avg_k.min(self.set.len());
        let avg = self.set.average_best(k)?;
        self.log.averaged = k;
        Ok((avg, self.log))
    }
}

fn trainer(cfg: &TrainConfig, stream: u64) -> Trainer {
    Trainer::new(
        cfg.adam(),
        cfg.d_model,
        cfg.label_smoothing,
        cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stream),
    )
}

/// Pre-trains an ASR model on `train` (features + transcripts).
pub fn fit_asr(asr: &mut AsrModel, train: Vec<Example>, val: &[Example], cfg: &TrainConfig) -> Result<FitLog> {
    cfg.validate()?;
    let mut stream = BatchStream::new(BatchKind::AsrPair, train, cfg.batch_size, cfg.seed.wrapping_add(11))?;
    let val = batches(BatchKind::AsrPair, val, cfg.batch_size)?;
    let mut tr = trainer(cfg, 1);
    let mut keep = Keeper::new(cfg)?;
    for _ in 0..cfg.steps {
        let b = stream.next_batch()?;
        keep.log.losses.push(tr.asr_step(asr, &b)?);
        if keep.due(tr.step()) {
            let v = mean_loss(&val, |b| eval::asr_loss(asr, b))?;
            if keep.checkpoint(tr.step(), v, asr.to_tensors())? {
                keep.log.stopped_early = true;
                break;
            }
        }
    }
    let v = mean_loss(&val, |b| eval::asr_loss(asr, b))?;
    keep.checkpoint(tr.step(), v, asr.to_tensors())?;
    let (avg, log) = keep.finish()?;
    *asr = AsrModel::from_tensors(&avg)?;
    Ok(log)
}

/// Pre-trains an MT model on discrete source tokens.
pub fn fit_mt(mt: &mut MtModel, train: Vec<Example>, val: &[Example], cfg: &TrainConfig) -> Result<FitLog> {
    cfg.validate()?;
    let mut stream = BatchStream::new(BatchKind::MtPair, train, cfg.batch_size, cfg.seed.wrapping_add(12))?;
    let val = batches(BatchKind::MtPair, val, cfg.batch_size)?;
    let mut tr = trainer(cfg, 2);
    let mut keep = Keeper::new(cfg)?;
    for _ in 0..cfg.steps {
        let b = stream.next_batch()?;
        keep.log.losses.push(tr.mt_step(mt, &b)?);
        if keep.due(tr.step()) {
            let v = mean_loss(&val, |b| eval::mt_loss(mt, b))?;
            if keep.checkpoint(tr.step(), v, mt.to_tensors())? {
                keep.log.stopped_early = true;
                break;
            }
        }
    }
    let v = mean_loss(&val, |b| eval::mt_loss(mt, b))?;
    keep.checkpoint(tr.step(), v, mt.to_tensors())?;
    let (avg, log) = keep.finish()?;
    *mt = MtModel::from_tensors(&avg)?;
    Ok(log)
}

/// Trains a language model on token sequences.
pub fn fit_lm(lm: &mut LanguageModel, train: Vec<Vec<usize>>, val: &[Vec<usize>], cfg: &TrainConfig) -> Result<FitLog> {
    cfg.validate()?;
    let mut stream = BatchStream::new(BatchKind::MtPair, lm_examples(train), cfg.batch_size, cfg.seed.wrapping_add(13))?;
    let val = batches(BatchKind::MtPair, &lm_examples(val.to_vec()), cfg.batch_size)?;
    let mut tr = trainer(cfg, 3);
    let mut keep = Keeper::new(cfg)?;
    for _ in 0..cfg.steps {
        let b = stream.next_batch()?;
        keep.log.losses.push(tr.lm_step(lm, &b)?);
        if keep.due(tr.step()) {
            let v = mean_loss(&val, |b| eval::lm_loss(lm, b))?;
            if keep.checkpoint(tr.step(), v, lm.to_tensors())? {
                keep.log.stopped_early = true;
                break;
            }
        }
    }
    let v = mean_loss(&val, |b| eval::lm_loss(lm, b))?;
    keep.checkpoint(tr.step(), v, lm.to_tensors())?;
    let (avg, log) = keep.finish()?;
    *lm = LanguageModel::from_tensors(&avg)?;
    Ok(log)
}

// LM batches read only the source side; the target slot mirrors it to
// keep the text-pair layout valid.
fn lm_examples(seqs: Vec<Vec<usize>>) -> Vec<Example> {
    seqs.into_iter()
        .map(|s| Example {
            features: None,
            target: s.clone(),
            source: s,
        })
        .collect()
}

/// Joint fine-tuning: multi-task updates on `st`, alternated with
/// `cfg.adapt_ratio` text-only adaptation updates per ST update when
/// `text` is given. `cfg.steps` counts ST updates.
pub fn fit_joint(
    joint: &mut JointModel,
    st: Vec<Example>,
    text: Option<Vec<Example>>,
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<FitLog> {
    cfg.validate()?;
    let mut st_stream = BatchStream::new(BatchKind::StTriplet, st, cfg.batch_size, cfg.seed.wrapping_add(14))?;
    let mut text_stream = match text {
        Some(t) => Some(BatchStream::new(BatchKind::TextOnlyPair, t, cfg.batch_size, cfg.seed.wrapping_add(15))?),
        None => None,
    };
    let ratio = if text_stream.is_some() { cfg.adapt_ratio } else { 0 };
    let total_steps = cfg.steps * (ratio + 1);
    let val = batches(BatchKind::StTriplet, val, cfg.batch_size)?;
    let mut tr = trainer(cfg, 4);
    let mut keep = Keeper::new(cfg)?;
    let lambda = cfg.lambda;
    let mut losses = Vec::new();
    let mut st_steps = 0u64;
    let mut stop = false;
    let mut err = None;
    alternate_train(
        &mut tr,
        joint,
        Some(&mut st_stream),
        text_stream.as_mut(),
        ratio,
        total_steps,
        lambda,
        |_, kind, loss, j| {
            losses.push(loss);
            if kind != StepKind::St {
                return Ok(true);
            }
            st_steps += 1;
            if st_steps.is_multiple_of(cfg.ckpt_interval as u64) {
                let v = mean_loss(&val, |b| Ok(eval::joint_losses(j, b, lambda)?.total))?;
                match keep.checkpoint(st_steps, v, j.to_tensors()) {
                    Ok(true) => {
                        stop = true;
                        return Ok(false);
                    }
                    Ok(false) => {}
                    Err(e) => {
                        err = Some(e);
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        },
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    keep.log.losses = losses;
    keep.log.stopped_early = stop;
    let v = mean_loss(&val, |b| Ok(eval::joint_losses(joint, b, lambda)?.total))?;
    keep.checkpoint(st_steps, v, joint.to_tensors())?;
    let (avg, log) = keep.finish()?;
    *joint = JointModel::from_tensors(&avg)?;
    Ok(log)
}

/// Corpus scores of a decoded test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub bleu: f64,
    pub wer: f64,
    /// `(id, ASR 1-best text, translation text)`.
    pub outputs: Vec<(String, String, String)>,
    pub decoded: Vec<CascadeOutput>,
}

/// Decodes every test triplet and scores translations (BLEU against the
/// punctuated target) and ASR 1-best (WER against the transcript in the
/// vocabulary's style).
pub fn evaluate(cascade: &Cascade, test: &[Triplet], vocab: &Vocabularies) -> Result<Evaluation> {
    let mut refs_src = Vec::with_capacity(test.len());
    let mut refs_tgt = Vec::with_capacity(test.len());
    let mut hyps_src = Vec::with_capacity(test.len());
    let mut hyps_tgt = Vec::with_capacity(test.len());
    let mut outputs = Vec::with_capacity(test.len());
    let mut decoded = Vec::with_capacity(test.len());
    for t in test {
        let out = cascade.decode(&t.features)?;
        let asr_text = vocab.source.decode(out.asr_best().words());
        let translation = vocab.target.decode(out.translation().words());
        refs_src.push(vocab.style.apply(&t.source));
        refs_tgt.push(t.target.clone());
        hyps_src.push(asr_text.clone());
        hyps_tgt.push(translation.clone());
        outputs.push((t.id.clone(), asr_text, translation));
        decoded.push(out);
    }
    Ok(Evaluation {
        bleu: corpus_bleu(&refs_tgt, &hyps_tgt)?,
        wer: corpus_wer(&refs_src, &hyps_src)?,
        outputs,
        decoded,
    })
}

/// Median of a nonempty list.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
