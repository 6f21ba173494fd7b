//! Training losses, generic over the float type so that the whole
//! ASR → context → MT path can be gradient-checked in `f64`.

use rand_chacha::ChaCha8Rng;

use super::batch::TrainBatch;
use crate::error::{Error, Result};
use crate::model::{AsrModel, Bound, Decoder, Fwd, JointModel, LanguageModel, MtModel, Packing};
use crate::tensor::{Float, Tape, Tensor, Var};

fn flat_targets(seqs: &[Vec<usize>]) -> Vec<Option<usize>> {
    seqs.iter().flatten().map(|&t| Some(t)).collect()
}

fn as_slices(seqs: &[Vec<usize>]) -> Vec<&[usize]> {
    seqs.iter().map(Vec::as_slice).collect()
}

/// Mean token cross entropy of `decoder`'s predictions from context rows.
pub fn token_loss<T: Float>(
    f: &mut Fwd<T>,
    decoder: &Decoder,
    ctx: Var,
    targets: &[Vec<usize>],
    smoothing: f64,
) -> Result<Var> {
    let logits = decoder.logits(f, ctx)?;
    f.tape.cross_entropy(logits, &flat_targets(targets), T::cast(smoothing))
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Teacher-forced ASR decoder outputs over `bos s`: one context vector per
/// token of `s eos`.
pub fn asr_context<T: Float>(f: &mut Fwd<T>, asr: &AsrModel, batch: &TrainBatch) -> Result<(Var, Packing)> {
    let utts = batch.utterances();
    if utts.is_empty() {
        return Err(Error::invalid(format!("{:?} batch has no features", batch.kind)));
    }
    let refs: Vec<&Tensor<f32>> = utts.iter().collect();
    let (enc, enc_packing) = asr.encode_on(f, &refs)?;
    let inputs = batch.source_inputs();
    asr.decode_on(f, &as_slices(&inputs), enc, &enc_packing, &identity(batch.len()))
}

/// ASR decoder outputs with an all-zero encoder sequence standing in for
/// speech, one zero state per source token.
pub fn zero_memory_context<T: Float>(f: &mut Fwd<T>, asr: &AsrModel, batch: &TrainBatch) -> Result<(Var, Packing)> {
    let source = batch
        .source
        .as_ref()
        .ok_or_else(|| Error::invalid("adaptation batch without source tokens"))?;
    let mem_packing = Packing::new(&source.lens);
    let zeros = Tensor::zeros(&[mem_packing.total(), asr.config().d_model]);
    let memory = f.tape.constant(zeros)?;
    let inputs = batch.source_inputs();
    asr.decode_on(f, &as_slices(&inputs), memory, &mem_packing, &identity(batch.len()))
}

pub fn asr_loss<T: Float>(f: &mut Fwd<T>, asr: &AsrModel, batch: &TrainBatch, smoothing: f64) -> Result<Var> {
    let (ctx, _) = asr_context(f, asr, batch)?;
    token_loss(f, asr.decoder(), ctx, &batch.source_outputs(), smoothing)
}

/// MT cross entropy on the target given the discrete source `s eos`.
pub fn mt_loss<T: Float>(f: &mut Fwd<T>, mt: &MtModel, batch: &TrainBatch, smoothing: f64) -> Result<Var> {
    let src = batch.source_outputs();
    let (enc, enc_packing) = mt.encode_tokens_on(f, &as_slices(&src))?;
    mt_decoder_loss(f, mt, enc, &enc_packing, batch, smoothing)
}

/// MT cross entropy on the target given continuous inputs `x` packed as
/// `packing`.
pub fn mt_loss_on_vectors<T: Float>(
    f: &mut Fwd<T>,
    mt: &MtModel,
    x: Var,
    packing: &Packing,
    batch: &TrainBatch,
    smoothing: f64,
) -> Result<Var> {
    let enc = mt.encode_vectors_on(f, x, packing)?;
    mt_decoder_loss(f, mt, enc, packing, batch, smoothing)
}

fn mt_decoder_loss<T: Float>(
    f: &mut Fwd<T>,
    mt: &MtModel,
    enc: Var,
    enc_packing: &Packing,
    batch: &TrainBatch,
    smoothing: f64,
) -> Result<Var> {
    if batch.target.is_none() {
        return Err(Error::invalid(format!("{:?} batch has no target tokens", batch.kind)));
    }
    let inputs = batch.target_inputs();
    let (ctx, _) = mt.decode_on(f, &as_slices(&inputs), enc, enc_packing, &identity(batch.len()))?;
    token_loss(f, mt.decoder(), ctx, &batch.target_outputs(), smoothing)
}

/// Language-model cross entropy over the source sequences.
pub fn lm_loss<T: Float>(f: &mut Fwd<T>, lm: &LanguageModel, batch: &TrainBatch, smoothing: f64) -> Result<Var> {
    let inputs = batch.source_inputs();
    let ctx = lm.forward_on(f, &as_slices(&inputs))?;
    token_loss(f, lm.decoder(), ctx, &batch.source_outputs(), smoothing)
}

/// Tape variables of both halves of a joint model.
#[derive(Clone, Copy, Debug)]
pub struct JointBound<'a> {
    pub asr: &'a Bound,
    pub mt: &'a Bound,
}

fn fwd<'a, T: Float>(
    tape: &'a mut Tape<T>,
    bound: &'a Bound,
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
) -> Fwd<'a, T> {
    Fwd {
        tape,
        bound,
        dropout: rng.map(|r| (rate, r)),
    }
}

/// `(L_asr, L_mt)` of an ST batch; the MT branch reads the ASR decoder's
/// context vectors, so both losses reach the ASR parameters.
pub fn joint_losses<T: Float>(
    tape: &mut Tape<T>,
    joint: &JointModel,
    bound: JointBound,
    batch: &TrainBatch,
    smoothing: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let mut f = fwd(tape, bound.asr, joint.asr.config().dropout, rng.as_deref_mut());
    let (ctx, packing) = asr_context(&mut f, &joint.asr, batch)?;
    let l_asr = token_loss(&mut f, joint.asr.decoder(), ctx, &batch.source_outputs(), smoothing)?;
    let mut f = fwd(tape, bound.mt, joint.mt.config().dropout, rng);
    let l_mt = mt_loss_on_vectors(&mut f, &joint.mt, ctx, &packing, batch, smoothing)?;
    Ok((l_asr, l_mt))
}

/// MT loss of a text-only batch routed through the ASR decoder with zero
/// encoder states.
pub fn adaptation_loss<T: Float>(
    tape: &mut Tape<T>,
    joint: &JointModel,
    bound: JointBound,
    batch: &TrainBatch,
    smoothing: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut f = fwd(tape, bound.asr, joint.asr.config().dropout, rng.as_deref_mut());
    let (ctx, packing) = zero_memory_context(&mut f, &joint.asr, batch)?;
    let mut f = fwd(tape, bound.mt, joint.mt.config().dropout, rng);
    mt_loss_on_vectors(&mut f, &joint.mt, ctx, &packing, batch, smoothing)
}

/// `λ·a + (1 − λ)·b`.
pub fn weighted_sum<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("multi-task weight {lambda} outside [0, 1]")));
    }
    let a = tape.scale(a, T::cast(lambda))?;
    let b = tape.scale(b, T::cast(1.0 - lambda))?;
    tape.add(a, b)
}
