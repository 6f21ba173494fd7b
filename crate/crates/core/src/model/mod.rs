//! Transformer ASR, MT and language models.
//!
//! The ASR decoder's final-layer output at each position (after the last
//! layer norm) is the context vector of the token predicted there; the MT
//! encoder accepts either token ids or such vectors. All forward passes are
//! generic over the float type so gradient checks can run in `f64`, while
//! stored parameters are `f32`.

mod asr;
mod joint;
mod layers;
mod lm;
mod mt;
mod params;

pub use asr::AsrModel;
pub use joint::JointModel;
pub use layers::{embed, positional_encoding, FeedForward, Fwd, Layer, Linear, Memory, MultiHead, Norm, Packing, Stack};
pub use lm::LanguageModel;
pub use mt::{MtInput, MtModel};
pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::text::BOS;
use params::Builder;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Transcript vocabulary: ASR output, MT input, LM vocabulary.
    pub src_vocab: usize,
    /// Translation vocabulary: MT output.
    pub tgt_vocab: usize,
    pub feature_dim: usize,
    pub dropout: f64,
    /// Longest decoder prefix and encoder input accepted.
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 4,
            ff_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            src_vocab: 64,
            tgt_vocab: 64,
            feature_dim: 16,
            dropout: 0.1,
            max_len: 256,
        }
    }
}

impl TransformerConfig {
    /// Large ASR shape: 12 encoder and 6 decoder layers, width 1024,
    /// 16 heads, 4096 feed-forward units, 80-dim filterbank input.
    pub fn large_asr(src_vocab: usize) -> Self {
        TransformerConfig {
            d_model: 1024,
            n_heads: 16,
            ff_dim: 4096,
            enc_layers: 12,
            dec_layers: 6,
            src_vocab,
            tgt_vocab: src_vocab,
            feature_dim: 80,
            dropout: 0.1,
            max_len: 1024,
        }
    }

    /// Large MT shape: 6 + 6 layers, width 1024, 16 heads.
    pub fn large_mt(src_vocab: usize, tgt_vocab: usize) -> Self {
        TransformerConfig {
            enc_layers: 6,
            dec_layers: 6,
            tgt_vocab,
            ..Self::large_asr(src_vocab)
        }
    }

    /// Large LM shape: 6 layers, width 1024, 8 heads.
    pub fn large_lm(vocab: usize) -> Self {
        TransformerConfig {
            n_heads: 8,
            enc_layers: 0,
            dec_layers: 6,
            ..Self::large_asr(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("feature_dim", self.feature_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    const META: [&'static str; 10] = [
        "d_model",
        "n_heads",
        "ff_dim",
        "enc_layers",
        "dec_layers",
        "src_vocab",
        "tgt_vocab",
        "feature_dim",
        "dropout",
        "max_len",
    ];

    fn meta_values(&self) -> [f64; 10] {
        [
            self.d_model as f64,
            self.n_heads as f64,
            self.ff_dim as f64,
            self.enc_layers as f64,
            self.dec_layers as f64,
            self.src_vocab as f64,
            self.tgt_vocab as f64,
            self.feature_dim as f64,
            self.dropout,
            self.max_len as f64,
        ]
    }

    /// Scalar tensors `<prefix>.meta.<field>` describing the config.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        Self::META
            .iter()
            .zip(self.meta_values())
            .map(|(k, v)| (format!("{prefix}.meta.{k}"), Tensor::scalar(v as f32)))
            .collect()
    }

    pub fn from_tensors(prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let name = format!("{prefix}.meta.{k}");
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .and_then(|(_, t)| t.item())
                .map(f64::from)
                .ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))
        };
        let int = |k: &str| -> Result<usize> {
            let v = get(k)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::format("checkpoint", format!("{prefix}.meta.{k} = {v}")));
            }
            Ok(v as usize)
        };
        let cfg = TransformerConfig {
            d_model: int("d_model")?,
            n_heads: int("n_heads")?,
            ff_dim: int("ff_dim")?,
            enc_layers: int("enc_layers")?,
            dec_layers: int("dec_layers")?,
            src_vocab: int("src_vocab")?,
            tgt_vocab: int("tgt_vocab")?,
            feature_dim: int("feature_dim")?,
            // stored as f32; round back to the short decimal it came from
            dropout: (get("dropout")? * 1e6).round() / 1e6,
            max_len: int("max_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Next-token distribution and context vector for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub log_probs: Vec<f32>,
    pub context: Vec<f32>,
}

/// Teacher-forced pass over `bos y1 … yL`: row `t` holds the distribution
/// over `y(t+1)` and the context vector of that position.
#[derive(Clone, Debug, PartialEq)]
pub struct Forced {
    pub log_probs: Tensor<f32>,
    pub context: Tensor<f32>,
}

impl Forced {
    /// `Σ_t log P(y(t+1) | prefix)` for the forced `target`, accumulated in
    /// `f64`.
    pub fn sequence_log_prob(&self, target: &[usize]) -> f64 {
        (0..self.log_probs.rows())
            .map(|t| f64::from(self.log_probs.row(t)[target[t + 1]]))
            .sum()
    }
}

/// Embedding, causal stack and output projection shared by every decoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub stack: Stack,
    pub out: Linear,
}

impl Decoder {
    fn build(b: &mut Builder, name: &str, cfg: &TransformerConfig, vocab: usize, cross: bool) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Decoder {
            embed: b.param(&format!("{name}.embed"), &[vocab, d], params::Fill::Uniform(1.0 / (d as f32).sqrt()))?,
            stack: Stack::build(b, name, cfg.dec_layers, d, cfg.n_heads, cfg.ff_dim, cross)?,
            out: Linear::build(b, &format!("{name}.out"), d, vocab)?,
        })
    }

    /// Context vectors for every position of every prefix.
    pub fn forward<T: Float>(&self, f: &mut Fwd<T>, prefixes: &[&[usize]], memory: Option<&Memory>) -> Result<(Var, Packing)> {
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let packing = Packing::new(&lens);
        let x = embed(f, self.embed, prefixes, &packing)?;
        let ctx = self.stack.forward(f, x, &packing.self_segments(), true, memory)?;
        Ok((ctx, packing))
    }

    pub fn logits<T: Float>(&self, f: &mut Fwd<T>, ctx: Var) -> Result<Var> {
        self.out.forward(f, ctx)
    }
}

pub(crate) fn check_prefix(prefix: &[usize], max_len: usize) -> Result<()> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::invalid("decoder prefix must start with bos"));
    }
    if prefix.len() > max_len {
        return Err(Error::TooLong {
            len: prefix.len(),
            max: max_len,
        });
    }
    Ok(())
}

/// Runs `run` on an inference tape (f32, parameters shared, no dropout).
pub(crate) fn infer<R>(params: &ParamStore, run: impl FnOnce(&mut Fwd<f32>) -> Result<R>) -> Result<R> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false)?;
    let mut f = Fwd {
        tape: &mut tape,
        bound: &bound,
        dropout: None,
    };
    run(&mut f)
}

/// Last-position log-probs and contexts of each packed prefix.
pub(crate) fn last_steps(f: &mut Fwd<f32>, decoder: &Decoder, ctx: Var, packing: &Packing) -> Result<Vec<StepOutput>> {
    let last: Vec<Option<usize>> = (0..packing.len())
        .map(|i| Some(packing.row(i, packing.lens()[i] - 1)))
        .collect();
    let ctx_last = f.tape.gather_rows(ctx, &last, 1)?;
    let logits = decoder.logits(f, ctx_last)?;
    let lp = f.tape.log_softmax(logits)?;
    let (lp, ctx) = (f.tape.value(lp), f.tape.value(ctx_last));
    Ok((0..packing.len())
        .map(|i| StepOutput {
            log_probs: lp.row(i).to_vec(),
            context: ctx.row(i).to_vec(),
        })
        .collect())
}

pub(crate) fn forced_rows(f: &mut Fwd<f32>, decoder: &Decoder, ctx: Var) -> Result<Forced> {
    let logits = decoder.logits(f, ctx)?;
    let lp = f.tape.log_softmax(logits)?;
    Ok(Forced {
        log_probs: f.tape.value(lp).clone(),
        context: f.tape.value(ctx).clone(),
    })
}

pub(crate) fn check_forced_target(target: &[usize], max_len: usize) -> Result<()> {
    check_prefix(target, max_len + 1)?;
    if target.len() < 2 || target.last() != Some(&crate::text::EOS) {
        return Err(Error::invalid("forced target must be bos … eos"));
    }
    Ok(())
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `<prefix>.*` parameters of a tensor list, with the prefix kept.
pub(crate) fn store_from_tensors(prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let meta = format!("{prefix}.meta.");
    let own = format!("{prefix}.");
    for (name, t) in tensors {
        if name.starts_with(&own) && !name.starts_with(&meta) {
            store.insert(name, t.clone())?;
        }
    }
    Ok(store)
}

pub(crate) fn store_to_tensors(cfg: &TransformerConfig, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor<f32>)> {
    let mut out = cfg.to_tensors(prefix);
    out.extend(store.iter().map(|(n, t)| (n.to_string(), t.clone())));
    out
}
