use super::layers::{embed, Fwd, Memory, Packing, Stack};
use super::params::{Builder, Fill, ParamId, ParamStore};
use super::{
    check_forced_target, check_prefix, forced_rows, infer, init_rng, last_steps, store_from_tensors, store_to_tensors,
    Decoder, Forced, StepOutput, TransformerConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Input of the MT encoder: source token ids, or continuous vectors of
/// width `d_model` (context vectors of an ASR decoder).
#[derive(Clone, Copy, Debug)]
pub enum MtInput<'a> {
    Tokens(&'a [usize]),
    Vectors(&'a Tensor<f32>),
}

impl MtInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            MtInput::Tokens(t) => t.len(),
            MtInput::Vectors(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Translation model with two encoder input ports. Token ids are embedded
/// and scaled by `√d`; continuous vectors get positional encodings only.
#[derive(Clone, Debug)]
pub struct MtModel {
    config: TransformerConfig,
    params: ParamStore,
    src_embed: ParamId,
    encoder: Stack,
    decoder: Decoder,
    pub cross_attention: bool,
}

const PREFIX: &str = "mt";

impl MtModel {
    fn layout(cfg: &TransformerConfig, b: &mut Builder) -> Result<(ParamId, Stack, Decoder)> {
        let d = cfg.d_model;
        Ok((
            b.param("mt.src_embed", &[cfg.src_vocab, d], Fill::Uniform(1.0 / (d as f32).sqrt()))?,
            Stack::build(b, "mt.enc", cfg.enc_layers, d, cfg.n_heads, cfg.ff_dim, false)?,
            Decoder::build(b, "mt.dec", cfg, cfg.tgt_vocab, true)?,
        ))
    }

    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let (src_embed, encoder, decoder) = Self::layout(
            &config,
            &mut Builder::Init {
                store: &mut params,
                rng: &mut rng,
            },
        )?;
        Ok(MtModel {
            config,
            params,
            src_embed,
            encoder,
            decoder,
            cross_attention: true,
        })
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::load(&params);
        let (src_embed, encoder, decoder) = Self::layout(&config, &mut b)?;
        b.finish()?;
        Ok(MtModel {
            config,
            params,
            src_embed,
            encoder,
            decoder,
            cross_attention: true,
        })
    }

    pub fn from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let cfg = TransformerConfig::from_tensors(PREFIX, tensors)?;
        Self::from_params(cfg, store_from_tensors(PREFIX, tensors)?)
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        store_to_tensors(&self.config, PREFIX, &self.params)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid("empty MT input"));
        }
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encoder states for packed token sequences.
    pub fn encode_tokens_on<T: Float>(&self, f: &mut Fwd<T>, seqs: &[&[usize]]) -> Result<(Var, Packing)> {
        for s in seqs {
            self.check_len(s.len())?;
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let packing = Packing::new(&lens);
        let x = embed(f, self.src_embed, seqs, &packing)?;
        let states = self.encoder.forward(f, x, &packing.self_segments(), false, None)?;
        Ok((states, packing))
    }

    /// Encoder states for packed continuous inputs `x[Σ len, d_model]`.
    pub fn encode_vectors_on<T: Float>(&self, f: &mut Fwd<T>, x: Var, packing: &Packing) -> Result<Var> {
        if f.tape.value(x).cols() != self.config.d_model || f.tape.value(x).rows() != packing.total() {
            return Err(Error::shape(
                "mt_encode",
                format!(
                    "continuous input {:?}, expected [{}, {}]",
                    f.tape.shape(x),
                    packing.total(),
                    self.config.d_model
                ),
            ));
        }
        for &l in packing.lens() {
            self.check_len(l)?;
        }
        let h = f.add_positions(x, packing)?;
        let h = f.dropout(h)?;
        self.encoder.forward(f, h, &packing.self_segments(), false, None)
    }

    pub fn decode_on<T: Float>(
        &self,
        f: &mut Fwd<T>,
        prefixes: &[&[usize]],
        memory: Var,
        memory_packing: &Packing,
        memory_of: &[usize],
    ) -> Result<(Var, Packing)> {
        for p in prefixes {
            check_prefix(p, self.config.max_len)?;
        }
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let segments = Packing::new(&lens).cross_segments(memory_packing, memory_of);
        let mem = Memory {
            states: memory,
            segments: &segments,
        };
        let mem = self.cross_attention.then_some(&mem);
        self.decoder.forward(f, prefixes, mem)
    }

    pub fn mt_encode(&self, input: MtInput) -> Result<Tensor<f32>> {
        infer(&self.params, |f| {
            let states = match input {
                MtInput::Tokens(t) => self.encode_tokens_on(f, &[t])?.0,
                MtInput::Vectors(v) => {
                    if v.rank() != 2 {
                        return Err(Error::shape("mt_encode", format!("{:?} is not a matrix", v.shape())));
                    }
                    let x = f.tape.constant(v.clone())?;
                    self.encode_vectors_on(f, x, &Packing::new(&[v.rows()]))?
                }
            };
            Ok(f.tape.value(states).clone())
        })
    }

    fn check_states(&self, enc: &Tensor<f32>) -> Result<()> {
        if enc.rank() != 2 || enc.cols() != self.config.d_model || enc.rows() == 0 {
            return Err(Error::shape(
                "decode",
                format!("encoder states {:?}, expected [T, {}]", enc.shape(), self.config.d_model),
            ));
        }
        Ok(())
    }

    pub fn score_prefixes(&self, prefixes: &[&[usize]], enc: &Tensor<f32>) -> Result<Vec<StepOutput>> {
        self.check_states(enc)?;
        infer(&self.params, |f| {
            let mem = f.tape.constant(enc.clone())?;
            let mp = Packing::new(&[enc.rows()]);
            let (ctx, packing) = self.decode_on(f, prefixes, mem, &mp, &vec![0; prefixes.len()])?;
            last_steps(f, &self.decoder, ctx, &packing)
        })
    }

    pub fn decode_step(&self, prefix: &[usize], enc: &Tensor<f32>) -> Result<StepOutput> {
        Ok(self.score_prefixes(&[prefix], enc)?.remove(0))
    }

    pub fn forced_decode(&self, target: &[usize], enc: &Tensor<f32>) -> Result<Forced> {
        check_forced_target(target, self.config.max_len)?;
        self.check_states(enc)?;
        infer(&self.params, |f| {
            let mem = f.tape.constant(enc.clone())?;
            let mp = Packing::new(&[enc.rows()]);
            let (ctx, _) = self.decode_on(f, &[&target[..target.len() - 1]], mem, &mp, &[0])?;
            forced_rows(f, &self.decoder, ctx)
        })
    }
}
