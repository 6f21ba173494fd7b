use super::layers::{Fwd, Linear, Memory, Packing, Stack};
use super::params::{Builder, ParamStore};
use super::{
    check_forced_target, check_prefix, forced_rows, infer, init_rng, last_steps, store_from_tensors, store_to_tensors,
    Decoder, Forced, StepOutput, TransformerConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Speech recognizer: two stride-2 convolutions (kernel 3, padding 1), a
/// transformer encoder and a causal decoder with cross-attention.
#[derive(Clone, Debug)]
pub struct AsrModel {
    config: TransformerConfig,
    params: ParamStore,
    conv1: Linear,
    conv2: Linear,
    encoder: Stack,
    decoder: Decoder,
    /// Diagnostic switch; when off the decoder skips its cross-attention
    /// sublayers and ignores the encoder states entirely.
    pub cross_attention: bool,
}

const PREFIX: &str = "asr";

/// Output length of a stride-2, kernel-3, padding-1 convolution.
fn halved(t: usize) -> usize {
    t.div_ceil(2)
}

/// im2col indices for one stride-2 convolution over packed sequences.
fn conv_windows(packing: &Packing) -> (Vec<Option<usize>>, Packing) {
    let mut index = Vec::new();
    let mut out_lens = Vec::with_capacity(packing.len());
    for (&start, &len) in packing.starts().iter().zip(packing.lens()) {
        let out = halved(len);
        for t in 0..out {
            for k in 0..3 {
                let pos = (2 * t + k) as isize - 1;
                index.push((pos >= 0 && (pos as usize) < len).then(|| start + pos as usize));
            }
        }
        out_lens.push(out);
    }
    (index, Packing::new(&out_lens))
}

impl AsrModel {
    fn layout(cfg: &TransformerConfig, b: &mut Builder) -> Result<(Linear, Linear, Stack, Decoder)> {
        let d = cfg.d_model;
        Ok((
            Linear::build(b, "asr.conv1", 3 * cfg.feature_dim, d)?,
            Linear::build(b, "asr.conv2", 3 * d, d)?,
            Stack::build(b, "asr.enc", cfg.enc_layers, d, cfg.n_heads, cfg.ff_dim, false)?,
            Decoder::build(b, "asr.dec", cfg, cfg.src_vocab, true)?,
        ))
    }

    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let (conv1, conv2, encoder, decoder) = Self::layout(
            &config,
            &mut Builder::Init {
                store: &mut params,
                rng: &mut rng,
            },
        )?;
        Ok(AsrModel {
            config,
            params,
            conv1,
            conv2,
            encoder,
            decoder,
            cross_attention: true,
        })
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::load(&params);
        let (conv1, conv2, encoder, decoder) = Self::layout(&config, &mut b)?;
        b.finish()?;
        Ok(AsrModel {
            config,
            params,
            conv1,
            conv2,
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

    /// Names of the frontend and encoder parameters (everything upstream of
    /// the encoder states).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("asr.conv") || n.starts_with("asr.enc."))
            .map(str::to_string)
            .collect()
    }

    /// Encoder length for `frames` input frames.
    pub fn encoded_len(frames: usize) -> usize {
        halved(halved(frames))
    }

    fn check_features(&self, feats: &Tensor<f32>) -> Result<()> {
        if feats.rank() != 2 || feats.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "encode_features",
                format!("features {:?}, expected [T, {}]", feats.shape(), self.config.feature_dim),
            ));
        }
        if feats.rows() < 4 {
            return Err(Error::invalid(format!("{} frames; at least 4 are required", feats.rows())));
        }
        let t = Self::encoded_len(feats.rows());
        if t > self.config.max_len {
            return Err(Error::TooLong {
                len: t,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encoder states of a batch of utterances, packed.
    pub fn encode_on<T: Float>(&self, f: &mut Fwd<T>, feats: &[&Tensor<f32>]) -> Result<(Var, Packing)> {
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(feats.len());
        for x in feats {
            self.check_features(x)?;
            data.extend(x.data().iter().map(|&v| T::cast(f64::from(v))));
            lens.push(x.rows());
        }
        let packing = Packing::new(&lens);
        let x = f.tape.constant(Tensor::new(&[packing.total(), self.config.feature_dim], data)?)?;

        let (idx, p1) = conv_windows(&packing);
        let h = f.tape.gather_rows(x, &idx, 3)?;
        let h = self.conv1.forward(f, h)?;
        let h = f.tape.gelu(h)?;
        let (idx, p2) = conv_windows(&p1);
        let h = f.tape.gather_rows(h, &idx, 3)?;
        let h = self.conv2.forward(f, h)?;
        let h = f.tape.gelu(h)?;

        let h = f.add_positions(h, &p2)?;
        let h = f.dropout(h)?;
        let states = self.encoder.forward(f, h, &p2.self_segments(), false, None)?;
        Ok((states, p2))
    }

    /// Decoder outputs (context vectors) for every position of every
    /// prefix; prefix `i` attends to memory sequence `memory_of[i]`.
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

    pub fn encode_features(&self, feats: &Tensor<f32>) -> Result<Tensor<f32>> {
        infer(&self.params, |f| {
            let (states, _) = self.encode_on(f, &[feats])?;
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

    /// One decoding step for each prefix against the same encoder states.
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

    /// Teacher-forced pass over `bos … eos`.
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convolution_windows_are_padded() {
        let (idx, out) = conv_windows(&Packing::new(&[5]));
        assert_eq!(out.lens(), &[3]);
        assert_eq!(&idx[..3], &[None, Some(0), Some(1)]);
        assert_eq!(&idx[6..], &[Some(3), Some(4), None]);
    }

    #[test]
    fn subsampling_by_four() {
        assert_eq!(AsrModel::encoded_len(40), 10);
        assert_eq!(AsrModel::encoded_len(41), 11);
        assert_eq!(AsrModel::encoded_len(4), 1);
    }
}
