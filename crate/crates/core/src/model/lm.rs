use super::layers::Fwd;
use super::params::{Builder, ParamStore};
use super::{check_prefix, infer, init_rng, last_steps, store_from_tensors, store_to_tensors, Decoder, TransformerConfig};
use crate::error::Result;
use crate::tensor::{Float, Tensor, Var};

/// Decoder-only transformer over the transcript vocabulary (`src_vocab`).
#[derive(Clone, Debug)]
pub struct LanguageModel {
    config: TransformerConfig,
    params: ParamStore,
    decoder: Decoder,
}

const PREFIX: &str = "lm";

impl LanguageModel {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let decoder = Decoder::build(
            &mut Builder::Init {
                store: &mut params,
                rng: &mut rng,
            },
            "lm.dec",
            &config,
            config.src_vocab,
            false,
        )?;
        Ok(LanguageModel {
            config,
            params,
            decoder,
        })
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::load(&params);
        let decoder = Decoder::build(&mut b, "lm.dec", &config, config.src_vocab, false)?;
        b.finish()?;
        Ok(LanguageModel {
            config,
            params,
            decoder,
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

    /// Hidden states for every position of every prefix.
    pub fn forward_on<T: Float>(&self, f: &mut Fwd<T>, prefixes: &[&[usize]]) -> Result<Var> {
        for p in prefixes {
            check_prefix(p, self.config.max_len)?;
        }
        Ok(self.decoder.forward(f, prefixes, None)?.0)
    }

    /// Next-token log-probabilities after each prefix.
    pub fn score_prefixes(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        infer(&self.params, |f| {
            for p in prefixes {
                check_prefix(p, self.config.max_len)?;
            }
            let (ctx, packing) = self.decoder.forward(f, prefixes, None)?;
            Ok(last_steps(f, &self.decoder, ctx, &packing)?
                .into_iter()
                .map(|s| s.log_probs)
                .collect())
        })
    }

    pub fn lm_log_probs(&self, prefix: &[usize]) -> Result<Vec<f32>> {
        Ok(self.score_prefixes(&[prefix])?.remove(0))
    }
}
