//! Coupled ASR → MT search and the cascade configurations built on it.

use super::scorers::{AsrScorer, EnsembleScorer, FusedScorer, MtScorer};
use super::search::{beam_search, BeamHypothesis, DecodeConfig, StepScorer};
use crate::error::{Error, Result};
use crate::model::{AsrModel, LanguageModel, MtInput, MtModel};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

/// Teacher-forced pass of a hypothesis through `asr`: its log likelihood
/// under that model and its context vectors. An unfinished hypothesis is
/// first closed with `eos`, so the context always covers `tokens … eos`.
pub fn forced_rescore(asr: &AsrModel, hyp: &BeamHypothesis, enc: &Tensor<f32>) -> Result<BeamHypothesis> {
    let mut tokens = hyp.tokens.clone();
    if tokens.last() != Some(&EOS) {
        tokens.push(EOS);
    }
    let target: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
    let forced = asr.forced_decode(&target, enc)?;
    Ok(BeamHypothesis {
        tokens,
        log_prob: forced.sequence_log_prob(&target),
        context: Some(forced.context),
        finished: true,
    })
}

/// Outcome of a coupled search.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupled {
    /// Index of the chosen source hypothesis in the n-best list.
    pub source_index: usize,
    pub translation: BeamHypothesis,
    /// `rank(y) + log P(z|x)` of the chosen pair.
    pub score: f64,
    /// MT hypotheses explored for every source hypothesis.
    pub explored: Vec<Vec<BeamHypothesis>>,
}

/// `argmax_{z ∈ n-best, y} rank(y | z) + log P(z|x)`, where `translate`
/// runs the MT search for one source hypothesis. Ties keep the earliest
/// pair.
pub fn coupled_translate(
    nbest: &[BeamHypothesis],
    insertion_penalty: f64,
    mut translate: impl FnMut(&BeamHypothesis) -> Result<Vec<BeamHypothesis>>,
) -> Result<Coupled> {
    if nbest.is_empty() {
        return Err(Error::invalid("empty n-best list"));
    }
    let mut best: Option<(usize, usize, f64)> = None;
    let mut explored = Vec::with_capacity(nbest.len());
    for (zi, z) in nbest.iter().enumerate() {
        let ys = translate(z)?;
        for (yi, y) in ys.iter().enumerate() {
            let s = y.rank(insertion_penalty) + z.log_prob;
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((zi, yi, s));
            }
        }
        explored.push(ys);
    }
    let (zi, yi, score) = best.ok_or_else(|| Error::invalid("no translation produced"))?;
    Ok(Coupled {
        source_index: zi,
        translation: explored[zi][yi].clone(),
        score,
        explored,
    })
}

/// How one MT ensemble member reads a source hypothesis.
#[derive(Clone, Copy, Debug)]
pub enum MtFeed<'a> {
    /// Source token ids.
    Tokens,
    /// Context vectors from teacher-forcing the hypothesis through this ASR
    /// model (the MT member's joint partner).
    Context(&'a AsrModel),
}

#[derive(Clone, Copy, Debug)]
pub struct MtMember<'a> {
    pub model: &'a MtModel,
    pub feed: MtFeed<'a>,
    pub weight: f64,
}

/// Models and weights of one cascade configuration.
#[derive(Clone, Debug)]
pub struct Cascade<'a> {
    /// ASR ensemble producing the n-best source hypotheses.
    pub asr: Vec<(&'a AsrModel, f64)>,
    pub mt: Vec<MtMember<'a>>,
    /// Optional LM fused into the ASR search with `asr_cfg.lm_weight`.
    pub lm: Option<&'a LanguageModel>,
    pub asr_cfg: DecodeConfig,
    pub mt_cfg: DecodeConfig,
}

/// Result of decoding one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub nbest: Vec<BeamHypothesis>,
    pub coupled: Coupled,
}

impl CascadeOutput {
    pub fn asr_best(&self) -> &BeamHypothesis {
        &self.nbest[0]
    }

    pub fn source(&self) -> &BeamHypothesis {
        &self.nbest[self.coupled.source_index]
    }

    pub fn translation(&self) -> &BeamHypothesis {
        &self.coupled.translation
    }
}

impl<'a> Cascade<'a> {
    /// Single ASR model into single MT model.
    pub fn simple(asr: &'a AsrModel, mt: MtMember<'a>, asr_cfg: DecodeConfig, mt_cfg: DecodeConfig) -> Self {
        Cascade {
            asr: vec![(asr, 1.0)],
            mt: vec![MtMember { weight: 1.0, ..mt }],
            lm: None,
            asr_cfg,
            mt_cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.asr.is_empty() {
            return Err(Error::Config("cascade has no ASR model".into()));
        }
        if self.mt.is_empty() {
            return Err(Error::Config("cascade has no MT model".into()));
        }
        if self.asr_cfg.lm_weight != 0.0 && self.lm.is_none() {
            return Err(Error::Config("LM weight set but no language model given".into()));
        }
        self.asr_cfg.validate()?;
        self.mt_cfg.validate()
    }

    /// Encoder states of each ASR model that is needed, keyed by address.
    fn encodings(&self, features: &Tensor<f32>) -> Result<Vec<(&'a AsrModel, Tensor<f32>)>> {
        let mut out: Vec<(&AsrModel, Tensor<f32>)> = Vec::new();
        let needed = self
            .asr
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(m, _)| *m)
            .chain(self.mt.iter().filter(|m| m.weight != 0.0).filter_map(|m| match m.feed {
                MtFeed::Context(a) => Some(a),
                MtFeed::Tokens => None,
            }));
        for m in needed {
            if !out.iter().any(|(o, _)| std::ptr::eq(*o, m)) {
                out.push((m, m.encode_features(features)?));
            }
        }
        Ok(out)
    }

    pub fn decode(&self, features: &Tensor<f32>) -> Result<CascadeOutput> {
        self.validate()?;
        let encs = self.encodings(features)?;
        let enc_of = |m: &AsrModel| -> &Tensor<f32> {
            &encs.iter().find(|(o, _)| std::ptr::eq(*o, m)).expect("encoded").1
        };

        let members: Vec<Box<dyn StepScorer + Sync>> = self
            .asr
            .iter()
            .map(|(m, w)| -> Box<dyn StepScorer + Sync> {
                if *w == 0.0 {
                    // never queried for scores; stands in to keep weights aligned
                    Box::new(AsrScorer {
                        model: m,
                        enc: Tensor::zeros(&[1, m.config().d_model]),
                    })
                } else {
                    Box::new(AsrScorer {
                        model: m,
                        enc: enc_of(m).clone(),
                    })
                }
            })
            .collect();
        let weights: Vec<f64> = self.asr.iter().map(|(_, w)| *w).collect();
        let asr_scorer = EnsembleScorer::new(members, &weights)?;
        let nbest = match self.lm {
            Some(lm) if self.asr_cfg.lm_weight != 0.0 => beam_search(
                &FusedScorer {
                    base: &asr_scorer,
                    lm,
                    weight: self.asr_cfg.lm_weight,
                },
                &self.asr_cfg,
            )?,
            _ => beam_search(&asr_scorer, &self.asr_cfg)?,
        };

        let coupled = coupled_translate(&nbest, self.mt_cfg.insertion_penalty, |z| self.translate(z, &enc_of))?;
        Ok(CascadeOutput { nbest, coupled })
    }

    fn translate<'e>(
        &self,
        z: &BeamHypothesis,
        enc_of: &impl Fn(&AsrModel) -> &'e Tensor<f32>,
    ) -> Result<Vec<BeamHypothesis>> {
        if z.tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut members: Vec<Box<dyn StepScorer + Sync>> = Vec::with_capacity(self.mt.len());
        for m in &self.mt {
            if m.weight == 0.0 {
                members.push(Box::new(MtScorer {
                    model: m.model,
                    enc: Tensor::zeros(&[1, m.model.config().d_model]),
                }));
                continue;
            }
            let scorer = match m.feed {
                MtFeed::Tokens => {
                    // the MT encoder reads `words eos`, as in training
                    let src: Vec<usize> = z.words().iter().copied().chain([EOS]).collect();
                    MtScorer::new(m.model, MtInput::Tokens(&src))?
                }
                MtFeed::Context(asr) => {
                    let forced = forced_rescore(asr, z, enc_of(asr))?;
                    let ctx = forced.context.expect("forced context");
                    MtScorer::new(m.model, MtInput::Vectors(&ctx))?
                }
            };
            members.push(Box::new(scorer));
        }
        let weights: Vec<f64> = self.mt.iter().map(|m| m.weight).collect();
        let scorer = EnsembleScorer::new(members, &weights)?;
        let mut cfg = self.mt_cfg.clone();
        // the coupled search weighs every MT hypothesis of the beam
        cfg.n_best = cfg.beam_size;
        beam_search(&scorer, &cfg)
    }
}
