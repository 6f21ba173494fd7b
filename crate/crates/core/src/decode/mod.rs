//! Beam search, ensembling, LM fusion and coupled cascade decoding.

mod cascade;
mod scorers;
mod search;

pub use cascade::{coupled_translate, forced_rescore, Cascade, CascadeOutput, Coupled, MtFeed, MtMember};
pub use scorers::{ensemble_log_probs, fuse_lm, AsrScorer, EnsembleScorer, FusedScorer, MtScorer};
pub use search::{beam_search, BeamHypothesis, DecodeConfig, StepScorer, StepScores};

use crate::error::Result;
use crate::model::AsrModel;
use crate::tensor::Tensor;
use crate::text::BpeModel;
use crate::train::Recognizer;

/// Greedy ASR decoding to text.
pub struct GreedyRecognizer<'a> {
    pub asr: &'a AsrModel,
    pub tokenizer: &'a BpeModel,
}

impl Recognizer for GreedyRecognizer<'_> {
    fn recognize(&self, features: &Tensor<f32>) -> Result<String> {
        let scorer = AsrScorer::new(self.asr, features)?;
        let best = beam_search(&scorer, &DecodeConfig::greedy())?;
        Ok(best.first().map(|h| self.tokenizer.decode(&h.tokens)).unwrap_or_default())
    }
}

/// One line of a decode output file:
/// `id<TAB>asr-1best<TAB>translation<TAB>logP(z|x)<TAB>logP(y|z)`.
pub fn output_line(id: &str, asr_text: &str, translation: &str, log_p_z: f64, log_p_y: f64) -> String {
    format!("{id}\t{asr_text}\t{translation}\t{log_p_z:.6}\t{log_p_y:.6}")
}
