//! Step scorers over trained models, ensembles and LM fusion.

use super::search::{StepScorer, StepScores};
use crate::error::{Error, Result};
use crate::model::{AsrModel, LanguageModel, MtInput, MtModel, StepOutput};
use crate::tensor::Tensor;

fn to_scores(out: Vec<StepOutput>, with_context: bool) -> Vec<StepScores> {
    out.into_iter()
        .map(|o| StepScores {
            scores: o.log_probs.iter().map(|&x| f64::from(x)).collect(),
            context: with_context.then_some(o.context),
        })
        .collect()
}

/// ASR decoder over fixed encoder states; reports context vectors.
pub struct AsrScorer<'a> {
    pub model: &'a AsrModel,
    pub enc: Tensor<f32>,
}

impl<'a> AsrScorer<'a> {
    pub fn new(model: &'a AsrModel, features: &Tensor<f32>) -> Result<Self> {
        Ok(AsrScorer {
            model,
            enc: model.encode_features(features)?,
        })
    }
}

impl StepScorer for AsrScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().src_vocab
    }
    fn input_len(&self) -> usize {
        self.enc.rows()
    }
    fn max_prefix_len(&self) -> usize {
        self.model.config().max_len
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        Ok(to_scores(self.model.score_prefixes(prefixes, &self.enc)?, true))
    }
}

/// MT decoder over fixed encoder states.
pub struct MtScorer<'a> {
    pub model: &'a MtModel,
    pub enc: Tensor<f32>,
}

impl<'a> MtScorer<'a> {
    pub fn new(model: &'a MtModel, input: MtInput) -> Result<Self> {
        Ok(MtScorer {
            model,
            enc: model.mt_encode(input)?,
        })
    }
}

impl StepScorer for MtScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().tgt_vocab
    }
    fn input_len(&self) -> usize {
        self.enc.rows()
    }
    fn max_prefix_len(&self) -> usize {
        self.model.config().max_len
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        Ok(to_scores(self.model.score_prefixes(prefixes, &self.enc)?, false))
    }
}

/// `Σᵢ wᵢ·scoresᵢ`; members with zero weight are skipped, so a one-hot
/// weight vector reproduces that member bit for bit.
pub fn ensemble_log_probs(members: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if members.is_empty() || members.len() != weights.len() {
        return Err(Error::invalid(format!("{} members but {} weights", members.len(), weights.len())));
    }
    let v = members[0].len();
    if members.iter().any(|m| m.len() != v) {
        return Err(Error::shape("ensemble", "members disagree on vocabulary size"));
    }
    let mut out: Option<Vec<f64>> = None;
    for (m, &w) in members.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => out = Some(m.iter().map(|&x| w * x).collect()),
            Some(acc) => acc.iter_mut().zip(m.iter()).for_each(|(a, &x)| *a += w * x),
        }
    }
    out.ok_or_else(|| Error::invalid("all ensemble weights are zero"))
}

/// `model + γ·lm`, elementwise.
pub fn fuse_lm(model: &[f64], lm: &[f64], weight: f64) -> Result<Vec<f64>> {
    if model.len() != lm.len() {
        return Err(Error::shape(
            "fuse_lm",
            format!("model has {} scores, LM {}", model.len(), lm.len()),
        ));
    }
    if weight == 0.0 {
        return Ok(model.to_vec());
    }
    Ok(model.iter().zip(lm).map(|(&m, &l)| m + weight * l).collect())
}

/// Weighted average of member scores. Weights are normalized to sum to one
/// at construction. Context vectors come from member `context_from`.
pub struct EnsembleScorer<'a> {
    members: Vec<Box<dyn StepScorer + Sync + 'a>>,
    weights: Vec<f64>,
    context_from: usize,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(members: Vec<Box<dyn StepScorer + Sync + 'a>>, weights: &[f64]) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::invalid(format!("{} members but {} weights", members.len(), weights.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("ensemble weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("all ensemble weights are zero"));
        }
        let v = members[0].vocab_size();
        if members.iter().any(|m| m.vocab_size() != v) {
            return Err(Error::shape("ensemble", "members disagree on vocabulary size"));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let context_from = weights.iter().position(|&w| w > 0.0).expect("positive weight");
        Ok(EnsembleScorer {
            members,
            weights,
            context_from,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Takes context vectors from member `i` instead of the first member
    /// with nonzero weight.
    pub fn with_context_from(mut self, i: usize) -> Result<Self> {
        if i >= self.members.len() {
            return Err(Error::invalid(format!("no ensemble member {i}")));
        }
        self.context_from = i;
        Ok(self)
    }
}

impl StepScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }
    fn input_len(&self) -> usize {
        self.members[self.context_from].input_len()
    }
    fn max_prefix_len(&self) -> usize {
        self.members.iter().map(|m| m.max_prefix_len()).min().expect("members")
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        let mut per_member: Vec<Option<Vec<StepScores>>> = Vec::with_capacity(self.members.len());
        for (i, (m, &w)) in self.members.iter().zip(&self.weights).enumerate() {
            per_member.push((w != 0.0 || i == self.context_from).then(|| m.score(prefixes)).transpose()?);
        }
        (0..prefixes.len())
            .map(|p| {
                let rows: Vec<&[f64]> = per_member
                    .iter()
                    .zip(&self.weights)
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(m, _)| m.as_ref().expect("scored")[p].scores.as_slice())
                    .collect();
                let ws: Vec<f64> = self.weights.iter().copied().filter(|&w| w != 0.0).collect();
                Ok(StepScores {
                    scores: ensemble_log_probs(&rows, &ws)?,
                    context: per_member[self.context_from].as_ref().expect("scored")[p].context.clone(),
                })
            })
            .collect()
    }
}

/// Shallow fusion of a scorer with a language model over its output
/// vocabulary.
pub struct FusedScorer<'a, S> {
    pub base: S,
    pub lm: &'a LanguageModel,
    pub weight: f64,
}

impl<S: StepScorer> StepScorer for FusedScorer<'_, S> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }
    fn input_len(&self) -> usize {
        self.base.input_len()
    }
    fn max_prefix_len(&self) -> usize {
        self.base.max_prefix_len().min(self.lm.config().max_len)
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        let base = self.base.score(prefixes)?;
        if self.weight == 0.0 {
            return Ok(base);
        }
        let lm = self.lm.score_prefixes(prefixes)?;
        base.into_iter()
            .zip(lm)
            .map(|(b, l)| {
                let l: Vec<f64> = l.iter().map(|&x| f64::from(x)).collect();
                Ok(StepScores {
                    scores: fuse_lm(&b.scores, &l, self.weight)?,
                    context: b.context,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_arithmetic() {
        assert_eq!(fuse_lm(&[-1.0, -2.0], &[-2.0, -1.0], 1.0).unwrap(), vec![-3.0, -3.0]);
        assert_eq!(fuse_lm(&[-1.0, -2.0], &[-2.0, -1.0], 0.0).unwrap(), vec![-1.0, -2.0]);
        assert!(fuse_lm(&[-1.0], &[-2.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_ensemble_weights() {
        let a = [-0.1f64, -2.3, -4.0];
        let b = [-1.7f64, -0.2, -3.3];
        assert_eq!(ensemble_log_probs(&[&a, &b], &[1.0, 0.0]).unwrap(), a.to_vec());
        assert_eq!(ensemble_log_probs(&[&a, &a], &[0.5, 0.5]).unwrap(), a.to_vec());
        assert!(ensemble_log_probs(&[&a, &b[..2]], &[0.5, 0.5]).is_err());
    }
}
