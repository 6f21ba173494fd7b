//! Length-synchronous beam search.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum output length relative to the input length.
    pub length_ratio: f64,
    /// Added to a hypothesis' ranking score once per token.
    pub insertion_penalty: f64,
    /// EOS is admitted only when `P(eos) ≥ eos_factor · max_{v≠eos} P(v)`;
    /// 0 admits it always.
    pub eos_factor: f64,
    pub lm_weight: f64,
    pub n_best: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 8,
            length_ratio: 1.2,
            insertion_penalty: 0.0,
            eos_factor: 1.0,
            lm_weight: 0.0,
            n_best: 1,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            beam_size: 1,
            eos_factor: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 || self.beam_size < self.n_best {
            return Err(Error::Config(format!(
                "need beam_size ≥ n_best ≥ 1, got beam {} and n-best {}",
                self.beam_size, self.n_best
            )));
        }
        if !(self.length_ratio > 0.0 && self.length_ratio.is_finite()) {
            return Err(Error::Config("length_ratio must be positive".into()));
        }
        if !(self.eos_factor >= 0.0 && self.eos_factor.is_finite()) {
            return Err(Error::Config("eos_factor must be a nonnegative number".into()));
        }
        if !self.insertion_penalty.is_finite() || !self.lm_weight.is_finite() {
            return Err(Error::Config("penalties and weights must be finite".into()));
        }
        Ok(())
    }

    /// `ceil(length_ratio · input_len)`, ignoring representation error in
    /// the product (1.2 · 5 is 6, not 7).
    pub fn max_output_len(&self, input_len: usize) -> usize {
        let x = self.length_ratio * input_len as f64;
        let r = x.round();
        if (x - r).abs() < 1e-9 * x.max(1.0) {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    /// Whether `eos` may extend a hypothesis given next-token scores.
    pub fn eos_allowed(&self, scores: &[f64]) -> bool {
        if self.eos_factor == 0.0 {
            return true;
        }
        let best_other = scores
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != EOS && v != PAD && v != BOS)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        scores[EOS] >= self.eos_factor.ln() + best_other
    }
}

/// A (possibly partial) output sequence. `tokens` excludes the leading
/// `bos` and ends with `eos` iff `finished`; `context` has one row per
/// token when the scorer provides context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub context: Option<Tensor<f32>>,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Ranking score `log_prob + α·|tokens|`.
    pub fn rank(&self, insertion_penalty: f64) -> f64 {
        self.log_prob + insertion_penalty * self.tokens.len() as f64
    }

    /// `bos tokens`, the decoder input that scored this hypothesis.
    pub fn prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }

    /// Tokens without the final `eos`.
    pub fn words(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Next-token scores for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    pub scores: Vec<f64>,
    pub context: Option<Vec<f32>>,
}

/// Anything that scores the next token of many prefixes at once.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Length the output budget is relative to.
    fn input_len(&self) -> usize;

    /// Longest prefix (including `bos`) the scorer accepts.
    fn max_prefix_len(&self) -> usize;

    /// Scores after each prefix; every prefix starts with `bos`.
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>>;
}

impl<S: StepScorer + ?Sized> StepScorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn input_len(&self) -> usize {
        (**self).input_len()
    }
    fn max_prefix_len(&self) -> usize {
        (**self).max_prefix_len()
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        (**self).score(prefixes)
    }
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    context: Vec<f32>,
}

struct Candidate {
    from: usize,
    token: usize,
    log_prob: f64,
    rank: f64,
}

fn by_rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.rank
        .partial_cmp(&a.rank)
        .unwrap_or(Ordering::Equal)
        .then(a.from.cmp(&b.from))
        .then(a.token.cmp(&b.token))
}

/// Beam search returning up to `n_best` hypotheses, best first. All live
/// prefixes are scored in one batched call per step. Hypotheses that emit
/// `eos` leave the beam; the search ends when none is left or the length
/// budget is spent. If nothing finished, the best unfinished hypotheses
/// are returned with `finished == false`.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let input_len = scorer.input_len();
    if input_len == 0 {
        return Err(Error::invalid("empty decoder input"));
    }
    let v = scorer.vocab_size();
    let max_len = cfg
        .max_output_len(input_len)
        .min(scorer.max_prefix_len().saturating_sub(1))
        .max(1);
    let alpha = cfg.insertion_penalty;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        context: Vec::new(),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut width = None;

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        let scored = scorer.score(&refs)?;
        if scored.len() != live.len() {
            return Err(Error::shape("beam_search", "scorer returned a different number of rows"));
        }
        let mut cands = Vec::with_capacity(live.len() * v);
        for (i, (h, s)) in live.iter().zip(&scored).enumerate() {
            if s.scores.len() != v {
                return Err(Error::shape("beam_search", format!("{} scores for vocabulary {v}", s.scores.len())));
            }
            let eos_ok = cfg.eos_allowed(&s.scores);
            let len = (h.tokens.len() + 1) as f64;
            for (tok, &sc) in s.scores.iter().enumerate() {
                if tok == PAD || tok == BOS || (tok == EOS && !eos_ok) || sc == f64::NEG_INFINITY {
                    continue;
                }
                let log_prob = h.log_prob + sc;
                cands.push(Candidate {
                    from: i,
                    token: tok,
                    log_prob,
                    rank: log_prob + alpha * len,
                });
            }
        }
        cands.sort_by(by_rank);
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let h = &live[c.from];
            let mut tokens = h.tokens.clone();
            tokens.push(c.token);
            let mut context = h.context.clone();
            if let Some(ctx) = &scored[c.from].context {
                if *width.get_or_insert(ctx.len()) != ctx.len() {
                    return Err(Error::shape("beam_search", "context width changed between steps"));
                }
                context.extend_from_slice(ctx);
            }
            if c.token == EOS {
                finished.push(hypothesis(tokens, c.log_prob, context, width, true)?);
            } else {
                next.push(Live {
                    tokens,
                    log_prob: c.log_prob,
                    context,
                });
            }
        }
        live = next;
    }

    let mut out = if finished.is_empty() {
        live.into_iter()
            .map(|h| hypothesis(h.tokens, h.log_prob, h.context, width, false))
            .collect::<Result<Vec<_>>>()?
    } else {
        finished
    };
    // stable: equal ranks keep the order in which they were produced
    out.sort_by(|a, b| b.rank(alpha).partial_cmp(&a.rank(alpha)).unwrap_or(Ordering::Equal));
    out.truncate(cfg.n_best);
    Ok(out)
}

fn hypothesis(
    tokens: Vec<usize>,
    log_prob: f64,
    context: Vec<f32>,
    width: Option<usize>,
    finished: bool,
) -> Result<BeamHypothesis> {
    let context = match width {
        Some(w) if !context.is_empty() => Some(Tensor::new(&[context.len() / w, w], context)?),
        _ => None,
    };
    Ok(BeamHypothesis {
        tokens,
        log_prob,
        context,
        finished,
    })
}
