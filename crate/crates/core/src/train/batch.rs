//! Padded training batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    /// Features and transcripts.
    AsrPair,
    /// Source and target token sequences.
    MtPair,
    /// Features, transcripts and translations.
    StTriplet,
    /// Source and target token sequences used for adaptation.
    TextOnlyPair,
}

/// One example before batching; token sequences carry no bos/eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Option<Tensor<f32>>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Token sequences padded to a common width, with their true lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedTokens {
    pub ids: Vec<usize>,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl PaddedTokens {
    pub fn new(seqs: &[Vec<usize>]) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
        }
        PaddedTokens {
            ids,
            width,
            lens: seqs.iter().map(Vec::len).collect(),
        }
    }

    pub fn seq(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..i * self.width + self.lens[i]]
    }

    /// `1` for real positions and `0` for padding, row-major.
    pub fn mask(&self) -> Vec<u8> {
        self.lens
            .iter()
            .flat_map(|&l| (0..self.width).map(move |j| u8::from(j < l)))
            .collect()
    }
}

/// Feature matrices padded to a common frame count.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedFeatures {
    /// `[batch, frames, dim]`.
    pub data: Tensor<f32>,
    pub lens: Vec<usize>,
}

impl PaddedFeatures {
    pub fn new(feats: &[&Tensor<f32>]) -> Result<Self> {
        let dim = feats.first().map_or(0, |f| f.cols());
        let frames = feats.iter().map(|f| f.rows()).max().unwrap_or(0);
        let mut data = vec![0.0f32; feats.len() * frames * dim];
        for (b, f) in feats.iter().enumerate() {
            if f.rank() != 2 || f.cols() != dim {
                return Err(Error::shape("batch", format!("feature matrix {:?}, width {dim}", f.shape())));
            }
            data[b * frames * dim..b * frames * dim + f.numel()].copy_from_slice(f.data());
        }
        Ok(PaddedFeatures {
            data: Tensor::new(&[feats.len(), frames, dim], data)?,
            lens: feats.iter().map(|f| f.rows()).collect(),
        })
    }

    /// Unpadded features of utterance `i`.
    pub fn utterance(&self, i: usize) -> Tensor<f32> {
        let (frames, dim) = (self.data.shape()[1], self.data.shape()[2]);
        let start = i * frames * dim;
        let data = self.data.data()[start..start + self.lens[i] * dim].to_vec();
        Tensor::new(&[self.lens[i], dim], data).expect("utterance shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub kind: BatchKind,
    pub features: Option<PaddedFeatures>,
    pub source: Option<PaddedTokens>,
    pub target: Option<PaddedTokens>,
}

impl TrainBatch {
    pub fn new(kind: BatchKind, examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let need_feats = matches!(kind, BatchKind::AsrPair | BatchKind::StTriplet);
        let need_target = !matches!(kind, BatchKind::AsrPair);
        let features = if need_feats {
            let feats = examples
                .iter()
                .map(|e| {
                    e.features
                        .as_ref()
                        .ok_or_else(|| Error::invalid(format!("{kind:?} example without features")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(PaddedFeatures::new(&feats)?)
        } else {
            None
        };
        let source = PaddedTokens::new(&examples.iter().map(|e| e.source.clone()).collect::<Vec<_>>());
        let target = need_target.then(|| PaddedTokens::new(&examples.iter().map(|e| e.target.clone()).collect::<Vec<_>>()));
        let batch = TrainBatch {
            kind,
            features,
            source: Some(source),
            target,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.source.as_ref().map_or(0, |s| s.lens.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let bad = |d: &str| Err(Error::invalid(format!("{:?} batch: {d}", self.kind)));
        let tokens_ok = |t: &PaddedTokens| {
            t.lens.len() == n
                && t.ids.len() == n * t.width
                && t.lens.iter().all(|&l| l >= 1 && l <= t.width)
                && (0..n).all(|i| t.ids[i * t.width + t.lens[i]..(i + 1) * t.width].iter().all(|&x| x == PAD))
                && (0..n).all(|i| t.seq(i).iter().all(|&x| x != PAD && x != BOS && x != EOS))
        };
        if n == 0 {
            return bad("empty");
        }
        if let Some(s) = &self.source {
            if !tokens_ok(s) {
                return bad("source masks inconsistent with lengths, or empty sequences");
            }
        }
        if let Some(t) = &self.target {
            if !tokens_ok(t) {
                return bad("target masks inconsistent with lengths, or empty sequences");
            }
        }
        if let Some(f) = &self.features {
            if f.lens.len() != n || f.lens.iter().any(|&l| l > f.data.shape()[1]) {
                return bad("feature lengths inconsistent");
            }
        }
        let has = (self.features.is_some(), self.source.is_some(), self.target.is_some());
        let ok = match self.kind {
            BatchKind::AsrPair => has.0 && has.1,
            BatchKind::MtPair | BatchKind::TextOnlyPair => has.1 && has.2 && !has.0,
            BatchKind::StTriplet => has.0 && has.1 && has.2,
        };
        if !ok {
            return bad("missing or unexpected fields");
        }
        Ok(())
    }

    pub fn utterances(&self) -> Vec<Tensor<f32>> {
        self.features
            .as_ref()
            .map(|f| (0..self.len()).map(|i| f.utterance(i)).collect())
            .unwrap_or_default()
    }

    /// `bos s` decoder inputs of the sources.
    pub fn source_inputs(&self) -> Vec<Vec<usize>> {
        with_bos(self.source.as_ref())
    }

    /// `s eos`: source decoder targets, and the MT encoder token input.
    pub fn source_outputs(&self) -> Vec<Vec<usize>> {
        with_eos(self.source.as_ref())
    }

    pub fn target_inputs(&self) -> Vec<Vec<usize>> {
        with_bos(self.target.as_ref())
    }

    pub fn target_outputs(&self) -> Vec<Vec<usize>> {
        with_eos(self.target.as_ref())
    }
}

fn with_bos(t: Option<&PaddedTokens>) -> Vec<Vec<usize>> {
    t.map(|t| {
        (0..t.lens.len())
            .map(|i| std::iter::once(BOS).chain(t.seq(i).iter().copied()).collect())
            .collect()
    })
    .unwrap_or_default()
}

fn with_eos(t: Option<&PaddedTokens>) -> Vec<Vec<usize>> {
    t.map(|t| {
        (0..t.lens.len())
            .map(|i| t.seq(i).iter().copied().chain(std::iter::once(EOS)).collect())
            .collect()
    })
    .unwrap_or_default()
}
