//! Batch streams and the ST / text-only alternation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{BatchKind, Example, TrainBatch};
use super::steps::Trainer;
use crate::error::{Error, Result};
use crate::model::JointModel;

/// Endless stream of batches, reshuffled every epoch from its own seed.
#[derive(Clone, Debug)]
pub struct BatchStream {
    kind: BatchKind,
    examples: Vec<Example>,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl BatchStream {
    pub fn new(kind: BatchKind, examples: Vec<Example>, batch_size: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid(format!("no {kind:?} examples to train on")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut s = BatchStream {
            kind,
            order: (0..examples.len()).collect(),
            examples,
            batch_size,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn kind(&self) -> BatchKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn next_batch(&mut self) -> Result<TrainBatch> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&Example> = self.order[self.pos..end].iter().map(|&i| &self.examples[i]).collect();
        self.pos = end;
        TrainBatch::new(self.kind, &picked)
    }

    /// Every example once, in order, as consecutive batches.
    pub fn all_batches(&self) -> Result<Vec<TrainBatch>> {
        self.examples
            .chunks(self.batch_size)
            .map(|c| TrainBatch::new(self.kind, &c.iter().collect::<Vec<_>>()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Multi-task update on speech-translation triplets.
    St,
    /// Text-only adaptation update.
    Text,
}

/// Step kinds of an `n`-step run: each ST step is followed by `r` text
/// steps; `r = 0` gives ST steps only.
pub fn alternate_schedule(r: usize, n: usize) -> Vec<StepKind> {
    (0..n)
        .map(|i| if i % (r + 1) == 0 { StepKind::St } else { StepKind::Text })
        .collect()
}

/// Interleaves multi-task and adaptation updates. `hook` runs after every
/// update with the 1-based step number and may stop the loop by returning
/// `false`. Without a text stream every step is multi-task; without an ST
/// stream every step is text-only.
#[allow(clippy::too_many_arguments)]
pub fn alternate_train(
    trainer: &mut Trainer,
    joint: &mut JointModel,
    mut st: Option<&mut BatchStream>,
    mut text: Option<&mut BatchStream>,
    r: usize,
    steps: usize,
    lambda: f64,
    mut hook: impl FnMut(u64, StepKind, f64, &JointModel) -> Result<bool>,
) -> Result<Vec<(StepKind, f64)>> {
    let pattern = match (st.is_some(), text.is_some()) {
        (false, false) => return Err(Error::invalid("both training streams are empty")),
        (true, true) => alternate_schedule(r, steps),
        (true, false) => alternate_schedule(0, steps),
        (false, true) => vec![StepKind::Text; steps],
    };
    let mut losses = Vec::with_capacity(steps);
    for kind in pattern {
        let loss = match kind {
            StepKind::St => {
                let batch = st.as_deref_mut().expect("st stream").next_batch()?;
                trainer.multitask_step(joint, &batch, lambda)?.total
            }
            StepKind::Text => {
                let batch = text.as_deref_mut().expect("text stream").next_batch()?;
                trainer.adaptation_step(joint, &batch)?
            }
        };
        losses.push((kind, loss));
        if !hook(trainer.step(), kind, loss, joint)? {
            break;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use StepKind::{St, Text};

    #[test]
    fn alternation_patterns() {
        assert_eq!(alternate_schedule(1, 6), vec![St, Text, St, Text, St, Text]);
        assert_eq!(alternate_schedule(2, 6), vec![St, Text, Text, St, Text, Text]);
        assert_eq!(alternate_schedule(0, 3), vec![St, St, St]);
    }

    #[test]
    fn stream_visits_every_example_each_epoch() {
        let ex: Vec<Example> = (0..5)
            .map(|i| Example {
                features: None,
                source: vec![4 + i],
                target: vec![4],
            })
            .collect();
        let mut s = BatchStream::new(BatchKind::MtPair, ex, 2, 3).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let b = s.next_batch().unwrap();
            seen.extend((0..b.len()).map(|i| b.source.as_ref().unwrap().seq(i)[0]));
        }
        seen.sort();
        assert_eq!(seen, vec![4, 5, 6, 7, 8]);
        assert_eq!(s.epoch(), 0);
        s.next_batch().unwrap();
        assert_eq!(s.epoch(), 1);
    }
}
