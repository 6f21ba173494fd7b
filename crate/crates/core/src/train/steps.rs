//! Single optimizer updates for every training regime.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{BatchKind, TrainBatch};
use super::loss::{self, JointBound};
use super::optim::{Adam, AdamConfig, AdamMoments};
use crate::error::{Error, Result};
use crate::model::{AsrModel, Bound, Fwd, JointModel, LanguageModel, MtModel, ParamStore};
use crate::tensor::{Gradients, Tape, Var};

/// Losses of one multi-task update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLosses {
    pub asr: f64,
    pub mt: f64,
    pub total: f64,
}

/// Summary of the latest update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Asr,
    Mt,
    Lm,
}

/// Optimizer state plus the dropout stream of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub adam: Adam,
    pub label_smoothing: f64,
    moments: [Option<AdamMoments>; 3],
    rng: ChaCha8Rng,
    last: Option<StepReport>,
    /// Keep per-parameter squared gradient norms of the latest update.
    pub record_grads: bool,
    grad_norms: Vec<(String, f64)>,
}

/// Maps numerical failures to [`Error::Divergence`].
pub fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!("non-finite value in {op}")),
        other => other,
    }
}

fn expect_kind(batch: &TrainBatch, kinds: &[BatchKind]) -> Result<()> {
    if kinds.contains(&batch.kind) {
        Ok(())
    } else {
        Err(Error::invalid(format!("expected a {kinds:?} batch, got {:?}", batch.kind)))
    }
}

impl Trainer {
    pub fn new(config: AdamConfig, d_model: usize, label_smoothing: f64, seed: u64) -> Self {
        Trainer {
            adam: Adam::new(config, d_model),
            label_smoothing,
            moments: [None, None, None],
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
            record_grads: false,
            grad_norms: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step()
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.last.as_ref()
    }

    /// `(name, ‖g‖²)` for every parameter updated by the latest step, when
    /// `record_grads` is set.
    pub fn grad_norms(&self) -> &[(String, f64)] {
        &self.grad_norms
    }

    fn update(
        &mut self,
        tape: Tape<f32>,
        loss: Var,
        parts: &mut [(Slot, &mut ParamStore, &Bound)],
    ) -> Result<()> {
        let grads = tape.backward(loss).map_err(diverged)?;
        // release the tape's references so parameters update in place
        drop(tape);
        self.apply(&grads, parts)
    }

    fn apply(&mut self, grads: &Gradients<f32>, parts: &mut [(Slot, &mut ParamStore, &Bound)]) -> Result<()> {
        let lr = self.adam.begin()?;
        let bounds: Vec<&Bound> = parts.iter().map(|p| p.2).collect();
        let norm = Adam::grad_norm(grads, &bounds);
        if !norm.is_finite() {
            return Err(Error::Divergence("non-finite gradient norm".into()));
        }
        let clip = self.adam.clip_factor(norm);
        self.grad_norms.clear();
        for (slot, store, bound) in parts.iter_mut() {
            if self.record_grads {
                for id in store.ids() {
                    if let Some(g) = grads.slice(bound.var(id)) {
                        let sq = g.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                        self.grad_norms.push((store.name(id).to_string(), sq));
                    }
                }
            }
            let m = self.moments[*slot as usize].get_or_insert_with(|| AdamMoments::new(store));
            if !m.matches(store) {
                return Err(Error::invalid("optimizer state belongs to a differently shaped model"));
            }
            self.adam.apply(lr, clip, store, m, bound, grads)?;
        }
        self.last = Some(StepReport {
            step: self.adam.step(),
            lr,
            grad_norm: norm,
        });
        Ok(())
    }

    fn loss_value(tape: &Tape<f32>, v: Var) -> Result<f64> {
        let x = f64::from(tape.value(v).data()[0]);
        if !x.is_finite() {
            return Err(Error::Divergence(format!("loss is {x}")));
        }
        Ok(x)
    }

    /// One ASR pre-training update on features and transcripts.
    pub fn asr_step(&mut self, asr: &mut AsrModel, batch: &TrainBatch) -> Result<f64> {
        expect_kind(batch, &[BatchKind::AsrPair, BatchKind::StTriplet])?;
        let mut tape = Tape::new();
        let bound = asr.params().bind(&mut tape, true)?;
        let mut f = Fwd {
            tape: &mut tape,
            bound: &bound,
            dropout: Some((asr.config().dropout, &mut self.rng)),
        };
        let l = loss::asr_loss(&mut f, asr, batch, self.label_smoothing).map_err(diverged)?;
        let value = Self::loss_value(&tape, l)?;
        self.update(tape, l, &mut [(Slot::Asr, asr.params_mut(), &bound)])?;
        Ok(value)
    }

    /// One MT pre-training update on discrete source tokens.
    pub fn mt_step(&mut self, mt: &mut MtModel, batch: &TrainBatch) -> Result<f64> {
        expect_kind(batch, &[BatchKind::MtPair, BatchKind::TextOnlyPair, BatchKind::StTriplet])?;
        let mut tape = Tape::new();
        let bound = mt.params().bind(&mut tape, true)?;
        let mut f = Fwd {
            tape: &mut tape,
            bound: &bound,
            dropout: Some((mt.config().dropout, &mut self.rng)),
        };
        let l = loss::mt_loss(&mut f, mt, batch, self.label_smoothing).map_err(diverged)?;
        let value = Self::loss_value(&tape, l)?;
        self.update(tape, l, &mut [(Slot::Mt, mt.params_mut(), &bound)])?;
        Ok(value)
    }

    /// One language-model update on the source side of `batch`.
    pub fn lm_step(&mut self, lm: &mut LanguageModel, batch: &TrainBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = lm.params().bind(&mut tape, true)?;
        let mut f = Fwd {
            tape: &mut tape,
            bound: &bound,
            dropout: Some((lm.config().dropout, &mut self.rng)),
        };
        let l = loss::lm_loss(&mut f, lm, batch, self.label_smoothing).map_err(diverged)?;
        let value = Self::loss_value(&tape, l)?;
        self.update(tape, l, &mut [(Slot::Lm, lm.params_mut(), &bound)])?;
        Ok(value)
    }

    /// One multi-task update `λ·L_asr + (1 − λ)·L_mt` on an ST batch.
    pub fn multitask_step(&mut self, joint: &mut JointModel, batch: &TrainBatch, lambda: f64) -> Result<JointLosses> {
        expect_kind(batch, &[BatchKind::StTriplet])?;
        let mut tape = Tape::new();
        let asr_bound = joint.asr.params().bind(&mut tape, true)?;
        let mt_bound = joint.mt.params().bind(&mut tape, true)?;
        let bound = JointBound {
            asr: &asr_bound,
            mt: &mt_bound,
        };
        let (la, lm) =
            loss::joint_losses(&mut tape, joint, bound, batch, self.label_smoothing, Some(&mut self.rng)).map_err(diverged)?;
        let total = loss::weighted_sum(&mut tape, la, lm, lambda).map_err(diverged)?;
        let losses = JointLosses {
            asr: Self::loss_value(&tape, la)?,
            mt: Self::loss_value(&tape, lm)?,
            total: Self::loss_value(&tape, total)?,
        };
        let JointModel { asr, mt } = joint;
        self.update(
            tape,
            total,
            &mut [(Slot::Asr, asr.params_mut(), &asr_bound), (Slot::Mt, mt.params_mut(), &mt_bound)],
        )?;
        Ok(losses)
    }

    /// One text-only update: the ASR decoder reads the source tokens
    /// against zero encoder states and its context vectors feed the MT
    /// model. The ASR frontend and encoder are off the path and untouched.
    pub fn adaptation_step(&mut self, joint: &mut JointModel, batch: &TrainBatch) -> Result<f64> {
        expect_kind(batch, &[BatchKind::TextOnlyPair, BatchKind::MtPair])?;
        let mut tape = Tape::new();
        let asr_bound = joint.asr.params().bind(&mut tape, true)?;
        let mt_bound = joint.mt.params().bind(&mut tape, true)?;
        let bound = JointBound {
            asr: &asr_bound,
            mt: &mt_bound,
        };
        let l = loss::adaptation_loss(&mut tape, joint, bound, batch, self.label_smoothing, Some(&mut self.rng))
            .map_err(diverged)?;
        let value = Self::loss_value(&tape, l)?;
        let JointModel { asr, mt } = joint;
        self.update(
            tape,
            l,
            &mut [(Slot::Asr, asr.params_mut(), &asr_bound), (Slot::Mt, mt.params_mut(), &mt_bound)],
        )?;
        Ok(value)
    }
}

/// Losses without dropout or updates, for validation.
pub mod eval {
    use super::*;

    fn with_tape(
        store: &ParamStore,
        run: impl FnOnce(&mut Fwd<f32>) -> Result<Var>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false)?;
        let mut f = Fwd {
            tape: &mut tape,
            bound: &bound,
            dropout: None,
        };
        let v = run(&mut f)?;
        Ok(f64::from(tape.value(v).data()[0]))
    }

    pub fn asr_loss(asr: &AsrModel, batch: &TrainBatch) -> Result<f64> {
        with_tape(asr.params(), |f| loss::asr_loss(f, asr, batch, 0.0))
    }

    pub fn mt_loss(mt: &MtModel, batch: &TrainBatch) -> Result<f64> {
        with_tape(mt.params(), |f| loss::mt_loss(f, mt, batch, 0.0))
    }

    pub fn lm_loss(lm: &LanguageModel, batch: &TrainBatch) -> Result<f64> {
        with_tape(lm.params(), |f| loss::lm_loss(f, lm, batch, 0.0))
    }

    pub fn joint_losses(joint: &JointModel, batch: &TrainBatch, lambda: f64) -> Result<JointLosses> {
        let mut tape = Tape::new();
        let asr_bound = joint.asr.params().bind(&mut tape, false)?;
        let mt_bound = joint.mt.params().bind(&mut tape, false)?;
        let bound = JointBound {
            asr: &asr_bound,
            mt: &mt_bound,
        };
        let (la, lm) = loss::joint_losses(&mut tape, joint, bound, batch, 0.0, None)?;
        let total = loss::weighted_sum(&mut tape, la, lm, lambda)?;
        let value = |v: Var| f64::from(tape.value(v).data()[0]);
        Ok(JointLosses {
            asr: value(la),
            mt: value(lm),
            total: value(total),
        })
    }
}
