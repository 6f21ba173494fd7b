//! Transformer building blocks over packed sequences.
//!
//! A batch is stored as one matrix whose rows are the positions of every
//! sequence back to back; [`Packing`] records where each sequence starts.
//! Nothing is padded, so a sequence's rows are computed exactly as they
//! would be on their own.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, Builder, Fill, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{AttnSegment, Float, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row layout of a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    lens: Vec<usize>,
    starts: Vec<usize>,
}

impl Packing {
    pub fn new(lens: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in lens {
            starts.push(at);
            at += l;
        }
        Packing {
            lens: lens.to_vec(),
            starts,
        }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    /// Each sequence attends within itself.
    pub fn self_segments(&self) -> Vec<AttnSegment> {
        self.starts
            .iter()
            .zip(&self.lens)
            .map(|(&s, &l)| AttnSegment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect()
    }

    /// Sequence `i` of `self` attends to sequence `memory_of[i]` of `memory`.
    pub fn cross_segments(&self, memory: &Packing, memory_of: &[usize]) -> Vec<AttnSegment> {
        self.starts
            .iter()
            .zip(&self.lens)
            .zip(memory_of)
            .map(|((&s, &l), &m)| AttnSegment {
                q_start: s,
                q_len: l,
                k_start: memory.starts[m],
                k_len: memory.lens[m],
            })
            .collect()
    }

    /// Row index of position `pos` of sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.starts[seq] + pos
    }
}

/// Fixed sinusoidal encodings for the positions of every packed sequence.
pub fn positional_encoding<T: Float>(packing: &Packing, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(packing.total() * d);
    for &l in packing.lens() {
        for pos in 0..l {
            for i in 0..d {
                let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let a = pos as f64 * rate;
                data.push(T::cast(if i % 2 == 0 { a.sin() } else { a.cos() }));
            }
        }
    }
    Tensor::new(&[packing.total(), d], data).expect("positional encoding shape")
}

/// Forward-pass context: the tape, the bound parameters and, when
/// training, the dropout state.
pub struct Fwd<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    pub bound: &'a Bound,
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<T: Float> Fwd<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random_bool(p) { T::zero() } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?)?;
        self.tape.mul(x, m)
    }

    pub fn add_positions(&mut self, x: Var, packing: &Packing) -> Result<Var> {
        let d = self.tape.value(x).cols();
        let pe = self.tape.constant(positional_encoding(packing, d))?;
        self.tape.add(x, pe)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn build(b: &mut Builder, name: &str, fan_in: usize, out: usize) -> Result<Self> {
        Ok(Linear {
            w: b.param(&format!("{name}.w"), &[fan_in, out], Fill::FanIn)?,
            b: b.param(&format!("{name}.b"), &[out], Fill::Const(0.0))?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.p(self.w))?;
        f.tape.add_row(y, f.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn build(b: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: b.param(&format!("{name}.g"), &[d], Fill::Const(1.0))?,
            bias: b.param(&format!("{name}.b"), &[d], Fill::Const(0.0))?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gain), f.p(self.bias));
        f.tape.layer_norm(x, g, b, T::cast(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHead {
    pub(crate) fn build(b: &mut Builder, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(MultiHead {
            q: Linear::build(b, &format!("{name}.q"), d, d)?,
            k: Linear::build(b, &format!("{name}.k"), d, d)?,
            v: Linear::build(b, &format!("{name}.v"), d, d)?,
            o: Linear::build(b, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn forward<T: Float>(
        &self,
        f: &mut Fwd<T>,
        queries: Var,
        memory: Var,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(f, queries)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let a = f.tape.attention(q, k, v, segments, self.heads, causal)?;
        self.o.forward(f, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn build(b: &mut Builder, name: &str, d: usize, ff: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::build(b, &format!("{name}.up"), d, ff)?,
            down: Linear::build(b, &format!("{name}.down"), ff, d)?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.gelu(h)?;
        let h = f.dropout(h)?;
        self.down.forward(f, h)
    }
}

/// Pre-norm layer: self-attention, optional cross-attention, feed-forward,
/// each wrapped as `x + dropout(sublayer(norm(x)))`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub self_norm: Norm,
    pub self_attn: MultiHead,
    pub cross: Option<(Norm, MultiHead)>,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

/// Cross-attention input of a decoder layer.
pub struct Memory<'m> {
    pub states: Var,
    pub segments: &'m [AttnSegment],
}

impl Layer {
    pub(crate) fn build(b: &mut Builder, name: &str, d: usize, heads: usize, ff: usize, cross: bool) -> Result<Self> {
        let self_norm = Norm::build(b, &format!("{name}.self_norm"), d)?;
        let self_attn = MultiHead::build(b, &format!("{name}.self_attn"), d, heads)?;
        let cross = if cross {
            Some((
                Norm::build(b, &format!("{name}.cross_norm"), d)?,
                MultiHead::build(b, &format!("{name}.cross_attn"), d, heads)?,
            ))
        } else {
            None
        };
        Ok(Layer {
            self_norm,
            self_attn,
            cross,
            ff_norm: Norm::build(b, &format!("{name}.ff_norm"), d)?,
            ff: FeedForward::build(b, &format!("{name}.ff"), d, ff)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        f: &mut Fwd<T>,
        x: Var,
        self_segments: &[AttnSegment],
        causal: bool,
        memory: Option<&Memory>,
    ) -> Result<Var> {
        let h = self.self_norm.forward(f, x)?;
        let h = self.self_attn.forward(f, h, h, self_segments, causal)?;
        let h = f.dropout(h)?;
        let mut x = f.tape.add(x, h)?;
        if let (Some((norm, attn)), Some(mem)) = (&self.cross, memory) {
            let h = norm.forward(f, x)?;
            let h = attn.forward(f, h, mem.states, mem.segments, false)?;
            let h = f.dropout(h)?;
            x = f.tape.add(x, h)?;
        }
        let h = self.ff_norm.forward(f, x)?;
        let h = self.ff.forward(f, h)?;
        let h = f.dropout(h)?;
        f.tape.add(x, h)
    }
}

/// Layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub layers: Vec<Layer>,
    pub final_norm: Norm,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build(
        b: &mut Builder,
        name: &str,
        n: usize,
        d: usize,
        heads: usize,
        ff: usize,
        cross: bool,
    ) -> Result<Self> {
        let layers = (0..n)
            .map(|i| Layer::build(b, &format!("{name}.{i}"), d, heads, ff, cross))
            .collect::<Result<_>>()?;
        Ok(Stack {
            layers,
            final_norm: Norm::build(b, &format!("{name}.final_norm"), d)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        f: &mut Fwd<T>,
        mut x: Var,
        self_segments: &[AttnSegment],
        causal: bool,
        memory: Option<&Memory>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(f, x, self_segments, causal, memory)?;
        }
        self.final_norm.forward(f, x)
    }
}

/// Token embedding scaled by `√d`, plus positions.
pub fn embed<T: Float>(f: &mut Fwd<T>, table: ParamId, seqs: &[&[usize]], packing: &Packing) -> Result<Var> {
    let vocab = f.tape.shape(f.p(table))[0];
    let d = f.tape.shape(f.p(table))[1];
    let mut index = Vec::with_capacity(packing.total());
    for s in seqs {
        for &t in *s {
            if t >= vocab {
                return Err(Error::invalid(format!("token id {t} outside vocabulary of {vocab}")));
            }
            index.push(Some(t));
        }
    }
    let e = f.tape.gather_rows(f.p(table), &index, 1)?;
    let e = f.tape.scale(e, T::cast((d as f64).sqrt()))?;
    let e = f.add_positions(e, packing)?;
    f.dropout(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_segments() {
        let p = Packing::new(&[3, 2]);
        assert_eq!(p.starts(), &[0, 3]);
        assert_eq!(p.total(), 5);
        let m = Packing::new(&[4]);
        let segs = p.cross_segments(&m, &[0, 0]);
        assert_eq!(segs[1], AttnSegment { q_start: 3, q_len: 2, k_start: 0, k_len: 4 });
    }

    #[test]
    fn positions_restart_per_sequence() {
        let p = Packing::new(&[2, 2]);
        let pe = positional_encoding::<f64>(&p, 4);
        assert_eq!(pe.row(0), pe.row(2));
        assert_eq!(pe.row(1), pe.row(3));
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}
