//! Finite-difference checks for every differentiable tape op.

use jamt::tensor::{grad_check, AttnSegment, Float, ScalarFunction, Tape, Tensor, Var};
use jamt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 50;
const STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
enum Kind {
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    Mean,
    Attention,
    CausalAttention,
    Gather,
    SliceReshape,
}

/// `Σ w ⊙ op(x)` for a fixed random weighting `w`, so every output
/// coordinate contributes to the checked gradient.
struct OpCase {
    kind: Kind,
    weights: Vec<f64>,
}

fn lift<T: Float>(tape: &mut Tape<T>, shape: &[usize], v: &[f64]) -> Result<Var> {
    tape.constant(Tensor::new(shape, v.iter().map(|&x| T::cast(x)).collect())?)
}

impl OpCase {
    fn input_len(kind: Kind) -> usize {
        match kind {
            Kind::MatMul => 3 * 4 + 4 * 2,
            Kind::Add | Kind::Sub | Kind::Mul => 2 * 6,
            Kind::AddRow => 3 * 4 + 4,
            Kind::LayerNorm => 3 * 5 + 5 + 5,
            Kind::Attention | Kind::CausalAttention => 3 * 5 * 4,
            _ => 12,
        }
    }

    fn weighted<T: Float>(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = lift(tape, &shape, &self.weights[..n])?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }
}

impl ScalarFunction for OpCase {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = match self.kind {
            Kind::MatMul => {
                let a = tape.slice(x, 0, &[3, 4])?;
                let b = tape.slice(x, 12, &[4, 2])?;
                tape.matmul(a, b)?
            }
            Kind::Add | Kind::Sub | Kind::Mul => {
                let a = tape.slice(x, 0, &[2, 3])?;
                let b = tape.slice(x, 6, &[2, 3])?;
                match self.kind {
                    Kind::Add => tape.add(a, b)?,
                    Kind::Sub => tape.sub(a, b)?,
                    _ => tape.mul(a, b)?,
                }
            }
            Kind::AddRow => {
                let a = tape.slice(x, 0, &[3, 4])?;
                let b = tape.slice(x, 12, &[4])?;
                tape.add_row(a, b)?
            }
            Kind::Scale => tape.scale(x, T::cast(-1.7))?,
            Kind::Gelu => tape.gelu(x)?,
            Kind::LayerNorm => {
                let a = tape.slice(x, 0, &[3, 5])?;
                let g = tape.slice(x, 15, &[5])?;
                let b = tape.slice(x, 20, &[5])?;
                tape.layer_norm(a, g, b, T::cast(1e-5))?
            }
            Kind::Softmax => {
                let a = tape.reshape(x, &[3, 4])?;
                tape.softmax(a)?
            }
            Kind::LogSoftmax => {
                let a = tape.reshape(x, &[2, 6])?;
                tape.log_softmax(a)?
            }
            Kind::CrossEntropy => {
                let a = tape.reshape(x, &[3, 4])?;
                return tape.cross_entropy(a, &[Some(2), None, Some(0)], T::cast(0.1));
            }
            Kind::Mean => return tape.mean(x),
            Kind::Attention | Kind::CausalAttention => {
                // two packed sequences; queries of the first attend to a
                // different key span than the second
                let q = tape.slice(x, 0, &[5, 4])?;
                let k = tape.slice(x, 20, &[5, 4])?;
                let v = tape.slice(x, 40, &[5, 4])?;
                let causal = matches!(self.kind, Kind::CausalAttention);
                let segs = if causal {
                    vec![
                        AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
                        AttnSegment { q_start: 3, q_len: 2, k_start: 3, k_len: 2 },
                    ]
                } else {
                    vec![
                        AttnSegment { q_start: 0, q_len: 2, k_start: 1, k_len: 4 },
                        AttnSegment { q_start: 2, q_len: 3, k_start: 0, k_len: 2 },
                    ]
                };
                tape.attention(q, k, v, &segs, 2, causal)?
            }
            Kind::Gather => {
                let a = tape.reshape(x, &[4, 3])?;
                tape.gather_rows(a, &[Some(2), None, Some(0), Some(2), Some(3), Some(1)], 2)?
            }
            Kind::SliceReshape => {
                let a = tape.slice(x, 3, &[2, 4])?;
                tape.reshape(a, &[8])?
            }
        };
        self.weighted(tape, y)
    }
}

fn check_kind(kind: Kind, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for _ in 0..POINTS {
        let n = OpCase::input_len(kind);
        let point: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let case = OpCase { kind, weights };
        let point = Tensor::new(&[n], point).unwrap();
        worst32 = worst32.max(grad_check::<f32, _>(&case, &point, STEP).unwrap());
        worst64 = worst64.max(grad_check::<f64, _>(&case, &point, STEP).unwrap());
    }
    (worst32, worst64)
}

#[test]
fn every_op_passes_finite_differences() {
    let kinds = [
        Kind::MatMul,
        Kind::Add,
        Kind::Sub,
        Kind::Mul,
        Kind::AddRow,
        Kind::Scale,
        Kind::Gelu,
        Kind::LayerNorm,
        Kind::Softmax,
        Kind::LogSoftmax,
        Kind::CrossEntropy,
        Kind::Mean,
        Kind::Attention,
        Kind::CausalAttention,
        Kind::Gather,
        Kind::SliceReshape,
    ];
    for (i, kind) in kinds.into_iter().enumerate() {
        let (e32, e64) = check_kind(kind, 100 + i as u64);
        println!("{kind:?}: f32 {e32:.2e}, f64 {e64:.2e}");
        assert!(e32 < 1e-3, "{kind:?} f32 relative error {e32}");
        assert!(e64 < 1e-6, "{kind:?} f64 relative error {e64}");
    }
}

/// Two-layer net `sum(gelu(x·W1 + b1)·W2)` with every parameter packed into
/// the checked input.
struct TwoLayer;

impl ScalarFunction for TwoLayer {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, p: Var) -> Result<Var> {
        let x = tape.slice(p, 0, &[3, 4])?;
        let w1 = tape.slice(p, 12, &[4, 5])?;
        let b1 = tape.slice(p, 32, &[5])?;
        let w2 = tape.slice(p, 37, &[5, 2])?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, w2)?;
        let y = tape.mul(y, y)?;
        tape.sum(y)
    }
}

#[test]
fn two_layer_net_float32_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..POINTS {
        let point: Vec<f64> = (0..47).map(|_| rng.random_range(-1.0..1.0)).collect();
        let point = Tensor::new(&[47], point).unwrap();
        let err = grad_check::<f32, _>(&TwoLayer, &point, 1e-3).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }
}

/// Label smoothing with ε = 0.1 and V = 4, evaluated directly from the
/// smoothed-target formula: −Σ_v q_v log p_v with q_target = 0.9 and
/// q_other = 0.1/3.
#[test]
fn smoothed_cross_entropy_matches_direct_formula() {
    let logits = [1.0f64, -0.5, 2.0, 0.25];
    let target = 2;
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let logp: Vec<f64> = logits.iter().map(|v| v - z.ln()).collect();
    let expected: f64 = -(0..4)
        .map(|j| if j == target { 0.9 } else { 0.1 / 3.0 } * logp[j])
        .sum::<f64>();

    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::new(&[1, 4], logits.to_vec()).unwrap()).unwrap();
    let ce = tape.cross_entropy(l, &[Some(target)], 0.1).unwrap();
    let got = tape.value(ce).item().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn softmax_sums_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x: Vec<f32> = (0..7).map(|_| rng.random_range(-1e4f32..1e4)).collect();
        let p = jamt::tensor::softmax(&x).unwrap();
        let s: f64 = p.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v >= 0.0));
    }
}

/// Gradient of a sum of two losses equals the sum of the separate gradients.
#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3, 4], data.clone()).unwrap()).unwrap();
        let a = {
            let s = tape.softmax(x).unwrap();
            let sq = tape.mul(s, x).unwrap();
            tape.sum(sq).unwrap()
        };
        let b = {
            let g = tape.gelu(x).unwrap();
            tape.mean(g).unwrap()
        };
        let loss = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).into_data()
    };
    let ga = build(0);
    let gb = build(1);
    let gab = build(2);
    for i in 0..12 {
        assert!((ga[i] + gb[i] - gab[i]).abs() < 1e-12);
    }
}
