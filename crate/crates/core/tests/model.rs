use jamt::model::{AsrModel, JointModel, LanguageModel, MtInput, MtModel, TransformerConfig};
use jamt::tensor::{logsumexp, Tensor};
use jamt::text::{BOS, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        enc_layers: 2,
        dec_layers: 2,
        src_vocab: 12,
        tgt_vocab: 10,
        feature_dim: 6,
        dropout: 0.1,
        max_len: 32,
    }
}

fn features(frames: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[frames, dim], (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn encoder_subsamples_by_four() {
    let asr = AsrModel::new(small(), 1).unwrap();
    for frames in [4, 9, 17, 24] {
        let enc = asr.encode_features(&features(frames, 6, frames as u64)).unwrap();
        assert_eq!(enc.shape(), &[AsrModel::encoded_len(frames), 16]);
    }
    assert!(asr.encode_features(&features(8, 5, 0)).is_err());
}

#[test]
fn step_distributions_are_normalized() {
    let asr = AsrModel::new(small(), 2).unwrap();
    let enc = asr.encode_features(&features(12, 6, 3)).unwrap();
    for prefix in [vec![BOS], vec![BOS, 5], vec![BOS, 5, 7, 4]] {
        let out = asr.decode_step(&prefix, &enc).unwrap();
        assert_eq!(out.log_probs.len(), 12);
        assert_eq!(out.context.len(), 16);
        assert!(logsumexp(&out.log_probs).abs() < 1e-5);
    }
    let lm = LanguageModel::new(small(), 4).unwrap();
    let lp = lm.lm_log_probs(&[BOS, 3, 9]).unwrap();
    assert!(logsumexp(&lp).abs() < 1e-5);
}

#[test]
fn forced_decode_equals_step_decoding_exactly() {
    let asr = AsrModel::new(small(), 3).unwrap();
    let enc = asr.encode_features(&features(20, 6, 4)).unwrap();
    let target = [BOS, 4, 9, 6, 11, EOS];
    let forced = asr.forced_decode(&target, &enc).unwrap();
    assert_eq!(forced.log_probs.rows(), target.len() - 1);
    for t in 0..target.len() - 1 {
        let step = asr.decode_step(&target[..=t], &enc).unwrap();
        assert_eq!(bits(&step.log_probs), bits(forced.log_probs.row(t)), "row {t}");
        assert_eq!(bits(&step.context), bits(forced.context.row(t)), "row {t}");
    }

    let mt = MtModel::new(small(), 5).unwrap();
    let menc = mt.mt_encode(MtInput::Tokens(&[4, 5, 6, EOS])).unwrap();
    let target = [BOS, 7, 3, EOS];
    let forced = mt.forced_decode(&target, &menc).unwrap();
    for t in 0..target.len() - 1 {
        let step = mt.decode_step(&target[..=t], &menc).unwrap();
        assert_eq!(bits(&step.log_probs), bits(forced.log_probs.row(t)));
    }
}

#[test]
fn decoder_is_causal() {
    let asr = AsrModel::new(small(), 6).unwrap();
    let enc = asr.encode_features(&features(16, 6, 7)).unwrap();
    let a = asr.forced_decode(&[BOS, 4, 5, 6, EOS], &enc).unwrap();
    let b = asr.forced_decode(&[BOS, 4, 5, 9, 10, EOS], &enc).unwrap();
    for t in 0..3 {
        assert_eq!(bits(a.log_probs.row(t)), bits(b.log_probs.row(t)));
        assert_eq!(bits(a.context.row(t)), bits(b.context.row(t)));
    }
    assert_ne!(bits(a.context.row(3)), bits(b.context.row(3)));
}

#[test]
fn context_depends_on_prefix_under_zero_encoder_states() {
    let asr = AsrModel::new(small(), 8).unwrap();
    let zeros = Tensor::zeros(&[5, 16]);
    let a = asr.decode_step(&[BOS, 4], &zeros).unwrap();
    let b = asr.decode_step(&[BOS, 7], &zeros).unwrap();
    let diff: f32 = a.context.iter().zip(&b.context).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "contexts nearly identical: {diff}");
    // and do not depend on how many zero rows there are
    let c = asr.decode_step(&[BOS, 4], &Tensor::zeros(&[9, 16])).unwrap();
    let close = a.context.iter().zip(&c.context).all(|(x, y)| (x - y).abs() < 1e-6);
    assert!(close);
}

#[test]
fn mt_accepts_tokens_and_context_vectors() {
    let mt = MtModel::new(small(), 9).unwrap();
    let tok = mt.mt_encode(MtInput::Tokens(&[3, 4, EOS])).unwrap();
    assert_eq!(tok.shape(), &[3, 16]);
    let vecs = features(4, 16, 10);
    let enc = mt.mt_encode(MtInput::Vectors(&vecs)).unwrap();
    assert_eq!(enc.shape(), &[4, 16]);
    assert!(mt.mt_encode(MtInput::Vectors(&features(4, 15, 10))).is_err());
    let out = mt.decode_step(&[BOS], &enc).unwrap();
    assert_eq!(out.log_probs.len(), 10);
}

#[test]
fn tensor_round_trip_preserves_outputs() {
    let asr = AsrModel::new(small(), 11).unwrap();
    let mt = MtModel::new(small(), 12).unwrap();
    let joint = JointModel::new(asr, mt).unwrap();
    let back = JointModel::from_tensors(&joint.to_tensors()).unwrap();
    let feats = features(12, 6, 13);
    let e1 = joint.asr.encode_features(&feats).unwrap();
    let e2 = back.asr.encode_features(&feats).unwrap();
    assert_eq!(bits(e1.data()), bits(e2.data()));
    let m1 = joint.mt.mt_encode(MtInput::Tokens(&[5, EOS])).unwrap();
    let m2 = back.mt.mt_encode(MtInput::Tokens(&[5, EOS])).unwrap();
    assert_eq!(bits(m1.data()), bits(m2.data()));
}

#[test]
fn joint_model_requires_matching_interfaces() {
    let asr = AsrModel::new(small(), 1).unwrap();
    let wide = TransformerConfig {
        d_model: 32,
        ff_dim: 64,
        ..small()
    };
    assert!(JointModel::new(asr.clone(), MtModel::new(wide, 2).unwrap()).is_err());
    let other_vocab = TransformerConfig {
        src_vocab: 13,
        ..small()
    };
    assert!(JointModel::new(asr, MtModel::new(other_vocab, 2).unwrap()).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = AsrModel::new(small(), 21).unwrap();
    let b = AsrModel::new(small(), 21).unwrap();
    let c = AsrModel::new(small(), 22).unwrap();
    assert_eq!(bits(&a.params().flatten()), bits(&b.params().flatten()));
    assert_ne!(bits(&a.params().flatten()), bits(&c.params().flatten()));
}
