use jamt::model::{AsrModel, JointModel, MtModel, TransformerConfig};
use jamt::tensor::Tensor;
use jamt::train::{
    alternate_train, eval, AdamConfig, BatchKind, BatchStream, Example, StepKind, TrainBatch, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(dropout: f64) -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        enc_layers: 1,
        dec_layers: 1,
        src_vocab: 10,
        tgt_vocab: 9,
        feature_dim: 4,
        dropout,
        max_len: 32,
    }
}

fn joint(dropout: f64) -> JointModel {
    JointModel::new(AsrModel::new(config(dropout), 1).unwrap(), MtModel::new(config(dropout), 2).unwrap()).unwrap()
}

fn examples(n: usize, seed: u64, with_features: bool) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..5);
            let source: Vec<usize> = (0..len).map(|_| rng.random_range(4..10)).collect();
            let target: Vec<usize> = source.iter().rev().map(|&s| s - 1).collect();
            let features = with_features.then(|| {
                let rows = 4 * (len + 1);
                let data = (0..rows * 4).map(|i| ((source[(i / 16) % len] * 7 + i % 4) as f32).sin()).collect();
                Tensor::new(&[rows, 4], data).unwrap()
            });
            Example {
                features,
                source,
                target,
            }
        })
        .collect()
}

fn batch(kind: BatchKind, ex: &[Example]) -> TrainBatch {
    TrainBatch::new(kind, &ex.iter().collect::<Vec<_>>()).unwrap()
}

fn flat(m: &JointModel) -> (Vec<u32>, Vec<u32>) {
    let b = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect();
    (b(m.asr.params().flatten()), b(m.mt.params().flatten()))
}

#[test]
fn lambda_one_leaves_mt_untouched() {
    let mut m = joint(0.0);
    let before = flat(&m);
    let b = batch(BatchKind::StTriplet, &examples(4, 1, true));
    let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 3);
    let l = tr.multitask_step(&mut m, &b, 1.0).unwrap();
    assert_eq!(l.total, l.asr);
    let after = flat(&m);
    assert_eq!(before.1, after.1);
    assert_ne!(before.0, after.0);
}

#[test]
fn lambda_zero_still_trains_the_asr_side() {
    let mut m = joint(0.0);
    let before = flat(&m);
    let b = batch(BatchKind::StTriplet, &examples(4, 2, true));
    let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 3);
    let l = tr.multitask_step(&mut m, &b, 0.0).unwrap();
    assert_eq!(l.total, l.mt);
    let after = flat(&m);
    // the MT loss reaches the ASR decoder and encoder through the context vectors
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

#[test]
fn multitask_training_overfits_a_batch() {
    let mut m = joint(0.0);
    let b = batch(BatchKind::StTriplet, &examples(4, 3, true));
    let cfg = AdamConfig {
        warmup: 50,
        lr_scale: 2.0,
        ..AdamConfig::default()
    };
    let mut tr = Trainer::new(cfg, 16, 0.0, 3);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = tr.multitask_step(&mut m, &b, 0.5).unwrap().total;
    }
    assert!(last < 0.1, "final loss {last}");
    assert!((eval::joint_losses(&m, &b, 0.5).unwrap().total) < 0.1);
}

#[test]
fn adaptation_leaves_asr_encoder_bit_identical() {
    let mut m = joint(0.1);
    let enc_names = m.asr.encoder_param_names();
    let snapshot = |m: &JointModel| -> Vec<(String, Vec<u32>)> {
        m.asr
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    let before = snapshot(&m);
    let mt_before = flat(&m).1;
    let b = batch(BatchKind::TextOnlyPair, &examples(4, 4, false));
    let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 3);
    for _ in 0..3 {
        tr.adaptation_step(&mut m, &b).unwrap();
    }
    let after = snapshot(&m);
    let mut decoder_moved = false;
    for ((name, x), (_, y)) in before.iter().zip(&after) {
        if enc_names.contains(name) {
            assert_eq!(x, y, "{name} changed");
        } else if x != y {
            decoder_moved = true;
        }
    }
    assert!(decoder_moved);
    assert_ne!(mt_before, flat(&m).1);
}

#[test]
fn alternation_with_ratio_zero_is_plain_multitask() {
    let st = examples(12, 5, true);
    let text = examples(12, 6, false);
    let run_plain = || {
        let mut m = joint(0.1);
        let mut s = BatchStream::new(BatchKind::StTriplet, st.clone(), 4, 9).unwrap();
        let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 7);
        for _ in 0..5 {
            let b = s.next_batch().unwrap();
            tr.multitask_step(&mut m, &b, 0.5).unwrap();
        }
        flat(&m)
    };
    let run_alternating = || {
        let mut m = joint(0.1);
        let mut s = BatchStream::new(BatchKind::StTriplet, st.clone(), 4, 9).unwrap();
        let mut t = BatchStream::new(BatchKind::TextOnlyPair, text.clone(), 4, 9).unwrap();
        let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 7);
        let log = alternate_train(&mut tr, &mut m, Some(&mut s), Some(&mut t), 0, 5, 0.5, |_, _, _, _| Ok(true)).unwrap();
        assert!(log.iter().all(|(k, _)| *k == StepKind::St));
        flat(&m)
    };
    assert_eq!(run_plain(), run_alternating());
}

#[test]
fn alternation_interleaves_text_updates() {
    let st = examples(8, 7, true);
    let text = examples(8, 8, false);
    let mut m = joint(0.0);
    let mut s = BatchStream::new(BatchKind::StTriplet, st, 4, 1).unwrap();
    let mut t = BatchStream::new(BatchKind::TextOnlyPair, text, 4, 1).unwrap();
    let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 1);
    let log = alternate_train(&mut tr, &mut m, Some(&mut s), Some(&mut t), 2, 6, 0.5, |_, _, _, _| Ok(true)).unwrap();
    let kinds: Vec<StepKind> = log.iter().map(|(k, _)| *k).collect();
    use StepKind::{St, Text};
    assert_eq!(kinds, vec![St, Text, Text, St, Text, Text]);
    assert_eq!(tr.step(), 6);
}

#[test]
fn training_is_deterministic_given_seeds() {
    let run = || {
        let mut m = joint(0.1);
        let mut s = BatchStream::new(BatchKind::StTriplet, examples(8, 9, true), 4, 3).unwrap();
        let mut tr = Trainer::new(AdamConfig::default(), 16, 0.1, 5);
        for _ in 0..4 {
            let b = s.next_batch().unwrap();
            tr.multitask_step(&mut m, &b, 0.5).unwrap();
        }
        flat(&m)
    };
    assert_eq!(run(), run());
}
