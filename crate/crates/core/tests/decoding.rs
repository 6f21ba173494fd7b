use jamt::decode::{
    beam_search, coupled_translate, forced_rescore, AsrScorer, BeamHypothesis, Cascade, DecodeConfig, EnsembleScorer,
    FusedScorer, MtFeed, MtMember, MtScorer, StepScorer, StepScores,
};
use jamt::model::{AsrModel, LanguageModel, MtInput, MtModel, TransformerConfig};
use jamt::tensor::Tensor;
use jamt::text::{BOS, EOS, PAD};
use jamt::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        enc_layers: 1,
        dec_layers: 1,
        src_vocab: 9,
        tgt_vocab: 8,
        feature_dim: 4,
        dropout: 0.0,
        max_len: 32,
    }
}

fn features(frames: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[frames, 4], (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn beam_one_is_greedy_argmax() {
    let asr = AsrModel::new(config(), 1).unwrap();
    for seed in 0..5 {
        let scorer = AsrScorer::new(&asr, &features(24, seed)).unwrap();
        let got = beam_search(&scorer, &DecodeConfig::greedy()).unwrap().remove(0);

        let max_len = DecodeConfig::greedy().max_output_len(scorer.input_len());
        let mut prefix = vec![BOS];
        let mut log_prob = 0.0;
        for _ in 0..max_len {
            let out = asr.decode_step(&prefix, &scorer.enc).unwrap();
            let (tok, lp) = out
                .log_probs
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != PAD && v != BOS)
                .fold((0, f32::NEG_INFINITY), |b, (v, &l)| if l > b.1 { (v, l) } else { b });
            prefix.push(tok);
            log_prob += f64::from(lp);
            if tok == EOS {
                break;
            }
        }
        assert_eq!(got.tokens, prefix[1..]);
        assert_eq!(got.log_prob, log_prob);
    }
}

#[test]
fn forced_rescore_reproduces_beam_scores() {
    let asr = AsrModel::new(config(), 2).unwrap();
    let feats = features(20, 3);
    let scorer = AsrScorer::new(&asr, &feats).unwrap();
    let cfg = DecodeConfig {
        beam_size: 4,
        n_best: 4,
        eos_factor: 0.0,
        ..DecodeConfig::default()
    };
    for hyp in beam_search(&scorer, &cfg).unwrap() {
        let again = forced_rescore(&asr, &hyp, &scorer.enc).unwrap();
        if hyp.finished {
            assert_eq!(again.log_prob, hyp.log_prob);
            assert_eq!(again.context, hyp.context);
        }
        assert_eq!(again.context.unwrap().rows(), again.tokens.len());
    }
}

#[test]
fn insertion_penalty_lengthens_output() {
    let mt = MtModel::new(config(), 4).unwrap();
    // two encoder rows: output budget 3, small enough for a beam that
    // keeps every hypothesis, so the search is exact
    let enc = mt.mt_encode(MtInput::Tokens(&[4, EOS])).unwrap();
    let scorer = MtScorer { model: &mt, enc };
    let mut last = 0;
    for alpha in [-5.0, -1.0, 0.0, 1.0, 5.0, 50.0] {
        let cfg = DecodeConfig {
            insertion_penalty: alpha,
            eos_factor: 0.0,
            beam_size: 64,
            ..DecodeConfig::default()
        };
        let best = beam_search(&scorer, &cfg).unwrap().remove(0);
        assert!(best.tokens.len() >= last, "alpha {alpha}");
        last = best.tokens.len();
    }
    // a huge reward for length uses the whole budget
    assert_eq!(last, DecodeConfig::default().max_output_len(2));
}

#[test]
fn single_source_hypothesis_couples_trivially() {
    let asr = AsrModel::new(config(), 5).unwrap();
    let mt = MtModel::new(config(), 6).unwrap();
    let feats = features(16, 7);
    let cfg = DecodeConfig::default();
    let cas = Cascade::simple(&asr, MtMember { model: &mt, feed: MtFeed::Tokens, weight: 1.0 }, cfg.clone(), cfg.clone());
    let out = cas.decode(&feats).unwrap();
    assert_eq!(out.nbest.len(), 1);
    assert_eq!(out.coupled.source_index, 0);

    let z = out.asr_best();
    let src: Vec<usize> = z.words().iter().copied().chain([EOS]).collect();
    let scorer = MtScorer::new(&mt, MtInput::Tokens(&src)).unwrap();
    let alone = beam_search(&scorer, &cfg).unwrap().remove(0);
    assert_eq!(out.translation().tokens, alone.tokens);
}

#[test]
fn coupled_search_prefers_better_pairs() {
    let hyp = |tokens: Vec<usize>, log_prob: f64| BeamHypothesis {
        tokens,
        log_prob,
        context: None,
        finished: true,
    };
    let nbest = vec![hyp(vec![4, EOS], -0.1), hyp(vec![5, EOS], -0.5)];
    let got = coupled_translate(&nbest, 0.0, |z| {
        Ok(if z.tokens[0] == 4 {
            vec![hyp(vec![6, EOS], -3.0), hyp(vec![7, EOS], -4.0)]
        } else {
            vec![hyp(vec![7, EOS], -1.0)]
        })
    })
    .unwrap();
    assert_eq!(got.source_index, 1);
    assert_eq!(got.translation.tokens, vec![7, EOS]);
    assert!((got.score - (-1.5)).abs() < 1e-12);
    assert_eq!(got.explored.len(), 2);

    // identical source hypotheses: the first one wins the tie
    let dup = vec![hyp(vec![4, EOS], -0.2), hyp(vec![4, EOS], -0.2)];
    let got = coupled_translate(&dup, 0.0, |_| Ok(vec![hyp(vec![6, EOS], -1.0)])).unwrap();
    assert_eq!(got.source_index, 0);
    assert!(coupled_translate(&[], 0.0, |_| Ok(vec![])).is_err());
}

#[test]
fn ensemble_of_identical_members_matches_single_model() {
    let asr = AsrModel::new(config(), 8).unwrap();
    let feats = features(20, 9);
    let single = AsrScorer::new(&asr, &feats).unwrap();
    let members: Vec<Box<dyn StepScorer + Sync>> = vec![
        Box::new(AsrScorer::new(&asr, &feats).unwrap()),
        Box::new(AsrScorer::new(&asr, &feats).unwrap()),
    ];
    let ens = EnsembleScorer::new(members, &[0.5, 0.5]).unwrap();
    let cfg = DecodeConfig {
        n_best: 3,
        ..DecodeConfig::default()
    };
    assert_eq!(beam_search(&single, &cfg).unwrap(), beam_search(&ens, &cfg).unwrap());
}

#[test]
fn degenerate_ensemble_weights_reproduce_one_member() {
    let a = AsrModel::new(config(), 10).unwrap();
    let b = AsrModel::new(config(), 11).unwrap();
    let feats = features(20, 12);
    let members: Vec<Box<dyn StepScorer + Sync>> = vec![
        Box::new(AsrScorer::new(&a, &feats).unwrap()),
        Box::new(AsrScorer::new(&b, &feats).unwrap()),
    ];
    let ens = EnsembleScorer::new(members, &[0.0, 3.0]).unwrap();
    assert_eq!(ens.weights(), &[0.0, 1.0]);
    let alone = AsrScorer::new(&b, &feats).unwrap();
    let cfg = DecodeConfig::default();
    assert_eq!(beam_search(&alone, &cfg).unwrap(), beam_search(&ens, &cfg).unwrap());
}

#[test]
fn zero_lm_weight_is_plain_search() {
    let asr = AsrModel::new(config(), 13).unwrap();
    let lm = LanguageModel::new(config(), 14).unwrap();
    let scorer = AsrScorer::new(&asr, &features(16, 15)).unwrap();
    let fused = FusedScorer {
        base: &scorer,
        lm: &lm,
        weight: 0.0,
    };
    let cfg = DecodeConfig::default();
    assert_eq!(beam_search(&scorer, &cfg).unwrap(), beam_search(&fused, &cfg).unwrap());
    let heavy = FusedScorer {
        base: &scorer,
        lm: &lm,
        weight: 0.7,
    };
    let out = beam_search(&heavy, &cfg).unwrap();
    assert_eq!(out.len(), 1);
}

/// Scores from a fixed random table indexed by prefix hash.
struct TableScorer {
    vocab: usize,
    input_len: usize,
    seed: u64,
}

impl StepScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn input_len(&self) -> usize {
        self.input_len
    }
    fn max_prefix_len(&self) -> usize {
        64
    }
    fn score(&self, prefixes: &[&[usize]]) -> Result<Vec<StepScores>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let h = p.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let raw: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
                let z = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
                StepScores {
                    scores: raw.iter().map(|x| x - z).collect(),
                    context: None,
                }
            })
            .collect())
    }
}

proptest! {
    #[test]
    fn beam_output_invariants(
        vocab in 4usize..9,
        input_len in 1usize..6,
        beam in 1usize..6,
        n_best_frac in 0.0f64..1.0,
        alpha in -2.0f64..2.0,
        eos_factor in prop_oneof![Just(0.0), Just(0.5), Just(1.0)],
        seed in any::<u64>(),
    ) {
        let n_best = 1 + ((beam - 1) as f64 * n_best_frac) as usize;
        let scorer = TableScorer { vocab, input_len, seed };
        let cfg = DecodeConfig { beam_size: beam, n_best, insertion_penalty: alpha, eos_factor, ..DecodeConfig::default() };
        let out = beam_search(&scorer, &cfg).unwrap();
        prop_assert!(!out.is_empty() && out.len() <= n_best);
        let max_len = cfg.max_output_len(input_len);
        for w in out.windows(2) {
            prop_assert!(w[0].rank(alpha) >= w[1].rank(alpha));
        }
        let all_finished = out[0].finished;
        for h in &out {
            prop_assert_eq!(h.finished, all_finished);
            prop_assert!(h.tokens.len() <= max_len);
            prop_assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&BOS));
            prop_assert_eq!(h.tokens.last() == Some(&EOS), h.finished);
            prop_assert_eq!(h.tokens.iter().filter(|&&t| t == EOS).count(), usize::from(h.finished));
            prop_assert!(h.log_prob <= 1e-9);
        }
    }
}
