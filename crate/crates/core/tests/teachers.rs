use std::collections::HashMap;

use proptest::prelude::*;
use unitsem_core::corpus::{build_scored_pairs, generate_corpus, Corpus, Split, SyntheticSpec};
use unitsem_core::nn::{loss, EncoderConfig, Graph, Mode, Tensor};
use unitsem_core::rng;
use unitsem_core::teachers::*;
use unitsem_core::tokenizer::{is_special, CLS, MASK, SEP};
use unitsem_core::training::{EarlyStopper, TrainRunConfig};
use unitsem_core::wavembed::unit_target;

fn enc() -> EncoderConfig {
    EncoderConfig { layers: 1, model_dim: 32, heads: 2, ff_dim: 64, dropout: 0.1, max_positions: 64 }
}

fn seq_config(vocab: usize) -> SequenceEncoderConfig {
    SequenceEncoderConfig { vocab_size: vocab, encoder: enc(), pooling: Pooling::Mean }
}

fn tsdae(vocab: usize, seed: u64) -> Teacher {
    Teacher::new(TeacherModelConfig { kind: TeacherKind::Tsdae, sequence: seq_config(vocab), decoder: Some(enc()), init_seed: seed })
        .unwrap()
}

fn simcse(vocab: usize, seed: u64) -> Teacher {
    Teacher::new(TeacherModelConfig { kind: TeacherKind::Simcse, sequence: seq_config(vocab), decoder: None, init_seed: seed }).unwrap()
}

fn toy() -> (Corpus, Vec<Vec<u32>>) {
    let c = generate_corpus(&SyntheticSpec { alphabet_size: 8, n_utterances: 80, seed: 2, ..Default::default() }).unwrap();
    let seqs = c.utterances.iter().map(|u| unit_target(u.symbols.as_ref().unwrap())).collect();
    (c, seqs)
}

#[test]
fn zero_mask_rate_is_rejected() {
    let mut r = rng::rng(0, "t", 0);
    assert!(mask_tokens(&[CLS, 7, 8, SEP], 0.0, 13, &mut r).is_err());
    let m = MlmModel::new(seq_config(13), 0).unwrap();
    let cfg = MlmConfig { mask_rate: 0.0, steps: 1, ..Default::default() };
    assert!(mlm_pretrain(&mut m.clone(), &[vec![CLS, 7, SEP]], &cfg).is_err());
}

proptest! {
    #[test]
    fn masked_count_follows_rate(len in 1usize..60, seed in 0u64..1000) {
        let mut seq = vec![CLS];
        seq.extend((0..len).map(|i| 5 + (i as u32 % 7)));
        seq.push(SEP);
        let mut r = rng::rng(seed, "t", 0);
        let m = mask_tokens(&seq, 0.15, 12, &mut r).unwrap().unwrap();
        let n = m.labels.iter().filter(|l| l.is_some()).count() as f64;
        let target = (0.15 * len as f64).round();
        prop_assert!((n - target).abs() <= 1.0);
        prop_assert!(n >= 1.0);
        for (i, l) in m.labels.iter().enumerate() {
            match l {
                Some(orig) => prop_assert_eq!(*orig, seq[i] as usize),
                None => prop_assert_eq!(m.input[i], seq[i]),
            }
            if is_special(seq[i]) {
                prop_assert!(l.is_none());
            }
        }
    }

    #[test]
    fn deletion_keeps_specials_and_order(len in 1usize..30, ratio in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut seq = vec![CLS];
        seq.extend((0..len as u32).map(|i| 5 + i));
        seq.push(SEP);
        let out = delete_tokens(&seq, ratio, &mut rng::rng(seed, "t", 0)).unwrap();
        prop_assert!(out.len() >= 3);
        prop_assert_eq!(out[0], CLS);
        prop_assert_eq!(*out.last().unwrap(), SEP);
        // interior tokens are strictly increasing, so order preservation is monotonicity
        prop_assert!(out[1..out.len() - 1].windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn mask_split_is_eighty_ten_ten() {
    let seq: Vec<u32> = std::iter::once(CLS).chain((0..20).map(|_| 9)).chain(std::iter::once(SEP)).collect();
    let mut r = rng::rng(5, "t", 0);
    let (mut masked, mut random, mut kept, mut total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5000 {
        let m = mask_tokens(&seq, 0.15, 40, &mut r).unwrap().unwrap();
        for (i, l) in m.labels.iter().enumerate() {
            if l.is_some() {
                total += 1.0;
                match m.input[i] {
                    MASK => masked += 1.0,
                    9 => kept += 1.0,
                    _ => random += 1.0,
                }
            }
        }
    }
    // a random replacement can draw the original token: 1/35 of the 10%
    let p_same = 0.1 / 35.0;
    assert!((masked / total - 0.8).abs() < 0.01);
    assert!((kept / total - (0.1 + p_same)).abs() < 0.01);
    assert!((random / total - (0.1 - p_same)).abs() < 0.01);
}

#[test]
fn specials_only_sequences_are_skipped() {
    let mut m = MlmModel::new(seq_config(13), 0).unwrap();
    let corpus = vec![vec![CLS, SEP], vec![CLS, 6, 7, SEP]];
    let cfg = MlmConfig { steps: 2, batch_size: 2, ..Default::default() };
    let rep = mlm_pretrain(&mut m, &corpus, &cfg).unwrap();
    assert_eq!(rep.skipped, 1);
    assert_eq!(rep.warnings.len(), 1);
    assert!(mlm_pretrain(&mut m, &[vec![CLS, SEP]], &cfg).is_err());
}

#[test]
fn unmasked_positions_get_zero_gradient() {
    let store = unitsem_core::nn::ParamStore::new();
    let seq = [CLS, 5, 6, 7, 8, 9, 10, 11, SEP];
    let m = mask_tokens(&seq, 0.3, 13, &mut rng::rng(1, "t", 0)).unwrap().unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let data: Vec<f64> = (0..seq.len() * 13).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
    let logits = g.input(Tensor::new(seq.len(), 13, data).unwrap());
    let l = g.cross_entropy(logits, &m.labels);
    g.backward(l);
    let grad = g.grad(logits).unwrap();
    for (i, lab) in m.labels.iter().enumerate() {
        let row_zero = grad.row(i).iter().all(|&v| v == 0.0);
        assert_eq!(row_zero, lab.is_none(), "row {i}");
    }
}

#[test]
fn mlm_loss_drops_below_uniform() {
    let (_, seqs) = toy();
    let mut m = MlmModel::new(seq_config(13), 0).unwrap();
    let cfg = MlmConfig { steps: 500, batch_size: 8, lr: 1e-3, ..Default::default() };
    let rep = mlm_pretrain(&mut m, &seqs, &cfg).unwrap();
    let last = rep.curve.last().unwrap().1;
    assert!(last < (13f64).ln(), "curve {:?}", rep.curve);
}

#[test]
fn deletion_edge_ratios() {
    let seq = [CLS, 5, 6, 7, 8, SEP];
    let mut r = rng::rng(0, "t", 0);
    assert_eq!(delete_tokens(&seq, 0.0, &mut r).unwrap(), seq);
    for _ in 0..50 {
        let out = delete_tokens(&seq, 1.0, &mut r).unwrap();
        assert_eq!(out.len(), 3);
        assert!(seq[1..5].contains(&out[1]));
    }
    assert!(delete_tokens(&seq, 1.5, &mut r).is_err());
}

#[test]
fn deletion_rate_monte_carlo() {
    let seq: Vec<u32> = std::iter::once(CLS).chain(5..15).chain(std::iter::once(SEP)).collect();
    let mut r = rng::rng(3, "t", 0);
    let mut deleted = 0usize;
    let trials = 10000;
    for _ in 0..trials {
        deleted += seq.len() - delete_tokens(&seq, 0.6, &mut r).unwrap().len();
    }
    let rate = deleted as f64 / (trials * 10) as f64;
    assert!((rate - 0.6).abs() < 0.02, "{rate}");
}

#[test]
fn tsdae_at_zero_ratio_is_a_plain_autoencoder() {
    let t = tsdae(13, 0);
    let seq = [CLS, 6, 9, 7, SEP];
    let corrupted = delete_tokens(&seq, 0.0, &mut rng::rng(0, "t", 0)).unwrap();
    let mut g = Graph::new(&t.store, Mode::Eval);
    let a = t.tsdae_loss_graph(&mut g, &corrupted, &seq).unwrap();
    let b = t.tsdae_loss_graph(&mut g, &seq, &seq).unwrap();
    assert_eq!(g.value(a).item(), g.value(b).item());
}

#[test]
fn tsdae_training_reduces_dev_loss() {
    let (_, seqs) = toy();
    let mut t = tsdae(13, 1);
    let cfg = TeacherConfig { run: TrainRunConfig { epochs: 3, batch_size: 8, lr: 1e-3, ..Default::default() }, ..Default::default() };
    let rep = train_tsdae(&mut t, &seqs[..64], &seqs[64..], &cfg, None).unwrap();
    assert!(rep.best < rep.curve[0].dev, "{:?}", rep.curve);
    assert_eq!(t.embed(&seqs[0]).unwrap().len(), 32);
    let bad = TeacherConfig { kind: TeacherKind::Simcse, ..cfg };
    assert!(train_tsdae(&mut t, &seqs, &[], &bad, None).is_err());
}

#[test]
fn teacher_embed_contract() {
    let t = tsdae(13, 2);
    let seq = [CLS, 6, 9, 7, SEP];
    let a = t.embed(&seq).unwrap();
    assert_eq!(a.len(), 32);
    assert_eq!(a, t.embed(&seq).unwrap());
    assert!(t.embed(&[CLS, 40, SEP]).is_err());
    assert!(t.embed(&[CLS, SEP]).is_err());

    let single = [CLS, 8, SEP];
    let mut g = Graph::new(&t.store, Mode::Eval);
    let h = t.encoder.states(&mut g, &single).unwrap();
    let state = g.value(h).row(1).to_vec();
    assert_eq!(t.embed(&single).unwrap(), state);
}

#[test]
fn cls_pooling_takes_first_state() {
    let cfg = SequenceEncoderConfig { pooling: Pooling::Cls, ..seq_config(13) };
    let t = Teacher::new(TeacherModelConfig { kind: TeacherKind::Simcse, sequence: cfg, decoder: None, init_seed: 0 }).unwrap();
    let seq = [CLS, 6, 7, SEP];
    let mut g = Graph::new(&t.store, Mode::Eval);
    let h = t.encoder.states(&mut g, &seq).unwrap();
    assert_eq!(t.embed(&seq).unwrap(), g.value(h).row(0).to_vec());
}

#[test]
fn simcse_needs_train_mode_and_dropout() {
    let t = simcse(13, 0);
    let batch: Vec<&[u32]> = vec![&[CLS, 6, 7, SEP], &[CLS, 6, 7, SEP]];
    let mut g = Graph::new(&t.store, Mode::Eval);
    assert!(t.simcse_loss_graph(&mut g, &batch, 0.05).is_err());
    let mut g = Graph::new(&t.store, Mode::Train { seed: 1 });
    let l = t.simcse_loss_graph(&mut g, &batch, 0.05).unwrap();
    assert!(g.value(l).item().is_finite());

    let (c, seqs) = toy();
    let pairs = build_scored_pairs(&c, 20, 1, Split::Dev).unwrap();
    let tokens: HashMap<String, Vec<u32>> = c.utterances.iter().map(|u| u.id.clone()).zip(seqs.iter().cloned()).collect();
    let dev = TokenDevSet { pairs: &pairs, tokens: &tokens };
    let cfg = TeacherConfig { kind: TeacherKind::Simcse, dropout_rate: 0.0, ..Default::default() };
    assert!(train_simcse(&mut simcse(13, 0), &seqs, &cfg, &dev).is_err());
}

#[test]
fn simcse_loss_relative_to_uniform_baseline() {
    // Identical anchors and keys give uniform similarities and exactly ln B.
    let store = unitsem_core::nn::ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let rows = Tensor::new(8, 4, (0..32).map(|i| (i % 4) as f64 + 1.0).collect()).unwrap();
    let a = g.input(rows.clone());
    let k = g.input(rows);
    let l = loss::infonce_graph(&mut g, a, k, 0.05).unwrap();
    assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

    // At random init the dropout positive is far closer than other sequences.
    let (_, seqs) = toy();
    let t = simcse(13, 3);
    let batch: Vec<&[u32]> = seqs[..16].iter().map(|s| s.as_slice()).collect();
    let mut g = Graph::new(&t.store, Mode::Train { seed: 4 });
    let l = t.simcse_loss_graph(&mut g, &batch, 0.05).unwrap();
    assert!(g.value(l).item() < 16f64.ln());
}

#[test]
fn simcse_training_keeps_best_dev_metric() {
    let (c, seqs) = toy();
    let pairs = build_scored_pairs(&c, 30, 1, Split::Dev).unwrap();
    let tokens: HashMap<String, Vec<u32>> = c.utterances.iter().map(|u| u.id.clone()).zip(seqs.iter().cloned()).collect();
    let dev = TokenDevSet { pairs: &pairs, tokens: &tokens };
    let mut t = simcse(13, 5);
    let cfg = TeacherConfig {
        kind: TeacherKind::Simcse,
        patience: 2,
        run: TrainRunConfig { epochs: 4, batch_size: 16, lr: 1e-3, evals_per_epoch: 2, ..Default::default() },
        ..Default::default()
    };
    let rep = train_simcse(&mut t, &seqs, &cfg, &dev).unwrap();
    assert!(rep.best >= rep.curve[0].dev);
    let now = dev.spearman(|s| t.embed(s)).unwrap();
    assert!((now - rep.best).abs() < 1e-12);
}

#[test]
fn early_stop_after_exactly_patience_stale_evaluations() {
    let mut s = EarlyStopper::new(80);
    assert!(!s.update(1.0));
    for i in 1..=80 {
        let stop = s.update(1.0 - i as f64 * 1e-3);
        assert_eq!(stop, i == 80, "evaluation {i}");
    }
}

#[test]
fn checkpoint_and_mlm_initialisation() {
    let t = tsdae(13, 7);
    let back = Teacher::from_checkpoint(&unitsem_core::nn::Checkpoint::from_bytes(&t.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let seq = [CLS, 6, 9, SEP];
    assert_eq!(t.embed(&seq).unwrap(), back.embed(&seq).unwrap());

    let mlm = MlmModel::new(seq_config(13), 11).unwrap();
    let mut fresh = tsdae(13, 7);
    let copied = fresh.init_from_mlm(&mlm).unwrap();
    assert!(copied > 0);
    let mut g = Graph::new(&mlm.store, Mode::Eval);
    let z = mlm.encoder.pool(&mut g, &seq).unwrap();
    assert_eq!(fresh.embed(&seq).unwrap(), g.value(z).data().to_vec());
    assert!(MlmModel::from_checkpoint(&t.to_checkpoint()).is_err());
}
