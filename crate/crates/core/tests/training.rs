use std::collections::HashSet;

use g2r::biencoder::EncoderParams;
use g2r::corpus::{build_response_set, generate_synthetic, Vocab};
use g2r::rng::rng_from_seed;
use g2r::train::{compose_batch, objective, train, Mode, TrainConfig, TrainingData};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        contexts_per_batch: 16,
        responses_per_context: 4,
        shared_negatives: 64,
        mode: Mode::CeOnly,
        ..TrainConfig::default()
    }
}

#[test]
fn batches_keep_negatives_apart_from_positives() {
    let ds = generate_synthetic(1, 400, 400, 10).unwrap();
    let set = build_response_set(&ds);
    let vocab = Vocab::from_dataset(&ds);
    let data = TrainingData::new(&ds, &set, &vocab).unwrap();
    let cfg = small_cfg();
    let mut rng = rng_from_seed(2);
    for _ in 0..50 {
        let b = compose_batch(&data, &cfg, &mut rng).unwrap();
        assert_eq!(b.contexts.len(), 16);
        assert_eq!(b.contexts.iter().collect::<HashSet<_>>().len(), 16);
        assert!(b.positives.iter().all(|p| p.len() == 4));
        let pos: HashSet<usize> = b.positives.iter().flatten().map(|p| p.response).collect();
        let neg: HashSet<usize> = b.negatives.iter().copied().collect();
        assert_eq!(neg.len(), 64);
        assert!(pos.is_disjoint(&neg));
    }
}

#[test]
fn too_few_responses_is_an_error() {
    let ds = generate_synthetic(1, 40, 400, 10).unwrap();
    let set = build_response_set(&ds);
    let vocab = Vocab::from_dataset(&ds);
    let data = TrainingData::new(&ds, &set, &vocab).unwrap();
    let cfg = TrainConfig {
        shared_negatives: 512,
        ..small_cfg()
    };
    assert!(compose_batch(&data, &cfg, &mut rng_from_seed(0)).is_err());
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let ds = generate_synthetic(0, 3000, 400, 10).unwrap();
    let [tr, va, _] = ds.split_three(0.1, 0.1).unwrap();
    let set = build_response_set(&tr);
    let vocab = Vocab::from_dataset(&tr);
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 100,
        record_timing: false,
        ..TrainConfig::default()
    };
    let cfg = TrainConfig { mode: Mode::CeOnly, ..cfg };
    let init = EncoderParams::init(vocab.len(), 16, 0).unwrap();
    let out = train(init, &vocab, &tr, &set, &va, &cfg).unwrap();
    assert_eq!(out.history.len(), 200);
    let first = out.history[0].total;
    let last = out.history[199].total;
    assert!(last < first, "{first} -> {last}");
    assert!(out.best_hits1 > 0.2);
}

#[test]
fn training_is_reproducible() {
    let ds = generate_synthetic(5, 600, 400, 10).unwrap();
    let [tr, va, _] = ds.split_three(0.1, 0.1).unwrap();
    let set = build_response_set(&tr);
    let vocab = Vocab::from_dataset(&tr);
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 20,
        record_timing: false,
        ..small_cfg()
    };
    let run = || {
        let init = EncoderParams::init(vocab.len(), 8, 1).unwrap();
        train(init, &vocab, &tr, &set, &va, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.history, b.history);
}

#[test]
fn distillation_needs_teacher_scores() {
    let ds = generate_synthetic(6, 300, 400, 10).unwrap();
    let set = build_response_set(&ds);
    let vocab = Vocab::from_dataset(&ds);
    let data = TrainingData::new(&ds, &set, &vocab).unwrap();
    let params = EncoderParams::init(vocab.len(), 8, 2).unwrap();
    let ce = small_cfg();
    let b = compose_batch(&data, &ce, &mut rng_from_seed(3)).unwrap();
    let (loss, _) = objective(&params, &data, &b, &ce, false).unwrap();
    assert_eq!(loss.total, loss.ce);
    let kd = TrainConfig {
        mode: Mode::CePlusKd,
        ..ce
    };
    assert!(objective(&params, &data, &b, &kd, false).is_err());
}
