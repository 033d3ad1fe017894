use std::collections::HashSet;

use g2r::augment::{augment_dataset, augment_with_retriever, AugmentConfig};
use g2r::biencoder::{encode_context, encode_response, EncoderParams};
use g2r::corpus::{build_response_set, canonical, generate_synthetic, DialogueDataset, Source, Vocab};
use g2r::teacher::{train_teacher, TeacherLM};
use g2r::train::ScoreKind;

fn setup() -> (DialogueDataset, TeacherLM) {
    let ds = generate_synthetic(3, 150, 200, 5).unwrap();
    let lm = train_teacher(&ds, 0.1).unwrap();
    (ds, lm)
}

fn cfg(spec: &str) -> AugmentConfig {
    AugmentConfig {
        samples_per_constraint: AugmentConfig::parse_constraints(spec).unwrap(),
        ..AugmentConfig::default()
    }
}

#[test]
fn augmented_set_extends_the_original() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    let (dg, rg, report) = augment_dataset(&lm, &ds, &base, &cfg("10:2,20:2")).unwrap();
    for (id, r) in base.responses().iter().enumerate() {
        assert_eq!(rg.get(id), Some(r.as_slice()));
    }
    for p in &dg.pairs {
        assert!(rg.id_of(&p.response).is_some());
    }
    assert_eq!(report.n_generated, 4 * ds.len());
    assert!(report.n_kept_after_dedup <= report.n_generated);
    assert_eq!(dg.len(), ds.len() + report.n_kept_after_dedup);
    assert_eq!(rg.len() as f64 / base.len() as f64, report.set_ratio);
    assert!(dg.pairs[ds.len()..].iter().all(|p| p.source == Source::TeacherGenerated));
}

#[test]
fn no_context_gets_a_duplicate_response() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    let (dg, _, _) = augment_dataset(&lm, &ds, &base, &cfg("1:6")).unwrap();
    let mut seen = HashSet::new();
    for p in &dg.pairs {
        assert!(seen.insert((p.context.key(), canonical(&p.response))));
    }
}

#[test]
fn cached_scores_match_a_fresh_computation() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    for kind in [ScoreKind::Ll, ScoreKind::Mi] {
        let c = AugmentConfig {
            score_kind: kind,
            ..cfg("10:1,20:1")
        };
        let (dg, _, _) = augment_dataset(&lm, &ds, &base, &c).unwrap();
        for p in &dg.pairs {
            let want = match kind {
                ScoreKind::Ll => lm.ll_score(&p.context, &p.response).unwrap(),
                ScoreKind::Mi => lm.mi_score(&p.context, &p.response, c.mi_mean).unwrap(),
            };
            assert_eq!(p.teacher_score, Some(want));
        }
    }
    let off = AugmentConfig {
        cache_scores: false,
        ..cfg("10:1")
    };
    let (dg, _, _) = augment_dataset(&lm, &ds, &base, &off).unwrap();
    assert!(dg.pairs.iter().all(|p| p.teacher_score.is_none()));
}

#[test]
fn seeded_runs_repeat_and_seeds_differ() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    let a = augment_dataset(&lm, &ds, &base, &cfg("10:2")).unwrap();
    let b = augment_dataset(&lm, &ds, &base, &cfg("10:2")).unwrap();
    assert_eq!(a.0.to_jsonl(), b.0.to_jsonl());
    assert_eq!(a.1.to_jsonl(), b.1.to_jsonl());
    let other = AugmentConfig { seed: 1, ..cfg("10:2") };
    let c = augment_dataset(&lm, &ds, &base, &other).unwrap();
    assert_ne!(a.0.to_jsonl(), c.0.to_jsonl());
}

#[test]
fn greedy_sampling_collapses() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    let greedy = AugmentConfig { top_k: 1, ..cfg("10:5") };
    let (_, _, report) = augment_dataset(&lm, &ds, &base, &greedy).unwrap();
    assert!(report.set_ratio < 6.0, "{}", report.set_ratio);
}

#[test]
fn retriever_augmentation_appends_exact_top_m() {
    let (ds, lm) = setup();
    let vocab: Vocab = lm.vocab().clone();
    let base = build_response_set(&ds);
    let params = EncoderParams::init(vocab.len(), 8, 4).unwrap();
    let m = 3;
    let dr = augment_with_retriever(&params, &vocab, &ds, &base, m).unwrap();
    assert_eq!(dr.len(), ds.len() * (1 + m));
    let resp: Vec<Vec<f64>> = base
        .responses()
        .iter()
        .map(|r| encode_response(&params, &vocab, r).unwrap())
        .collect();
    for (i, p) in ds.pairs.iter().enumerate() {
        let c = encode_context(&params, &vocab, &p.context).unwrap();
        let gold = base.id_of(&p.response).unwrap();
        let mut order: Vec<usize> = (0..base.len()).filter(|&j| j != gold).collect();
        let s = |j: usize| c.iter().zip(&resp[j]).map(|(a, b)| a * b).sum::<f64>();
        order.sort_by(|&a, &b| s(b).total_cmp(&s(a)).then(a.cmp(&b)));
        let added: Vec<usize> = dr.pairs[ds.len() + i * m..ds.len() + (i + 1) * m]
            .iter()
            .map(|q| base.id_of(&q.response).unwrap())
            .collect();
        assert_eq!(added, order[..m]);
    }
    assert!(augment_with_retriever(&params, &vocab, &ds, &base, base.len()).is_err());
}

#[test]
fn bad_configs_are_rejected() {
    let (ds, lm) = setup();
    let base = build_response_set(&ds);
    assert!(augment_dataset(&lm, &ds, &base, &cfg("10:0")).is_err());
    assert!(AugmentConfig::parse_constraints("10:1,10:2")
        .map(|s| AugmentConfig { samples_per_constraint: s, ..AugmentConfig::default() }.validate())
        .map_or(true, |r| r.is_err()));
    let other = generate_synthetic(4, 50, 300, 5).unwrap();
    assert!(augment_dataset(&lm, &other, &build_response_set(&other), &cfg("10:1")).is_err());
}
