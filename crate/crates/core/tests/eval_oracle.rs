mod oracles;

use boxseg::eval::{abo, evaluate, match_instances, mean_ap, GroundTruthImage, GroundTruthSet};
use boxseg::types::MaskInstance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn evaluate_matches_reference_on_50_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..50 {
        let (preds, gts) = oracles::random_eval_corpus(&mut rng, 3);
        let expected = oracles::evaluate_reference(&preds, &gts);
        let gt = GroundTruthSet::new(gts).unwrap();
        let got = evaluate(&preds, &gt).unwrap();
        assert!(close(got.map_50, expected.map_50), "case {case}: {} vs {}", got.map_50, expected.map_50);
        assert!(close(got.map_75, expected.map_75), "case {case}");
        assert!(close(got.abo, expected.abo), "case {case}");
    }
}

#[test]
fn hand_placed_two_class_corpus() {
    let m = |x0: u32, x1: u32, class: u32, score: f64| MaskInstance::from_fn(8, 2, class, score, |x, _| x >= x0 && x < x1).unwrap();
    let gts = vec![GroundTruthImage {
        width: 8,
        height: 2,
        instances: vec![m(0, 4, 0, 1.0), m(4, 8, 1, 1.0)],
    }];
    // class 0: exact hit; class 1: IoU 3/4 (hit at both thresholds) ranked under an FP
    let preds = vec![vec![m(0, 4, 0, 0.9), m(5, 8, 1, 0.4), m(0, 2, 1, 0.8)]];
    let expected = oracles::evaluate_reference(&preds, &gts);
    let r = evaluate(&preds, &GroundTruthSet::new(gts).unwrap()).unwrap();
    assert!(close(r.map_50, expected.map_50) && close(r.map_50, 0.75));
    assert!(close(r.map_75, 0.75));
    assert!(close(r.abo, (1.0 + 0.75) / 2.0));
}

fn perfect(gts: &[GroundTruthImage]) -> Vec<Vec<MaskInstance>> {
    gts.iter().map(|g| g.instances.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn threshold_monotonicity_and_score_scaling(seed in any::<u64>(), scale in prop_oneof![Just(0.5), Just(3.0), 0.01f64..100.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = oracles::random_eval_corpus(&mut rng, 3);
        let gt = GroundTruthSet::new(gts.clone()).unwrap();
        let r = evaluate(&preds, &gt).unwrap();
        prop_assert!(r.map_75 <= r.map_50 + 1e-12);
        for c in &r.per_class_ap {
            prop_assert!(c.ap_75 <= c.ap_50 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&c.ap_50));
        }

        let scaled: Vec<Vec<MaskInstance>> = preds
            .iter()
            .map(|l| l.iter().map(|m| m.clone().with_score(m.score() * scale)).collect())
            .collect();
        prop_assert_eq!(&evaluate(&scaled, &gt).unwrap(), &r);
        for (img, (p, s)) in gts.iter().zip(preds.iter().zip(&scaled)) {
            prop_assert_eq!(match_instances(p, &img.instances, 0.5), match_instances(s, &img.instances, 0.5));
        }

        // ABO ignores scores entirely
        let shuffled: Vec<Vec<MaskInstance>> = preds
            .iter()
            .map(|l| l.iter().enumerate().map(|(i, m)| m.clone().with_score(((i * 7919) % 13) as f64)).collect())
            .collect();
        prop_assert_eq!(abo(&shuffled, &gt).unwrap(), r.abo);

        let p = perfect(&gts);
        if !gt.classes().is_empty() {
            let best = evaluate(&p, &gt).unwrap();
            prop_assert_eq!((best.map_50, best.map_75, best.abo), (1.0, 1.0, 1.0));
        }
        prop_assert_eq!(mean_ap(&vec![vec![]; gts.len()], &gt, 0.5).unwrap(), 0.0);
    }
}
