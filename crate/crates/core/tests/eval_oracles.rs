use crackseg::data::LabelMask;
use crackseg::eval::{classify, crack_probability_map, evaluate_corpus, roc_and_auc, Prediction};
use crackseg::tensor::{softmax_channels, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct double loop over the window, out-of-frame cells counted as 1.
fn brute_force_map(c: &[u8], w: usize, h: usize, n: usize) -> Vec<f64> {
    let n = n as isize;
    let mut s = vec![0u64; w * h];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0u64;
            for k in i - n..=i + n {
                for l in j - n..=j + n {
                    let inside = k >= 0 && l >= 0 && k < h as isize && l < w as isize;
                    acc += if inside { c[k as usize * w + l as usize] as u64 } else { 1 };
                }
            }
            s[i as usize * w + j as usize] = acc;
        }
    }
    let max = *s.iter().max().unwrap();
    s.iter().map(|&v| 1.0 - v as f64 / max as f64).collect()
}

/// Mann–Whitney: share of (positive, negative) pairs ranked correctly, ties ½.
fn mann_whitney(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !truth[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truth[j] {
                continue;
            }
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

#[test]
fn probability_map_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let density = rng.random_range(0.02..0.6);
        let c: Vec<u8> = (0..256).map(|_| u8::from(!rng.random_bool(density))).collect();
        for n in 1..=3 {
            let fast = crack_probability_map(&c, 16, 16, n).unwrap();
            assert_eq!(fast.values, brute_force_map(&c, 16, 16, n));
        }
    }
}

#[test]
fn probability_map_whole_image_window() {
    let mut c = vec![1u8; 64];
    c[10] = 0;
    c[40] = 0;
    let m = crack_probability_map(&c, 8, 8, 8).unwrap();
    assert!(m.values.iter().all(|&p| p == m.values[0]));
    assert_eq!(m.values[0], 0.0);
}

#[test]
fn auc_equals_mann_whitney_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..100 {
        let n = rng.random_range(2..=1000);
        let levels = if trial % 2 == 0 { 7 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        truth[0] = true;
        truth[1] = false;
        let (roc, auc) = roc_and_auc(&scores, &truth).unwrap();
        assert!((auc - mann_whitney(&scores, &truth)).abs() <= 1e-9, "trial {trial}");
        assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(roc.tpr.windows(2).all(|w| w[0] <= w[1]));
        let inverted: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (_, inv) = roc_and_auc(&inverted, &truth).unwrap();
        assert!((inv - (1.0 - auc)).abs() <= 1e-9);
    }
}

#[test]
fn random_scores_have_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let truth: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    let (_, auc) = roc_and_auc(&scores, &truth).unwrap();
    assert!((0.45..=0.55).contains(&auc), "{auc}");
}

#[test]
fn softmax_and_logits_classify_alike() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let z = Tensor::from_fn(&[8, 8, 3], |_| rng.random_range(-5.0f64..5.0));
        assert_eq!(classify(&softmax_channels(&z)).unwrap(), classify(&z).unwrap());
    }
}

#[test]
fn corpus_report_lists_per_image_aucs() {
    // AUC 1.0: perfect separation
    let t1 = LabelMask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
    let p1 = Prediction {
        id: "a".into(),
        classes: t1.clone(),
        crack_score: Some(vec![0.9, 0.8, 0.2, 0.1]),
    };
    // AUC 0.75: 3 of 4 pairs ordered
    let t2 = LabelMask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
    let p2 = Prediction {
        id: "b".into(),
        classes: t2.clone(),
        crack_score: Some(vec![0.8, 0.3, 0.5, 0.1]),
    };
    // AUC 0.5: constant score
    let t3 = LabelMask::new(4, 1, vec![1, 0, 0, 1]).unwrap();
    let p3 = Prediction {
        id: "c".into(),
        classes: t3.clone(),
        crack_score: Some(vec![0.4; 4]),
    };
    let r = evaluate_corpus(&[p1, p2, p3], &[t1, t2, t3], 3).unwrap();
    let aucs: Vec<f64> = r.per_image.iter().map(|e| e.auc.unwrap()).collect();
    assert_eq!(aucs, vec![1.0, 0.75, 0.5]);
    assert!((r.aggregate.mean_auc.unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(r.aggregate.median_auc, Some(0.75));
    let ids: Vec<&str> = r.per_image.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    for e in &r.per_image {
        assert_eq!(e.confusion.total(), 4);
    }
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["per_image"][0]["dice"]["delamination"].is_number());
    assert!(json["per_image"][0]["confusion"]["fn"].is_number());
    assert!(json["aggregate"]["median_auc"].is_number());
}

proptest! {
    #[test]
    fn classify_invariant_under_monotone_maps(vals in prop::collection::vec(-10.0f64..10.0, 27)) {
        let z = Tensor::new(&[3, 3, 3], vals).unwrap();
        let mapped = z.map(|v| (v * 0.5).exp() + 3.0);
        prop_assert_eq!(classify(&z).unwrap(), classify(&mapped).unwrap());
    }

    #[test]
    fn probability_map_in_unit_interval(cells in prop::collection::vec(0u8..=1, 100), n in 1usize..5) {
        let m = crack_probability_map(&cells, 10, 10, n).unwrap();
        prop_assert!(m.values.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(m.values.iter().any(|&p| p == 0.0));
    }

    #[test]
    fn auc_in_unit_interval(scores in prop::collection::vec(0.0f64..1.0, 2..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
        truth[0] = true;
        truth[1] = false;
        let (roc, auc) = roc_and_auc(&scores, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
    }
}
