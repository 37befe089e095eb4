use fedemb_core::eval::{
    pairwise_scores, recall_at_far, recall_at_far_minibatch, EmbeddingSet, Metric, ScoreSummary,
};
use fedemb_core::RngStream;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Tries every candidate threshold and keeps the best recall whose FAR
/// stays within budget.
fn brute_force(es: &EmbeddingSet, far: f64, metric: Metric) -> Option<f64> {
    let (pos, neg) = pairwise_scores(es, metric);
    let mut candidates: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    candidates.push(f64::INFINITY);
    let mut best: Option<f64> = None;
    for &t in &candidates {
        let fa = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        if fa <= far {
            let r = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    // With no slack for even one false accept the budget is unresolvable.
    if pos.is_empty() || (far * neg.len() as f64).floor() < 1.0 {
        return None;
    }
    best
}

fn random_set(seed: u64, quantized: bool) -> EmbeddingSet {
    let mut rng = RngStream::new(seed, 7).rng();
    let n = rng.gen_range(4..=200);
    let d = rng.gen_range(2..6);
    let ids = rng.gen_range(2..n.min(20));
    let labels: Vec<usize> = (0..n).map(|i| if i < ids { i } else { rng.gen_range(0..ids) }).collect();
    let e = Array2::from_shape_fn((n, d), |(i, _)| {
        let x: f64 = rng.gen_range(-1.0..1.0) + 0.5 * labels[i] as f64 % 3.0;
        if quantized {
            (x * 2.0).round() / 2.0
        } else {
            x
        }
    });
    EmbeddingSet::new(e, labels).unwrap()
}

#[test]
fn matches_exhaustive_thresholds() {
    let mut checked = 0;
    for seed in 0..50 {
        for metric in [Metric::Cosine, Metric::Inner] {
            let es = random_set(seed, seed % 3 == 0);
            for far in [1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0] {
                let want = brute_force(&es, far, metric);
                let got = recall_at_far(&es, far, metric).ok();
                if let (Some(w), Some(g)) = (want, got) {
                    assert_eq!(g, w, "seed {seed} far {far}");
                    checked += 1;
                } else {
                    assert_eq!(want.is_none(), got.is_none(), "seed {seed} far {far}");
                }
            }
        }
    }
    assert!(checked > 300);
}

#[test]
fn minibatch_with_full_batch_equals_all_pairs() {
    for seed in 0..10 {
        let es = random_set(seed, false);
        let all = recall_at_far(&es, 0.1, Metric::Cosine).unwrap();
        let mb = recall_at_far_minibatch(&es, 0.1, es.len() + 3, &RngStream::new(seed, 1), Metric::Cosine).unwrap();
        assert_eq!(all, mb);
    }
}

#[test]
fn random_embeddings_trace_the_diagonal() {
    let mut rng = RngStream::new(5, 5).rng();
    let n = 2000;
    let e = Array2::from_shape_fn((n, 16), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let labels = (0..n).map(|i| i / 20).collect();
    let es = EmbeddingSet::new(e, labels).unwrap();
    let (pos, neg) = pairwise_scores(&es, Metric::Cosine);
    let s = ScoreSummary::new(pos, neg);
    for far in [0.05, 0.1, 0.3, 0.5] {
        let r = s.recall_at(far).unwrap().recall;
        assert!((r - far).abs() < 0.05, "far {far}: recall {r}");
    }
}

proptest! {
    #[test]
    fn monotone_in_far(seed in 0u64..1000) {
        let es = random_set(seed, false);
        let (pos, neg) = pairwise_scores(&es, Metric::Cosine);
        let s = ScoreSummary::new(pos, neg);
        let mut last = 0.0;
        for far in [0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
            if let Ok(r) = s.recall_at(far) {
                prop_assert!(r.recall >= last);
                last = r.recall;
            }
        }
    }

    #[test]
    fn label_permutation_and_scaling_invariant(seed in 0u64..1000, exp in -3i32..4) {
        let scale = 2f64.powi(exp);
        let es = random_set(seed, false);
        let base = recall_at_far(&es, 0.1, Metric::Cosine);
        let relabeled = EmbeddingSet::new(
            es.embeddings.mapv(|x| x * scale),
            es.labels.iter().map(|l| 1000 - l).collect(),
        ).unwrap();
        let other = recall_at_far(&relabeled, 0.1, Metric::Cosine);
        prop_assert_eq!(base.ok(), other.ok());
    }
}
