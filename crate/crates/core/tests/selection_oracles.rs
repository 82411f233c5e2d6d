use std::cmp::Ordering;

use fusegen::selection::{
    cross_model_variability, high_count, influence_scores, reference_set, select_candidates, select_top_s,
    MeanGradient, ProbabilityMatrix, ReferenceKind, StdMode,
};
use fusegen::stm::{Featurizer, StmModel};
use fusegen::LabelSchema;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Population variance as the mean squared pairwise difference over two.
fn pairwise_std(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let sum: f64 = values
        .iter()
        .flat_map(|a| values.iter().map(move |b| (a - b) * (a - b)))
        .sum();
    (sum / (2.0 * k * k)).sqrt()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p:0:{i:06}")).collect()
}

/// Position `i` belongs to the high group iff fewer than `h` samples outrank it
/// under (score descending, id ascending); low membership is the mirror image
/// over the remaining samples.
fn candidate_oracle(scores: &[f64], ids: &[&str], alpha: f64, r: usize) -> (Vec<usize>, Vec<usize>) {
    let h = high_count(alpha, r);
    let outranks_high = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]);
    let outranks_low = |a: usize, b: usize| scores[a] < scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]);
    let n = scores.len();
    let mut high: Vec<(usize, usize)> = (0..n)
        .map(|i| ((0..n).filter(|&j| outranks_high(j, i)).count(), i))
        .filter(|&(rank, _)| rank < h)
        .collect();
    high.sort();
    let rest: Vec<usize> = (0..n).filter(|i| !high.iter().any(|&(_, j)| j == *i)).collect();
    let mut low: Vec<(usize, usize)> = rest
        .iter()
        .map(|&i| (rest.iter().filter(|&&j| outranks_low(j, i)).count(), i))
        .filter(|&(rank, _)| rank < r - h)
        .collect();
    low.sort();
    (high.into_iter().map(|(_, i)| i).collect(), low.into_iter().map(|(_, i)| i).collect())
}

#[test]
fn variability_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=20);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let matrix = ProbabilityMatrix::new(rows.clone()).unwrap();
        let d = cross_model_variability(&matrix, StdMode::Population).unwrap();
        for (i, &di) in d.iter().enumerate() {
            let column: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let expected = pairwise_std(&column);
            assert!((di - expected).abs() <= 1e-12, "K={k} sample {i}: {di} vs {expected}");
        }
    }
}

#[test]
fn candidates_match_full_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (alpha, r) in [(0.5, 40), (0.5, 20), (0.0, 10), (1.0, 10), (0.25, 7)] {
        for trial in 0..50 {
            let n = rng.gen_range(r..r + 80);
            // Coarse quantization forces ties that only the id can break.
            let levels = if trial % 2 == 0 { 5 } else { 1000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let mut id_strings = ids(n);
            id_strings.reverse();
            let id_refs: Vec<&str> = id_strings.iter().map(String::as_str).collect();

            let set = select_candidates(&scores, &id_refs, alpha, r).unwrap();
            let (high, low) = candidate_oracle(&scores, &id_refs, alpha, r);
            assert_eq!(set.high, high, "high group, alpha {alpha}, R {r}");
            assert_eq!(set.low, low, "low group, alpha {alpha}, R {r}");
            assert_eq!(set.len(), r);
            assert_eq!(set.high.len(), high_count(alpha, r));
        }
    }
}

#[test]
fn high_count_rounds_half_up() {
    assert_eq!(high_count(0.5, 40), 20);
    assert_eq!(high_count(0.5, 7), 4);
    assert_eq!(high_count(0.25, 10), 3);
    assert_eq!(high_count(0.0, 10), 0);
    assert_eq!(high_count(1.0, 10), 10);
}

#[test]
fn top_s_matches_sorted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let n = rng.gen_range(1..50);
        let s = rng.gen_range(0..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..3) as f64).collect();
        let id_strings = ids(n);
        let id_refs: Vec<&str> = id_strings.iter().map(String::as_str).collect();
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]).unwrap() {
            Ordering::Equal => id_refs[a].cmp(id_refs[b]),
            other => other,
        });
        oracle.truncate(s);
        assert_eq!(select_top_s(&scores, &id_refs, s).unwrap(), oracle);
    }
}

fn toy_model(seed: u64) -> (StmModel, Vec<fusegen::stm::SparseVector>, Vec<usize>) {
    let featurizer = Featurizer::with_dim(64);
    let schema = LabelSchema::from_keys("toy", &["a", "b", "c"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StmModel::zeros(featurizer.clone(), schema);
    model.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    model.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let words = ["red", "green", "blue", "dark", "light", "warm", "cold"];
    let features = (0..30)
        .map(|_| {
            let text: Vec<&str> = (0..rng.gen_range(1..6)).map(|_| words[rng.gen_range(0..words.len())]).collect();
            featurizer.featurize(&text.join(" "))
        })
        .collect();
    let labels = (0..30).map(|_| rng.gen_range(0..3)).collect();
    (model, features, labels)
}

#[test]
fn influence_equals_dense_inner_product() {
    let (model, features, labels) = toy_model(5);
    let dim = model.featurizer.dim;
    let gradients: Vec<_> = (0..10).map(|i| model.gradient_features(&features[i], labels[i])).collect();
    let weights: Vec<f64> = (0..10).map(|i| 0.2 + 0.1 * i as f64).collect();
    let mean = MeanGradient::new(&gradients, &weights).unwrap();

    let dense_len = gradients[0].to_dense(dim).len();
    let mut dense_mean = vec![0.0; dense_len];
    for (g, w) in gradients.iter().zip(&weights) {
        for (slot, v) in dense_mean.iter_mut().zip(g.to_dense(dim)) {
            *slot += w * v / gradients.len() as f64;
        }
    }
    let feats: Vec<_> = features[10..].iter().collect();
    let scores = influence_scores(&model, &feats, &labels[10..], &mean);
    for (j, score) in scores.iter().enumerate() {
        let g = model.gradient_features(feats[j], labels[10 + j]).to_dense(dim);
        let expected: f64 = g.iter().zip(&dense_mean).map(|(a, b)| a * b).sum();
        assert!((score - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{score} vs {expected}");
    }
}

#[test]
fn influence_ranking_ignores_reference_scale_and_candidate_order() {
    let (model, features, labels) = toy_model(8);
    let gradients: Vec<_> = (0..8).map(|i| model.gradient_features(&features[i], labels[i])).collect();
    let base = MeanGradient::new(&gradients, &[0.5; 8]).unwrap();
    let scaled = MeanGradient::new(&gradients, &[1.7; 8]).unwrap();
    let feats: Vec<_> = features[8..].iter().collect();
    let a = influence_scores(&model, &feats, &labels[8..], &base);
    let b = influence_scores(&model, &feats, &labels[8..], &scaled);
    let id_strings = ids(feats.len());
    let id_refs: Vec<&str> = id_strings.iter().map(String::as_str).collect();
    assert_eq!(
        select_top_s(&a, &id_refs, 8).unwrap(),
        select_top_s(&b, &id_refs, 8).unwrap()
    );

    let reversed_feats: Vec<_> = feats.iter().rev().copied().collect();
    let reversed_labels: Vec<usize> = labels[8..].iter().rev().copied().collect();
    let c = influence_scores(&model, &reversed_feats, &reversed_labels, &base);
    let mut c_back = c.clone();
    c_back.reverse();
    assert_eq!(a, c_back);
}

#[test]
fn reference_set_threshold_and_cap() {
    let rows = vec![vec![0.95, 0.92, 0.5, 0.99, 0.91], vec![0.97, 0.89, 0.95, 0.93, 0.9]];
    let matrix = ProbabilityMatrix::new(rows).unwrap();
    let id_strings = ids(5);
    let id_refs: Vec<&str> = id_strings.iter().map(String::as_str).collect();
    let set = reference_set(&matrix, &id_refs, 0.9, 256, 0.1);
    assert_eq!(set.kind, ReferenceKind::Agreement);
    assert_eq!(set.positions, vec![0, 3, 4]);
    let capped = reference_set(&matrix, &id_refs, 0.9, 2, 0.1);
    assert_eq!(capped.positions, vec![0, 3]);
    let relaxed = reference_set(&matrix, &id_refs, 0.999, 256, 0.4);
    assert_eq!(relaxed.kind, ReferenceKind::RelaxedQuantile);
    assert_eq!(relaxed.positions, vec![0, 3]);
}

proptest! {
    #[test]
    fn variability_is_permutation_and_shift_invariant(
        column in prop::collection::vec(0.0f64..0.5, 2..7),
        shift in 0.0f64..0.5,
        rotate in 0usize..6,
    ) {
        let base = ProbabilityMatrix::new(column.iter().map(|&p| vec![p]).collect()).unwrap();
        let mut rotated = column.clone();
        let by = rotate % rotated.len();
        rotated.rotate_left(by);
        let shifted = ProbabilityMatrix::new(rotated.iter().map(|&p| vec![p + shift]).collect()).unwrap();
        let d0 = cross_model_variability(&base, StdMode::Population).unwrap()[0];
        let d1 = cross_model_variability(&shifted, StdMode::Population).unwrap()[0];
        prop_assert!((d0 - d1).abs() < 1e-12);
        prop_assert!((0.0..=0.5).contains(&d0));
    }

    #[test]
    fn candidates_are_disjoint_and_separated(
        scores in prop::collection::vec(0.0f64..1.0, 12..60),
        alpha in 0.0f64..=1.0,
    ) {
        let r = 10;
        let id_strings = ids(scores.len());
        let id_refs: Vec<&str> = id_strings.iter().map(String::as_str).collect();
        let set = select_candidates(&scores, &id_refs, alpha, r).unwrap();
        let mut all = set.positions();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), r);
        let unselected: Vec<usize> = (0..scores.len()).filter(|i| !all.contains(i)).collect();
        for &h in &set.high {
            prop_assert!(unselected.iter().all(|&u| scores[h] >= scores[u]));
        }
        for &l in &set.low {
            prop_assert!(unselected.iter().all(|&u| scores[l] <= scores[u]));
        }
    }
}
