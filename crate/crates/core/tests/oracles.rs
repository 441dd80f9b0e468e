//! Independent reference computations for the numeric kernels.

use cfaudit_core::embedder::{EmbeddingVector, GroupEmbeddings};
use cfaudit_core::stats::{
    self, DistanceMetric, MahalanobisModel, PermutationConfig, Shrinkage, StatsError,
};
use cfaudit_core::textstats::{self, ResourceLexicons, Terminal};
use cfaudit_core::tsne::{self, TsneConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_rows(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn slices(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

fn group(label: &str, rows: &[Vec<f64>]) -> GroupEmbeddings {
    GroupEmbeddings::new(
        label,
        rows.iter()
            .enumerate()
            .map(|(i, v)| (format!("e{i:03}"), EmbeddingVector::from_raw(v.clone())))
            .collect(),
    )
    .unwrap()
}

#[test]
fn mahalanobis_matches_explicit_two_by_two_inverse() {
    let pooled: Vec<&[f64]> = vec![&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]];
    // sample covariance with m - 1 = 3: [[2/3, 0], [0, 2/3]]
    let (a, b, c, d): (f64, f64, f64, f64) = (2.0 / 3.0, 0.0, 0.0, 2.0 / 3.0);
    let det = a * d - b * c;
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let v = [1.0, 0.0];
    let expected = (v[0] * (inv[0][0] * v[0] + inv[0][1] * v[1])
        + v[1] * (inv[1][0] * v[0] + inv[1][1] * v[1]))
        .sqrt();
    assert!((expected - 1.5f64.sqrt()).abs() < 1e-15);
    let got = stats::mahalanobis_distance(&v, &pooled, Shrinkage::Fixed(0.0)).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    let at_mean = stats::mahalanobis_distance(&[0.0, 0.0], &pooled, Shrinkage::Fixed(0.0)).unwrap();
    assert!(at_mean.abs() < 1e-12);
}

#[test]
fn mahalanobis_with_shrinkage_matches_dense_inverse() {
    let rows = gaussian_rows(11, 6, 9);
    let pooled = slices(&rows);
    let lambda = 0.3;
    let model = MahalanobisModel::fit(&pooled, Shrinkage::Fixed(lambda)).unwrap();
    let dim = 9;
    let m = rows.len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64)
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    for r in &rows {
        let c = nalgebra::DVector::from_iterator(dim, r.iter().zip(&mean).map(|(x, mu)| x - mu));
        cov += &c * c.transpose() / (m - 1) as f64;
    }
    for i in 0..dim {
        cov[(i, i)] += lambda;
    }
    let inv = cov.try_inverse().unwrap();
    let probe = gaussian_rows(12, 2, 9);
    let delta =
        nalgebra::DVector::from_iterator(dim, probe[0].iter().zip(&probe[1]).map(|(a, b)| a - b));
    let expected = (delta.transpose() * &inv * &delta)[(0, 0)].sqrt();
    let got = model.distance(&probe[0], &probe[1]).unwrap();
    assert!(
        (got - expected).abs() < 1e-9 * expected.max(1.0),
        "{got} vs {expected}"
    );
}

#[test]
fn singular_covariance_without_shrinkage_is_an_error() {
    let rows = gaussian_rows(3, 3, 5);
    assert_eq!(
        MahalanobisModel::fit(&slices(&rows), Shrinkage::Fixed(0.0)).err(),
        Some(StatsError::Singular)
    );
}

#[test]
fn paired_mean_of_zero_and_one_is_half() {
    let x = group("M", &[vec![1.0, 0.0], vec![1.0, 0.0]]);
    let y = group("M-F", &[vec![2.0, 0.0], vec![0.0, 3.0]]);
    let t = stats::paired_mean_distance(&x, &y, DistanceMetric::Cosine).unwrap();
    assert!((t - 0.5).abs() < 1e-15);
}

/// Replays the documented null construction with plain two-pass statistics.
#[test]
fn permutation_summary_matches_replayed_null() {
    let rows = gaussian_rows(21, 16, 6);
    let (xs, ys) = rows.split_at(8);
    let x = slices(xs);
    let y = slices(ys);
    let cfg = PermutationConfig {
        permutations: 400,
        seed: 99,
        ..PermutationConfig::default()
    };
    let r = stats::permutation_test_raw(&x, &y, DistanceMetric::Euclidean, &cfg).unwrap();

    let pool: Vec<&[f64]> = x.iter().chain(&y).copied().collect();
    let d = |a: usize, b: usize| stats::euclidean_distance(pool[a], pool[b]).unwrap();
    let observed: Vec<f64> = (0..8).map(|i| d(i, 8 + i)).collect();
    let mut null_pairs = Vec::new();
    let mut t_b = Vec::new();
    for b in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(b);
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut rng);
        let pairs: Vec<f64> = (0..8).map(|i| d(order[i], order[8 + i])).collect();
        t_b.push(pairs.iter().sum::<f64>() / 8.0);
        null_pairs.extend(pairs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let t_obs = mean(&observed);
    let t_mean = mean(&t_b);
    let t_sd = var(&t_b).sqrt();
    let pooled_sd = (((observed.len() - 1) as f64 * var(&observed)
        + (null_pairs.len() - 1) as f64 * var(&null_pairs))
        / (observed.len() + null_pairs.len() - 2) as f64)
        .sqrt();
    let mut off = 0.0;
    for a in 0..16 {
        for b in 0..16 {
            if a != b {
                off += d(a, b);
            }
        }
    }
    let center = off / (16.0 * 15.0);
    let extreme = t_b
        .iter()
        .filter(|t| (*t - center).abs() >= (t_obs - center).abs())
        .count();

    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(close(r.t_obs, t_obs));
    assert!(close(r.t_perm_mean, t_mean));
    assert!(close(r.t_perm_sd, t_sd));
    assert!(close(r.d_pairs, (t_obs - mean(&null_pairs)) / pooled_sd));
    assert!(close(r.z_perm, (t_obs - t_mean) / t_sd));
    assert_eq!(r.p_two_tailed, (1 + extreme) as f64 / 401.0);
    assert_eq!(r.histogram.total(), 400);
}

#[test]
fn permutation_result_is_bitwise_deterministic() {
    let rows = gaussian_rows(5, 20, 12);
    let x = group("M", &rows[..10]);
    let y = group("M-F", &rows[10..]);
    let cfg = PermutationConfig {
        permutations: 300,
        seed: 17,
        ..PermutationConfig::default()
    };
    let metric = DistanceMetric::Mahalanobis(Shrinkage::Auto);
    let a = stats::permutation_test(&x, &y, metric, &cfg).unwrap();
    let b = stats::permutation_test(&x, &y, metric, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert!(a.lambda.unwrap() > 0.0);
}

#[test]
fn identical_pool_is_degenerate() {
    let rows = vec![vec![0.5, 0.5, 0.1]; 6];
    let r = stats::permutation_test(
        &group("M", &rows[..3]),
        &group("F", &rows[3..]),
        DistanceMetric::Cosine,
        &PermutationConfig::default(),
    )
    .unwrap();
    assert_eq!(
        (r.t_obs, r.p_two_tailed, r.d_pairs, r.z_perm),
        (0.0, 1.0, 0.0, 0.0)
    );
}

#[test]
fn row_entropies_hit_the_target_perplexity() {
    let rows = gaussian_rows(10, 10, 4);
    let perplexity = 3.0;
    let (cond, betas) = tsne::conditional_affinities(&slices(&rows), perplexity).unwrap();
    for (i, beta) in betas.iter().enumerate() {
        let row = cond.row(i);
        let h: f64 = row
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.log2())
            .sum();
        assert!((h - perplexity.log2()).abs() < 1e-5, "row {i}: {h}");
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(*beta > 0.0);
    }
}

#[test]
fn joint_affinities_are_a_symmetric_distribution() {
    let rows = gaussian_rows(8, 25, 7);
    let p = tsne::pairwise_affinities(&slices(&rows), 5.0).unwrap();
    assert!((p.sum() - 1.0).abs() < 1e-9);
    for i in 0..25 {
        assert_eq!(p.get(i, i), 0.0);
        for j in 0..25 {
            assert_eq!(p.get(i, j), p.get(j, i));
        }
    }
    let y: Vec<[f64; 2]> = rows.iter().map(|r| [r[0], r[1]]).collect();
    let q = tsne::low_dim_affinities(&y);
    assert!((q.sum() - 1.0).abs() < 1e-9);
}

#[test]
fn near_duplicate_rows_keep_affinities_finite() {
    let a = vec![0.3, 0.1, 0.0, 0.2];
    let b = vec![0.0, 0.2, 0.4, 0.1];
    let rows: Vec<&[f64]> = (0..40)
        .map(|i| {
            if i % 2 == 0 {
                a.as_slice()
            } else {
                b.as_slice()
            }
        })
        .collect();
    let cfg = TsneConfig {
        perplexity: 8.0,
        iterations: 100,
        ..TsneConfig::default()
    };
    let fit = tsne::tsne_fit(&rows, &cfg).unwrap();
    assert!(fit.kl_final.is_finite());
    assert!(fit.y.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
}

#[test]
fn gradient_is_translation_invariant() {
    let rows = gaussian_rows(30, 8, 3);
    let p = tsne::pairwise_affinities(&slices(&rows), 2.5).unwrap();
    let y: Vec<[f64; 2]> = gaussian_rows(31, 8, 2)
        .iter()
        .map(|r| [r[0], r[1]])
        .collect();
    let shifted: Vec<[f64; 2]> = y.iter().map(|p| [p[0] + 3.5, p[1] - 1.25]).collect();
    let g1 = tsne::tsne_gradient(&p, &y).unwrap();
    let g2 = tsne::tsne_gradient(&p, &shifted).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}

#[test]
fn trustworthiness_hand_case_with_one_swap() {
    // Points on a line with distinct gaps; the layout swaps points 2 and 3.
    let high: Vec<Vec<f64>> = [0.0, 1.0, 3.0, 7.0, 15.0, 31.0]
        .iter()
        .map(|v| vec![*v])
        .collect();
    let low: Vec<Vec<f64>> = [0.0, 1.0, 7.0, 3.0, 15.0, 31.0]
        .iter()
        .map(|v| vec![*v])
        .collect();
    // k = 2: points 0, 1, 2, 3 and 5 each gain one neighbor of high rank 3 (penalty 1 each),
    // so T = 1 - 2 / (6 * 2 * 5) * 5 = 5/6.
    let t = tsne::trustworthiness(&slices(&high), &slices(&low), 2).unwrap();
    assert!((t - 5.0 / 6.0).abs() < 1e-15, "{t}");
}

#[test]
fn shuffled_layout_is_less_trustworthy() {
    let rows = gaussian_rows(40, 100, 2);
    let mut shuffled = rows.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(41));
    let identity = tsne::trustworthiness(&slices(&rows), &slices(&rows), 5).unwrap();
    let permuted = tsne::trustworthiness(&slices(&rows), &slices(&shuffled), 5).unwrap();
    assert_eq!(identity, 1.0);
    assert!(permuted < identity);
}

#[test]
fn tsne_fit_is_bitwise_deterministic() {
    let rows = gaussian_rows(50, 30, 5);
    let cfg = TsneConfig {
        perplexity: 5.0,
        iterations: 120,
        seed: 9,
        ..TsneConfig::default()
    };
    let a = tsne::tsne_fit(&slices(&rows), &cfg).unwrap();
    let b = tsne::tsne_fit(&slices(&rows), &cfg).unwrap();
    let bits = |f: &tsne::TsneFit| {
        f.y.iter()
            .flat_map(|p| [p[0].to_bits(), p[1].to_bits()])
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.kl_history.len(), 2);
}

#[test]
fn sentence_segmentation_hand_cases() {
    let s = textstats::tokenize_sentences("He said \"Go!\" Then left.");
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].text, "He said \"Go!\"");
    assert_eq!(s[0].terminal, Terminal::Exclamation);
    let s = textstats::tokenize_sentences("Great! Why? Ok.");
    let terminals: Vec<Terminal> = s.iter().map(|x| x.terminal).collect();
    assert_eq!(
        terminals,
        [Terminal::Exclamation, Terminal::Question, Terminal::Period]
    );
    assert!(textstats::tokenize_sentences("").is_empty());
}

#[test]
fn sentence_type_hand_cases() {
    let props = |t: &str| {
        let p = textstats::sentence_type_props(&textstats::tokenize_sentences(t));
        (p.declarative, p.interrogative, p.exclamative, p.empty)
    };
    assert_eq!(
        props("Great! Why? Ok."),
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, false)
    );
    assert_eq!(props("One. Two. Three."), (1.0, 0.0, 0.0, false));
    assert_eq!(props("well done"), (1.0, 0.0, 0.0, false));
    assert_eq!(props(""), (0.0, 0.0, 0.0, true));
}

#[test]
fn measure_hand_cases() {
    let res = ResourceLexicons::shipped();
    assert_eq!(textstats::academic_ratio(&[], &res.academic_words), 0.0);
    let none = textstats::concreteness_mean(
        &textstats::tokenize_words("zzz qqq"),
        &res.concreteness_norms,
    );
    assert_eq!((none.mean, none.coverage), (None, 0.0));
    assert_eq!(
        textstats::pronoun_rates(&textstats::tokenize_words("the cat sat"), &res),
        (0.0, 0.0)
    );
    let s = textstats::supportiveness(
        &textstats::tokenize_sentences("The cat sat."),
        &res.patterns.supportive,
        &res.patterns.controlling,
    );
    assert_eq!(
        (s.supportive_per100, s.controlling_per100, s.score),
        (0.0, 0.0, 0.0)
    );
    let s = textstats::supportiveness(
        &textstats::tokenize_sentences("You must avoid this. You could explore that."),
        &res.patterns.supportive,
        &res.patterns.controlling,
    );
    assert_eq!((s.supportive_per100, s.controlling_per100), (12.5, 25.0));
}

#[test]
fn group_aggregation_hand_means() {
    let res = ResourceLexicons::shipped();
    let recs = vec![
        textstats::analyze_text("a", "M", "I like your essay", &res),
        textstats::analyze_text("b", "M", "I like it a lot", &res),
        textstats::analyze_text("c", "F", "You wrote well", &res),
    ];
    let groups = textstats::aggregate_groups(&recs).unwrap();
    assert_eq!(
        groups
            .iter()
            .map(|g| g.group_label.as_str())
            .collect::<Vec<_>>(),
        ["M", "F"]
    );
    let first = &groups[0].measures["first_person_per100"];
    // 25 and 20 per 100 words
    assert_eq!(first.n, 2);
    assert!((first.mean.unwrap() - 22.5).abs() < 1e-12);
    assert!((first.sd.unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    let second = &groups[1].measures["second_person_per100"];
    assert!((second.mean.unwrap() - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(second.sd, Some(0.0));
}
