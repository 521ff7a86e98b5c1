use super::*;
use super::Rng;
use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_matrix(rng: &mut Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..rows * dim).map(|_| rng.normal()).collect();
    EmbeddingMatrix::new(rows, dim, data).unwrap()
}

fn random_distribution(rng: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

#[test]
fn matmul_orthonormal_basis() {
    let x = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let t = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let s = matmul_scores(&x, &t).unwrap();
    assert_eq!(s.shape(), (1, 2));
    assert_eq!(s.data(), &[1.0, 0.0]);
}

#[test]
fn matmul_zero_input_row() {
    let mut rng = Rng::new(1);
    let x = EmbeddingMatrix::zeros(1, 4);
    let t = random_matrix(&mut rng, 6, 4);
    let s = matmul_scores(&x, &t).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_scalar_loop() {
    let mut rng = Rng::new(2);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 5, 4);
    let s = matmul_scores(&a, &b).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut acc = 0.0;
            for d in 0..4 {
                acc += a.row(i)[d] * b.row(j)[d];
            }
            assert_eq!(s.row(i)[j], acc);
        }
    }
}

#[test]
fn matmul_shape_error_names_both() {
    let a = EmbeddingMatrix::zeros(2, 3);
    let b = EmbeddingMatrix::zeros(4, 5);
    let msg = matmul_scores(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
}

#[test]
fn softmax_examples() {
    for beta in [0.1, 1.0, 20.0] {
        let p = softmax(&[1.7; 4], beta).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
    let p = softmax(&[3f64.ln(), 0.0], 1.0).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    // exp(2k)/Σ exp(2j), evaluated at 40 significant digits.
    let expected = [0.015876239976466765, 0.11731042782619837, 0.8668133321973349];
    let p = softmax(&[1.0, 2.0, 3.0], 2.0).unwrap();
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn softmax_errors() {
    assert!(matches!(softmax(&[], 1.0), Err(Error::Empty(_))));
    assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::NonFinite(_))));
    assert!(softmax(&[1.0], 0.0).is_err());
}

#[test]
fn log_softmax_agrees_with_softmax() {
    let l = [0.3, -2.0, 5.0, 1.0];
    let p = softmax(&l, 3.0).unwrap();
    let lp = log_softmax(&l, 3.0).unwrap();
    for (a, b) in p.iter().zip(&lp) {
        assert!((a.ln() - b).abs() < 1e-12);
    }
}

#[test]
fn top_k_examples() {
    let mut all = top_k(&[0.3, 0.9, 0.1], 3).unwrap();
    assert_eq!(all, vec![1, 0, 2]);
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2]);
    assert_eq!(top_k(&[0.5, 0.5], 1).unwrap(), vec![0]);
    assert_eq!(top_k(&[1.0, 2.0], 5).unwrap().len(), 2);
    assert!(top_k(&[1.0], 0).is_err());
    assert_eq!(top_k(&[-0.0, 0.0, -1.0], 2).unwrap(), vec![0, 1]);
}

fn full_sort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort by descending score keeps ascending index among ties.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

#[test]
fn top_k_matches_full_sort() {
    let mut rng = Rng::new(3);
    let scores: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
    assert_eq!(top_k(&scores, 64).unwrap(), full_sort_top_k(&scores, 64));
}

#[test]
fn gumbel_degenerate_mass() {
    let mut rng = Rng::new(4);
    let logits = [0.0, 1e6, 0.5];
    for _ in 0..100 {
        assert_eq!(gumbel_max_sample(&logits, 1.0, 1, &mut rng).unwrap(), vec![1]);
    }
}

#[test]
fn gumbel_exhaustive_k() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let mut s = gumbel_max_sample(&[0.0, 0.0], 1.0, 2, &mut rng).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1]);
    }
    assert!(gumbel_max_sample(&[0.0, 0.0], 1.0, 3, &mut rng).is_err());
}

/// Pearson chi-square p-value of observed counts against expected probabilities.
fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn gumbel_single_draw_matches_softmax() {
    let logits = [1.0, 2.0, 3.0];
    let probs = softmax(&logits, 1.0).unwrap();
    let mut rng = Rng::new(6);
    let mut counts = [0u64; 3];
    for _ in 0..100_000 {
        counts[gumbel_max_sample(&logits, 1.0, 1, &mut rng).unwrap()[0]] += 1;
    }
    let p = chi_square_p(&counts, &probs);
    assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}");
}

#[test]
fn kl_examples() {
    let p = [0.2, 0.3, 0.5];
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);
    match kl_divergence(&[0.5, 0.5], &[1.0, 0.0]) {
        Err(Error::Support { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected support error, got {other:?}"),
    }
    assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
}

/// Neumaier-compensated KL, independent of the production loop.
fn kl_compensated(p: &[f64], q: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(q) {
        if a == 0.0 {
            continue;
        }
        let term = a * (a.ln() - b.ln());
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[test]
fn kl_matches_compensated_oracle() {
    let mut rng = Rng::new(7);
    for _ in 0..20 {
        let p = random_distribution(&mut rng, 64);
        let q = random_distribution(&mut rng, 64);
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - kl_compensated(&p, &q)).abs() < 1e-12);
    }
}

#[test]
fn tv_examples() {
    let p = [0.1, 0.9];
    assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    let mut rng = Rng::new(8);
    let a = random_distribution(&mut rng, 32);
    let b = random_distribution(&mut rng, 32);
    let mut oracle = 0.0;
    for i in 0..32 {
        oracle += (a[i] - b[i]).abs();
    }
    assert_eq!(tv_distance(&a, &b).unwrap(), 0.5 * oracle);
}

#[test]
fn median_and_quantile() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    assert_eq!(quantile(&[0.0, 10.0], 0.25), Some(2.5));
    assert_eq!(median(&[]), None);
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..40)
}

proptest! {
    #[test]
    fn softmax_shift_invariant(l in logits_strategy(), c in -50.0f64..50.0, beta in 0.05f64..5.0) {
        let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
        let a = softmax(&l, beta).unwrap();
        let b = softmax(&shifted, beta).unwrap();
        let s: f64 = a.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_preserves_argmax(l in logits_strategy(), beta in 0.05f64..30.0) {
        let p = softmax(&l, beta).unwrap();
        let top = argmax(&l).unwrap();
        let ptop = argmax(&p).unwrap();
        // Distinct logits can collapse to equal probabilities only through
        // rounding; compare logit values rather than indices.
        prop_assert_eq!(l[top], l[ptop]);
    }

    #[test]
    fn top_k_equals_stable_sort(s in prop::collection::vec(-3i32..3, 1..200), k in 1usize..50) {
        let scores: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(top_k(&scores, k).unwrap(), full_sort_top_k(&scores, k.min(scores.len())));
    }

    #[test]
    fn pinsker_holds(seed in any::<u64>(), n in 2usize..64) {
        let mut rng = Rng::new(seed);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let kl = kl_divergence(&p, &q).unwrap();
        let tv = tv_distance(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(tv <= (kl / 2.0).sqrt() + 1e-12);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), l in logits_strategy()) {
        let k = l.len().min(3);
        let a = gumbel_max_sample(&l, 1.0, k, &mut Rng::new(seed)).unwrap();
        let b = gumbel_max_sample(&l, 1.0, k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
