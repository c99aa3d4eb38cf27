use bisgan_core::gqm::{
    cooks_distance, cooks_distance_detailed, evaluate, evaluate_features, extract_influential, fit_feature_space,
    grade_scores, mahalanobis, FeatureSpace, GqmConfig, Grade,
};
use bisgan_core::linalg::Matrix;
use bisgan_core::stats::chi2_quantile;
use bisgan_core::{Error, SignatureImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn na_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.transpose() * &c / (n as f64 - 1.0)
}

#[test]
fn table_six_grades() {
    let rows = [(0.59, 0.41), (0.52, 0.48), (0.37, 0.63), (0.77, 0.23), (0.69, 0.31), (0.21, 0.79), (0.12, 0.88)];
    let grades: Vec<Grade> = rows.iter().map(|&(g, f)| grade_scores(g, f).unwrap()).collect();
    use Grade::{F, O};
    assert_eq!(grades, [F, F, O, F, F, O, O]);
    assert_eq!(grade_scores(0.5, 0.5).unwrap(), F);
    assert!(matches!(grade_scores(0.6, 0.6), Err(Error::InvalidInput(_))));
    assert!(matches!(grade_scores(-0.2, 1.2), Err(Error::InvalidInput(_))));
}

#[test]
fn chi2_quantiles_invert_reference_cdf() {
    for dof in 1..=16 {
        let reference = ChiSquared::new(dof as f64).unwrap();
        for q in [0.5, 0.9, 0.95, 0.99] {
            let x = chi2_quantile(q, dof).unwrap();
            assert!((reference.cdf(x) - q).abs() < 1e-10, "dof {dof} q {q}: cdf({x}) = {}", reference.cdf(x));
        }
    }
    // Known table value.
    assert!((chi2_quantile(0.95, 1).unwrap() - 3.841_458_820_694_124).abs() < 1e-9);
    assert!(chi2_quantile(1.0, 3).is_err());
    assert!(chi2_quantile(0.5, 0).is_err());
}

// ---------------------------------------------------------------- PCA

fn check_variances_against_eigen(n: usize, dim: usize, d: usize, seed: u64) {
    let x = random_matrix(n, dim, seed);
    let space = FeatureSpace::fit(&x, d, 0.0).unwrap();
    let eig = SymmetricEigen::new(na_covariance(&to_na(&x)));
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let p = space.project_rows(&x).unwrap();
    let pv = na_covariance(&to_na(&p));
    for r in 0..d {
        assert!((pv[(r, r)] - values[r]).abs() < 1e-6, "dir {r}: {} vs {}", pv[(r, r)], values[r]);
        assert!((space.variances[r] - values[r]).abs() < 1e-6);
        for s in 0..d {
            let dot: f64 = space.projection.row(r).iter().zip(space.projection.row(s)).map(|(a, b)| a * b).sum();
            let want = if r == s { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6);
        }
        let row = space.projection.row(r);
        let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(big > 0.0, "sign convention");
    }
}

#[test]
fn pca_variances_match_independent_eigendecomposition() {
    // More samples than dimensions, then fewer (Gram route).
    check_variances_against_eigen(20, 6, 4, 1);
    check_variances_against_eigen(20, 40, 8, 2);
}

#[test]
fn pca_is_invariant_to_duplication() {
    for (n, dim) in [(12, 5), (10, 30)] {
        let x = random_matrix(n, dim, 3);
        let rows: Vec<&[f64]> = (0..n).flat_map(|i| [x.row(i), x.row(i)]).collect();
        let doubled = Matrix::from_rows(&rows).unwrap();
        let a = FeatureSpace::fit(&x, 3, 0.0).unwrap();
        let b = FeatureSpace::fit(&doubled, 3, 0.0).unwrap();
        for (u, v) in a.projection.data().iter().zip(b.projection.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_on_full_rank_white_data_reconstructs() {
    // Rows of ±1 in a Hadamard pattern: zero mean, identity covariance up to scale.
    let h: [[f64; 4]; 8] = [
        [1., 1., 1., 1.],
        [1., -1., 1., -1.],
        [1., 1., -1., -1.],
        [1., -1., -1., 1.],
        [-1., -1., -1., -1.],
        [-1., 1., -1., 1.],
        [-1., -1., 1., 1.],
        [-1., 1., 1., -1.],
    ];
    let x = Matrix::from_rows(&h).unwrap();
    let space = FeatureSpace::fit(&x, 4, 0.0).unwrap();
    let p = space.project_rows(&x).unwrap();
    let back = p.matmul(&space.projection).unwrap();
    for i in 0..8 {
        for j in 0..4 {
            assert!((back[(i, j)] + space.mean[j] - x[(i, j)]).abs() < 1e-6);
        }
    }
}

#[test]
fn fit_feature_space_errors() {
    let img = |v: f32| SignatureImage::new(4, vec![v; 16]).unwrap();
    let g = vec![img(0.1), img(0.2)];
    let f = vec![img(-0.1)];
    assert!(matches!(fit_feature_space(&g, &f, 2, 1e-6), Err(Error::InsufficientData(_))));
    let g: Vec<_> = (0..6).map(|i| img(i as f32 / 10.0)).collect();
    assert_eq!(fit_feature_space(&g, &f, 2, 1e-6).unwrap().d, 2);
}

// -------------------------------------------------------- Mahalanobis

fn spd(d: usize, seed: u64) -> Matrix {
    let a = random_matrix(d, d, seed);
    let mut s = a.matmul(&a.transpose()).unwrap();
    for i in 0..d {
        s[(i, i)] += 0.5;
    }
    s
}

#[test]
fn mahalanobis_examples() {
    let s = spd(3, 1);
    assert_eq!(mahalanobis(&[0.3, -0.2, 1.0], &[0.3, -0.2, 1.0], &s).unwrap(), 0.0);
    let one = Matrix::from_rows(&[[1.0]]).unwrap();
    assert_eq!(mahalanobis(&[2.0], &[0.0], &one).unwrap(), 2.0);
    let four = Matrix::from_rows(&[[4.0]]).unwrap();
    assert_eq!(mahalanobis(&[-3.0], &[1.0], &four).unwrap(), 2.0);
    let singular = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
    assert!(matches!(mahalanobis(&[1.0, 0.0], &[0.0, 0.0], &singular), Err(Error::SingularScatter)));
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    for seed in 0..20 {
        let s = spd(5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mu: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let inv = to_na(&s).try_inverse().unwrap();
        let diff = DVector::from_iterator(5, p.iter().zip(&mu).map(|(a, b)| a - b));
        let want = (diff.transpose() * inv * &diff)[(0, 0)].sqrt();
        assert!((mahalanobis(&p, &mu, &s).unwrap() - want).abs() < 1e-8);
    }
}

fn covariance_of(x: &DMatrix<f64>) -> Matrix {
    let c = na_covariance(x);
    Matrix::from_vec(c.nrows(), c.ncols(), c.transpose().as_slice().to_vec()).unwrap()
}

#[test]
fn mahalanobis_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..10 {
        let d = 2 + trial % 3;
        let x = to_na(&random_matrix(40, d, trial as u64));
        let a = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.0 } + rng.gen_range(-0.5..0.5));
        let b = DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
        let y = DMatrix::from_fn(40, d, |i, j| (&a * x.row(i).transpose())[j] + b[j]);
        let p = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let mu = x.row_mean().transpose();
        let tp = &a * &p + &b;
        let tmu = &a * &mu + &b;
        let m1 = mahalanobis(p.as_slice(), mu.as_slice(), &covariance_of(&x)).unwrap();
        let m2 = mahalanobis(tp.as_slice(), tmu.as_slice(), &covariance_of(&y)).unwrap();
        assert!((m1 - m2).abs() < 1e-6, "{m1} vs {m2}");
    }
}

// -------------------------------------------------------- influence

/// Independent recomputation of the member rule, thresholding on the
/// reference χ² CDF instead of a quantile.
fn brute_members(x: &Matrix, quantile: f64, ridge: f64, min_members: usize) -> Vec<usize> {
    let xa = to_na(x);
    let (n, d) = (x.rows(), x.cols());
    let mut cov = na_covariance(&xa);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let inv = cov.try_inverse().unwrap();
    let mu = xa.row_mean();
    let d2: Vec<f64> = (0..n)
        .map(|i| {
            let diff = (xa.row(i) - &mu).transpose();
            (diff.transpose() * &inv * &diff)[(0, 0)]
        })
        .collect();
    let reference = ChiSquared::new(d as f64).unwrap();
    let mut members: Vec<usize> = (0..n).filter(|&i| reference.cdf(d2[i]) >= quantile).collect();
    if members.len() < min_members.min(n) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d2[b].partial_cmp(&d2[a]).unwrap().then(a.cmp(&b)));
        members = order[..min_members.min(n)].to_vec();
        members.sort();
    }
    members
}

#[test]
fn influential_members_match_brute_force() {
    for seed in 0..25 {
        let mut x = random_matrix(30, 4, seed);
        // Heavy-tailed rows so the threshold, not the fallback, decides some cases.
        for i in (0..30).step_by(7) {
            for v in x.row_mut(i) {
                *v *= 1.0 + seed as f64 % 4.0;
            }
        }
        for (q, k) in [(0.95, 3), (0.8, 2), (0.99, 5)] {
            let set = extract_influential(&x, q, 1e-6, k).unwrap();
            assert_eq!(set.member_indices, brute_members(&x, q, 1e-6, k), "seed {seed} q {q}");
            assert!(set.member_indices.len() >= k);
        }
    }
}

#[test]
fn outlier_is_influential_and_tight_cluster_falls_back() {
    let mut rows: Vec<Vec<f64>> = (0..12).map(|i| vec![0.01 * (i % 3) as f64, 0.01 * (i % 4) as f64]).collect();
    rows.push(vec![50.0, -40.0]);
    let set = extract_influential(&Matrix::from_rows(&rows).unwrap(), 0.95, 1e-6, 3).unwrap();
    assert!(set.member_indices.contains(&12));

    let cluster = random_matrix(20, 3, 4);
    let set = extract_influential(&cluster, 0.999999, 1e-6, 3).unwrap();
    assert_eq!(set.member_indices.len(), 3);
    let mut top: Vec<usize> = (0..20).collect();
    top.sort_by(|&a, &b| set.distances[b].total_cmp(&set.distances[a]));
    let mut want = top[..3].to_vec();
    want.sort();
    assert_eq!(set.member_indices, want);
}

#[test]
fn influential_ties_prefer_lower_index() {
    // Four corners of a square plus the origin twice: corners tie in distance.
    let rows = [[1.0, 1.0], [-1.0, 1.0], [0.0, 0.0], [1.0, -1.0], [-1.0, -1.0], [0.0, 0.0]];
    let set = extract_influential(&Matrix::from_rows(&rows).unwrap(), 0.999, 0.0, 2).unwrap();
    assert_eq!(set.member_indices, vec![0, 1]);
}

#[test]
fn influential_needs_enough_rows() {
    let x = random_matrix(5, 4, 1);
    assert!(matches!(extract_influential(&x, 0.95, 1e-6, 3), Err(Error::InsufficientData(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn influential_is_permutation_equivariant(seed in any::<u64>(), shuffle in any::<u64>()) {
        let x = random_matrix(15, 3, seed);
        let mut perm: Vec<usize> = (0..15).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..15).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let rows: Vec<&[f64]> = perm.iter().map(|&i| x.row(i)).collect();
        let px = Matrix::from_rows(&rows).unwrap();
        let a = extract_influential(&x, 0.9, 1e-6, 3).unwrap();
        let b = extract_influential(&px, 0.9, 1e-6, 3).unwrap();
        let mut mapped: Vec<usize> = b.member_indices.iter().map(|&i| perm[i]).collect();
        mapped.sort();
        prop_assert_eq!(mapped, a.member_indices);
    }
}

// -------------------------------------------------------- Cook's distance

/// Refits the intercept-only model with and without the candidate and sums
/// the squared change of every fitted value, scaled by the full-fit MSE.
fn cooks_by_refit(reference: &[Vec<f64>], candidate: &[f64]) -> f64 {
    let d = candidate.len();
    let n_all = reference.len() + 1;
    let mut total = 0.0;
    for j in 0..d {
        let ys: Vec<f64> = reference.iter().map(|r| r[j]).chain([candidate[j]]).collect();
        let full = ys.iter().sum::<f64>() / n_all as f64;
        let without = ys[..n_all - 1].iter().sum::<f64>() / (n_all - 1) as f64;
        let s2 = ys.iter().map(|y| (y - full).powi(2)).sum::<f64>() / (n_all - 1) as f64;
        let shift: f64 = (0..n_all).map(|_| (full - without).powi(2)).sum();
        total += shift / s2;
    }
    total / d as f64
}

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn cooks_matches_leave_one_out_refit() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let n = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=4);
        let reference = random_rows(n, d, &mut rng);
        let candidate: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = cooks_distance(&Matrix::from_rows(&reference).unwrap(), &candidate).unwrap();
        let want = cooks_by_refit(&reference, &candidate);
        assert!((got - want).abs() < 1e-8 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn cooks_hand_example_and_scale_invariance() {
    let reference: Vec<Vec<f64>> = [2.0, 4.0, 4.0, 5.0, 7.0].iter().map(|&v| vec![v]).collect();
    let got = cooks_distance(&Matrix::from_rows(&reference).unwrap(), &[9.0]).unwrap();
    // Six points 2,4,4,5,7,9: mean 31/6, mean without 9 is 22/5.
    let full = 31.0 / 6.0;
    let s2 = [2.0, 4.0, 4.0, 5.0, 7.0, 9.0].iter().map(|y: &f64| (y - full).powi(2)).sum::<f64>() / 5.0;
    let want = 6.0 * (full - 22.0 / 5.0).powi(2) / s2;
    assert!((got - want).abs() < 1e-10);
    assert!((got - cooks_by_refit(&reference, &[9.0])).abs() < 1e-10);
    let scaled: Vec<Vec<f64>> = reference.iter().map(|r| vec![10.0 * r[0]]).collect();
    let again = cooks_distance(&Matrix::from_rows(&scaled).unwrap(), &[90.0]).unwrap();
    assert!((again - got).abs() < 1e-9);
}

#[test]
fn cooks_edge_cases() {
    let r = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]]).unwrap();
    assert_eq!(cooks_distance(&r, &[3.0, 3.0]).unwrap(), 0.0);
    let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
    assert!(matches!(cooks_distance(&one, &[0.0, 0.0]), Err(Error::InsufficientData(_))));
    let flat = Matrix::from_rows(&[[2.0, 0.0], [2.0, 1.0], [2.0, 2.0]]).unwrap();
    let c = cooks_distance_detailed(&flat, &[2.0, 1.5]).unwrap();
    assert!(c.degenerate.is_empty());
    assert_eq!(c.per_dimension[0], 0.0);
}

// -------------------------------------------------------- evaluate

fn gqm_cfg() -> GqmConfig {
    GqmConfig {
        d: Some(3),
        ..GqmConfig::default()
    }
}

#[test]
fn generated_at_genuine_mean_grades_o() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let side = 4;
    let mk = |rng: &mut ChaCha8Rng, centre: f32| {
        SignatureImage::new(side, (0..side * side).map(|_| centre + rng.gen_range(-0.1..0.1)).collect()).unwrap()
    };
    let genuine: Vec<_> = (0..10).map(|_| mk(&mut rng, -0.5)).collect();
    let forged: Vec<_> = (0..10).map(|_| mk(&mut rng, 0.6)).collect();
    let mut mean = vec![0.0f32; side * side];
    for im in &genuine {
        for (m, p) in mean.iter_mut().zip(im.pixels()) {
            *m += p / genuine.len() as f32;
        }
    }
    let at_mean = SignatureImage::new(side, mean).unwrap();
    let r = evaluate(&at_mean, &genuine, &forged, &gqm_cfg()).unwrap();
    assert!(r.score_genuine < 1e-6, "{r:?}");
    assert_eq!(r.grade, Grade::O);
    assert!((r.score_genuine + r.score_forged - 1.0).abs() < 1e-9);
    assert!(r.cooks_genuine >= 0.0 && r.cooks_forged >= 0.0);
    assert!(r.n_influential_genuine >= 3 && r.n_influential_forged >= 3);

    let forged_like = forged[0].clone();
    assert_eq!(evaluate(&forged_like, &genuine, &forged, &gqm_cfg()).unwrap().grade, Grade::F);
}

#[test]
fn evaluate_rejects_small_reference_sets() {
    let img = |v: f32| SignatureImage::new(4, vec![v; 16]).unwrap();
    let g = vec![img(0.1), img(0.2)];
    let f = vec![img(-0.1), img(-0.2), img(-0.3)];
    let err = evaluate(&img(0.0), &g, &f, &GqmConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)));
}

#[test]
fn default_dimension_is_capped_by_set_sizes() {
    let cfg = GqmConfig::default();
    assert_eq!(cfg.resolve_dim(40, 40, 4096).unwrap(), 16);
    assert_eq!(cfg.resolve_dim(10, 7, 4096).unwrap(), 5);
    assert_eq!(cfg.resolve_dim(10, 10, 3).unwrap(), 3);
    assert!(cfg.resolve_dim(2, 10, 4096).is_err());
}

#[test]
fn scores_normalize_and_swap_over_random_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for call in 0..200 {
        let dim = rng.gen_range(4..12);
        let ng = rng.gen_range(6..14);
        let nf = rng.gen_range(6..14);
        let shift = rng.gen_range(0.0..1.5);
        let g = random_matrix(ng, dim, rng.gen());
        let mut f = random_matrix(nf, dim, rng.gen());
        for i in 0..nf {
            f.row_mut(i)[0] += shift;
        }
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = GqmConfig {
            d: None,
            ..GqmConfig::default()
        };
        let r = evaluate_features(&x, &g, &f, &cfg).unwrap();
        let s = evaluate_features(&x, &f, &g, &cfg).unwrap();
        assert!((r.score_genuine + r.score_forged - 1.0).abs() < 1e-9, "call {call}");
        assert!((r.score_genuine - s.score_forged).abs() < 1e-9, "call {call}: {r:?} {s:?}");
        assert!((r.score_forged - s.score_genuine).abs() < 1e-9);
        if r.score_genuine != r.score_forged {
            assert_ne!(r.grade, s.grade);
        }
    }
}

#[test]
fn report_serializes_declared_fields() {
    let g = random_matrix(8, 5, 1);
    let f = random_matrix(8, 5, 2);
    let r = evaluate_features(&[0.0; 5], &g, &f, &gqm_cfg()).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "cooks_forged",
            "cooks_genuine",
            "d",
            "grade",
            "n_influential_forged",
            "n_influential_genuine",
            "quantile",
            "score_forged",
            "score_genuine"
        ]
    );
    assert!(v["grade"] == "O" || v["grade"] == "F");
}
