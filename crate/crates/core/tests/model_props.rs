use nalgebra::{DMatrix, DVector};
use relu_mom::linalg;
use relu_mom::model::{self, DistributionSpec, MixtureComponent, NetworkParams};
use relu_mom::seeds;

fn empirical_mean(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |j, _| x.column(j).mean())
}

fn empirical_second_moment(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * x / x.nrows() as f64
}

fn q3() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.5, 0.0], vec![0.0, 0.8, -0.3], vec![0.2, 0.0, 1.5]]
}

fn qqt(q: &[Vec<f64>]) -> DMatrix<f64> {
    let m = linalg::from_rows(q).unwrap();
    &m * m.transpose()
}

#[test]
fn gaussian_sample_mean_is_near_zero() {
    let x = model::sample_inputs(&DistributionSpec::standard_gaussian(2), 1_000_000, 1).unwrap();
    assert!(empirical_mean(&x).amax() < 5e-3);
}

#[test]
fn ones_mixture_moments_match_closed_form() {
    let d = 3;
    let spec = DistributionSpec::SymmetricMixture {
        dim: d,
        components: vec![MixtureComponent { weight: 1.0, mean: vec![1.0; d], cov: None }],
    };
    let x = model::sample_inputs(&spec, 1_000_000, 2).unwrap();
    assert!(empirical_mean(&x).amax() < 1e-2);
    // E[x x^T] = I + mu mu^T for the pair +-mu with identity covariance.
    let want = DMatrix::identity(d, d) + DMatrix::from_element(d, d, 1.0);
    assert!((empirical_second_moment(&x) - want).amax() < 2e-2);
}

#[test]
fn mixture_with_custom_covariance() {
    let spec = DistributionSpec::SymmetricMixture {
        dim: 2,
        components: vec![
            MixtureComponent { weight: 0.3, mean: vec![2.0, 0.0], cov: Some(vec![vec![0.5, 0.1], vec![0.1, 0.2]]) },
            MixtureComponent { weight: 0.7, mean: vec![0.0, 0.0], cov: None },
        ],
    };
    let x = model::sample_inputs(&spec, 1_000_000, 3).unwrap();
    let want = DMatrix::from_row_slice(2, 2, &[0.3 * (0.5 + 4.0) + 0.7, 0.3 * 0.1, 0.3 * 0.1, 0.3 * 0.2 + 0.7]);
    assert!((empirical_second_moment(&x) - want).amax() < 2e-2);
}

#[test]
fn shaped_and_full_weight_perturbation_have_covariance_qqt() {
    let want = qqt(&q3());
    let shaped = DistributionSpec::ShapedGaussian { q: q3() };
    let full = DistributionSpec::QLambdaMixture {
        base: Box::new(DistributionSpec::standard_gaussian(3)),
        q: q3(),
        lambda: 1.0,
    };
    for (i, spec) in [shaped, full].iter().enumerate() {
        let x = model::sample_inputs(spec, 1_000_000, 10 + i as u64).unwrap();
        assert!((empirical_second_moment(&x) - &want).amax() < 0.03 * want.amax(), "spec {i}");
    }
}

#[test]
fn partial_perturbation_interpolates_covariance() {
    let lambda = 0.25;
    let spec = DistributionSpec::QLambdaMixture {
        base: Box::new(DistributionSpec::standard_gaussian(3)),
        q: q3(),
        lambda,
    };
    let x = model::sample_inputs(&spec, 1_000_000, 12).unwrap();
    let want = DMatrix::identity(3, 3) * (1.0 - lambda) + qqt(&q3()) * lambda;
    assert!((empirical_second_moment(&x) - want).amax() < 3e-2);
}

#[test]
fn invalid_lambda_is_rejected() {
    for lambda in [0.0, -0.1, 1.5] {
        let spec = DistributionSpec::QLambdaMixture {
            base: Box::new(DistributionSpec::standard_gaussian(3)),
            q: q3(),
            lambda,
        };
        assert!(spec.validate().is_err(), "lambda {lambda}");
    }
}

#[test]
fn symmetrized_empirical_draws_signed_rows() {
    let rows = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
    let spec = DistributionSpec::SymmetrizedEmpirical { rows: rows.clone(), path: None };
    let x = model::sample_inputs(&spec, 4000, 4).unwrap();
    let mut counts = [0usize; 4];
    for r in x.row_iter() {
        let hit = rows.iter().enumerate().find_map(|(i, row)| {
            if r[0] == row[0] && r[1] == row[1] {
                Some(2 * i)
            } else if r[0] == -row[0] && r[1] == -row[1] {
                Some(2 * i + 1)
            } else {
                None
            }
        });
        counts[hit.expect("draw is a signed data row")] += 1;
    }
    assert!(counts.iter().all(|&c| c > 850 && c < 1150), "{counts:?}");
}

#[test]
fn symmetrized_empirical_reads_a_matrix_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    std::fs::write(&path, "1,0\n0,2\n").unwrap();
    let spec = DistributionSpec::SymmetrizedEmpirical { rows: vec![], path: Some(path) };
    assert_eq!(spec.dim(), 2);
    let x = model::sample_inputs(&spec, 100, 5).unwrap();
    assert!(x.iter().all(|v| [0.0, 1.0, -1.0, 2.0, -2.0].contains(v)));
}

/// Third-order empirical moments vanish within five standard errors.
#[test]
fn odd_moments_vanish_for_every_variant() {
    let specs = vec![
        DistributionSpec::standard_gaussian(2),
        DistributionSpec::ShapedGaussian { q: vec![vec![1.0, 0.3], vec![0.0, 0.7]] },
        DistributionSpec::SymmetricMixture {
            dim: 2,
            components: vec![MixtureComponent { weight: 1.0, mean: vec![1.0, 1.0], cov: None }],
        },
        DistributionSpec::SymmetrizedEmpirical { rows: vec![vec![1.0, 2.0], vec![0.5, -1.0]], path: None },
        DistributionSpec::QLambdaMixture {
            base: Box::new(DistributionSpec::standard_gaussian(2)),
            q: vec![vec![2.0, 0.0], vec![1.0, 1.0]],
            lambda: 0.5,
        },
    ];
    let n = 200_000;
    for (s, spec) in specs.iter().enumerate() {
        let x = model::sample_inputs(spec, n, 20 + s as u64).unwrap();
        for (a, b, c) in [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)] {
            let v: Vec<f64> = x.row_iter().map(|r| r[a] * r[b] * r[c]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() <= 5.0 * sd / (n as f64).sqrt(), "spec {s} ({a}{b}{c}): {mean}");
        }
    }
}

#[test]
fn output_variance_matches_half_normal_oracle() {
    let sigma = 0.3;
    let p = NetworkParams::random_orthonormal(10, 10, 10, sigma, 7).unwrap();
    let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(10), 1_000_000, 7).unwrap();
    // Orthonormal rows make the hidden units independent, each relu(N(0,1))
    // with variance 1/2 - 1/(2 pi).
    let unit_var = 0.5 - 0.5 / std::f64::consts::PI;
    for i in 0..10 {
        let want = p.a.row(i).norm_squared() * unit_var + sigma * sigma;
        let col = s.y.column(i);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((var - want).abs() <= 0.02 * want, "output {i}: {var} vs {want}");
    }
}

#[test]
fn forward_is_positively_homogeneous_per_unit() {
    let p = NetworkParams::random_orthonormal(3, 4, 5, 0.0, 8).unwrap();
    let mut q = p.clone();
    for (i, c) in [2.5, 0.1, 7.0].iter().enumerate() {
        q.w.row_mut(i).scale_mut(*c);
        q.a.column_mut(i).scale_mut(1.0 / c);
    }
    let x = linalg::gaussian_matrix(200, 4, &mut seeds::rng(8));
    let diff = p.forward_clean(&x).unwrap() - q.forward_clean(&x).unwrap();
    assert!(diff.amax() < 1e-12);
}

#[test]
fn sampling_and_perturbation_are_reproducible() {
    let spec = DistributionSpec::standard_gaussian(3);
    assert_eq!(model::sample_inputs(&spec, 100, 9).unwrap(), model::sample_inputs(&spec, 100, 9).unwrap());
    assert_ne!(model::sample_inputs(&spec, 100, 9).unwrap(), model::sample_inputs(&spec, 100, 10).unwrap());
    let w = DMatrix::identity(2, 3);
    assert_eq!(model::perturb_weights(&w, 0.1, 3).unwrap(), model::perturb_weights(&w, 0.1, 3).unwrap());
}

#[test]
fn perturbation_noise_is_standard_normal() {
    let zero = DMatrix::zeros(2, 3);
    let mut sum = 0.0;
    let mut sq = 0.0;
    let trials = 10_000;
    for t in 0..trials {
        let e = model::perturb_weights(&zero, 1.0, t).unwrap();
        sum += e.sum();
        sq += e.norm_squared();
    }
    let count = (trials * 6) as f64;
    let var = sq / count - (sum / count).powi(2);
    assert!((var - 1.0).abs() < 0.05, "entry variance {var}");
    // E ||W~ - W||_F^2 / rho^2 = k d.
    let w = DMatrix::from_element(2, 3, 4.0);
    let rho = 0.3;
    let mean_sq: f64 = (0..trials)
        .map(|t| (model::perturb_weights(&w, rho, 1_000_000 + t).unwrap() - &w).norm_squared() / (rho * rho))
        .sum::<f64>()
        / trials as f64;
    assert!((mean_sq - 6.0).abs() < 0.15, "{mean_sq}");
}

#[test]
fn vanishing_perturbation_keeps_weights() {
    let w = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
    let p = model::perturb_weights(&w, 1e-300, 4).unwrap();
    assert!((p - &w).amax() <= 1e-290);
    assert!(model::perturb_weights(&w, 0.0, 4).is_err());
}

#[test]
fn conditioning_spectrum_is_geometric() {
    let m = model::condition_controlled_matrix(10, 100.0, 5).unwrap();
    let sv = linalg::singular_values_desc(&m);
    assert!((sv[0] / sv[9] - 100.0).abs() <= 1e-8 * 100.0);
    let ratio = 100f64.powf(1.0 / 9.0);
    for w in sv.windows(2) {
        assert!((w[0] / w[1] - ratio).abs() < 1e-9);
    }
    let o = model::condition_controlled_matrix(6, 1.0, 5).unwrap();
    assert!((o.transpose() * &o - DMatrix::identity(6, 6)).amax() < 1e-12);
    assert!(model::condition_controlled_matrix(4, 0.5, 5).is_err());
}

#[test]
fn canonical_rows_are_unit_norm() {
    let w = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 4.0, 0.0, 0.2, 0.0]);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
    let p = NetworkParams::new(w, a, 0.0).unwrap().canonicalize().unwrap();
    for r in p.w.row_iter() {
        assert!((r.norm() - 1.0).abs() < 1e-12);
    }
}
