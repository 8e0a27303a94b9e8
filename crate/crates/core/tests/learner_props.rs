use nalgebra::{DMatrix, DVector};
use relu_mom::harness;
use relu_mom::learner::{self, GdOptions, LearnOptions};
use relu_mom::linalg;
use relu_mom::model::{self, DistributionSpec, NetworkParams};
use relu_mom::moments;
use relu_mom::seeds;
use relu_mom::spectral::ZMethod;

fn gaussian(d: usize) -> DistributionSpec {
    DistributionSpec::standard_gaussian(d)
}

fn instance(k: usize, d: usize, l: usize, noise: f64, seed: u64) -> NetworkParams {
    let mut rng = seeds::rng(seed);
    let w = linalg::normalize_rows(&linalg::gaussian_matrix(k, d, &mut rng));
    let mut a = linalg::gaussian_matrix(l, k, &mut rng);
    for i in 0..k {
        a[(i, i)] += 2.0;
    }
    NetworkParams::new(w, a, noise).unwrap()
}

#[test]
fn single_layer_recovers_the_weight_vector() {
    let w = [0.6, 0.8];
    let p = NetworkParams::new(DMatrix::from_row_slice(1, 2, &w), DMatrix::from_element(1, 1, 1.0), 0.1).unwrap();
    let s = model::draw_samples(&p, &gaussian(2), 1_000_000, 1).unwrap();
    let est = learner::learn_single_layer(&s.x, &s.y.column(0).into_owned()).unwrap();
    assert!((est - DVector::from_row_slice(&w)).norm() <= 0.01);
}

#[test]
fn exact_moments_give_the_exact_function() {
    for (noise, seed) in [(0.0, 2), (0.5, 3)] {
        let p = instance(4, 5, 4, noise, seed);
        let m = moments::analytic_gaussian_moments(&p, &gaussian(5)).unwrap();
        let r = learner::learn_two_layer_from_moments(&m, 4, &LearnOptions::default()).unwrap();
        let x = linalg::gaussian_matrix(500, 5, &mut seeds::rng(seed));
        let diff = r.predict(&x).unwrap() - p.forward_clean(&x).unwrap();
        assert!(diff.amax() <= 1e-6, "noise {noise}: {}", diff.amax());
        let (w_err, a_err) = harness::align_and_score(&r, &p).unwrap();
        assert!(w_err <= 1e-10 && a_err <= 1e-10);
    }
}

#[test]
fn exact_moments_with_extra_outputs_give_the_exact_function() {
    let p = instance(3, 4, 5, 0.2, 4);
    let m = moments::analytic_gaussian_moments(&p, &gaussian(4)).unwrap();
    assert!(learner::learn_two_layer_from_moments(&m, 3, &LearnOptions::default()).is_err());
    let opts = LearnOptions { nonsquare: true, ..LearnOptions::default() };
    let r = learner::learn_two_layer_from_moments(&m, 3, &opts).unwrap();
    let pr = r.projection.as_ref().unwrap();
    assert!((pr * pr.transpose() * &p.a - &p.a).amax() <= 1e-8);
    let x = linalg::gaussian_matrix(500, 4, &mut seeds::rng(4));
    assert!((r.predict(&x).unwrap() - p.forward_clean(&x).unwrap()).amax() <= 1e-6);
}

#[test]
fn sampled_reduction_finds_the_output_subspace() {
    let p = instance(8, 10, 12, 0.1, 5);
    let s = model::draw_samples(&p, &gaussian(10), 100_000, 5).unwrap();
    let red = learner::reduce_nonsquare(&s, 8).unwrap();
    let span_a = linalg::orthonormal_span(&p.a, 1e-12);
    assert!(linalg::projector_distance(&red.p, &span_a) <= 0.05);
    assert_eq!(red.reduced.n(), 50_000);
    assert_eq!(red.reduced.l(), 8);
}

#[test]
fn permuting_hidden_units_permutes_the_answer() {
    let p = instance(4, 5, 4, 0.1, 6);
    let perm = [2, 0, 3, 1];
    let w = DMatrix::from_fn(4, 5, |i, j| p.w[(perm[i], j)]);
    let a = DMatrix::from_fn(4, 4, |i, j| p.a[(i, perm[j])]);
    let q = NetworkParams::new(w, a, p.noise_sigma).unwrap();
    let opts = LearnOptions::default();
    let rp = learner::learn_two_layer_from_moments(&moments::analytic_gaussian_moments(&p, &gaussian(5)).unwrap(), 4, &opts).unwrap();
    let rq = learner::learn_two_layer_from_moments(&moments::analytic_gaussian_moments(&q, &gaussian(5)).unwrap(), 4, &opts).unwrap();
    let x = linalg::gaussian_matrix(300, 5, &mut seeds::rng(6));
    assert!((rp.predict(&x).unwrap() - rq.predict(&x).unwrap()).amax() <= 1e-8);
    let ap = harness::align(&rp.v, &rp.a_hat, &p.w, &p.a).unwrap();
    let aq = harness::align(&rq.v, &rq.a_hat, &q.w, &q.a).unwrap();
    assert!((ap.w_err - aq.w_err).abs() <= 1e-10);
}

#[test]
fn sample_split_is_disjoint_and_complete() {
    let p = instance(3, 4, 3, 0.1, 7);
    let s = model::draw_samples(&p, &gaussian(4), 10_001, 7).unwrap();
    let r = learner::learn_two_layer(&s, 3, &LearnOptions::default()).unwrap();
    let split = r.diagnostics.split.as_ref().unwrap();
    assert_eq!(split.moment_rows.0, 0);
    assert_eq!(split.moment_rows.1, split.fit_rows.0);
    assert_eq!(split.fit_rows.1, 10_001);
    assert!(split.projection_rows.is_none());

    let p = instance(3, 4, 5, 0.1, 8);
    let s = model::draw_samples(&p, &gaussian(4), 10_000, 8).unwrap();
    let opts = LearnOptions { nonsquare: true, ..LearnOptions::default() };
    let r = learner::learn_two_layer(&s, 3, &opts).unwrap();
    let split = r.diagnostics.split.as_ref().unwrap();
    let (pa, pb) = split.projection_rows.unwrap();
    assert_eq!((pa, pb), (0, 5000));
    assert_eq!(split.moment_rows.0, pb);
    assert_eq!(split.moment_rows.1, split.fit_rows.0);
    assert_eq!(split.fit_rows.1, 10_000);
}

#[test]
fn learned_network_is_close_on_moderate_samples() {
    let p = NetworkParams::random_orthonormal(5, 5, 5, 0.1, 9).unwrap();
    let s = model::draw_samples(&p, &gaussian(5), 50_000, 9).unwrap();
    for z_method in [ZMethod::Eigen, ZMethod::Als] {
        let opts = LearnOptions { z_method, ..LearnOptions::default() };
        let r = learner::learn_two_layer(&s, 5, &opts).unwrap();
        let (w_err, _) = harness::align_and_score(&r, &p).unwrap();
        assert!(w_err < 0.1, "{z_method:?}: {w_err}");
    }
}

#[test]
fn refinement_does_not_raise_the_error() {
    let p = NetworkParams::random_orthonormal(10, 10, 10, 0.1, 10).unwrap();
    let s = model::draw_samples(&p, &gaussian(10), 10_000, 10).unwrap();
    let test = model::draw_samples(&p, &gaussian(10), 10_000, 11).unwrap();
    let base_opts = LearnOptions { z_method: ZMethod::Als, ..LearnOptions::default() };
    let base = learner::learn_two_layer(&s, 10, &base_opts).unwrap();
    let refined_opts = LearnOptions { refine: Some(GdOptions { lr: 0.1, iters: 200 }), ..base_opts };
    let refined = learner::learn_two_layer(&s, 10, &refined_opts).unwrap();
    let report = refined.diagnostics.refinement.as_ref().unwrap();
    assert!(report.final_loss <= report.initial_loss);
    assert!(harness::mse(&refined, &test).unwrap() <= harness::mse(&base, &test).unwrap());
}

#[test]
fn gd_losses_never_increase() {
    let p = NetworkParams::random_orthonormal(3, 4, 3, 0.1, 12).unwrap();
    let s = model::draw_samples(&p, &gaussian(4), 2000, 12).unwrap();
    let w0 = model::perturb_weights(&p.w, 0.3, 12).unwrap();
    let out = learner::refine_w_gd(&p.a, &w0, &s, 5.0, 100).unwrap();
    assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.final_lr <= 5.0);
}

#[test]
fn single_unit_pipeline_gives_a_positive_output_weight() {
    let p = NetworkParams::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]), DMatrix::from_element(1, 1, 2.0), 0.05).unwrap();
    let s = model::draw_samples(&p, &gaussian(3), 20_000, 13).unwrap();
    let r = learner::learn_two_layer(&s, 1, &LearnOptions::default()).unwrap();
    assert!(r.a_hat[(0, 0)] > 0.0);
    let x = linalg::gaussian_matrix(200, 3, &mut seeds::rng(13));
    let rel = (r.predict(&x).unwrap() - p.forward_clean(&x).unwrap()).norm() / p.forward_clean(&x).unwrap().norm();
    assert!(rel < 0.05, "{rel}");
}

#[test]
fn mse_of_the_truth_is_the_noise_floor() {
    let sigma = 0.3;
    let p = NetworkParams::random_orthonormal(4, 5, 4, sigma, 14).unwrap();
    let s = model::draw_samples(&p, &gaussian(5), 200_000, 14).unwrap();
    let noisy = harness::mse_of(&p.w, &p.a, &s.x, &s.y).unwrap();
    assert!((noisy - sigma * sigma).abs() <= 0.03 * sigma * sigma, "{noisy}");
    let clean = p.forward_clean(&s.x).unwrap();
    assert!(harness::mse_of(&p.w, &p.a, &s.x, &clean).unwrap() <= 1e-24);
}
