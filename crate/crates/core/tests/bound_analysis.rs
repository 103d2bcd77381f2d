use lefo_core::bound_analysis::*;
use lefo_core::predictor::{Activation, Layer, MlpParams, Predictor};
use lefo_core::trace_io::{generate_synthetic_trace, MovementKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random symmetric positive-definite matrix with eigenvalues in
/// `[lo, hi]`.
fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)));
    let a = &q * d * q.transpose();
    (&a + a.transpose()) * 0.5
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn tight_power() -> PowerIterConfig {
    PowerIterConfig {
        max_iters: 100_000,
        rel_tolerance: 1e-13,
        ..PowerIterConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_delta_is_exact_and_bounded(seed in any::<u64>(), n in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_spd(&mut rng, n, 0.1, 10.0);
        let q = Quadratic::new(a.clone()).unwrap();
        let prev = random_vec(&mut rng, n);
        let next = random_vec(&mut rng, n);
        let cfg = BoundConfig { power: tight_power(), ..BoundConfig::default() };
        let cert = certify_bound(&q, &prev, &next, &cfg).unwrap();
        let d = DVector::from_vec(delta_theta(&prev, &next).unwrap().0);
        let expected = 0.5 * (d.transpose() * &a * &d)[(0, 0)];
        // The start point is not a minimum, so add the linear term.
        let g = &a * DVector::from_column_slice(&prev);
        let expected = expected + g.dot(&d);
        prop_assert!((cert.loss_delta - expected).abs() <= 1e-8 * expected.abs().max(1.0));
        let curvature = 0.5 * (d.transpose() * &a * &d)[(0, 0)];
        prop_assert!(curvature <= 0.5 * cert.lambda_max * cert.delta_theta_sq + 1e-9);
    }

    #[test]
    fn stationary_quadratic_certificate_holds(seed in any::<u64>(), n in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Quadratic::new(random_spd(&mut rng, n, 0.1, 10.0)).unwrap();
        let zero = vec![0.0; n];
        let next = random_vec(&mut rng, n);
        let cfg = BoundConfig { power: tight_power(), ..BoundConfig::default() };
        let cert = certify_bound(&q, &zero, &next, &cfg).unwrap();
        prop_assert!(cert.holds);
        prop_assert!(cert.loss_delta <= cert.bound + cfg.slack);
        prop_assert_eq!(cert.bound, 0.5 * cert.lambda_max * cert.delta_theta_sq);
    }

    #[test]
    fn hvp_is_linear_on_quadratics(seed in any::<u64>(), n in 1usize..=10, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Quadratic::new(random_spd(&mut rng, n, 0.1, 10.0)).unwrap();
        let theta = random_vec(&mut rng, n);
        let mut v = random_vec(&mut rng, n);
        if norm(&v) == 0.0 {
            v[0] = 1.0;
        }
        let cfg = PowerIterConfig::default();
        let hv = hessian_vector_product(&q, &theta, &v, &cfg).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let hsv = hessian_vector_product(&q, &theta, &scaled, &cfg).unwrap();
        let diff: Vec<f64> = hsv.iter().zip(&hv).map(|(a, b)| a - scale * b).collect();
        prop_assert!(norm(&diff) <= 1e-6 * scale * norm(&hv));
    }

    #[test]
    fn rayleigh_quotient_never_exceeds_lambda_max(seed in any::<u64>(), n in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Quadratic::new(random_spd(&mut rng, n, 0.1, 10.0)).unwrap();
        let theta = random_vec(&mut rng, n);
        let (lambda, _) = max_eigenvalue(&q, &theta, &tight_power()).unwrap();
        for _ in 0..5 {
            let v = random_vec(&mut rng, n);
            let len = norm(&v);
            if len == 0.0 {
                continue;
            }
            let unit: Vec<f64> = v.iter().map(|x| x / len).collect();
            let hv = hessian_vector_product(&q, &theta, &unit, &PowerIterConfig::default()).unwrap();
            prop_assert!(dot(&unit, &hv) <= lambda + 1e-6);
        }
    }
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.random_range(2..=10);
        let a = random_spd(&mut rng, n, 0.1, 10.0);
        let reference = a.clone().symmetric_eigen().eigenvalues.max();
        let q = Quadratic::new(a).unwrap();
        let theta = random_vec(&mut rng, n);
        let (lambda, _) = max_eigenvalue(&q, &theta, &tight_power()).unwrap();
        assert!((lambda - reference).abs() < 1e-6, "{lambda} vs {reference}");
    }
}

#[test]
fn slow_gap_still_converges() {
    let q = Quadratic::from_diagonal(&[3.0, 2.999]);
    let cfg = PowerIterConfig {
        max_iters: 10_000,
        ..PowerIterConfig::default()
    };
    let (lambda, _) = max_eigenvalue(&q, &[0.0, 0.0], &cfg).unwrap();
    assert!((lambda - 3.0).abs() < 1e-3, "{lambda}");
}

/// Loss over a small linear network, so third derivatives are modest and
/// a value-only finite-difference Hessian is accurate.
fn small_linear_problem(seed: u64) -> (MlpParams, lefo_core::predictor::WindowDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [9usize, 4, 9];
    let layers = dims
        .windows(2)
        .map(|w| Layer {
            in_dim: w[0],
            out_dim: w[1],
            weights: (0..w[0] * w[1])
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
            bias: (0..w[1]).map(|_| rng.random_range(-0.1..0.1)).collect(),
        })
        .collect();
    let net = MlpParams::new(layers, Activation::Identity).unwrap();
    let trace = generate_synthetic_trace(MovementKind::HorizontalSlow, 40, 100.0, seed).unwrap();
    let data = Predictor::new(net.clone(), 1)
        .unwrap()
        .dataset(&trace)
        .unwrap();
    (net, data)
}

fn fd_hessian(loss: &dyn Objective, theta: &[f64], h: f64) -> DMatrix<f64> {
    let n = theta.len();
    let f = |di: Option<(usize, f64)>, dj: Option<(usize, f64)>| {
        let mut t = theta.to_vec();
        for (idx, step) in [di, dj].into_iter().flatten() {
            t[idx] += step;
        }
        loss.value(&t).unwrap()
    };
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = (f(Some((i, h)), Some((j, h)))
                - f(Some((i, h)), Some((j, -h)))
                - f(Some((i, -h)), Some((j, h)))
                + f(Some((i, -h)), Some((j, -h))))
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

#[test]
fn hvp_matches_assembled_hessian_on_small_nets() {
    for seed in 0..3 {
        let (net, data) = small_linear_problem(seed);
        assert!(net.param_count() <= 100);
        let rows: Vec<usize> = (0..data.len()).collect();
        let loss = NetworkLoss::new(net.clone(), &data, rows).unwrap();
        let theta = net.to_flat();
        let hess = fd_hessian(&loss, &theta, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..3 {
            let v = random_vec(&mut rng, theta.len());
            let ours =
                hessian_vector_product(&loss, &theta, &v, &PowerIterConfig::default()).unwrap();
            let reference = &hess * DVector::from_column_slice(&v);
            let diff = DVector::from_column_slice(&ours) - &reference;
            let rel = diff.norm() / reference.norm();
            assert!(rel < 1e-6, "seed {seed}: relative error {rel}");
        }
    }
}

#[test]
fn sweep_counts_and_identical_pairs() {
    let q = Quadratic::from_diagonal(&[3.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let checkpoints: Vec<Vec<f64>> = (0..11).map(|_| random_vec(&mut rng, 2)).collect();
    let certs =
        sweep_checkpoints(&checkpoints, |_| Ok(q.clone()), &BoundConfig::default()).unwrap();
    assert_eq!(certs.len(), 10);

    let same = vec![vec![0.5, -0.5]; 2];
    let certs = sweep_checkpoints(&same, |_| Ok(q.clone()), &BoundConfig::default()).unwrap();
    assert_eq!(certs.len(), 1);
    assert_eq!(certs[0].loss_delta, 0.0);
    assert_eq!(certs[0].bound, 0.0);
    assert!(certs[0].holds);

    assert!(matches!(
        sweep_checkpoints(&same[..1], |_| Ok(q.clone()), &BoundConfig::default()),
        Err(BoundError::TooFewCheckpoints(1))
    ));
}

#[test]
fn certificates_csv_has_one_row_per_pair() {
    let q = Quadratic::from_diagonal(&[2.0, 1.0, 0.5]);
    let checkpoints: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1; 3]).collect();
    let certs =
        sweep_checkpoints(&checkpoints, |_| Ok(q.clone()), &BoundConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_certificates_csv(&certs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "iter,loss_delta,delta_theta_sq,lambda_max,bound,holds,grad_norm"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,"));
}
