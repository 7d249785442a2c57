use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdeficit::measurement::{evaluate_distribution, EntropyObjective, EntropyTerm, MeasurementProtocol};
use wdeficit::numerics::{haar_unitary, unitarity_defect};
use wdeficit::optimize::{
    finite_difference_gradient, grid_oracle_qubit_bases, local_descent, minimize, qubit_basis, GradientMode,
    ManifoldSpec, OptimizerConfig,
};
use wdeficit::states::{self, DensityState};
use wdeficit::{CMat, C64, Error};

fn joint_objective(state: &DensityState) -> EntropyObjective {
    let n = state.n_parties();
    let template = MeasurementProtocol::computational(state.dims());
    EntropyObjective::for_protocol(state, &template, vec![EntropyTerm { legs: (0..n).collect(), coeff: 1.0 }], 0.0)
        .unwrap()
}

/// H(Y) for qubit bases, evaluated through the distribution API.
fn measured_entropy(state: &DensityState) -> impl Fn(&[CMat]) -> f64 + Sync + '_ {
    move |bases: &[CMat]| {
        let parties: Vec<usize> = (0..bases.len()).collect();
        let p = MeasurementProtocol::product(&parties, bases.to_vec()).unwrap();
        evaluate_distribution(state, &p).unwrap().entropy()
    }
}

#[test]
fn quadratic_objective_reaches_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = haar_unitary(3, &mut rng);
    let f = move |p: &[CMat]| (&p[0] - &target).norm_squared();
    let opt = minimize(&f, &ManifoldSpec::bases(&[3]), &OptimizerConfig::default().with_restarts(4)).unwrap();
    assert!(opt.value < 1e-10, "value {}", opt.value);
    assert!(unitarity_defect(&opt.point[0]) < 1e-10);
}

#[test]
fn ghz_measured_entropy_minimum_is_ln2() {
    let ghz = states::ghz(3).unwrap();
    let obj = joint_objective(&ghz);
    let opt = minimize(&obj, &obj.spec(), &OptimizerConfig::default()).unwrap();
    assert_abs_diff_eq!(opt.value, 2f64.ln(), epsilon = 1e-9);
    assert!(opt.diagnostics.converged);
    assert_eq!(opt.diagnostics.restarts_run, 32);
}

#[test]
fn both_symmetric_minima_are_found() {
    // Minima at |U00|² = 1/4 and |U00|² = 3/4, both with value 0.
    let f = |p: &[CMat]| {
        let a = p[0][(0, 0)].norm_sqr();
        ((a - 0.25) * (a - 0.75)).powi(2)
    };
    let cfg = OptimizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut low, mut high) = (0, 0);
    for _ in 0..32 {
        let opt = local_descent(&f, vec![haar_unitary(2, &mut rng)], &cfg).unwrap();
        assert!(opt.value < 1e-10);
        let a = opt.point[0][(0, 0)].norm_sqr();
        if (a - 0.25).abs() < 1e-3 {
            low += 1;
        } else if (a - 0.75).abs() < 1e-3 {
            high += 1;
        }
    }
    assert_eq!(low + high, 32);
    assert!(low > 0 && high > 0, "found {low} and {high}");
}

#[test]
fn restarts_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut rng).unwrap();
    let obj = joint_objective(&state);
    let cfg = OptimizerConfig::default().with_restarts(8).with_seed(99);
    let a = minimize(&obj, &obj.spec(), &cfg).unwrap();
    let b = minimize(&obj, &obj.spec(), &cfg).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.point, b.point);
    assert_eq!(a.diagnostics, b.diagnostics);
    for u in &a.point {
        assert!(unitarity_defect(u) < 1e-10);
    }
}

#[test]
fn descent_is_monotone_from_every_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = states::random_pure(&[2, 2, 2], &mut rng).unwrap();
    let obj = joint_objective(&state);
    let cfg = OptimizerConfig::default();
    for _ in 0..8 {
        let start: Vec<CMat> = (0..3).map(|_| haar_unitary(2, &mut rng)).collect();
        let f0 = obj.value(&start);
        let opt = local_descent(&obj, start, &cfg).unwrap();
        assert!(opt.value <= f0 + 1e-12);
    }
}

#[test]
fn finite_differences_of_a_linear_functional_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = haar_unitary(3, &mut rng) * C64::new(0.7, 0.2);
    let v = haar_unitary(3, &mut rng);
    let cc = c.clone();
    let f = move |p: &[CMat]| (cc.adjoint() * &p[0]).trace().re;
    // d/dt Re Tr(C† e^{tΩ} V) = Re Tr(V C† Ω), so S is the skew part of C V† / 2.
    let a = &c * v.adjoint() * C64::new(0.5, 0.0);
    let expected = (&a - a.adjoint()) * C64::new(0.5, 0.0);
    let g = finite_difference_gradient(&f, &[v], 1e-4);
    assert!((&g[0] - expected).norm() < 1e-7);
}

#[test]
fn finite_differences_vanish_at_a_stationary_point() {
    let ghz = states::ghz(3).unwrap();
    let obj = joint_objective(&ghz);
    let point = obj.spec().identity_point();
    let g = finite_difference_gradient(&obj, &point, 1e-4);
    let norm: f64 = g.iter().map(|s| s.norm()).sum();
    assert!(norm < 1e-6, "gradient norm {norm}");
}

/// Fourth-order stencil along one generator direction, as an independent oracle.
fn directional_derivative_4th(obj: &EntropyObjective, point: &[CMat], dir: &[CMat], h: f64) -> f64 {
    let at = |t: f64| {
        let p: Vec<CMat> = point
            .iter()
            .zip(dir)
            .map(|(v, s)| wdeficit::numerics::unitary_from_generator(&(s * C64::new(t, 0.0))).unwrap() * v)
            .collect();
        obj.value(&p)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

#[test]
fn gradients_match_a_fourth_order_stencil() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut rng).unwrap();
    let obj = joint_objective(&state);
    let point: Vec<CMat> = (0..3).map(|_| haar_unitary(2, &mut rng)).collect();
    let (_, analytic) = obj.value_and_gradient(&point);
    let fd = finite_difference_gradient(&obj, &point, 1e-5);
    for _ in 0..5 {
        let dir: Vec<CMat> = (0..3)
            .map(|_| {
                let g = wdeficit::numerics::ginibre(2, 2, &mut rng);
                (&g - g.adjoint()) * C64::new(0.5, 0.0)
            })
            .collect();
        let oracle = directional_derivative_4th(&obj, &point, &dir, 1e-3);
        let pair = |s: &[CMat]| -> f64 { s.iter().zip(&dir).map(|(a, b)| 2.0 * (a.adjoint() * b).trace().re).sum() };
        assert!((pair(&analytic) - oracle).abs() < 1e-7);
        assert!((pair(&fd) - oracle).abs() < 1e-6);
    }
}

#[test]
fn finite_difference_mode_converges_too() {
    let w = states::w_state().unwrap();
    let obj = joint_objective(&w);
    let cfg = OptimizerConfig { gradient: GradientMode::FiniteDifference(1e-6), ..OptimizerConfig::default().with_restarts(4) };
    let opt = minimize(&obj, &obj.spec(), &cfg).unwrap();
    assert_abs_diff_eq!(opt.value, 3f64.ln(), epsilon = 1e-7);
}

#[test]
fn invalid_configs_are_rejected() {
    let f = |_: &[CMat]| 0.0;
    let spec = ManifoldSpec::bases(&[2]);
    assert!(minimize(&f, &spec, &OptimizerConfig::default().with_restarts(0)).is_err());
    let cfg = OptimizerConfig { gradient: GradientMode::FiniteDifference(0.1), ..OptimizerConfig::default() };
    assert!(minimize(&f, &spec, &cfg).is_err());
    let cfg = OptimizerConfig::default().with_warm_start(Some(vec![CMat::identity(3, 3)]));
    assert!(minimize(&f, &spec, &cfg).is_err());
}

#[test]
fn nan_restarts_are_abandoned() {
    // Finite only near the identity, so restart 0 survives and Haar starts mostly fail.
    let f = |p: &[CMat]| {
        let d = (&p[0] - CMat::identity(2, 2)).norm();
        if d < 0.5 { d * d } else { f64::NAN }
    };
    let opt = minimize(&f, &ManifoldSpec::bases(&[2]), &OptimizerConfig::default().with_restarts(8)).unwrap();
    assert!(opt.value < 1e-12);
    assert!(opt.diagnostics.restarts_failed > 0);
    let g = |_: &[CMat]| f64::NAN;
    assert!(matches!(minimize(&g, &ManifoldSpec::bases(&[2]), &OptimizerConfig::default()), Err(Error::Optimizer(_))));
}

#[test]
fn warm_start_is_used_as_restart_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = haar_unitary(2, &mut rng);
    let t = target.clone();
    let f = move |p: &[CMat]| (&p[0] - &t).norm_squared();
    let cfg = OptimizerConfig { max_iter: 0, ..OptimizerConfig::default().with_restarts(2) }
        .with_warm_start(Some(vec![target]));
    let opt = minimize(&f, &ManifoldSpec::bases(&[2]), &cfg).unwrap();
    assert_eq!(opt.diagnostics.best_restart, 1);
    assert!(opt.value < 1e-20);
}

#[test]
fn qubit_basis_is_unitary_with_the_right_bloch_vector() {
    let u = qubit_basis(1.1, 0.3);
    assert!(unitarity_defect(&u) < 1e-14);
    // <Z> of the first vector is cos θ.
    let z = u[(0, 0)].norm_sqr() - u[(1, 0)].norm_sqr();
    assert_abs_diff_eq!(z, 1.1f64.cos(), epsilon = 1e-14);
}

#[test]
fn grid_oracle_on_reference_states() {
    let product = states::basis_state(&[2, 2, 2], &[0, 1, 0]).unwrap();
    let r = grid_oracle_qubit_bases(measured_entropy(&product), 3, 12).unwrap();
    assert!(r.value.abs() < 1e-9);

    let ghz = states::ghz(3).unwrap();
    let r = grid_oracle_qubit_bases(measured_entropy(&ghz), 3, 12).unwrap();
    assert_abs_diff_eq!(r.value, 2f64.ln(), epsilon = 1e-3);

    let w = states::w_state().unwrap();
    let r = grid_oracle_qubit_bases(measured_entropy(&w), 3, 12).unwrap();
    assert_abs_diff_eq!(r.value, 3f64.ln(), epsilon = 1e-3);
}

#[test]
fn grid_oracle_budget_is_enforced() {
    let ghz = states::ghz(3).unwrap();
    assert!(matches!(grid_oracle_qubit_bases(measured_entropy(&ghz), 3, 60), Err(Error::Resource(_))));
}
