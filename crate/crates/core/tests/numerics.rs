use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdeficit::measurement::MeasurementProtocol;
use wdeficit::numerics::{
    binary_entropy, conditional_shannon, haar_unitary, partial_trace, random_density, relative_entropy,
    shannon_entropy, trace_distance, unitarity_defect, unitary_from_generator, von_neumann_entropy, HermitianOperator,
    OutcomeDistribution, ProbabilityVector,
};
use wdeficit::states::{self, DensityState};
use wdeficit::{CMat, CVec, Operator, C64};

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn diag(v: &[f64]) -> Operator {
    HermitianOperator::new(CMat::from_diagonal(&CVec::from_iterator(v.len(), v.iter().map(|&x| c(x))))).unwrap()
}

fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> Operator {
    HermitianOperator::new(random_density(dim, dim, rng)).unwrap()
}

#[test]
fn von_neumann_reference_values() {
    assert_abs_diff_eq!(von_neumann_entropy(&diag(&[0.5, 0.5])).unwrap(), 2f64.ln(), epsilon = 1e-14);
    assert_abs_diff_eq!(von_neumann_entropy(&diag(&[1.0, 0.0])).unwrap(), 0.0, epsilon = 1e-14);
    let h = -(1.0 / 3.0) * (1.0f64 / 3.0).ln() - (2.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert_abs_diff_eq!(von_neumann_entropy(&diag(&[1.0 / 3.0, 2.0 / 3.0])).unwrap(), h, epsilon = 1e-14);
    assert_abs_diff_eq!(h, 0.636514, epsilon = 1e-6);
    assert!(von_neumann_entropy(&diag(&[1.1, -0.1])).is_err());
    assert!(von_neumann_entropy(&diag(&[0.4, 0.4])).is_err());
}

#[test]
fn hermiticity_is_enforced() {
    let mut m = CMat::identity(2, 2);
    m[(0, 1)] = c(0.3);
    assert!(HermitianOperator::new(m).is_err());
}

#[test]
fn shannon_reference_values() {
    let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
    assert_abs_diff_eq!(shannon_entropy(&p), 2f64.ln(), epsilon = 1e-15);
    assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
    assert!(ProbabilityVector::new(vec![1.0 + 1e-13, -1e-13]).is_ok());

    let labels = vec!["a".to_string(), "b".to_string()];
    let corr = OutcomeDistribution::new(labels.clone(), vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    assert_abs_diff_eq!(conditional_shannon(&corr, &["a"], &["b"]).unwrap(), 0.0, epsilon = 1e-15);
    let indep = OutcomeDistribution::new(labels, vec![2, 2], vec![0.25; 4]).unwrap();
    assert_abs_diff_eq!(conditional_shannon(&indep, &["a"], &["b"]).unwrap(), 2f64.ln(), epsilon = 1e-15);
    assert!(conditional_shannon(&indep, &["c"], &["b"]).is_err());
    assert_abs_diff_eq!(indep.conditional_entropy(&["b"], &["a"]).unwrap(), 2f64.ln(), epsilon = 1e-15);
}

#[test]
fn binary_entropy_values() {
    assert_abs_diff_eq!(binary_entropy(0.5).unwrap(), 2f64.ln(), epsilon = 1e-15);
    assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
    assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
    assert_abs_diff_eq!(binary_entropy(1.0 / 3.0).unwrap(), 0.636514168, epsilon = 1e-9);
    assert!(binary_entropy(1.1).is_err());
    assert!(binary_entropy(-1e-3).is_err());
}

#[test]
fn relative_entropy_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rho = random_state(3, &mut rng);
    assert_abs_diff_eq!(relative_entropy(&rho, &rho).unwrap().value, 0.0, epsilon = 1e-10);
    let plus = HermitianOperator::new(CMat::from_element(2, 2, c(0.5))).unwrap();
    let r = relative_entropy(&plus, &diag(&[0.5, 0.5])).unwrap();
    assert_abs_diff_eq!(r.value, 2f64.ln(), epsilon = 1e-12);
    let r = relative_entropy(&plus, &diag(&[1.0, 0.0])).unwrap();
    assert!(r.support_violation && r.value.is_infinite());
}

#[test]
fn relative_entropy_matches_measured_entropy_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let state = states::random_mixed(&[2, 2], 4, &mut rng).unwrap();
        let bases = vec![haar_unitary(2, &mut rng), haar_unitary(2, &mut rng)];
        let u = bases[0].kronecker(&bases[1]);
        let rho = state.matrix();
        let rotated = u.adjoint() * rho.matrix() * &u;
        let dephased = HermitianOperator::new({
            let m = &u * CMat::from_diagonal(&rotated.diagonal()) * u.adjoint();
            (&m + m.adjoint()) * c(0.5)
        })
        .unwrap();
        let re = relative_entropy(&rho, &dephased).unwrap().value;
        let p = MeasurementProtocol::product(&[0, 1], bases).unwrap();
        let h = wdeficit::measurement::evaluate_distribution(&state, &p).unwrap().entropy();
        assert_abs_diff_eq!(re, h - state.entropy().unwrap(), epsilon = 1e-9);
    }
}

#[test]
fn trace_distance_values() {
    let a = diag(&[1.0, 0.0]);
    let b = diag(&[0.0, 1.0]);
    assert_abs_diff_eq!(trace_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(trace_distance(&a, &b).unwrap(), 2.0, epsilon = 1e-14);
    assert!(trace_distance(&a, &diag(&[1.0, 0.0, 0.0])).is_err());
}

#[test]
fn partial_trace_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ra = random_state(2, &mut rng);
    let rb = random_state(3, &mut rng);
    let joint = HermitianOperator::new(ra.matrix().kronecker(rb.matrix())).unwrap();
    let back = partial_trace(&joint, &[2, 3], &[0]).unwrap();
    assert!((back.matrix() - ra.matrix()).norm() < 1e-14);
    let ghz = states::ghz(3).unwrap().matrix();
    let one = partial_trace(&ghz, &[2, 2, 2], &[1]).unwrap();
    assert!((one.matrix() - CMat::identity(2, 2) * c(0.5)).norm() < 1e-15);
    assert!(partial_trace(&ghz, &[2, 2], &[0]).is_err());
    assert!(partial_trace(&ghz, &[2, 2, 2], &[4]).is_err());
}

#[test]
fn unitary_from_generator_values() {
    assert!((unitary_from_generator(&CMat::zeros(3, 3)).unwrap() - CMat::identity(3, 3)).norm() < 1e-15);
    // exp(-i θ σ_y) is a real rotation by θ.
    let theta = std::f64::consts::FRAC_PI_4;
    let g = CMat::from_row_slice(2, 2, &[c(0.0), c(-theta), c(theta), c(0.0)]);
    let u = unitary_from_generator(&g).unwrap();
    let expected = CMat::from_row_slice(2, 2, &[c(theta.cos()), c(-theta.sin()), c(theta.sin()), c(theta.cos())]);
    assert!((u - expected).norm() < 1e-14);
    assert!(unitary_from_generator(&CMat::identity(2, 2)).is_err());
}

#[test]
fn structured_spectra_are_finite() {
    // Exactly structured rank-one projector that trips the plain QR iteration.
    let chain = states::bell_composite_chain(4).unwrap();
    let rho = chain.marginal(&[0, 1, 2, 3]).unwrap().matrix();
    assert!(rho.eigenvalues().iter().all(|v| v.is_finite()));
    assert!(von_neumann_entropy(&rho).unwrap().abs() < 1e-12);
    let (vals, vecs) = rho.eigh();
    let recon = &vecs * CMat::from_diagonal(&vals.map(c)) * vecs.adjoint();
    assert!((recon - rho.matrix()).norm() < 1e-12);
}

fn arb_seed() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn entropy_is_bounded(seed in arb_seed(), dim in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(dim, &mut rng);
        let s = von_neumann_entropy(&rho).unwrap();
        prop_assert!(s >= -1e-12 && s <= (dim as f64).ln() + 1e-12);
    }

    #[test]
    fn partial_traces_compose(seed in arb_seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(12, &mut rng);
        let dims = [2, 3, 2];
        let step = partial_trace(&partial_trace(&rho, &dims, &[0, 1]).unwrap(), &[2, 3], &[0]).unwrap();
        let direct = partial_trace(&rho, &dims, &[0]).unwrap();
        prop_assert!((step.matrix() - direct.matrix()).norm() < 1e-12);
        prop_assert!((direct.trace() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn trace_distance_is_a_metric(seed in arb_seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, cc) = (random_state(3, &mut rng), random_state(3, &mut rng), random_state(3, &mut rng));
        let ab = trace_distance(&a, &b).unwrap();
        prop_assert!((ab - trace_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= trace_distance(&a, &cc).unwrap() + trace_distance(&cc, &b).unwrap() + 1e-12);
        let diff = HermitianOperator::new(a.matrix() - b.matrix()).unwrap();
        let oracle: f64 = diff.eigenvalues().iter().map(|v| v.abs()).sum();
        prop_assert!((ab - oracle).abs() < 1e-10);
    }

    #[test]
    fn relative_entropy_is_nonnegative(seed in arb_seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_state(3, &mut rng), random_state(3, &mut rng));
        prop_assert!(relative_entropy(&a, &b).unwrap().value >= -1e-12);
    }

    #[test]
    fn generated_unitaries_are_unitary(seed in arb_seed(), dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = wdeficit::numerics::ginibre(dim, dim, &mut rng);
        let skew = (&g - g.adjoint()) * c(0.5);
        prop_assert!(unitarity_defect(&unitary_from_generator(&skew).unwrap()) < 1e-10);
    }

    #[test]
    fn conditioning_reduces_entropy(seed in arb_seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state: DensityState = states::random_mixed(&[2, 3], 2, &mut rng).unwrap();
        let p = MeasurementProtocol::product(&[0, 1], vec![haar_unitary(2, &mut rng), haar_unitary(3, &mut rng)]).unwrap();
        let d = wdeficit::measurement::evaluate_distribution(&state, &p).unwrap();
        let h_cond = d.conditional_entropy(&["y0"], &["y1"]).unwrap();
        let h = d.marginal(&["y0"]).unwrap().entropy();
        prop_assert!(h_cond <= h + 1e-12);
        prop_assert!(d.entropy() <= 6f64.ln() + 1e-12);
    }
}
