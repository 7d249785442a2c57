use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdeficit::bounds::*;
use wdeficit::exact::{deficit_exact, deficit_one_way_exact, gqd_exact};
use wdeficit::measurement::MeasurementProtocol;
use wdeficit::mps::{self, fixed_point};
use wdeficit::numerics::binary_entropy;
use wdeficit::optimize::{grid_oracle_qubit_bases, OptimizerConfig};
use wdeficit::states::{self, Boundary, DensityState};
use wdeficit::{CMat, CVec, Error, C64};

fn cfg() -> OptimizerConfig {
    OptimizerConfig::default()
}

fn ln2() -> f64 {
    2f64.ln()
}

fn hadamard() -> CMat {
    let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    CMat::from_row_slice(2, 2, &[h, h, h, -h])
}

/// Measured entropy of qubit bases from the dense matrix, independent of the
/// measurement engine.
fn dense_measured_entropy(rho: CMat) -> impl Fn(&[CMat]) -> f64 + Sync {
    move |bases: &[CMat]| {
        let u = bases.iter().skip(1).fold(bases[0].clone(), |acc, b| acc.kronecker(b));
        let p = (u.adjoint() * &rho * &u).diagonal();
        p.iter().map(|z| z.re).filter(|&x| x > 1e-300).map(|x| -x * x.ln()).sum()
    }
}

#[test]
fn segment_layout() {
    assert_eq!(segments(7, 3).unwrap(), vec![(0, 3), (3, 3), (6, 1)]);
    assert_eq!(segments(4, 2).unwrap(), vec![(0, 2), (2, 2)]);
    assert_eq!(segments(2, 5).unwrap(), vec![(0, 2)]);
    assert!(segments(3, 0).is_err());
}

#[test]
fn aklt_thermodynamic_limit() {
    let aklt = states::aklt_tensors();
    let h = binary_entropy(1.0 / 3.0).unwrap();
    let r = tdl_bounds(&aklt, 1, &cfg()).unwrap();
    assert_abs_diff_eq!(r.lower.value, h, epsilon = 1e-6);
    assert_abs_diff_eq!(r.upper.value, 3f64.ln(), epsilon = 1e-8);
    let ansatz = upper_bound_ansatz_tdl(&aklt, &[CMat::identity(3, 3)], DEFAULT_ANSATZ_DEPTH).unwrap();
    assert_abs_diff_eq!(ansatz, h, epsilon = 1e-9);
    let one_way = one_way_bounds_tdl(&aklt, 1, &cfg()).unwrap();
    assert_abs_diff_eq!(one_way.lower.value, h, epsilon = 1e-6);
}

#[test]
fn cluster_thermodynamic_limit() {
    let cluster = states::cluster_tensors();
    assert!(tdl_bounds(&cluster, 1, &cfg()).unwrap().lower.value.abs() < 1e-8);
    let two = tdl_bounds(&cluster, 2, &cfg()).unwrap();
    assert_abs_diff_eq!(two.lower.value, ln2() / 2.0, epsilon = 1e-6);
    let ansatz = upper_bound_ansatz_tdl(&cluster, &[CMat::identity(2, 2), hadamard()], DEFAULT_ANSATZ_DEPTH).unwrap();
    assert_abs_diff_eq!(ansatz, ln2() / 2.0, epsilon = 1e-9);
    assert_abs_diff_eq!(upper_bound_ulk(&cluster, None, 2, 1, &cfg()).unwrap().value, ln2() / 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(one_way_bounds_tdl(&cluster, 2, &cfg()).unwrap().lower.value, ln2() / 2.0, epsilon = 1e-6);
}

#[test]
fn family_endpoints() {
    let minus = states::mps_family_tensors(-1.0).unwrap();
    let r = tdl_bounds(&minus, 2, &cfg()).unwrap();
    assert_abs_diff_eq!(r.lower.value, ln2() / 2.0, epsilon = 1e-6);
    let plus = states::mps_family_tensors(1.0).unwrap();
    assert!(upper_bound_ansatz_tdl(&plus, &[hadamard()], 8).unwrap().abs() < 1e-10);
    assert!(matches!(tdl_bounds(&states::mps_family_tensors(0.5).unwrap(), 0, &cfg()), Err(Error::Argument(_))));
    assert!(matches!(states::mps_family_tensors(0.0), Err(Error::NotNormal(_))));
    assert!(matches!(tdl_bounds(&states::ghz_tensors(), 1, &cfg()), Err(Error::NotNormal(_))));
}

#[test]
fn product_states_are_free() {
    let v = CVec::from_vec(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)]);
    let t = states::product_tensors(&v);
    for l in 1..=2 {
        let r = tdl_bounds(&t, l, &cfg()).unwrap();
        assert!(r.lower.value.abs() < 1e-9 && r.upper.value.abs() < 1e-9);
        assert!(upper_bound_ulk(&t, None, l, 1, &cfg()).unwrap().value.abs() < 1e-9);
    }
    let dense = states::product_state(&[v.clone(), v.clone(), v]).unwrap();
    let r = dense_bounds(&dense, 1, &cfg(), None).unwrap();
    assert!(r.lower.value.abs() < 1e-9 && r.upper.value.abs() < 1e-9);
    let g = gqd_bounds(&dense, 2, &cfg(), None).unwrap();
    assert!(g.lower.value.abs() < 1e-9 && g.upper.value.abs() < 1e-9);
}

#[test]
fn ghz4_segments_against_brute_force() {
    let ghz = states::ghz(4).unwrap();
    let r = dense_bounds(&ghz, 2, &cfg(), None).unwrap();
    // Each two-qubit segment is measured on its own marginal.
    let mut oracle = 0.0;
    for seg in [[0, 1], [2, 3]] {
        let rho = ghz.reduced(&seg).unwrap().into_matrix();
        oracle += grid_oracle_qubit_bases(dense_measured_entropy(rho), 2, 16).unwrap().value;
    }
    assert_abs_diff_eq!(r.upper.value, oracle / 4.0, epsilon = 1e-7);
    assert_abs_diff_eq!(r.upper.value, ln2() / 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(r.lower.value, ln2() / 4.0, epsilon = 1e-7);
    assert_eq!(r.upper.terms.len(), 2);
    assert!(r.lower.terms[1].protocol.povm.is_some());
}

#[test]
fn ul_alone_matches_the_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut rng).unwrap();
    let u = upper_bound_ul(&state, 2, &cfg()).unwrap();
    let r = dense_bounds(&state, 2, &cfg(), None).unwrap();
    assert_abs_diff_eq!(u.value, r.upper.value, epsilon = 1e-9);
    assert!(r.lower.value <= r.upper.value + 1e-8);
}

#[test]
fn ansatz_upper_bounds() {
    let ghz = states::ghz(3).unwrap();
    let comp = MeasurementProtocol::computational(&[2, 2, 2]);
    assert_abs_diff_eq!(upper_bound_ansatz(&ghz, &comp).unwrap(), ln2() / 3.0, epsilon = 1e-12);
    let partial = MeasurementProtocol::computational(&[2, 2]);
    assert!(upper_bound_ansatz(&ghz, &partial).is_err());
    let tree = deficit_one_way_exact(&ghz, &cfg()).unwrap().protocol;
    assert!(upper_bound_ansatz(&ghz, &tree).is_err());
}

#[test]
fn finite_chain_routes_agree() {
    let aklt = states::aklt_tensors();
    let dense = mps::to_dense(&aklt, 6, 1 << 12).unwrap();
    let via_chain = upper_bound_ul_chain(&aklt, 6, 2, &cfg()).unwrap();
    let via_dense = upper_bound_ul(&dense, 2, &cfg()).unwrap();
    assert_abs_diff_eq!(via_chain.value, via_dense.value, epsilon = 1e-7);
    let r = chain_bounds(&aklt, 6, 2, &cfg()).unwrap();
    assert!(r.lower.value <= r.upper.value + 1e-8);

    let open = states::cluster_tensors().with_boundary(Boundary::Open {
        left: CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]),
        right: CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)]),
    });
    let dense = mps::to_dense(&open, 5, 1 << 12).unwrap();
    assert_abs_diff_eq!(
        upper_bound_ul_chain(&open, 5, 2, &cfg()).unwrap().value,
        upper_bound_ul(&dense, 2, &cfg()).unwrap().value,
        epsilon = 1e-7
    );
}

#[test]
fn conditioned_upper_bounds() {
    let t = states::mps_family_tensors(0.5).unwrap();
    let u2 = tdl_bounds(&t, 2, &cfg()).unwrap().upper.value;
    let u20 = upper_bound_ulk(&t, None, 2, 0, &cfg()).unwrap().value;
    assert_abs_diff_eq!(u20, u2, epsilon = 1e-8);
    assert!(upper_bound_ulk(&t, None, 2, 1, &cfg()).unwrap().value <= u2 + 1e-8);

    let cluster = states::cluster_tensors();
    let finite = upper_bound_ulk(&cluster, Some(8), 2, 1, &cfg()).unwrap().value;
    assert_abs_diff_eq!(finite, 2.0 / 8.0 * ln2() + ln2() / 2.0, epsilon = 1e-7);
    assert_abs_diff_eq!(
        upper_bound_ulk(&cluster, Some(8), 2, 0, &cfg()).unwrap().value,
        upper_bound_ul_chain(&cluster, 8, 2, &cfg()).unwrap().value,
        epsilon = 1e-8
    );
    assert!(upper_bound_ulk(&cluster, Some(7), 2, 1, &cfg()).is_err());
}

#[test]
fn refinement_is_monotone() {
    for t in [states::aklt_tensors(), states::cluster_tensors(), states::mps_family_tensors(-0.5).unwrap()] {
        let r: Vec<BoundReport> = [1, 2, 4].iter().map(|&l| tdl_bounds(&t, l, &cfg()).unwrap()).collect();
        for w in r.windows(2) {
            assert!(w[0].lower.value <= w[1].lower.value + 1e-7);
            assert!(w[1].upper.value <= w[0].upper.value + 1e-7);
        }
    }
}

#[test]
fn global_discord_brackets() {
    let ghz = states::ghz(4).unwrap();
    let exact = gqd_exact(&ghz, &cfg()).unwrap().value / 4.0;
    let r = gqd_bounds(&ghz, 2, &cfg(), None).unwrap();
    assert!(r.lower.value <= exact + 1e-7 && exact <= r.upper.value + 1e-7);
    let t = gqd_bounds_tdl(&states::aklt_tensors(), 1, &cfg()).unwrap();
    assert!(t.lower.value.is_finite() && t.lower.value <= t.upper.value + 1e-8);
}

#[test]
fn coarse_graining_reaches_half_the_entanglement() {
    let t = states::mps_family_tensors(0.5).unwrap();
    let c = coarse_bounds(&t, 6, 1, &cfg()).unwrap();
    let fp = fixed_point(&t).unwrap();
    assert_abs_diff_eq!(2.0 * c.half_entanglement, fp.entanglement_entropy().unwrap(), epsilon = 1e-10);
    let target = binary_entropy(0.5 - 0.5f64.sqrt() / 1.5).unwrap();
    assert!(c.lower.value <= c.upper.value + 1e-8);
    assert!((c.lower.value - target).abs() < 0.05 && (c.upper.value - target).abs() < 0.05);
    assert!(matches!(coarse_bounds(&t, 1, 1, &cfg()), Err(Error::Argument(_))));
}

/// `H(y₂|y₁)` of the computational effective basis lifted to physical block
/// vectors and evaluated on the original tensor's `2m`-site density.
fn lifted_smallg_oracle(g: f64, m: usize) -> f64 {
    let t = states::mps_family_tensors(g).unwrap();
    let blocked = mps::block_tensor(&t, m, 1 << 12).unwrap();
    let db = 2;
    let q = blocked.tensor.a.len();
    let b = CMat::from_fn(db * db, q, |r, s| blocked.tensor.a[s][(r / db, r % db)]);
    let k = &b * b.adjoint();
    let (vals, vecs) = wdeficit::numerics::HermitianOperator::new((&k + k.adjoint()) * C64::new(0.5, 0.0)).unwrap().eigh();
    let w_inv = &vecs * CMat::from_diagonal(&vals.map(|v| C64::new(1.0 / v.sqrt(), 0.0))) * vecs.adjoint();
    let v = w_inv * &b;
    let rho = mps::reduced_density_tdl(&t, 2 * m, 1 << 12).unwrap().into_matrix();
    let mut joint = vec![0.0; 16];
    for a in 0..4 {
        for c in 0..4 {
            let u = CVec::from_fn(q * q, |i, _| v[(a, i / q)] * v[(c, i % q)]);
            joint[a * 4 + c] = (u.adjoint() * &rho * &u)[(0, 0)].re;
        }
    }
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
    let first: Vec<f64> = (0..4).map(|a| joint[a * 4..a * 4 + 4].iter().sum()).collect();
    h(&joint) - h(&first)
}

#[test]
fn small_g_ansatz() {
    for (g, m) in [(0.01, 4), (-0.02, 2), (0.3, 3)] {
        assert_abs_diff_eq!(coarse_ansatz_upper_smallg(g, m).unwrap(), lifted_smallg_oracle(g, m), epsilon = 1e-9);
    }
    let a = coarse_ansatz_upper_smallg(0.01, 4).unwrap();
    assert!(coarse_ansatz_upper_smallg(0.001, 4).unwrap() < a);
    for m in [2, 4, 8] {
        for x in [0.002, 0.005, 0.01, 0.02, 0.04] {
            let v = coarse_ansatz_upper_smallg(x / m as f64, m).unwrap();
            assert!(v / (x * (1.0 / x).ln()) < 3.0, "m {m} m|g| {x}: {v}");
        }
    }
    assert!(coarse_ansatz_upper_smallg(0.5, 2).unwrap() >= 0.0);
    assert!(matches!(coarse_ansatz_upper_smallg(0.0, 4), Err(Error::NotNormal(_))));
}

#[test]
fn continuity_checks() {
    let ghz = states::ghz(3).unwrap();
    let same = continuity_check(&ghz, &ghz, 2, &cfg()).unwrap();
    assert!(same.nu < 1e-12 && same.upper_diff < 1e-9 && same.lower_diff < 1e-9);
    let dep = ghz.depolarize(0.05).unwrap();
    let r = continuity_check(&ghz, &dep, 1, &cfg()).unwrap();
    assert!(r.holds(), "{r:?}");
    let far = states::basis_state(&[2, 2, 2], &[1, 0, 1]).unwrap();
    assert!(matches!(continuity_check(&ghz, &far, 1, &cfg()), Err(Error::Argument(_))));
}

#[test]
fn basis_classes() {
    assert_eq!(BasisClass::of(&CMat::identity(2, 2)), BasisClass::Computational);
    let swap = CMat::from_row_slice(2, 2, &[C64::new(0.0, 0.0), C64::new(0.0, 1.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
    assert_eq!(BasisClass::of(&swap), BasisClass::Computational);
    assert_eq!(BasisClass::of(&hadamard()), BasisClass::Unbiased);
    assert_eq!(BasisClass::of(&wdeficit::optimize::qubit_basis(0.4, 0.1)), BasisClass::Other);
    let p = MeasurementProtocol::product(&[0, 1], vec![CMat::identity(2, 2), hadamard()]).unwrap();
    assert_eq!(BasisClass::of_protocol(&p), BasisClass::Other);
}

#[test]
fn sweep_endpoints() {
    let pts = family_sweep(&[-1.0, 0.0, 1.0], 2, 1, &cfg()).unwrap();
    assert_abs_diff_eq!(pts[0].lower, ln2() / 2.0, epsilon = 1e-6);
    assert_abs_diff_eq!(pts[0].upper, ln2() / 2.0, epsilon = 1e-6);
    assert_eq!((pts[1].lower, pts[1].upper), (0.0, 0.0));
    assert!(pts[2].upper.abs() < 1e-8);
    assert!(pts.iter().all(|p| p.converged && p.lower <= p.upper + 1e-8));
}

fn seeded(seed: u64, pure: bool) -> DensityState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if pure {
        states::random_pure(&[2, 2, 2], &mut rng).unwrap()
    } else {
        states::random_mixed(&[2, 2, 2], 2, &mut rng).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn sandwich_holds(seed in any::<u64>(), pure in any::<bool>(), l in 1usize..=3) {
        let state = seeded(seed, pure);
        let c = OptimizerConfig::default().with_restarts(8);
        let d = deficit_exact(&state, &cfg()).unwrap();
        let r = dense_bounds(&state, l, &c, Some(&d.protocol)).unwrap();
        prop_assert!(r.lower.value <= d.value / 3.0 + 1e-7);
        prop_assert!(d.value / 3.0 <= r.upper.value + 1e-7);
    }

    #[test]
    fn one_way_sandwich(seed in any::<u64>()) {
        let state = seeded(seed, true);
        let d = deficit_one_way_exact(&state, &cfg()).unwrap().value / 3.0;
        let r = one_way_bounds(&state, 1, &OptimizerConfig::default().with_restarts(8), None).unwrap();
        prop_assert!(r.lower.value <= d + 1e-6);
        prop_assert!(d <= r.upper.value + 1e-6);
    }
}
