use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdeficit::measurement::{
    conditional_state, evaluate_distribution, fine_grain, sample_outcomes, work_of_protocol, EntropyObjective,
    EntropyTerm, LocalProjective, MeasurementProtocol, ProjectiveBasis, RankOnePovm,
};
use wdeficit::numerics::{haar_unitary, shannon_entropy, von_neumann_entropy, HermitianOperator, ProbabilityVector};
use wdeficit::optimize::finite_difference_gradient;
use wdeficit::states::{self, DensityState};
use wdeficit::{CMat, CVec, C64};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kron(vs: &[CVec]) -> CVec {
    vs.iter().skip(1).fold(vs[0].clone(), |acc, v| acc.kronecker(v))
}

fn expectation(rho: &CMat, v: &CVec) -> f64 {
    (v.adjoint() * rho * v)[(0, 0)].re
}

#[test]
fn computational_basis_on_ghz() {
    let ghz = states::ghz(3).unwrap();
    let p = MeasurementProtocol::computational(&[2, 2, 2]);
    let d = evaluate_distribution(&ghz, &p).unwrap();
    assert_abs_diff_eq!(d.probabilities()[0], 0.5, epsilon = 1e-14);
    assert_abs_diff_eq!(d.probabilities()[7], 0.5, epsilon = 1e-14);
    assert_abs_diff_eq!(d.entropy(), 2f64.ln(), epsilon = 1e-14);
    assert_eq!(d.labels(), &["y0", "y1", "y2"]);
}

#[test]
fn product_distribution_matches_direct_overlaps() {
    let mut r = rng(1);
    let state = states::random_mixed(&[2, 3, 2], 3, &mut r).unwrap();
    let rho = state.matrix().into_matrix();
    let bases: Vec<CMat> = [2, 3, 2].iter().map(|&d| haar_unitary(d, &mut r)).collect();
    let p = MeasurementProtocol::product(&[0, 1, 2], bases.clone()).unwrap();
    let d = evaluate_distribution(&state, &p).unwrap();
    let mut k = 0;
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..2 {
                let v = kron(&[bases[0].column(a).into(), bases[1].column(b).into(), bases[2].column(c).into()]);
                assert_abs_diff_eq!(d.probabilities()[k], expectation(&rho, &v), epsilon = 1e-12);
                k += 1;
            }
        }
    }
}

#[test]
fn party_order_follows_the_protocol() {
    let mut r = rng(2);
    let state = states::random_pure(&[2, 2, 2], &mut r).unwrap();
    let rho = state.matrix().into_matrix();
    let bases: Vec<CMat> = (0..2).map(|_| haar_unitary(2, &mut r)).collect();
    // Measure party 2 first, then party 0; party 1 is left alone.
    let p = MeasurementProtocol::product(&[2, 0], bases.clone()).unwrap();
    let d = evaluate_distribution(&state, &p).unwrap();
    assert_eq!(d.labels(), &["y2", "y0"]);
    for a in 0..2 {
        for b in 0..2 {
            let mut direct = 0.0;
            for m in 0..2 {
                let e = CVec::from_fn(2, |i, _| if i == m { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
                direct += expectation(&rho, &kron(&[bases[1].column(b).into(), e, bases[0].column(a).into()]));
            }
            assert_abs_diff_eq!(d.probabilities()[a * 2 + b], direct, epsilon = 1e-12);
        }
    }
}

#[test]
fn povm_distribution_matches_direct_trace() {
    let mut r = rng(3);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut r).unwrap();
    let rho = state.matrix().into_matrix();
    // Full-space support on parties 0,1 (dim 4) and a 6-outcome POVM.
    let support = haar_unitary(4, &mut r).columns(0, 4).into_owned();
    let v = haar_unitary(6, &mut r);
    let basis = haar_unitary(2, &mut r);
    let p = MeasurementProtocol::povm_product(&[0, 1], support.clone(), v.clone(), &[2], vec![basis.clone()]).unwrap();
    let d = evaluate_distribution(&state, &p).unwrap();
    let povm = RankOnePovm::from_unitary(v, 4).unwrap();
    assert!(povm.completeness_defect() < 1e-12);
    for z in 0..6 {
        let m = &support * povm.vector(z);
        for y in 0..2 {
            let vec = kron(&[m.clone(), basis.column(y).into()]);
            assert_abs_diff_eq!(d.probabilities()[z * 2 + y], expectation(&rho, &vec), epsilon = 1e-12);
        }
    }
}

#[test]
fn tree_distribution_matches_direct_overlaps() {
    let mut r = rng(4);
    let state = states::random_pure(&[2, 2, 3], &mut r).unwrap();
    let rho = state.matrix().into_matrix();
    let l0 = vec![haar_unitary(2, &mut r)];
    let l1: Vec<CMat> = (0..2).map(|_| haar_unitary(2, &mut r)).collect();
    let l2: Vec<CMat> = (0..4).map(|_| haar_unitary(3, &mut r)).collect();
    let p = MeasurementProtocol::one_way_tree(&[0, 1, 2], vec![l0.clone(), l1.clone(), l2.clone()], None).unwrap();
    let d = evaluate_distribution(&state, &p).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..3 {
                let v = kron(&[l0[0].column(a).into(), l1[a].column(b).into(), l2[a * 2 + b].column(c).into()]);
                assert_abs_diff_eq!(d.probabilities()[(a * 2 + b) * 3 + c], expectation(&rho, &v), epsilon = 1e-12);
            }
        }
    }
}

fn assert_gradient(obj: &EntropyObjective, point: &[CMat]) {
    let (_, analytic) = obj.value_and_gradient(point);
    let fd = finite_difference_gradient(obj, point, 1e-6);
    let norm: f64 = analytic.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
    let tol = (1e-5f64).max(1e-3 * norm);
    for (a, f) in analytic.iter().zip(&fd) {
        assert!((a - f).norm() < tol, "gradient mismatch {} vs tolerance {tol}", (a - f).norm());
        assert!((a + a.adjoint()).norm() < 1e-12);
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut r).unwrap();
    let bases: Vec<CMat> = (0..3).map(|_| haar_unitary(2, &mut r)).collect();
    let joint = |n| vec![EntropyTerm { legs: (0..n).collect(), coeff: 1.0 }];

    let p = MeasurementProtocol::product(&[0, 1, 2], bases.clone()).unwrap();
    let obj = EntropyObjective::for_protocol(&state, &p, joint(3), 0.0).unwrap();
    assert_gradient(&obj, &p.unitaries);

    let tree = MeasurementProtocol::one_way_tree(
        &[0, 1, 2],
        vec![vec![haar_unitary(2, &mut r)], (0..2).map(|_| haar_unitary(2, &mut r)).collect(), (0..4).map(|_| haar_unitary(2, &mut r)).collect()],
        None,
    )
    .unwrap();
    let obj = EntropyObjective::for_protocol(&state, &tree, joint(3), 0.0).unwrap();
    assert_gradient(&obj, &tree.unitaries);

    let support = haar_unitary(2, &mut r);
    let povm = MeasurementProtocol::povm_product(&[0], support, haar_unitary(3, &mut r), &[1, 2], vec![haar_unitary(2, &mut r), haar_unitary(2, &mut r)]).unwrap();
    // Conditional entropy H(Y1 Y2 | Z) with a mixed-sign objective.
    let terms = vec![EntropyTerm { legs: vec![0, 1, 2], coeff: 1.0 }, EntropyTerm { legs: vec![0], coeff: -1.0 }];
    let obj = EntropyObjective::for_protocol(&state, &povm, terms, 0.25).unwrap();
    assert_gradient(&obj, &povm.unitaries);

    let rep = MeasurementProtocol::replicated(&[0, 1, 2, 3], vec![haar_unitary(2, &mut r), haar_unitary(2, &mut r)]).unwrap();
    let state4 = states::random_pure(&[2, 2, 2, 2], &mut r).unwrap();
    let terms = vec![EntropyTerm { legs: vec![0, 1, 2, 3], coeff: 1.0 }, EntropyTerm { legs: vec![0, 1], coeff: -1.0 }];
    let obj = EntropyObjective::for_protocol(&state4, &rep, terms, 0.0).unwrap();
    assert_gradient(&obj, &rep.unitaries);
}

#[test]
fn protocol_text_round_trip() {
    let mut r = rng(6);
    let support = haar_unitary(4, &mut r).columns(0, 3).into_owned();
    let p = MeasurementProtocol::one_way_tree(
        &[2],
        vec![(0..9).map(|_| haar_unitary(2, &mut r)).collect()],
        Some((vec![0, 1], support, haar_unitary(9, &mut r))),
    )
    .unwrap();
    let q = MeasurementProtocol::from_text(&p.to_text()).unwrap();
    assert_eq!(p, q);
    assert!(MeasurementProtocol::from_text("kind nonsense").is_err());
    assert!(MeasurementProtocol::from_text("kind product\nstage 0 blocks 3").is_err());
}

#[test]
fn invalid_protocols_are_rejected() {
    let bad = CMat::from_element(2, 2, C64::new(1.0, 0.0));
    assert!(MeasurementProtocol::product(&[0], vec![bad]).is_err());
    assert!(MeasurementProtocol::product(&[0, 0], vec![CMat::identity(2, 2), CMat::identity(2, 2)]).is_err());
    let ghz = states::ghz(3).unwrap();
    let p = MeasurementProtocol::product(&[5], vec![CMat::identity(2, 2)]).unwrap();
    assert!(evaluate_distribution(&ghz, &p).is_err());
    let p = MeasurementProtocol::product(&[0], vec![CMat::identity(3, 3)]).unwrap();
    assert!(evaluate_distribution(&ghz, &p).is_err());
    assert!(ProjectiveBasis::new(CMat::zeros(2, 2)).is_err());
}

#[test]
fn conditional_states_decompose_the_marginal() {
    let mut r = rng(7);
    let state = states::random_mixed(&[2, 2, 2], 3, &mut r).unwrap();
    let basis = ProjectiveBasis::new(haar_unitary(4, &mut r)).unwrap();
    let mut sum = CMat::zeros(2, 2);
    let mut total = 0.0;
    for e in basis.projectors() {
        let c = conditional_state(&state, &e, &[0, 2], &[1]).unwrap();
        total += c.probability;
        if let Some(s) = c.state {
            assert_abs_diff_eq!(s.trace(), 1.0, epsilon = 1e-12);
            sum += s.into_matrix() * C64::new(c.probability, 0.0);
        }
    }
    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    let marginal = state.reduced(&[1]).unwrap().into_matrix();
    assert!((sum - marginal).norm() < 1e-12);

    // Bell pair: outcome |0> on the first qubit leaves |0>.
    let bell = DensityState::pure(
        vec![2, 2],
        CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]),
    )
    .unwrap();
    let e0 = HermitianOperator::from_pure(&CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]));
    let c = conditional_state(&bell, &e0, &[0], &[1]).unwrap();
    assert_abs_diff_eq!(c.probability, 0.5, epsilon = 1e-14);
    assert_abs_diff_eq!(c.state.unwrap().matrix()[(0, 0)].re, 1.0, epsilon = 1e-14);

    let zero = HermitianOperator::new(CMat::zeros(2, 2)).unwrap();
    let c = conditional_state(&bell, &zero, &[0], &[1]).unwrap();
    assert!(c.state.is_none());
}

#[test]
fn work_of_trivial_measurement_is_local_purity() {
    let mut r = rng(8);
    let state = states::random_mixed(&[2, 3], 2, &mut r).unwrap();
    let w = LocalProjective::trivial(&[2, 3]).work(&state).unwrap();
    let locals: f64 = state.local_entropies().unwrap().iter().sum();
    assert_abs_diff_eq!(w, 6f64.ln() - locals, epsilon = 1e-12);
}

#[test]
fn rank_one_work_matches_protocol_work() {
    let mut r = rng(9);
    let state = states::random_mixed(&[2, 2, 2], 2, &mut r).unwrap();
    let bases: Vec<CMat> = (0..3).map(|_| haar_unitary(2, &mut r)).collect();
    let groups = vec![vec![vec![0], vec![1]]; 3];
    let lp = LocalProjective::from_groups(&bases, &groups).unwrap();
    let p = MeasurementProtocol::product(&[0, 1, 2], bases).unwrap();
    assert_abs_diff_eq!(lp.work(&state).unwrap(), work_of_protocol(&state, &p).unwrap(), epsilon = 1e-12);
}

#[test]
fn fine_graining_never_lowers_work() {
    let mut r = rng(10);
    for _ in 0..20 {
        let state = states::random_mixed(&[3, 4], 3, &mut r).unwrap();
        let bases = vec![haar_unitary(3, &mut r), haar_unitary(4, &mut r)];
        let groups = vec![vec![vec![0, 2], vec![1]], vec![vec![0, 1, 2], vec![3]]];
        let coarse = LocalProjective::from_groups(&bases, &groups).unwrap();
        let fine = fine_grain(&coarse, &state).unwrap();
        let wc = coarse.work(&state).unwrap();
        let wf = work_of_protocol(&state, &fine).unwrap();
        assert!(wf >= wc - 1e-12, "fine-grained work {wf} below coarse {wc}");
        // Both are at most the globally extractable work.
        assert!(wf <= 12f64.ln() - state.entropy().unwrap() + 1e-12);
    }
}

#[test]
fn sampling_is_seeded_and_consistent() {
    let mut r = rng(11);
    let state = states::random_pure(&[2, 2], &mut r).unwrap();
    let p = MeasurementProtocol::product(&[0, 1], vec![haar_unitary(2, &mut r), haar_unitary(2, &mut r)]).unwrap();
    let a = sample_outcomes(&state, &p, 200_000, 42).unwrap();
    let b = sample_outcomes(&state, &p, 200_000, 42).unwrap();
    assert_eq!(a, b);
    let d = evaluate_distribution(&state, &p).unwrap();
    for (c, q) in a.counts.iter().zip(d.probabilities()) {
        assert!((*c as f64 / 200_000.0 - q).abs() < 5e-3);
    }
}

#[test]
fn povm_outcome_entropy_is_bounded_below_by_state_entropy() {
    // H(Z) ≥ S(ρ) for any rank-one POVM.
    let mut r = rng(12);
    for _ in 0..20 {
        let state = states::random_mixed(&[2, 2], 3, &mut r).unwrap();
        let support = CMat::identity(4, 4);
        let p = MeasurementProtocol::povm_product(&[0, 1], support, haar_unitary(7, &mut r), &[], vec![]).unwrap();
        let d = evaluate_distribution(&state, &p).unwrap();
        let h = shannon_entropy(&ProbabilityVector::new(d.probabilities().to_vec()).unwrap());
        assert!(h >= von_neumann_entropy(&state.matrix()).unwrap() - 1e-12);
    }
}

fn sorted_spectrum(op: &HermitianOperator) -> Vec<f64> {
    let mut v: Vec<f64> = op.eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn aklt_conditional_spectrum_after_bond_measurement() {
    let t = states::aklt_tensors();
    let fp = wdeficit::mps::fixed_point(&t).unwrap();
    let window = wdeficit::mps::build_window(&t, &fp, 1, 1 << 10).unwrap().as_state().unwrap();
    let mut r = rng(13);
    for _ in 0..10 {
        let v = wdeficit::numerics::random_unit_vector(2, &mut r);
        let c = conditional_state(&window, &HermitianOperator::from_pure(&v), &[0], &[1]).unwrap();
        let spec = sorted_spectrum(&c.state.unwrap());
        for (a, b) in spec.iter().zip([2.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }
}

#[test]
fn cluster_conditional_spectrum_after_bond_measurement() {
    let t = states::cluster_tensors();
    let fp = wdeficit::mps::fixed_point(&t).unwrap();
    let window = wdeficit::mps::build_window(&t, &fp, 2, 1 << 10).unwrap().as_state().unwrap();
    let mut r = rng(14);
    for _ in 0..10 {
        let v = wdeficit::numerics::random_unit_vector(2, &mut r);
        let c = conditional_state(&window, &HermitianOperator::from_pure(&v), &[0], &[1, 2]).unwrap();
        let spec = sorted_spectrum(&c.state.unwrap());
        for (a, b) in spec.iter().zip([0.5, 0.5, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }
}

#[test]
fn ghz_samples_are_all_equal_bits() {
    let ghz = states::ghz(3).unwrap();
    let tally = sample_outcomes(&ghz, &MeasurementProtocol::computational(&[2, 2, 2]), 10_000, 7).unwrap();
    let nonzero: Vec<usize> = (0..8).filter(|&i| tally.counts[i] > 0).collect();
    assert_eq!(nonzero, vec![0, 7]);
}

#[test]
fn trivial_measurement_fine_grains_to_marginal_eigenbases() {
    let mut r = rng(15);
    let state = states::random_mixed(&[2, 2], 3, &mut r).unwrap();
    let fine = fine_grain(&LocalProjective::trivial(&[2, 2]), &state).unwrap();
    for n in 0..2 {
        let rho = state.reduced(&[n]).unwrap();
        let u = &fine.unitaries[fine.stages[n].blocks[0]];
        let rotated = u.adjoint() * rho.matrix() * u;
        assert!(rotated[(0, 1)].norm() < 1e-10);
    }
}
