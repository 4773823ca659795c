use std::f64::consts::LN_2;

use c3po_core::ib::{
    compression_gap, entropy, ib_objective, probe_theorem1, probe_theorem2, two_bit_witness, verify_identities,
    verify_theorem1, verify_theorem2, CompressionWorld, DiscreteJoint,
};
use proptest::prelude::*;

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

fn pmf(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-3).then(|| w.iter().map(|x| x / s).collect())
    })
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
}

#[test]
fn witness_enumeration() {
    let w = two_bit_witness();
    for lambda in [0.5, 1.0, 2.0, 3.5] {
        let full = ib_objective(&w.joint, &w.x, &w.y, &w.z(), lambda).unwrap();
        assert!((full.i_xz - 2.0 * LN_2).abs() < 1e-12);
        assert!((full.i_yz - LN_2).abs() < 1e-12);
        assert!((full.l_ib - (2.0 - lambda) * LN_2).abs() < 1e-12);
        let kept = ib_objective(&w.joint, &w.x, &w.y, &w.z_ret, lambda).unwrap();
        assert!((kept.l_ib - (1.0 - lambda) * LN_2).abs() < 1e-12);
        let (gap, leak) = compression_gap(&w, lambda).unwrap();
        assert!((gap - LN_2).abs() < 1e-12);
        assert!(leak.abs() < 1e-15);
    }
    assert!(ib_objective(&w.joint, &w.x, &w.y, &w.z(), 0.0).is_err());
}

#[test]
fn constant_trim_has_zero_slack() {
    // X = (A, B) uniform, Z_ret = A, Z_trim constant.
    let mut table = [0.0; 8];
    for a in 0..2 {
        for b in 0..2 {
            table[(a * 2 + b) * 2 + a] = 0.25;
        }
    }
    let mut with_trim = vec![0.0; 8 * 3];
    for (i, p) in table.iter().enumerate() {
        with_trim[i * 3 + 1] = *p;
    }
    let w = CompressionWorld {
        joint: DiscreteJoint::new(names(&["a", "b", "z_ret", "z_trim"]), vec![2, 2, 2, 3], with_trim).unwrap(),
        x: vec![0, 1],
        y: vec![0],
        z_ret: vec![2],
        z_trim: vec![3],
    };
    let (gap, _) = compression_gap(&w, 2.0).unwrap();
    assert_eq!(gap, 0.0);
}

#[test]
fn fully_revealing_enhancement() {
    // Y = X mod 2; Z noisy; Z′ = (Z, Y) encoded as one variable.
    let (kx, kz) = (4usize, 2usize);
    let pz = [[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]];
    let px = [0.1, 0.2, 0.3, 0.4];
    let mut table = vec![0.0; kx * 2 * kz * (2 * kz)];
    for x in 0..kx {
        let y = x % 2;
        for z in 0..kz {
            let zp = z * 2 + y;
            table[((x * 2 + y) * kz + z) * 4 + zp] += px[x] * pz[x][z];
        }
    }
    let j = DiscreteJoint::new(names(&["x", "y", "z", "zp"]), vec![kx, 2, kz, 4], table).unwrap();
    let hy = j.entropy(&[1]).unwrap();
    let after = ib_objective(&j, &[0], &[1], &[3], 2.0).unwrap();
    assert!((after.i_yz - hy).abs() < 1e-12);
    let before = ib_objective(&j, &[0], &[1], &[2], 2.0).unwrap();
    assert!(before.l_ib > after.l_ib);
    assert!(j.conditional_entropy(&[3], &[1, 2]).unwrap().abs() < 1e-12);
}

#[test]
fn theorem_reports() {
    let t1 = verify_theorem1(1000, 2.0, 0).unwrap();
    assert_eq!((t1.violations, t1.construction_errors), (0, 0));
    assert!(t1.min_slack >= -1e-10);
    assert!(probe_theorem1(300, 2.0, 0).unwrap().precondition_failures > 0);

    let t2 = verify_theorem2(1000, 2.0, 0).unwrap();
    assert_eq!((t2.violations, t2.construction_errors), (0, 0));
    assert!(t2.min_slack > 0.0);
    assert!(verify_theorem2(10, 1.0, 0).is_err());
    assert!(probe_theorem2(300, 1.0, 0).unwrap().precondition_failures >= 1);

    let ids = verify_identities(1000, 0).unwrap();
    assert!(ids.chain_rule_max_error <= 1e-10);
    assert!(ids.data_processing_max_excess <= 1e-10);

    assert_eq!(verify_theorem1(50, 2.0, 7).unwrap(), verify_theorem1(50, 2.0, 7).unwrap());
    assert!(verify_theorem1(0, 2.0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conditional_entropy_two_ways(p in pmf(9)) {
        let j = DiscreteJoint::new(names(&["a", "b"]), vec![3, 3], p.clone()).unwrap();
        let mut direct = 0.0;
        for b in 0..3 {
            let pb: f64 = (0..3).map(|a| p[a * 3 + b]).sum();
            if pb > 0.0 {
                let cond: Vec<f64> = (0..3).map(|a| p[a * 3 + b] / pb).collect();
                direct += pb * entropy(&cond);
            }
        }
        prop_assert!((j.conditional_entropy(&[0], &[1]).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn independence_and_identity(pa in pmf(4), pb in pmf(3)) {
        let table: Vec<f64> = pa.iter().flat_map(|a| pb.iter().map(move |b| a * b)).collect();
        let j = DiscreteJoint::new(names(&["a", "b"]), vec![4, 3], table).unwrap();
        prop_assert!(j.mutual_information(&[0], &[1], &[]).unwrap().abs() < 1e-12);

        let mut diag = vec![0.0; 16];
        for (i, p) in pa.iter().enumerate() {
            diag[i * 4 + i] = *p;
        }
        let same = DiscreteJoint::new(names(&["x", "z"]), vec![4, 4], diag).unwrap();
        let hx = same.entropy(&[0]).unwrap();
        prop_assert!((same.mutual_information(&[0], &[1], &[]).unwrap() - hx).abs() < 1e-12);
    }

    #[test]
    fn independent_representation_scores_zero(py in pmf(2), pxy in prop::collection::vec(pmf(3), 2), pz in pmf(3)) {
        let mut table = Vec::with_capacity(18);
        for y in 0..2 {
            for x in 0..3 {
                table.extend(pz.iter().map(|z| py[y] * pxy[y][x] * z));
            }
        }
        let j = DiscreteJoint::new(names(&["y", "x", "z"]), vec![2, 3, 3], table).unwrap();
        let v = ib_objective(&j, &[1], &[0], &[2], 2.0).unwrap();
        prop_assert!(v.l_ib.abs() < 1e-12);
    }

    #[test]
    fn markov_chain_rule_and_data_processing(py in pmf(2), pxy in prop::collection::vec(pmf(4), 2), pzx in prop::collection::vec(pmf(4), 4)) {
        let j = DiscreteJoint::markov(&py, &pxy, &pzx).unwrap();
        let (y, x, z) = (j.var("y").unwrap(), j.var("x").unwrap(), j.var("z").unwrap());
        prop_assert!(j.mutual_information(&[y], &[z], &[]).unwrap() <= j.mutual_information(&[x], &[z], &[]).unwrap() + 1e-10);
        // Chain rule with Z split against X itself: I(Y; X, Z) = I(Y; X) + I(Y; Z | X).
        let lhs = j.mutual_information(&[y], &[x, z], &[]).unwrap();
        let rhs = j.mutual_information(&[y], &[x], &[]).unwrap() + j.mutual_information(&[y], &[z], &[x]).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
        prop_assert!(j.mutual_information(&[y], &[z], &[x]).unwrap() < 1e-10);
    }
}
