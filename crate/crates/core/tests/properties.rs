use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use shadagrad::history::{GradientHistory, Perturbation};
use shadagrad::linalg::{
    gram_factorize, loewner_leq, psd_inv_dense, psd_sqrt_dense, sherman_morrison_apply, DenseSym, GradMatrix,
};
use shadagrad::optimizers::{run, weighted_metric, OptimizerConfig, Schedule};
use shadagrad::problems::make_quartic_sigmoid;
use shadagrad::sampling::{rng_from_seed, shuffle_partition};

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, &data[..rows * cols])
}

fn sym(m: DMatrix<f64>) -> DenseSym {
    let s = (&m + m.transpose()) * 0.5;
    DenseSym::from_matrix(s).unwrap()
}

/// `M^{-1/2} v` straight from nalgebra.
fn oracle_inv_sqrt(m: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.powf(-0.5)));
    &e.eigenvectors * d * e.eigenvectors.transpose() * DVector::from_column_slice(v)
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn entries(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, max)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn gram_factorize_round_trip(d in 1usize..24, k in 1usize..12, c in 0.01..2.0f64, data in entries(24 * 12)) {
        let a = matrix(d, k, &data);
        let cols: Vec<Vec<f64>> = a.column_iter().map(|c| c.iter().copied().collect()).collect();
        let gm = GradMatrix::from_columns(d, &cols).unwrap();
        let lr = gram_factorize(&gm, c).unwrap();
        let want = &a * a.transpose() + DMatrix::identity(d, d) * c;
        let err = (lr.densify().as_matrix() - &want).norm();
        prop_assert!(err <= 1e-9 * (1.0 + want.norm()), "{err}");
        let u = lr.basis();
        let ortho = (u.transpose() * u - DMatrix::identity(lr.rank(), lr.rank())).norm();
        prop_assert!(ortho <= 1e-10, "{ortho}");
    }

    #[test]
    fn loewner_sqrt_and_inverse(d in 1usize..10, data in entries(400), eps in 0.05..1.0f64) {
        let b = matrix(d, d, &data);
        let c = matrix(d, d, &data[100..]);
        let m = sym(&b * b.transpose() + DMatrix::identity(d, d) * eps);
        let n = sym(m.as_matrix() + &c * c.transpose());
        prop_assert!(loewner_leq(&psd_sqrt_dense(&m).unwrap(), &psd_sqrt_dense(&n).unwrap(), 1e-8).unwrap());
        prop_assert!(loewner_leq(&psd_inv_dense(&n).unwrap(), &psd_inv_dense(&m).unwrap(), 1e-8).unwrap());
    }

    #[test]
    fn conjugation_preserves_order(d in 1usize..10, p in 1usize..6, data in entries(400)) {
        let b = matrix(d, d, &data);
        let c = matrix(d, d, &data[100..]);
        let a = matrix(d, p, &data[200..]);
        let m = sym(&b * b.transpose());
        let n = sym(m.as_matrix() + &c * c.transpose());
        prop_assert!(loewner_leq(&m.conjugate(&a).unwrap(), &n.conjugate(&a).unwrap(), 1e-8).unwrap());
    }

    #[test]
    fn sherman_morrison_inverts(d in 1usize..10, data in entries(200)) {
        let b = matrix(d, d, &data);
        let m = &b * b.transpose() + DMatrix::identity(d, d);
        let minv = sym(m.clone().try_inverse().unwrap());
        let u: Vec<f64> = data[100..100 + d].to_vec();
        let v: Vec<f64> = data[150..150 + d].iter().map(|x| 0.5 * x).collect();
        let denom = 1.0 + DVector::from_column_slice(&v).dot(&(minv.as_matrix() * DVector::from_column_slice(&u)));
        prop_assume!(denom.abs() > 1e-3);
        let r = sherman_morrison_apply(&minv, &u, &v).unwrap();
        let upd = m + DVector::from_column_slice(&u) * DVector::from_column_slice(&v).transpose();
        let err = (r * upd - DMatrix::identity(d, d)).norm();
        prop_assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn history_preconditioner_matches_oracle(
        d in 1usize..20,
        m in 1usize..4,
        epochs in 1usize..5,
        gamma in 0.5..20.0f64,
        data in entries(20 * 16 + 20),
    ) {
        let mut h = GradientHistory::new(d, m, gamma, Perturbation::Adaptive).unwrap().with_cap(64);
        let mut dense = DMatrix::zeros(d, d);
        let mut delta = 0.0;
        for k in 0..epochs * m {
            let g: Vec<f64> = data[k * d..(k + 1) * d].to_vec();
            h.push(&g).unwrap();
            let gv = DVector::from_column_slice(&g);
            dense += &gv * gv.transpose();
            delta += gv.norm_squared();
            if (k + 1) % m == 0 {
                h.seal_epoch().unwrap();
            }
        }
        let v = &data[data.len() - d..];
        let got = DVector::from_vec(h.precondition(v).unwrap());
        let want = oracle_inv_sqrt(&(dense + DMatrix::identity(d, d) * (delta / gamma)), v);
        prop_assert!((&got - &want).norm() <= 1e-8 * want.norm().max(1e-300), "{got} vs {want}");
    }

    #[test]
    fn snapshot_round_trip(d in 1usize..8, m in 1usize..4, data in entries(8 * 12), pushes in 0usize..12) {
        let mut h = GradientHistory::new(d, m, 2.0, Perturbation::Adaptive).unwrap().with_cap(12);
        for k in 0..pushes {
            h.push(&data[k * d..(k + 1) * d]).unwrap();
            if (k + 1) % m == 0 {
                h.seal_epoch().unwrap();
            }
        }
        let text = serde_json::to_string(&h.snapshot()).unwrap();
        let back = GradientHistory::from_snapshot(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back.snapshot(), h.snapshot());
        if pushes > 0 {
            let v = &data[..d];
            prop_assert_eq!(back.precondition(v).unwrap(), h.precondition(v).unwrap());
        }
    }

    #[test]
    fn partitions_cover(k in 1usize..12, m in 1usize..6, seed in any::<u64>()) {
        let p = shuffle_partition(k * m, m, &mut rng_from_seed(seed)).unwrap();
        prop_assert!(p.is_disjoint_cover());
        prop_assert_eq!(p.batches.len(), m);
    }

    #[test]
    fn weighted_metric_is_a_weighted_mean(values in prop::collection::vec(0.0..10.0f64, 1..50)) {
        let w = weighted_metric(&values);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn shadagrad_steps_are_bounded(seed in any::<u64>(), eta in 0.01..2.0f64) {
        let p = make_quartic_sigmoid(16, 5, seed % 7);
        let cfg = OptimizerConfig::shadagrad(4, Schedule::constant(eta), 5.0).with_gate(None).with_history_cap(64);
        let rec = run(&p, &cfg, 8, seed).unwrap();
        for e in &rec.trace.epochs {
            for w in e.iterates.windows(2) {
                let step: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(step <= eta * (1.0 + 1e-9));
            }
        }
        prop_assert_eq!(rec.rows.last().unwrap().grad_evals, 8 * 4);
    }
}
