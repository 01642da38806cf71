use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::rng;

fn stats(mu: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats::new(mu.to_vec(), var.to_vec()).unwrap()
}

fn filled_bank(k: usize, n: usize, j: usize, d: usize, seed: u64) -> (VlpBank, FeatureSet) {
    let mut s = rng::stream(seed);
    let mut f = FeatureSet::new(k, n, j, d);
    for kk in 0..k {
        for nn in 0..n {
            for jj in 0..j {
                f.insert(kk, nn, jj, &rng::normal(&[d], 1.0, &mut s))
                    .unwrap();
            }
        }
    }
    let mut b = VlpBank::uninitialized(k, n, j, d);
    b.init(&f).unwrap();
    (b, f)
}

#[test]
fn init_copies_features_and_runs_once() {
    let (mut bank, f) = filled_bank(3, 2, 2, 4, 1);
    let slot = f.slots[(2 * 2 + 1) * 2].clone().unwrap();
    assert_eq!(bank.member(1, 0, 2).unwrap(), slot.as_slice());
    assert!(matches!(bank.init(&f), Err(Error::State(_))));
}

#[test]
fn init_requires_full_coverage() {
    let mut f = FeatureSet::new(2, 1, 1, 3);
    f.insert(0, 0, 0, &Tensor::vector(vec![1.0, 2.0, 3.0]))
        .unwrap();
    let mut bank = VlpBank::uninitialized(2, 1, 1, 3);
    assert!(matches!(bank.init(&f), Err(Error::Coverage(_))));
    assert!(!bank.is_initialized());
}

#[test]
fn uninitialized_bank_refuses_queries() {
    let bank = VlpBank::uninitialized(2, 1, 1, 3);
    assert!(matches!(bank.class_prototype(0), Err(Error::State(_))));
    assert!(matches!(
        bank_weighting(&Tensor::vector(vec![0.0; 3]), &bank),
        Err(Error::State(_))
    ));
}

#[test]
fn prototype_is_the_member_mean() {
    let (bank, f) = filled_bank(2, 3, 2, 5, 2);
    let p = bank.class_prototype(1).unwrap();
    for d in 0..5 {
        let direct: f64 = (0..6)
            .map(|i| f.slots[6 + i].as_ref().unwrap()[d])
            .sum::<f64>()
            / 6.0;
        assert_relative_eq!(p.data()[d], direct, epsilon = 1e-15);
    }
    let (single, f1) = filled_bank(1, 1, 1, 4, 3);
    assert_eq!(
        single.class_prototype(0).unwrap().data(),
        f1.slots[0].as_ref().unwrap().as_slice()
    );
}

#[test]
fn prototype_gradient_is_uniform() {
    let (bank, _) = filled_bank(2, 2, 3, 4, 4);
    let mut tape = Tape::new();
    let v = bank.register(&mut tape).unwrap();
    let p = class_prototype_on(&mut tape, v, 1).unwrap();
    let loss = tape.sum_all(p).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(v).unwrap();
    let per_class = 2 * 3 * 4;
    assert!(g.data()[..per_class].iter().all(|&x| x == 0.0));
    assert!(g.data()[per_class..]
        .iter()
        .all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn stats_examples() {
    let s = estimate_stats(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap()).unwrap();
    assert_eq!(s.mu, vec![1.0, 1.0]);
    assert_eq!(s.var, vec![1.0, 1.0]);
    let one = estimate_stats(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    assert_eq!(one.var, vec![VAR_FLOOR; 3]);
    let constant = estimate_stats(&Tensor::full(vec![5, 2], 0.3)).unwrap();
    assert_eq!(constant.var, vec![VAR_FLOOR; 2]);
    assert!(matches!(
        estimate_stats(&Tensor::zeros(vec![0, 3])),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn bound_examples() {
    let a = stats(&[0.3, -1.0], &[0.5, 2.0]);
    assert_eq!(emd_upper_bound(&a, &a).unwrap(), 0.0);
    assert_eq!(
        emd_upper_bound(&stats(&[0.0], &[1.0]), &stats(&[3.0], &[4.0])).unwrap(),
        10.0
    );
}

#[test]
fn bound_gradients_match_finite_differences() {
    let mut s = rng::stream(5);
    let samples = rng::normal(&[6, 4], 1.0, &mut s);
    let target = stats(&[0.1, 0.2, -0.3, 0.0], &[0.5, 1.5, 0.2, 1.0]);
    let err = grad_check(
        |t, x| {
            let a = estimate_stats_on(t, x)?;
            let b = StatsVars::constant(t, &target);
            emd_upper_bound_on(t, a, b)
        },
        &samples,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn random_diag(d: usize, s: &mut rng::Stream) -> (GaussianStats, DVector<f64>, DMatrix<f64>) {
    let mu: Vec<f64> = (0..d).map(|_| s.random_range(-2.0..2.0)).collect();
    let var: Vec<f64> = (0..d).map(|_| s.random_range(0.01..3.0)).collect();
    let cov = DMatrix::from_diagonal(&DVector::from_vec(var.clone()));
    (stats(&mu, &var), DVector::from_vec(mu), cov)
}

#[test]
fn bound_equals_exact_w2_on_diagonal_pairs() {
    let mut s = rng::stream(6);
    for d in [1, 3, 8, 16] {
        let (a, ma, ca) = random_diag(d, &mut s);
        let (b, mb, cb) = random_diag(d, &mut s);
        let w2 = exact_w2_gaussian(&ma, &ca, &mb, &cb).unwrap();
        assert_relative_eq!(emd_upper_bound(&a, &b).unwrap(), w2 * w2, epsilon = 1e-9);
        assert_relative_eq!(
            full_cov_upper_bound(&ma, &ca, &mb, &cb).unwrap(),
            w2 * w2,
            epsilon = 1e-9
        );
    }
}

#[test]
fn exact_w2_degenerate_cases() {
    let mu = DVector::from_vec(vec![1.0, 2.0]);
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    assert!(exact_w2_gaussian(&mu, &cov, &mu, &cov).unwrap() < 1e-7);
    let zero = DMatrix::zeros(2, 2);
    let other = DVector::from_vec(vec![4.0, 6.0]);
    assert_relative_eq!(
        exact_w2_gaussian(&mu, &zero, &other, &zero).unwrap(),
        5.0,
        epsilon = 1e-12
    );
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(matches!(
        exact_w2_gaussian(&mu, &bad, &mu, &cov),
        Err(Error::Domain(_))
    ));
}

#[test]
fn hungarian_brute_force_agreement() {
    let mut s = rng::stream(7);
    for n in 1..=6 {
        let cost: Vec<f64> = (0..n * n).map(|_| s.random_range(0.0..10.0)).collect();
        let assign = hungarian(&cost, n).unwrap();
        let got: f64 = assign
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum());
        });
        assert_relative_eq!(got, best, epsilon = 1e-12);
    }
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

#[test]
fn discrete_emd_examples() {
    let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(discrete_emd(&a, &a).unwrap(), 0.0);
    assert_eq!(discrete_emd(&a, &b).unwrap(), 0.0);
    let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(discrete_emd(&p, &q).unwrap(), 5.0);
    assert!(matches!(discrete_emd(&a, &p), Err(Error::Config(_))));
}

#[test]
fn mmd_examples() {
    let mut s = rng::stream(8);
    let a = rng::normal(&[10, 3], 1.0, &mut s);
    assert_eq!(mmd(&a, &a, 1.0, MmdEstimator::Biased).unwrap(), 0.0);
    // bandwidth wide against the cluster spread, narrow against the gap
    let far = a.map(|v| v + 1e5);
    assert_relative_eq!(
        mmd(&a, &far, 100.0, MmdEstimator::Unbiased).unwrap(),
        2.0,
        epsilon = 1e-3
    );
    let b = rng::normal(&[10, 3], 1.0, &mut s);
    assert!(mmd(&a, &b, 1e8, MmdEstimator::Unbiased).unwrap().abs() < 1e-12);
    let one = Tensor::zeros(vec![1, 3]);
    assert!(matches!(
        mmd(&one, &a, 1.0, MmdEstimator::Unbiased),
        Err(Error::Estimator(_))
    ));
}

#[test]
fn mmd_tape_matches_direct_sum_and_has_gradients() {
    let mut s = rng::stream(9);
    let a = rng::normal(&[4, 3], 1.0, &mut s);
    let b = rng::normal(&[6, 3], 1.0, &mut s).map(|v| v + 0.5);
    let h = median_bandwidth(&a, &b);
    for est in [MmdEstimator::Unbiased, MmdEstimator::Biased] {
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(b.clone());
        let m = mmd_on(&mut tape, av, bv, h, est).unwrap();
        assert_relative_eq!(
            tape.value(m).item(),
            mmd(&a, &b, h, est).unwrap(),
            epsilon = 1e-12
        );
    }
    let err = grad_check(
        |t, x| {
            let bv = t.constant(b.clone());
            mmd_on(t, x, bv, h, MmdEstimator::Unbiased)
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn js_examples() {
    let a = stats(&[0.0, 1.0], &[1.0, 0.5]);
    let b = stats(&[0.5, -1.0], &[2.0, 0.3]);
    assert!(js_divergence(&a, &a).unwrap().abs() < 1e-3);
    assert_eq!(
        js_divergence(&a, &b).unwrap().to_bits(),
        js_divergence(&b, &a).unwrap().to_bits()
    );
    let far = stats(&[1e3, -1e3], &[1.0, 0.5]);
    assert!((js_divergence(&a, &far).unwrap() - LN_2_TEST).abs() < 1e-2);
}

const LN_2_TEST: f64 = std::f64::consts::LN_2;

#[test]
fn weighting_examples() {
    let p = vec![
        Tensor::vector(vec![1.0, 0.0]),
        Tensor::vector(vec![-1.0, 0.0]),
    ];
    let w = weighting(&Tensor::vector(vec![0.0, 3.0]), &p).unwrap();
    assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
    assert_relative_eq!(w[1], 0.5, epsilon = 1e-15);
    let at = weighting(&p[0], &p).unwrap();
    assert!(at[0] > 1.0 - 1e-9);
    let mut s = rng::stream(10);
    for _ in 0..50 {
        let z = rng::normal(&[2], 3.0, &mut s);
        let w = weighting(&z, &p).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn calibrate_examples() {
    let z = Tensor::vector(vec![1.0, -2.0]);
    let t = Tensor::vector(vec![3.0, 5.0]);
    assert_eq!(calibrate(&z, &t, 0.0).unwrap(), z);
    assert_eq!(calibrate(&z, &t, 1.0).unwrap(), t);
    let c = calibrate(&z, &t, 0.1).unwrap();
    assert_relative_eq!(c.data()[0], 0.9 * 1.0 + 0.1 * 3.0, epsilon = 1e-15);
    assert_relative_eq!(c.data()[1], 0.9 * -2.0 + 0.1 * 5.0, epsilon = 1e-15);
    assert!(matches!(calibrate(&z, &t, 1.5), Err(Error::Config(_))));
}

#[test]
fn stats_csv_schema() {
    let row = ClassStatsRow {
        class: 0,
        vision: stats(&[3.0, 4.0], &[1.0, 3.0]),
        language: stats(&[0.0, 0.0], &[1.0, 1.0]),
        bound: 1.5,
    };
    let mut buf = Vec::new();
    write_stats_csv(&mut buf, &[row]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], STATS_CSV_HEADER);
    assert_eq!(lines[1], "0,5,2,0,1,1.5");
    assert!(!text.contains('\r'));
}
