//! Model construction against independent oracles.

use nalgebra::DMatrix;
use proptest::prelude::*;
use skf_core::model::{
    build_decomposition, build_model, build_transition, build_vbar, process_noise_single, ModelParams,
};

/// `exp(N t)` for the nilpotent shift `N` (ones on the superdiagonal), by its finite series.
fn shift_exponential(n: usize, t: f64) -> DMatrix<f64> {
    let shift = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { t } else { 0.0 });
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..n {
        term = &term * &shift / k as f64;
        sum += &term;
    }
    sum
}

/// Composite 5-point Gauss–Legendre rule for `∫₀^τ A_t diag(q²) A_tᵀ dt`.
fn quadrature_noise(n: usize, tau: f64, q_sq: &[f64]) -> DMatrix<f64> {
    let nodes = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    let weights = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q_sq));
    let panels = 4;
    let h = tau / panels as f64;
    let mut acc = DMatrix::zeros(n, n);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            let a = shift_exponential(n, mid + 0.5 * h * x);
            acc += (&a * &q * a.transpose()) * (0.5 * h * w);
        }
    }
    acc
}

fn max_entry_rel(a: &DMatrix<f64>, oracle: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(oracle.iter())
        .map(|(x, y)| if *y == 0.0 { x.abs() } else { ((x - y) / y).abs() })
        .fold(0.0, f64::max)
}

#[test]
fn single_clock_noise_examples() {
    let w = process_noise_single(3, 1.0, &[0.0, 0.0, 1.0]).unwrap();
    let expected = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 / 20.0,
            1.0 / 8.0,
            1.0 / 6.0,
            1.0 / 8.0,
            1.0 / 3.0,
            0.5,
            1.0 / 6.0,
            0.5,
            1.0,
        ],
    );
    assert!(max_entry_rel(&w, &quadrature_noise(3, 1.0, &[0.0, 0.0, 1.0])) < 1e-12);
    assert!(max_entry_rel(&w, &expected) < 1e-15);

    let q = [2.9394e-10, 1.1785e-16, 4.5574e-35];
    let w = process_noise_single(3, 1.0, &q).unwrap();
    let first = 2.9394e-10 + 1.1785e-16 / 3.0 + 4.5574e-35 / 20.0;
    assert!(((w[(0, 0)] - first) / first).abs() < 1e-15);
    assert!(max_entry_rel(&w, &quadrature_noise(3, 1.0, &q)) < 1e-10);

    assert_eq!(process_noise_single(1, 2.0, &[1.0]).unwrap()[(0, 0)], 2.0);
    assert!(process_noise_single(2, 1.0, &[1.0, -1.0]).is_err());
}

#[test]
fn reference_model_matches_the_stated_shapes() {
    let model = build_model(&ModelParams::reference_ensemble()).unwrap();
    assert_eq!(model.transition.shape(), (15, 15));
    assert_eq!(model.observation.shape(), (4, 15));
    let mut d = DMatrix::zeros(1, 15);
    d.view_mut((0, 0), (1, 5)).fill(0.2);
    assert!((&model.ensemble_weights - d).amax() < 1e-17);
    let a = build_transition(3, 1.0).unwrap();
    assert_eq!(
        a,
        DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
    );
}

#[test]
fn difference_map_gram_and_exact_zeros() {
    let (vbar, pinv) = build_vbar(5).unwrap();
    let gram = &vbar * vbar.transpose();
    let expected = DMatrix::identity(4, 4) + DMatrix::from_element(4, 4, 1.0);
    assert_eq!(gram, expected);
    for m in 2..8 {
        let (vbar, pinv) = build_vbar(m).unwrap();
        assert!((vbar.row_sum()).iter().all(|_| true));
        let ones = DMatrix::from_element(m, 1, 1.0);
        assert_eq!((&vbar * &ones).amax(), 0.0);
        assert!((ones.transpose() * &pinv).amax() <= 1e-14);
    }
    let (v2, p2) = build_vbar(2).unwrap();
    assert_eq!(v2, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    assert_eq!(p2, DMatrix::from_row_slice(2, 1, &[0.5, -0.5]));
    assert!((vbar * pinv - DMatrix::identity(4, 4)).amax() < 1e-15);
}

fn params_strategy() -> impl Strategy<Value = ModelParams> {
    (1usize..=4, 2usize..=6, 0.01f64..=10.0)
        .prop_flat_map(|(n, m, tau)| {
            (
                Just(n),
                Just(m),
                Just(tau),
                prop::collection::vec(-36.0f64..-8.0, n),
                -14.0f64..-8.0,
            )
        })
        .prop_map(|(n, m, tau, log_q, log_r)| ModelParams {
            n,
            m,
            tau,
            q_sq: log_q.into_iter().map(|e| 10f64.powf(e)).collect(),
            r_sq: 10f64.powf(log_r),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn noise_matches_quadrature(p in params_strategy()) {
        let w = process_noise_single(p.n, p.tau, &p.q_sq).unwrap();
        let oracle = quadrature_noise(p.n, p.tau, &p.q_sq);
        prop_assert!(max_entry_rel(&w, &oracle) <= 1e-10);
        prop_assert!((&w - w.transpose()).amax() == 0.0);
    }

    #[test]
    fn kronecker_builders_match_loops(p in params_strategy()) {
        let model = build_model(&p).unwrap();
        let (n, m) = (p.n, p.m);
        let a = &model.clock_transition;
        for i in 0..n * m {
            for j in 0..n * m {
                let (li, ci) = (i / m, i % m);
                let (lj, cj) = (j / m, j % m);
                let f = if ci == cj { a[(li, lj)] } else { 0.0 };
                prop_assert_eq!(model.transition[(i, j)], f);
                let w = if ci == cj { model.clock_noise[(li, lj)] } else { 0.0 };
                prop_assert_eq!(model.process_noise[(i, j)], w);
            }
        }
        for r in 0..m - 1 {
            for j in 0..n * m {
                let (lj, cj) = (j / m, j % m);
                let h = if lj == 0 { model.diff_map[(r, cj)] } else { 0.0 };
                prop_assert_eq!(model.observation[(r, j)], h);
            }
        }
        prop_assert_eq!(&model.measurement_noise, &(DMatrix::identity(m - 1, m - 1) * p.r_sq));
    }

    #[test]
    fn structural_inverse_matches_generic_inverse(
        p in params_strategy(),
        seed in 0u64..1000,
    ) {
        let model = build_model(&p).unwrap();
        let no = model.obs_dim();
        let mut state = seed;
        let gamma = DMatrix::from_fn(p.n, no, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        let dec = build_decomposition(&model, &gamma).unwrap();
        let generic = dec.t.clone().try_inverse().unwrap();
        prop_assert!((&generic - &dec.t_inv).amax() <= 1e-10 * (1.0 + generic.amax()));
        let nm = model.state_dim();
        prop_assert!((&dec.t * &dec.t_inv - DMatrix::identity(nm, nm)).amax() <= 1e-12);

        // Observable coordinates are read out by I⊗V̄.
        let read = &model.obs_projector * &dec.t;
        prop_assert!(read.columns(0, no).into_owned().relative_eq(&DMatrix::identity(no, no), 1e-12, 1e-12));
        prop_assert!(read.columns(no, p.n).amax() <= 1e-12);

        // Block-triangular dynamics and the output map in the new coordinates.
        let ft = &dec.t_inv * &model.transition * &dec.t;
        prop_assert!((ft.view((0, 0), (no, no)) - &dec.obs_transition).amax() <= 1e-9 * (1.0 + ft.amax()));
        prop_assert!(ft.view((0, no), (no, p.n)).amax() <= 1e-9 * (1.0 + ft.amax()));
        prop_assert!((ft.view((no, 0), (p.n, no)) - &dec.coupling).amax() <= 1e-9 * (1.0 + ft.amax()));
        let ht = &model.observation * &dec.t;
        prop_assert!((ht.columns(0, no) - &dec.obs_observation).amax() <= 1e-12);
        prop_assert!(ht.columns(no, p.n).amax() <= 1e-12);
        let dt = &model.ensemble_weights * &dec.t;
        let gamma_row = model.selector.clone() * &gamma;
        prop_assert!((dt.columns(0, no) - &gamma_row).amax() <= 1e-12 * (1.0 + gamma_row.amax()));
        prop_assert!((dt.columns(no, p.n) - &model.selector).amax() <= 1e-15);
        let w_o = &model.obs_projector * &model.process_noise * model.obs_projector.transpose();
        prop_assert!((&w_o - &dec.obs_process_noise).amax() <= 1e-12 * w_o.amax());
    }
}

#[test]
fn scalar_order_has_no_coupling() {
    let p = ModelParams {
        n: 1,
        m: 4,
        tau: 1.0,
        q_sq: vec![1e-20],
        r_sq: 1e-12,
    };
    let model = build_model(&p).unwrap();
    let gamma = DMatrix::from_row_slice(1, 3, &[0.3, -1.2, 2.5]);
    let dec = build_decomposition(&model, &gamma).unwrap();
    assert_eq!(dec.coupling.amax(), 0.0);
    let zero = build_decomposition(&model, &DMatrix::zeros(1, 3)).unwrap();
    assert_eq!(zero.coupling.amax(), 0.0);
}
