use editlab::analysis::{lemma_bound, theorem_bound};
use editlab::edit::{distribute_residual, q_matrix, update_prior_cov};
use editlab::linalg::{spectral_norm, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap().scale(scale))
}

/// `(R*, R^L, K_1, K_0, C_p source, l, L)` with a shared shape.
fn bound_instance() -> impl Strategy<Value = (Matrix, Matrix, Matrix, Matrix, Matrix, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6, 0usize..8, prop::sample::select(vec![1e-3, 1.0, 1e3]))
        .prop_flat_map(|(d, f, u, last, s)| {
            (
                matrix(d, u, s),
                matrix(d, u, s),
                matrix(f, u, 1.0),
                matrix(f, 2 * f, 1.0),
                matrix(f, f, 1.0),
                0..=last,
                Just(last),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bounds_hold_on_arbitrary_instances((r_star, r_last, k1, k0, p, l, last) in bound_instance()) {
        let c0 = k0.gram();
        let f = c0.rows();
        let q = q_matrix(&k1, &c0, &Matrix::zeros(f, f)).unwrap();
        let t = theorem_bound(&r_star, &r_last, l, last, &q).unwrap();
        prop_assert!(t.satisfied && t.is_consistent(), "{t:?}");

        let q_prime = q_matrix(&k1, &c0, &p.gram()).unwrap();
        let m = lemma_bound(&r_star, &r_last, l, last, &q_prime).unwrap();
        prop_assert!(m.satisfied && m.is_consistent(), "{m:?}");
    }

    #[test]
    fn identical_residuals_at_the_last_layer_give_zero(r in matrix(3, 2, 1.0), k1 in matrix(4, 2, 1.0), k0 in matrix(4, 8, 1.0)) {
        let q = q_matrix(&k1, &k0.gram(), &Matrix::zeros(4, 4)).unwrap();
        let t = theorem_bound(&r, &r, 5, 5, &q).unwrap();
        prop_assert_eq!((t.bound, t.actual_error), (0.0, 0.0));
    }

    #[test]
    fn prior_cache_is_order_free_and_grows(a in matrix(4, 3, 1.0), b in matrix(4, 2, 1.0)) {
        let zero = Matrix::zeros(4, 4);
        let ab = update_prior_cov(&update_prior_cov(&zero, &a).unwrap(), &b).unwrap();
        let ba = update_prior_cov(&update_prior_cov(&zero, &b).unwrap(), &a).unwrap();
        prop_assert!(ab.sub(&ba).unwrap().max_abs() <= 1e-12);
        let first = spectral_norm(&update_prior_cov(&zero, &a).unwrap()).unwrap();
        prop_assert!(spectral_norm(&ab).unwrap() >= first - 1e-9);
    }

    #[test]
    fn distribution_divides_by_remaining_layers(r in matrix(3, 2, 1.0), l in 0usize..6, extra in 0usize..4) {
        let last = l + extra;
        let share = distribute_residual(&r, l, last).unwrap();
        prop_assert!(share.scale((last - l + 1) as f64).sub(&r).unwrap().max_abs() <= 1e-12);
        prop_assert!(distribute_residual(&r, last + 1, last).is_err());
    }
}
