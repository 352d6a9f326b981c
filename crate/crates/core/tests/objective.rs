mod common;

use common::*;
use erasehash::dataset::{similarity_matrix, SimilarityMatrix};
use erasehash::hash::BitCodeMatrix;
use erasehash::objective::{esrl, loss_others, loss_self, loss_sq, loss_total, ObjectiveWeights};
use erasehash::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

struct Batch {
    u: Tensor,
    erased: Tensor,
    positive: Tensor,
    v: BitCodeMatrix,
    s: SimilarityMatrix,
}

fn batch(seed: u64) -> Batch {
    let mut rng = rng(seed);
    let (r, k, n) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..10));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let rows: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
    Batch {
        u: randn(&mut rng, &[r, k]),
        erased: randn(&mut rng, &[r, k]),
        positive: randn(&mut rng, &[r, k]),
        v: BitCodeMatrix::from_signs(n, k, &signs(&mut rng, n * k)).unwrap(),
        s: similarity_matrix(&rows, &labels).unwrap(),
    }
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let k = t.shape()[1];
    let data = order.iter().flat_map(|&i| t.data()[i * k..(i + 1) * k].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn weights(alpha: f64, beta: f64, normalized: bool) -> ObjectiveWeights {
    ObjectiveWeights { alpha, beta, normalized }
}

proptest! {
    #[test]
    fn terms_are_nonnegative_and_sum_to_total(seed in any::<u64>(), alpha in 0.0f64..5.0, beta in 0.0f64..5.0, normalized in any::<bool>()) {
        let b = batch(seed);
        let (t, _) = loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, weights(alpha, beta, normalized)).unwrap();
        prop_assert!(t.l_sq >= 0.0 && t.l_self >= 0.0 && t.l_others >= 0.0);
        let expect = t.l_sq + alpha * t.l_self + beta * t.l_others;
        prop_assert!((t.total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn pair_terms_vanish_exactly_at_equality(seed in any::<u64>()) {
        let b = batch(seed);
        prop_assert_eq!(loss_self(&b.u, &b.u).unwrap().0, 0.0);
        prop_assert_eq!(loss_others(&b.u, &b.u).unwrap().0, 0.0);
        prop_assert!(loss_self(&b.u, &b.erased).unwrap().0 > 0.0);
    }

    #[test]
    fn total_ignores_triplet_order(seed in any::<u64>(), normalized in any::<bool>()) {
        let b = batch(seed);
        let r = b.u.shape()[0];
        let mut order: Vec<usize> = (0..r).collect();
        order.shuffle(&mut rng(seed ^ 7));
        let s_perm = b.s.select_rows(&order).unwrap();
        let w = weights(0.7, 1.3, normalized);
        let (a, _) = loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, w).unwrap();
        let (p, _) = loss_total(
            &permute_rows(&b.u, &order),
            &permute_rows(&b.erased, &order),
            &permute_rows(&b.positive, &order),
            &b.v,
            &s_perm,
            w,
        ).unwrap();
        prop_assert!((a.total - p.total).abs() <= 1e-9 * a.total.max(1.0));
    }

    #[test]
    fn erased_gradient_ignores_database_and_similarity(seed in any::<u64>()) {
        let b = batch(seed);
        let n = b.v.n_codes();
        let k = b.u.shape()[1];
        let v2 = BitCodeMatrix::from_signs(n, k, &signs(&mut rng(seed ^ 3), n * k)).unwrap();
        let s2 = b.s.negated();
        let w = weights(1.5, 0.5, false);
        let (_, g1) = loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, w).unwrap();
        let (_, g2) = loss_total(&b.u, &b.erased, &b.positive, &v2, &s2, w).unwrap();
        prop_assert_eq!(g1.erased, g2.erased);
        prop_assert_eq!(g1.positive, g2.positive);
    }

    #[test]
    fn esrl_is_linear_in_alpha(seed in any::<u64>(), alpha in 0.0f64..3.0, beta in 0.0f64..3.0) {
        let b = batch(seed);
        let (ls, _, _) = loss_self(&b.u, &b.erased).unwrap();
        let doubled = esrl(&b.u, &b.erased, &b.positive, 2.0 * alpha, beta).unwrap();
        let single = esrl(&b.u, &b.erased, &b.positive, alpha, beta).unwrap();
        prop_assert!((doubled - single - alpha * ls).abs() <= 1e-9 * doubled.max(1.0));
    }

    #[test]
    fn normalized_mode_rescales_each_term(seed in any::<u64>()) {
        let b = batch(seed);
        let (r, k) = (b.u.shape()[0] as f64, b.u.shape()[1] as f64);
        let n = b.v.n_codes() as f64;
        let (raw, _) = loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, weights(1.0, 1.0, false)).unwrap();
        let (norm, _) = loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, weights(1.0, 1.0, true)).unwrap();
        prop_assert!((norm.l_sq - raw.l_sq / (r * n)).abs() <= 1e-12 * raw.l_sq.max(1.0));
        prop_assert!((norm.l_self - raw.l_self / (r * k)).abs() <= 1e-12 * raw.l_self.max(1.0));
        prop_assert!((norm.l_others - raw.l_others / (r * k)).abs() <= 1e-12 * raw.l_others.max(1.0));
    }
}

#[test]
fn sq_term_matches_direct_sum_and_differences() {
    for seed in 0..20 {
        let b = batch(seed);
        let (l, g) = loss_sq(&b.u, &b.v, &b.s).unwrap();
        let rows: Vec<Vec<i8>> = (0..b.v.n_codes()).map(|j| b.v.row_signs(j)).collect();
        let direct = loss_v_oracle(&rows, &b.u, &b.s);
        assert!((l - direct).abs() <= 1e-10 * direct.max(1.0));
        let numeric = numeric_grad(b.u.data(), |x| {
            let u = Tensor::new(b.u.shape().to_vec(), x.to_vec()).unwrap();
            loss_sq(&u, &b.v, &b.s).unwrap().0
        });
        assert!(rel_err(g.data(), &numeric) < 1e-6, "seed {seed}");
    }
}

#[test]
fn rejects_negative_weights_and_mismatched_shapes() {
    let b = batch(1);
    assert!(loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, weights(-1.0, 0.0, false)).is_err());
    assert!(loss_total(&b.u, &b.erased, &b.positive, &b.v, &b.s, weights(0.0, f64::NAN, false)).is_err());
    let wide = Tensor::zeros(&[b.u.shape()[0], b.u.shape()[1] + 1]);
    assert!(loss_self(&b.u, &wide).is_err());
}
