mod common;

use common::MlpCase;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reverse_mode_matches_central_differences(seed in any::<u64>()) {
        let case = MlpCase::random(seed);
        let err = case.max_relative_error();
        prop_assert!(err < 1e-4, "relative error {err:e} for {case:?}");
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_the_input() {
    use flowprobe_core::{Graph, Tensor};
    let x = Tensor::row(vec![0.3, -0.7]);
    let mut g = Graph::new();
    let v = g.watch(x.clone());
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    let grad = g.grad_wrt(loss, &[v]).unwrap()[0].clone().unwrap();
    // d/dx sum(x^2) = 2x; a tape that dropped the factor 2 would give x.
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
        assert!((gv - xv).abs() > 0.1);
    }
}
