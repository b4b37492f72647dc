use autodiff::suite::run_primitive_suite;
use autodiff::{ParamSet, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences() {
    let entries = run_primitive_suite(100, 7, 1e-5, 1e-4).unwrap();
    for e in &entries {
        assert!(
            e.passed(),
            "{} failed at {} of {} points (worst rel err {:e})",
            e.name,
            e.failures,
            e.points,
            e.worst.max_rel_err
        );
    }
    assert!(entries.len() >= 20);
}

fn forward_backward(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ps = ParamSet::new();
    let id = ps.add("x", Tensor::new(vec![2, x.len() / 2], x.to_vec()).unwrap());
    let mut t = Tape::new();
    let v = t.param(&ps, id).unwrap();
    let h = t.tanh(v).unwrap();
    let s = t.log_softmax(h).unwrap();
    let out = t.sum_all(s).unwrap();
    let fwd = t.value(s).data().to_vec();
    t.backward(out, &mut ps).unwrap();
    (fwd, ps.grad(id).unwrap().data().to_vec())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], v).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(v in prop::collection::vec(-3.0f64..3.0, 8)) {
        let a = forward_backward(&v);
        let b = forward_backward(&v);
        prop_assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
