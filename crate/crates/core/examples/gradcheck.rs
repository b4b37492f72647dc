//! Finite-difference checks of every autodiff primitive and of each
//! model's teacher-forced log-likelihood.

use probnmn::gradsuite::model_gradchecks;

fn main() {
    for e in autodiff::suite::run_primitive_suite(20, 0, 1e-5, 1e-4).unwrap() {
        println!(
            "{:<14} {} points, worst rel err {:.2e}, failures {}, kinks {}",
            e.name, e.points, e.worst.max_rel_err, e.failures, e.non_comparable
        );
    }
    for m in model_gradchecks(0, 1e-5, 1e-4, 2000).unwrap() {
        println!(
            "{:<14} {} coordinates, worst rel err {:.2e}, {:?}",
            m.name, m.report.checked, m.report.max_rel_err, m.report.status
        );
    }
}
