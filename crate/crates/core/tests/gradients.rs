mod support {
    pub mod gradcheck;
}

use support::gradcheck::{check_objective, Objective};

fn assert_objective(obj: Objective) {
    let report = check_objective(obj, 1..=3);
    assert!(report.passed(), "{}: {report:?}", obj.name());
}

#[test]
fn rec_loss_gradients_match_finite_differences() {
    assert_objective(Objective::Rec);
}

#[test]
fn view_contrast_gradients_match_finite_differences() {
    assert_objective(Objective::Con);
}

#[test]
fn augmented_contrast_gradients_match_finite_differences() {
    assert_objective(Objective::Cl2);
}

#[test]
fn regularizer_gradients_match_finite_differences() {
    assert_objective(Objective::Reg);
}
