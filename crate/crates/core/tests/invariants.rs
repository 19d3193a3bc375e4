//! Structural invariants on randomized models, and the margin cap of the
//! contrastive objective.

mod common;

use common::invariants;

#[test]
fn subject_is_shared_after_every_layer() {
    invariants::subject_is_shared_after_every_layer();
}

#[test]
fn concept_weights_are_normalized() {
    invariants::concept_weights_are_normalized();
}

#[test]
fn injection_leaves_class_and_subject_rows() {
    invariants::injection_leaves_class_and_subject_rows();
}

#[test]
fn inference_is_deterministic() {
    invariants::inference_is_deterministic();
}

#[test]
fn mask_shrinks_as_threshold_rises() {
    invariants::mask_shrinks_as_threshold_rises();
}

#[test]
fn margin_caps_positive_gradient() {
    invariants::margin_caps_positive_gradient();
}
