// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::grad;

#[test]
fn cross_entropy_gradient() {
    grad::cross_entropy_gradient();
}

#[test]
fn concept_alignment_gradient() {
    grad::concept_alignment_gradient();
}

#[test]
fn entropy_gradient_both_reductions() {
    grad::entropy_gradient_both_reductions();
}

#[test]
fn contrastive_gradient() {
    grad::contrastive_gradient();
}

#[test]
fn full_forward_parameter_gradients() {
    grad::full_forward_parameter_gradients();
}

#[test]
fn full_forward_similarity_gradient() {
    grad::full_forward_similarity_gradient();
}
