//! Analytic gradients against central finite differences.

mod common;

use common::gradients;

#[test]
fn gated_fusion_gradients() {
    gradients::gated_fusion_gradients();
}

#[test]
fn classification_loss_gradients_through_max_pool() {
    gradients::classification_loss_gradients_through_max_pool();
}

#[test]
fn triplet_loss_gradients() {
    gradients::triplet_loss_gradients();
}

#[test]
fn localization_loss_gradients() {
    gradients::localization_loss_gradients();
}
