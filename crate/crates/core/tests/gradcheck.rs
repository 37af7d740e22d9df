mod common;

use common::gradcheck;

#[test]
fn dice_loss_gradient() {
    gradcheck::dice_loss_gradient();
}

#[test]
fn consistency_mse_gradient() {
    gradcheck::consistency_mse_gradient();
}

#[test]
fn adversarial_and_domain_gradients() {
    gradcheck::adversarial_and_domain_gradients();
}

#[test]
fn backbone_end_to_end_gradients() {
    gradcheck::backbone_end_to_end_gradients();
}

#[test]
fn backbone_probability_path_alone() {
    gradcheck::backbone_probability_path_alone();
}

#[test]
fn discriminator_gradients() {
    gradcheck::discriminator_gradients();
}
