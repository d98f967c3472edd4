//! Analytic gradients of miniature blocks and whole networks against
//! central differences.

mod gradcheck_support;

use gradcheck_support::*;
use woundseg::models::ModelVariant;

fn report(r: Result<f64, String>) {
    let worst = r.unwrap_or_else(|e| panic!("{e}"));
    eprintln!("worst relative error {worst:.2e}");
    assert!(worst <= TOL);
}

#[test]
fn conv_stage_gradients() {
    report(conv_stage());
}

#[test]
fn enet_bottleneck_gradients() {
    report(enet_bottleneck());
}

#[test]
fn tokenized_mlp_gradients() {
    report(tokenized_mlp());
}

#[test]
fn attention_block_gradients() {
    report(attention_block());
}

#[test]
fn enet_network_gradients() {
    report(whole_network(ModelVariant::ENet, 20));
}

#[test]
fn unext_network_gradients() {
    report(whole_network(ModelVariant::UNeXtS, 30));
}

#[test]
fn topformer_network_gradients() {
    report(whole_network(ModelVariant::TopFormerT, 40));
}
