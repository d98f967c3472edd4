//! Gradient checking shared by the gradcheck and acceptance tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woundseg::models::enet::{BottleneckKind, RegularBottleneck};
use woundseg::models::topformer::AttentionBlock;
use woundseg::models::unet::DoubleConv;
use woundseg::models::unext::ShiftedBlock;
use woundseg::models::{Mode, ModelVariant, Network};
use woundseg::nn::{Builder, ParamStore};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const COORDS: usize = 10;
/// Whole networks at 64x64 are kinked nearly everywhere at `H`, so they use
/// a much smaller step.
pub const NETWORK_H: f64 = 1e-6;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Checks `sum(f() * probe)` with respect to random trainable scalars.
///
/// The loss is also sampled at `±h/2`. When the three second differences
/// of that stencil disagree, an activation kink lies inside `[-h, h]` and
/// the central difference is not a valid reference, so the coordinate is
/// redrawn. A kink big enough to move the central difference by the
/// tolerance always trips this test.
/// Returns the worst relative error over the checked coordinates.
pub fn check(name: &str, store: &ParamStore, seed: u64, h: f64, f: impl Fn() -> Tensor) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = f().dims().to_vec();
    let probe = randn(&mut rng, &out_shape);
    let loss = || f().mul(&probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    let analytic = f().mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
    let base = loss();

    let params: Vec<_> = store.trainable().collect();
    let sizes: Vec<usize> = params.iter().map(|p| p.var.as_tensor().elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < COORDS {
        if skipped >= 5 * COORDS {
            return Err(format!("{name}: too many coordinates straddle a kink"));
        }
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let p = params[which];
        let shape = p.var.as_tensor().dims().to_vec();
        let orig: Vec<f64> = p.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let eval_at = |delta: f64| {
            let mut v = orig.clone();
            v[k] += delta;
            p.var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss()
        };
        let (up, down) = (eval_at(h), eval_at(-h));
        let (half_up, half_down) = (eval_at(h / 2.0), eval_at(-h / 2.0));
        p.var.set(&Tensor::from_vec(orig.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let d2 = [
            down - 2.0 * half_down + base,
            half_down - 2.0 * base + half_up,
            base - 2.0 * half_up + up,
        ];
        let spread = d2.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - d2.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let numeric = (up - down) / (2.0 * h);
        let g = analytic.get(p.var.as_tensor()).expect("parameter has a gradient");
        let a: f64 = g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[k];
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        if spread / h > TOL * scale / 2.0 {
            skipped += 1;
            continue;
        }
        let rel = (a - numeric).abs() / scale;
        if rel > TOL {
            return Err(format!("{name}: {} [{k}] analytic {a} numeric {numeric} rel {rel:.2e}", p.name));
        }
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(worst)
}

pub fn conv_stage() -> Result<f64, String> {
    let mut b = Builder::new(1, DType::F64);
    let block = DoubleConv::new(&mut b, "stage", 4, 8).unwrap();
    let store = b.finish();
    let x = randn(&mut ChaCha8Rng::seed_from_u64(2), &[2, 4, 8, 8]);
    check("DoubleConv", &store, 3, H, || block.forward(&x, true).unwrap())
}

pub fn enet_bottleneck() -> Result<f64, String> {
    let mut b = Builder::new(4, DType::F64);
    let block = RegularBottleneck::new(&mut b, "bottleneck", 16, BottleneckKind::Asymmetric(5), false).unwrap();
    let store = b.finish();
    let x = randn(&mut ChaCha8Rng::seed_from_u64(5), &[2, 16, 8, 8]);
    check("RegularBottleneck", &store, 6, H, || block.forward(&x, true).unwrap())
}

pub fn tokenized_mlp() -> Result<f64, String> {
    let mut b = Builder::new(7, DType::F64);
    let block = ShiftedBlock::new(&mut b, "block", 10).unwrap();
    let store = b.finish();
    let x = randn(&mut ChaCha8Rng::seed_from_u64(8), &[2, 36, 10]);
    check("ShiftedBlock", &store, 9, H, || block.forward(&x, 6, 6).unwrap())
}

pub fn attention_block() -> Result<f64, String> {
    let mut b = Builder::new(10, DType::F64);
    let block = AttentionBlock::new(&mut b, "attn", 16, 2, 4, 2, 2).unwrap();
    let store = b.finish();
    let x = randn(&mut ChaCha8Rng::seed_from_u64(11), &[2, 16, 4, 4]);
    check("AttentionBlock", &store, 12, H, || block.forward(&x, true).unwrap())
}

pub fn whole_network(variant: ModelVariant, seed: u64) -> Result<f64, String> {
    let mut net = Network::build(variant, seed, DType::F64).unwrap();
    net.set_mode(Mode::Train);
    let x = randn(&mut ChaCha8Rng::seed_from_u64(seed + 1), &[2, 3, 64, 64]);
    check(variant.name(), net.params(), seed + 2, NETWORK_H, || net.forward(&x).unwrap())
}
