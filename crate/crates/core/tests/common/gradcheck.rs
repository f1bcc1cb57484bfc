//! Central-difference gradient check.

use prunekit::engine::{Executor, LossKind, Targets};
use prunekit::netir::NetworkIR;
use rand::RngExt;

use super::{random_images, rng};

const H: f64 = 1e-6;

fn param(e: &mut Executor, layer: usize, which: usize, i: usize) -> &mut f64 {
    if which == 0 {
        &mut e.params[layer].weight[i]
    } else {
        &mut e.params[layer].bias[i]
    }
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every parameter of `net`.
pub fn grad_check(net: &NetworkIR, loss: LossKind, seed: u64) -> f64 {
    let mut r = rng(seed);
    let images = random_images(&mut r, 3, net.input_shape);
    let out = net.output_shape().unwrap().len();
    let targets = match loss {
        LossKind::Mse => Targets::Regression {
            values: (0..3 * out).map(|_| r.random_range(-1.0..1.0)).collect(),
            dim: out,
        },
        LossKind::SoftmaxCrossEntropy => Targets::Classes((0..3).map(|_| r.random_range(0..out)).collect()),
    };
    let mut exec = Executor::new(net).unwrap();
    let (_, grads) = exec.loss_and_grad(&images, &targets, loss).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..grads.len() {
        for which in 0..2 {
            let len = if which == 0 { grads[l].weight.len() } else { grads[l].bias.len() };
            for i in 0..len {
                let orig = *param(&mut exec, l, which, i);
                *param(&mut exec, l, which, i) = orig + H;
                let up = exec.loss(&images, &targets, loss).unwrap();
                *param(&mut exec, l, which, i) = orig - H;
                let down = exec.loss(&images, &targets, loss).unwrap();
                *param(&mut exec, l, which, i) = orig;
                let numeric = (up - down) / (2.0 * H);
                let analytic = if which == 0 { grads[l].weight[i] } else { grads[l].bias[i] };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

