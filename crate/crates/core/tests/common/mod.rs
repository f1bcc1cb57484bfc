//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use prunekit::engine::{ChannelMask, Executor};
use prunekit::lassopath::Design;
use prunekit::netir::{LayerKind, NetworkBuilder, NetworkIR, Shape3};
use prunekit::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod corpus;
pub mod gradcheck;
pub mod masking;
pub mod pipeline;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_images(r: &mut ChaCha8Rng, n: usize, s: Shape3) -> Tensor {
    Tensor::from_fn(vec![n, s.c, s.h, s.w], |_| r.random_range(-0.5f32..0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Plain,
    Mfm,
    Grouped,
}

pub const FAMILIES: [Family; 3] = [Family::Plain, Family::Mfm, Family::Grouped];

fn pool(b: NetworkBuilder, r: &mut ChaCha8Rng) -> NetworkBuilder {
    match r.random_range(0..4) {
        0 => b.maxpool(2, 2),
        1 => b.maxpool_with(3, 2, 1),
        _ => b,
    }
}

fn head(b: NetworkBuilder, r: &mut ChaCha8Rng) -> NetworkBuilder {
    let out = r.random_range(1..4);
    if r.random_bool(0.7) {
        b.gap().linear(out)
    } else {
        b.linear(out)
    }
}

/// Small random network of the given family with non-zero biases. Draws
/// are repeated until the shapes fit.
pub fn random_net(r: &mut ChaCha8Rng, family: Family) -> NetworkIR {
    loop {
        let input = Shape3::new(r.random_range(1..4), r.random_range(6..12), r.random_range(6..12));
        let mut b = NetworkBuilder::new("rand", input).bias_std(0.2);
        match family {
            Family::Plain => {
                for _ in 0..r.random_range(2..4) {
                    let k = [1, 3, 3, 5][r.random_range(0..4)];
                    let stride = r.random_range(1..3);
                    let pad = r.random_range(0..=k / 2);
                    b = b.conv_with(r.random_range(2..6), k, stride, pad).relu();
                    b = pool(b, r);
                }
            }
            Family::Mfm => {
                for _ in 0..r.random_range(2..4) {
                    b = b.mfm(r.random_range(2..5), [1, 3][r.random_range(0..2)]);
                    b = pool(b, r);
                }
            }
            Family::Grouped => {
                b = b.mfm(r.random_range(2..5), 3);
                b = pool(b, r);
                b = b.group(1, r.random_range(2..5), 3);
                if r.random_bool(0.5) {
                    b = pool(b, r);
                }
                b = b.group(2, r.random_range(2..5), 3);
            }
        }
        b = head(b, r);
        if let Ok(net) = b.build(r.random_range(0..u64::MAX)) {
            return net;
        }
    }
}

fn weights(net: &NetworkIR, i: usize) -> (Vec<f64>, Vec<f64>) {
    let l = &net.layers[i];
    let w = l.weight.as_ref().map(|t| t.data().iter().map(|&v| v as f64).collect()).unwrap_or_default();
    let b = l.bias.as_ref().map(|t| t.data().iter().map(|&v| v as f64).collect()).unwrap_or_default();
    (w, b)
}

/// Direct nested-loop evaluation of every layer on one image; entry `i` is
/// layer `i`'s output.
pub fn naive_forward(net: &NetworkIR, image: &[f64]) -> Vec<Vec<f64>> {
    let mut shape = net.input_shape;
    let mut x = image.to_vec();
    let mut outs = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let (w, b) = weights(net, i);
        let (y, s) = match layer.kind {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) => {
                let ho = (shape.h + 2 * c.padding - c.kernel) / c.stride + 1;
                let wo = (shape.w + 2 * c.padding - c.kernel) / c.stride + 1;
                let mut y = vec![0.0; c.out_channels * ho * wo];
                for o in 0..c.out_channels {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = if b.is_empty() { 0.0 } else { b[o] };
                            for ci in 0..c.in_channels {
                                for kh in 0..c.kernel {
                                    for kw in 0..c.kernel {
                                        let iy = (oy * c.stride + kh) as isize - c.padding as isize;
                                        let ix = (ox * c.stride + kw) as isize - c.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= shape.h as isize || ix >= shape.w as isize {
                                            continue;
                                        }
                                        let xv = x[(ci * shape.h + iy as usize) * shape.w + ix as usize];
                                        acc += w[((o * c.in_channels + ci) * c.kernel + kh) * c.kernel + kw] * xv;
                                    }
                                }
                            }
                            y[(o * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
                if let LayerKind::Mfm(_) = layer.kind {
                    let half = c.out_channels / 2;
                    let plane = ho * wo;
                    let m: Vec<f64> = (0..half * plane).map(|j| y[j].max(y[j + half * plane])).collect();
                    (m, Shape3::new(half, ho, wo))
                } else {
                    (y, Shape3::new(c.out_channels, ho, wo))
                }
            }
            LayerKind::Relu => (x.iter().map(|v| v.max(0.0)).collect(), shape),
            LayerKind::MaxPool2d(p) => {
                let ho = (shape.h + 2 * p.padding - p.window) / p.stride + 1;
                let wo = (shape.w + 2 * p.padding - p.window) / p.stride + 1;
                let mut y = vec![f64::NEG_INFINITY; shape.c * ho * wo];
                for c in 0..shape.c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for dy in 0..p.window {
                                for dx in 0..p.window {
                                    let iy = (oy * p.stride + dy) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + dx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= shape.h as isize || ix >= shape.w as isize {
                                        continue;
                                    }
                                    let v = x[(c * shape.h + iy as usize) * shape.w + ix as usize];
                                    let slot = &mut y[(c * ho + oy) * wo + ox];
                                    *slot = slot.max(v);
                                }
                            }
                        }
                    }
                }
                (y, Shape3::new(shape.c, ho, wo))
            }
            LayerKind::Gap => {
                let plane = shape.h * shape.w;
                let y = (0..shape.c)
                    .map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect();
                (y, Shape3::new(shape.c, 1, 1))
            }
            LayerKind::Linear(l) => {
                let y = (0..l.out_features)
                    .map(|o| {
                        let dot: f64 = (0..l.in_features).map(|j| w[o * l.in_features + j] * x[j]).sum();
                        dot + if b.is_empty() { 0.0 } else { b[o] }
                    })
                    .collect();
                (y, Shape3::new(l.out_features, 1, 1))
            }
        };
        outs.push(y.clone());
        x = y;
        shape = s;
    }
    outs
}

/// Largest absolute gap between the executor and [`naive_forward`] over
/// every layer of every image.
pub fn forward_deviation(net: &NetworkIR, images: &Tensor) -> f64 {
    let stride = net.input_shape.len();
    let mut worst: f64 = 0.0;
    for (n, per_layer) in all_activations(net, images, &[]).iter().enumerate() {
        let x: Vec<f64> = images.data()[n * stride..(n + 1) * stride].iter().map(|&v| v as f64).collect();
        let reference = naive_forward(net, &x);
        for (got, want) in per_layer.iter().zip(&reference) {
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Every layer's activations per image in working precision, with
/// optional channel masks.
pub fn all_activations(net: &NetworkIR, images: &Tensor, masks: &[ChannelMask]) -> Vec<Vec<Vec<f64>>> {
    let exec = Executor::new(net).unwrap();
    let all: Vec<usize> = (0..net.layers.len()).collect();
    exec.run(images, net.layers.len(), &all, masks).unwrap().1
}

pub fn mask(net: &NetworkIR, layer: usize, keep: &[usize]) -> ChannelMask {
    let c = net.shapes().unwrap()[layer].c;
    let mut m = vec![false; c];
    for &k in keep {
        m[k] = true;
    }
    ChannelMask { layer, keep: m }
}

/// Exact minimizer value of `(1/2N)|y - b0 - X beta|^2 + lambda |beta|_1`
/// for small `p`, by enumerating supports and sign patterns and solving the
/// stationarity equations on centred data.
pub fn lasso_enumeration(x: &[f64], n: usize, p: usize, y: &[f64], lambda: f64) -> f64 {
    assert!(p <= 3);
    let design = Design::new(x, n, p);
    let xm: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let xc = |i: usize, j: usize| x[i * p + j] - xm[j];
    let mut best = prunekit::lassopath::objective(&design, y, &vec![0.0; p], ym, lambda);
    for mask in 1u32..(1 << p) {
        let s: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let k = s.len();
        for signs in 0u32..(1 << k) {
            let sg: Vec<f64> = (0..k).map(|a| if signs & (1 << a) != 0 { 1.0 } else { -1.0 }).collect();
            let mut g = nalgebra::DMatrix::<f64>::zeros(k, k);
            let mut rhs = nalgebra::DVector::<f64>::zeros(k);
            for a in 0..k {
                for bb in 0..k {
                    g[(a, bb)] = (0..n).map(|i| xc(i, s[a]) * xc(i, s[bb])).sum::<f64>() / n as f64;
                }
                rhs[a] = (0..n).map(|i| xc(i, s[a]) * (y[i] - ym)).sum::<f64>() / n as f64 - lambda * sg[a];
            }
            let Some(sol) = g.lu().solve(&rhs) else {
                continue;
            };
            if (0..k).any(|a| sol[a] * sg[a] <= 0.0) {
                continue;
            }
            let mut beta = vec![0.0; p];
            for a in 0..k {
                beta[s[a]] = sol[a];
            }
            let b0 = ym - (0..p).map(|j| xm[j] * beta[j]).sum::<f64>();
            best = best.min(prunekit::lassopath::objective(&design, y, &beta, b0, lambda));
        }
    }
    best
}

/// Objective minimum by successively refined grids around the best point
/// (intercept profiled out), for `p <= 2`.
pub fn lasso_grid(x: &[f64], n: usize, p: usize, y: &[f64], lambda: f64, radius: f64) -> f64 {
    assert!(p <= 2);
    let design = Design::new(x, n, p);
    let xm: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let eval = |beta: &[f64]| {
        let b0 = ym - (0..p).map(|j| xm[j] * beta[j]).sum::<f64>();
        prunekit::lassopath::objective(&design, y, beta, b0, lambda)
    };
    let mut center = vec![0.0; p];
    let mut half = radius;
    let steps = 40i32;
    let mut best = eval(&center);
    for _ in 0..30 {
        let h = half / steps as f64;
        let grid: Vec<f64> = (-steps..=steps).map(|t| t as f64 * h).collect();
        let mut cands: Vec<Vec<f64>> = Vec::new();
        if p == 1 {
            cands.extend(grid.iter().map(|d| vec![center[0] + d]));
        } else {
            for &d0 in &grid {
                cands.extend(grid.iter().map(|d1| vec![center[0] + d0, center[1] + d1]));
            }
        }
        let mut improved = center.clone();
        for beta in cands {
            let v = eval(&beta);
            if v < best {
                best = v;
                improved = beta;
            }
        }
        // Inactive coordinates sit exactly at zero.
        for j in 0..p {
            let mut z = improved.clone();
            z[j] = 0.0;
            let v = eval(&z);
            if v < best {
                best = v;
                improved = z;
            }
        }
        center = improved;
        half = 4.0 * h;
    }
    best
}

/// Gaussian design with AR(1) column correlation `rho`, returned row-major.
pub fn ar_design(r: &mut ChaCha8Rng, n: usize, p: usize, rho: f64) -> Vec<f64> {
    let mut x = vec![0.0; n * p];
    let tail = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let mut prev = normal(r);
        x[i * p] = prev;
        for j in 1..p {
            prev = rho * prev + tail * normal(r);
            x[i * p + j] = prev;
        }
    }
    x
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, r)
}

/// Feature matrix of `p` columns with target `y` depending linearly on `s`
/// random columns plus unit noise. Returns the matrix and the support.
pub fn planted_features(seed: u64, n: usize, p: usize, s: usize) -> (prunekit::features::FeatureMatrix, Vec<usize>) {
    let mut r = rng(seed);
    let x = ar_design(&mut r, n, p, 0.3);
    let mut support: Vec<usize> = (0..p).collect();
    rand::seq::SliceRandom::shuffle(support.as_mut_slice(), &mut r);
    support.truncate(s);
    support.sort_unstable();
    let w: Vec<f64> = support
        .iter()
        .map(|_| r.random_range(1.0..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let y: Vec<f32> = (0..n)
        .map(|i| {
            let signal: f64 = support.iter().zip(&w).map(|(&j, wj)| wj * x[i * p + j]).sum();
            (signal + normal(&mut r)) as f32
        })
        .collect();
    let f = prunekit::features::FeatureMatrix::new("planted", (0..p).collect(), x.iter().map(|&v| v as f32).collect())
        .unwrap()
        .with_target("y", y)
        .unwrap();
    (f, support)
}

/// Held-out error at support size `s` (best fit with exactly `s` nonzeros,
/// else the sparsest fit above `s`), at one nonzero (best fit with the
/// smallest positive support), and of the densest fit.
pub fn curve_profile(c: &prunekit::lassopath::CharacteristicCurve, s: usize) -> (f64, f64, f64) {
    let fits: Vec<(usize, f64)> = (0..c.fits.len()).map(|k| (c.fits[k].nnz, c.rmse(k))).collect();
    let best_at = |m: usize| fits.iter().filter(|f| f.0 == m).map(|f| f.1).fold(f64::INFINITY, f64::min);
    let at_s = fits
        .iter()
        .map(|f| f.0)
        .filter(|&m| m >= s)
        .min()
        .map_or(f64::INFINITY, best_at);
    let one = fits.iter().map(|f| f.0).filter(|&m| m > 0).min().map_or(f64::INFINITY, best_at);
    (at_s, one, fits.last().unwrap().1)
}

/// Random regression instance with correlated columns and an intercept.
pub fn lasso_instance(seed: u64, n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = ar_design(&mut r, n, p, 0.4);
    let w: Vec<f64> = (0..p).map(|_| r.random_range(-2.0..2.0)).collect();
    let y = (0..n)
        .map(|i| 0.7 + (0..p).map(|j| w[j] * x[i * p + j]).sum::<f64>() + 0.5 * normal(&mut r))
        .collect();
    (x, y)
}

/// Subgradient optimality violation computed from scratch.
pub fn kkt_violation(x: &[f64], n: usize, p: usize, y: &[f64], beta: &[f64], b0: f64, lambda: f64) -> f64 {
    let r: Vec<f64> = (0..n)
        .map(|i| y[i] - b0 - (0..p).map(|j| x[i * p + j] * beta[j]).sum::<f64>())
        .collect();
    let mut worst = (r.iter().sum::<f64>() / n as f64).abs();
    for j in 0..p {
        let g = (0..n).map(|i| x[i * p + j] * r[i]).sum::<f64>() / n as f64;
        let v = if beta[j] == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}
