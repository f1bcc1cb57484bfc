//! Pruning targets and the zero-masking oracle.

use prunekit::engine::ChannelMask;
use prunekit::netir::NetworkIR;
use prunekit::pruner::{group_opener_after, opens_group, prune_group, prune_layer};
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{all_activations, mask, random_images, random_net, rng, Family, FAMILIES};

/// Prunable targets: plain filter layers by name, groups by their second
/// block. Group openers are reached only through the previous group.
pub enum Target {
    Layer(usize),
    Group(u32, usize),
}

impl Target {
    pub fn layer(&self) -> usize {
        match *self {
            Target::Layer(i) | Target::Group(_, i) => i,
        }
    }
}

pub fn targets(net: &NetworkIR) -> Vec<Target> {
    let mut out = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        if !l.kind.is_filter_layer() {
            continue;
        }
        match l.group {
            Some(g) if net.group_members(g).last() == Some(&i) => out.push(Target::Group(g, i)),
            _ if !opens_group(net, i) => out.push(Target::Layer(i)),
            _ => {}
        }
    }
    out
}

pub fn random_keep(r: &mut ChaCha8Rng, c: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..c).collect();
    all.shuffle(r);
    all.truncate(r.random_range(1..=c));
    all
}

/// Prunes and returns the masks that emulate the same surgery.
pub fn apply(net: &NetworkIR, t: &Target, keep: &[usize]) -> (NetworkIR, Vec<ChannelMask>) {
    let (pruned, i) = match *t {
        Target::Layer(i) => (prune_layer(net, &net.layers[i].name, keep).unwrap(), i),
        Target::Group(g, i) => (prune_group(net, g, keep).unwrap(), i),
    };
    let mut masks = vec![mask(net, i, keep)];
    if let Some(j) = group_opener_after(net, i).unwrap() {
        masks.push(mask(net, j, keep));
    }
    (pruned, masks)
}

/// Max deviation between the pruned net's activations and the masked
/// original's, restricted to surviving channels, over every layer.
pub fn deviation(original: &NetworkIR, pruned: &NetworkIR, masks: &[ChannelMask], keep: &[usize], seed: u64) -> f64 {
    let images = random_images(&mut rng(seed), 3, original.input_shape);
    let a = all_activations(original, &images, masks);
    let b = all_activations(pruned, &images, &[]);
    let sa = original.shapes().unwrap();
    let sb = pruned.shapes().unwrap();
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    let mut worst = 0.0f64;
    for (img_a, img_b) in a.iter().zip(&b) {
        for i in 0..sa.len() {
            let plane = sa[i].plane();
            let channels: Vec<usize> = if sb[i].c == sa[i].c { (0..sa[i].c).collect() } else { sorted.clone() };
            assert_eq!(channels.len(), sb[i].c, "layer {i}");
            for (new_c, &old_c) in channels.iter().enumerate() {
                for p in 0..plane {
                    let d = (img_a[i][old_c * plane + p] - img_b[i][new_c * plane + p]).abs();
                    worst = worst.max(d);
                }
            }
            if sb[i].c != sa[i].c {
                // dropped channels of the masked original are exactly zero
                for c in (0..sa[i].c).filter(|c| sorted.binary_search(c).is_err()) {
                    if masks.iter().any(|m| m.layer == i) {
                        assert!(img_a[i][c * plane..(c + 1) * plane].iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }
    worst
}

/// Worst deviation over `cases` random (net, target, keep-set) triples,
/// cycling through the families, with the number of cases per family.
pub fn masked_sweep(seed: u64, cases: usize) -> (f64, [usize; 3]) {
    let mut r = rng(seed);
    let mut seen = [0usize; 3];
    let mut worst = 0.0f64;
    for case in 0..cases {
        let fam: Family = FAMILIES[case % 3];
        let net = random_net(&mut r, fam);
        let ts = targets(&net);
        let t = &ts[r.random_range(0..ts.len())];
        let keep = random_keep(&mut r, net.shapes().unwrap()[t.layer()].c);
        let (pruned, masks) = apply(&net, t, &keep);
        worst = worst.max(deviation(&net, &pruned, &masks, &keep, case as u64));
        seen[fam as usize] += 1;
    }
    (worst, seen)
}
