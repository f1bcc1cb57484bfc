//! Per-image kernels on channel-major `f64` buffers.

use crate::netir::{ConvSpec, PoolSpec, Shape3};

/// Output positions `o` for which `o * stride + offset - padding` lands in `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let offset = offset as isize - padding as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // largest o with o*stride + offset <= size - 1
    let top = size as isize - 1 - offset;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
}

pub fn conv_forward(c: &ConvSpec, input: Shape3, output: Shape3, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let k = c.kernel;
    let (s, p) = (c.stride, c.padding);
    let (hin, win) = (input.h, input.w);
    let (hout, wout) = (output.h, output.w);
    let plane_out = hout * wout;
    for o in 0..c.out_channels {
        let yo = &mut y[o * plane_out..(o + 1) * plane_out];
        yo.fill(if b.is_empty() { 0.0 } else { b[o] });
        for ci in 0..c.in_channels {
            let xc = &x[ci * hin * win..(ci + 1) * hin * win];
            for kh in 0..k {
                let (oy_lo, oy_hi) = valid_range(hout, hin, s, kh, p);
                for kw in 0..k {
                    let wv = w[((o * c.in_channels + ci) * k + kh) * k + kw];
                    let (ox_lo, ox_hi) = valid_range(wout, win, s, kw, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + kh - p;
                        let yrow = &mut yo[oy * wout + ox_lo..oy * wout + ox_hi];
                        let ix0 = ox_lo * s + kw - p;
                        if s == 1 {
                            let xrow = &xc[iy * win + ix0..iy * win + ix0 + yrow.len()];
                            for (yv, xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wv * xv;
                            }
                        } else {
                            for (j, yv) in yrow.iter_mut().enumerate() {
                                *yv += wv * xc[iy * win + ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients into `dw`/`db` and input gradients into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    c: &ConvSpec,
    input: Shape3,
    output: Shape3,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let k = c.kernel;
    let (s, p) = (c.stride, c.padding);
    let (hin, win) = (input.h, input.w);
    let (hout, wout) = (output.h, output.w);
    let plane_out = hout * wout;
    let mut dx = dx;
    for o in 0..c.out_channels {
        let dyo = &dy[o * plane_out..(o + 1) * plane_out];
        if !db.is_empty() {
            db[o] += dyo.iter().sum::<f64>();
        }
        for ci in 0..c.in_channels {
            let xc = &x[ci * hin * win..(ci + 1) * hin * win];
            for kh in 0..k {
                let (oy_lo, oy_hi) = valid_range(hout, hin, s, kh, p);
                for kw in 0..k {
                    let widx = ((o * c.in_channels + ci) * k + kh) * k + kw;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_range(wout, win, s, kw, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + kh - p;
                        let dyrow = &dyo[oy * wout + ox_lo..oy * wout + ox_hi];
                        let ix0 = ox_lo * s + kw - p;
                        let base = ci * hin * win + iy * win + ix0;
                        if s == 1 {
                            let xrow = &xc[iy * win + ix0..iy * win + ix0 + dyrow.len()];
                            acc += dyrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow = &mut dx[base..base + dyrow.len()];
                                for (d, g) in dxrow.iter_mut().zip(dyrow) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            for (j, g) in dyrow.iter().enumerate() {
                                acc += g * xc[iy * win + ix0 + j * s];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[base + j * s] += wv * g;
                                }
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Max over channel pairs `(p, p + o)`; ties take the first channel.
pub fn mfm_forward(pre: &[f64], out_channels: usize, plane: usize, y: &mut [f64]) {
    let half = out_channels * plane;
    for i in 0..half {
        let (a, b) = (pre[i], pre[i + half]);
        y[i] = if b > a { b } else { a };
    }
}

pub fn mfm_backward(pre: &[f64], out_channels: usize, plane: usize, dy: &[f64], dpre: &mut [f64]) {
    let half = out_channels * plane;
    for i in 0..half {
        if pre[i + half] > pre[i] {
            dpre[i + half] += dy[i];
        } else {
            dpre[i] += dy[i];
        }
    }
}

/// Scan-order index of the first maximum in each pooling window (padding is ignored).
fn pool_windows(p: &PoolSpec, input: Shape3, output: Shape3, x: &[f64], mut visit: impl FnMut(usize, usize, f64)) {
    let plane_in = input.plane();
    for c in 0..input.c {
        let xc = &x[c * plane_in..(c + 1) * plane_in];
        for oy in 0..output.h {
            for ox in 0..output.w {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for dy in 0..p.window {
                    let iy = (oy * p.stride + dy) as isize - p.padding as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for dx in 0..p.window {
                        let ix = (ox * p.stride + dx) as isize - p.padding as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let idx = iy as usize * input.w + ix as usize;
                        if arg == usize::MAX || xc[idx] > best {
                            best = xc[idx];
                            arg = idx;
                        }
                    }
                }
                let out_idx = c * output.plane() + oy * output.w + ox;
                visit(out_idx, c * plane_in + arg, best);
            }
        }
    }
}

pub fn maxpool_forward(p: &PoolSpec, input: Shape3, output: Shape3, x: &[f64], y: &mut [f64]) {
    pool_windows(p, input, output, x, |o, _, v| y[o] = v);
}

pub fn maxpool_backward(p: &PoolSpec, input: Shape3, output: Shape3, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    pool_windows(p, input, output, x, |o, i, _| dx[i] += dy[o]);
}

pub fn gap_forward(input: Shape3, x: &[f64], y: &mut [f64]) {
    let plane = input.plane();
    for c in 0..input.c {
        y[c] = x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
}

pub fn gap_backward(input: Shape3, dy: &[f64], dx: &mut [f64]) {
    let plane = input.plane();
    for c in 0..input.c {
        let g = dy[c] / plane as f64;
        for d in &mut dx[c * plane..(c + 1) * plane] {
            *d += g;
        }
    }
}

pub fn linear_forward(in_f: usize, out_f: usize, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    for o in 0..out_f {
        let row = &w[o * in_f..(o + 1) * in_f];
        let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        y[o] = dot + if b.is_empty() { 0.0 } else { b[o] };
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    in_f: usize,
    out_f: usize,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let mut dx = dx;
    for o in 0..out_f {
        let g = dy[o];
        if !db.is_empty() {
            db[o] += g;
        }
        let row = &mut dw[o * in_f..(o + 1) * in_f];
        for (d, xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
        if let Some(dx) = dx.as_deref_mut() {
            for (d, wv) in dx.iter_mut().zip(&w[o * in_f..(o + 1) * in_f]) {
                *d += g * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for size in 1..7 {
            for k in 1..4 {
                for s in 1..4 {
                    for p in 0..3 {
                        if size + 2 * p < k {
                            continue;
                        }
                        let out = (size + 2 * p - k) / s + 1;
                        for off in 0..k {
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * s + off) as isize - p as isize;
                                    i >= 0 && i < size as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, size, s, off, p);
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "size={size} k={k} s={s} p={p} off={off}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mfm_takes_pairwise_max() {
        // channel0 = [1, -2], channel1 = [0, 5]
        let mut y = [0.0; 2];
        mfm_forward(&[1.0, -2.0, 0.0, 5.0], 1, 2, &mut y);
        assert_eq!(y, [1.0, 5.0]);
    }

    #[test]
    fn mfm_tie_routes_gradient_to_first_half() {
        let mut d = [0.0; 2];
        mfm_backward(&[3.0, 3.0], 1, 1, &[1.0], &mut d);
        assert_eq!(d, [1.0, 0.0]);
    }
}
