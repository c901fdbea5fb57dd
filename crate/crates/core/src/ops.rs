//! Dense 3D tensor kernels used by the U-Net: direct 3x3x3 convolution, 2x max
//! pooling and nearest-neighbor 2x upsampling, each with its exact adjoint.

use crate::real::Real;
use crate::volume::{voxel_count, Dims};

pub(crate) const TAPS: usize = 27;

const LANES: usize = 8;


/// Copies `x` (`channels x N`) into a buffer zero-padded by one voxel on every side.
fn pad<T: Real>(x: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let [h, w, d] = dims;
    let (pw, pd) = (w + 2, d + 2);
    let pn = (h + 2) * pw * pd;
    let n = voxel_count(dims);
    let mut out = vec![T::zero(); channels * pn];
    for c in 0..channels {
        for i in 0..h {
            for j in 0..w {
                let src = c * n + (i * w + j) * d;
                let dst = c * pn + ((i + 1) * pw + j + 1) * pd + 1;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn block_width(cout: usize) -> usize {
    [4, 2].into_iter().find(|b| cout.is_multiple_of(*b)).unwrap_or(1)
}

/// Direct 3x3x3 convolution over a padded input, `OB` output channels at a time
/// with `LANES`-wide register accumulators along the fastest axis.
#[allow(clippy::too_many_arguments)]
fn conv3_kernel<T: Real, const OB: usize>(
    weight: &[T],
    bias: &[T],
    xp: &[T],
    cin: usize,
    cout: usize,
    dims: Dims,
    out: &mut [T],
) {
    let [h, w, d] = dims;
    let (pw, pd) = (w + 2, d + 2);
    let pn = (h + 2) * pw * pd;
    let n = voxel_count(dims);
    let mut wb = vec![T::zero(); cin * TAPS * OB];
    for ob in (0..cout).step_by(OB) {
        for o in 0..OB {
            for ct in 0..cin * TAPS {
                wb[ct * OB + o] = weight[(ob + o) * cin * TAPS + ct];
            }
        }
        for i in 0..h {
            for j in 0..w {
                let out_base = (i * w + j) * d;
                let mut k0 = 0;
                while k0 + LANES <= d {
                    let mut acc = [[T::zero(); LANES]; OB];
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a = [bias[ob + o]; LANES];
                    }
                    for c in 0..cin {
                        let xc = &xp[c * pn..(c + 1) * pn];
                        for a in 0..3 {
                            for b in 0..3 {
                                let base = ((i + a) * pw + j + b) * pd + k0;
                                for e in 0..3 {
                                    let s: &[T; LANES] =
                                        xc[base + e..base + e + LANES].try_into().unwrap();
                                    let wt: &[T; OB] = wb[(c * TAPS + a * 9 + b * 3 + e) * OB..]
                                        [..OB]
                                        .try_into()
                                        .unwrap();
                                    for o in 0..OB {
                                        for l in 0..LANES {
                                            acc[o][l] += wt[o] * s[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate() {
                        out[(ob + o) * n + out_base + k0..][..LANES].copy_from_slice(a);
                    }
                    k0 += LANES;
                }
                for k in k0..d {
                    let mut acc = [T::zero(); OB];
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a = bias[ob + o];
                    }
                    for c in 0..cin {
                        let xc = &xp[c * pn..(c + 1) * pn];
                        for a in 0..3 {
                            for b in 0..3 {
                                let base = ((i + a) * pw + j + b) * pd + k;
                                for e in 0..3 {
                                    let s = xc[base + e];
                                    let wt = &wb[(c * TAPS + a * 9 + b * 3 + e) * OB..][..OB];
                                    for o in 0..OB {
                                        acc[o] += wt[o] * s;
                                    }
                                }
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate() {
                        out[(ob + o) * n + out_base + k] = *a;
                    }
                }
            }
        }
    }
}

fn conv3_padded<T: Real>(
    weight: &[T],
    bias: &[T],
    xp: &[T],
    cin: usize,
    cout: usize,
    dims: Dims,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * voxel_count(dims)];
    match block_width(cout) {
        4 => conv3_kernel::<T, 4>(weight, bias, xp, cin, cout, dims, &mut out),
        2 => conv3_kernel::<T, 2>(weight, bias, xp, cin, cout, dims, &mut out),
        _ => conv3_kernel::<T, 1>(weight, bias, xp, cin, cout, dims, &mut out),
    }
    out
}

/// `dW[o, c, tap] += sum_v dOut[o, v] * x[c, v + tap]`, all 27 taps of one
/// input channel accumulated together.
fn conv3_weight_grad<T: Real, const OB: usize>(
    d_out: &[T],
    xp: &[T],
    cin: usize,
    cout: usize,
    dims: Dims,
    d_weight: &mut [T],
) {
    let [h, w, d] = dims;
    let (pw, pd) = (w + 2, d + 2);
    let pn = (h + 2) * pw * pd;
    let n = voxel_count(dims);
    let mut acc = [[[T::zero(); LANES]; OB]; TAPS];
    let mut tail = [[T::zero(); OB]; TAPS];
    for ob in (0..cout).step_by(OB) {
        let g_block = &d_out[ob * n..(ob + OB) * n];
        for c in 0..cin {
            let xc = &xp[c * pn..(c + 1) * pn];
            acc.iter_mut().for_each(|a| *a = [[T::zero(); LANES]; OB]);
            tail.iter_mut().for_each(|t| *t = [T::zero(); OB]);
            for i in 0..h {
                for j in 0..w {
                    let dst = (i * w + j) * d;
                    let mut k0 = 0;
                    while k0 + LANES <= d {
                        let mut g = [[T::zero(); LANES]; OB];
                        for (o, go) in g.iter_mut().enumerate() {
                            go.copy_from_slice(&g_block[o * n + dst + k0..o * n + dst + k0 + LANES]);
                        }
                        for (tap, at) in acc.iter_mut().enumerate() {
                            let src = ((i + tap / 9) * pw + j + (tap / 3) % 3) * pd + tap % 3 + k0;
                            let s: &[T; LANES] = xc[src..src + LANES].try_into().unwrap();
                            for o in 0..OB {
                                for l in 0..LANES {
                                    at[o][l] += g[o][l] * s[l];
                                }
                            }
                        }
                        k0 += LANES;
                    }
                    for k in k0..d {
                        for (tap, tt) in tail.iter_mut().enumerate() {
                            let src = ((i + tap / 9) * pw + j + (tap / 3) % 3) * pd + tap % 3 + k;
                            for o in 0..OB {
                                tt[o] += g_block[o * n + dst + k] * xc[src];
                            }
                        }
                    }
                }
            }
            for tap in 0..TAPS {
                for o in 0..OB {
                    let total = acc[tap][o].iter().copied().sum::<T>() + tail[tap][o];
                    d_weight[((ob + o) * cin + c) * TAPS + tap] += total;
                }
            }
        }
    }
}

/// `out = W * x + b` for a convolution with kernel size 1 or 3 (zero padding 1).
pub(crate) fn conv_forward<T: Real>(
    weight: &[T],
    bias: &[T],
    x: &[T],
    cin: usize,
    cout: usize,
    ksize: usize,
    dims: Dims,
) -> Vec<T> {
    let n = voxel_count(dims);
    if ksize == 1 {
        let mut out = vec![T::zero(); cout * n];
        for (o, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        T::gemm(
            cout,
            cin,
            n,
            T::one(),
            weight,
            false,
            x,
            false,
            T::one(),
            &mut out,
        );
        return out;
    }
    conv3_padded(weight, bias, &pad(x, cin, dims), cin, cout, dims)
}

/// Accumulates weight/bias gradients and returns the input gradient (if requested).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    weight: &[T],
    x: &[T],
    d_out: &[T],
    cin: usize,
    cout: usize,
    ksize: usize,
    dims: Dims,
    d_weight: &mut [T],
    d_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let n = voxel_count(dims);
    for (o, row) in d_out.chunks_exact(n).enumerate() {
        d_bias[o] += row.iter().copied().sum::<T>();
    }
    if ksize == 1 {
        T::gemm(
            cout,
            n,
            cin,
            T::one(),
            d_out,
            false,
            x,
            true,
            T::one(),
            d_weight,
        );
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); cin * n];
        T::gemm(
            cin,
            cout,
            n,
            T::one(),
            weight,
            true,
            d_out,
            false,
            T::zero(),
            &mut dx,
        );
        return Some(dx);
    }
    let xp = pad(x, cin, dims);
    match block_width(cout) {
        4 => conv3_weight_grad::<T, 4>(d_out, &xp, cin, cout, dims, d_weight),
        2 => conv3_weight_grad::<T, 2>(d_out, &xp, cin, cout, dims, d_weight),
        _ => conv3_weight_grad::<T, 1>(d_out, &xp, cin, cout, dims, d_weight),
    }
    if !want_input_grad {
        return None;
    }
    drop(xp);
    // adjoint = convolution of dOut with the spatially flipped, channel-transposed kernel
    let mut flipped = vec![T::zero(); cin * cout * TAPS];
    for o in 0..cout {
        for c in 0..cin {
            for tap in 0..TAPS {
                flipped[(c * cout + o) * TAPS + TAPS - 1 - tap] =
                    weight[(o * cin + c) * TAPS + tap];
            }
        }
    }
    let zero_bias = vec![T::zero(); cin];
    Some(conv3_padded(
        &flipped,
        &zero_bias,
        &pad(d_out, cout, dims),
        cout,
        cin,
        dims,
    ))
}

pub(crate) fn half(dims: Dims) -> Dims {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

/// 2x2x2 max pooling; returns pooled values and the flat source index of each max.
pub(crate) fn maxpool2<T: Real>(x: &[T], channels: usize, dims: Dims) -> (Vec<T>, Vec<u32>) {
    let n = voxel_count(dims);
    let od = half(dims);
    let m = voxel_count(od);
    let mut out = vec![T::zero(); channels * m];
    let mut arg = vec![0u32; channels * m];
    for c in 0..channels {
        let src = &x[c * n..(c + 1) * n];
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let base = ((2 * i + di) * dims[1] + 2 * j + dj) * dims[2] + 2 * k;
                            for dk in 0..2 {
                                let v = src[base + dk];
                                if v > best {
                                    best = v;
                                    best_idx = base + dk;
                                }
                            }
                        }
                    }
                    let o = c * m + (i * od[1] + j) * od[2] + k;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Real>(
    d_out: &[T],
    arg: &[u32],
    channels: usize,
    dims: Dims,
) -> Vec<T> {
    let n = voxel_count(dims);
    let m = voxel_count(half(dims));
    let mut dx = vec![T::zero(); channels * n];
    for c in 0..channels {
        for o in 0..m {
            dx[c * n + arg[c * m + o] as usize] += d_out[c * m + o];
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling from `dims` to `2 * dims`.
pub(crate) fn upsample2<T: Real>(x: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let m = voxel_count(dims);
    let ud = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let n = voxel_count(ud);
    let mut out = vec![T::zero(); channels * n];
    for c in 0..channels {
        for i in 0..ud[0] {
            for j in 0..ud[1] {
                let src = c * m + ((i / 2) * dims[1] + j / 2) * dims[2];
                let dst = c * n + (i * ud[1] + j) * ud[2];
                for k in 0..ud[2] {
                    out[dst + k] = x[src + k / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(d_out: &[T], channels: usize, dims: Dims) -> Vec<T> {
    let m = voxel_count(dims);
    let ud = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let n = voxel_count(ud);
    let mut dx = vec![T::zero(); channels * m];
    for c in 0..channels {
        for i in 0..ud[0] {
            for j in 0..ud[1] {
                let dst = c * m + ((i / 2) * dims[1] + j / 2) * dims[2];
                let src = c * n + (i * ud[1] + j) * ud[2];
                for k in 0..ud[2] {
                    dx[dst + k / 2] += d_out[src + k];
                }
            }
        }
    }
    dx
}
