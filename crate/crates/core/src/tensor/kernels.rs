//! Raw compute kernels behind the graph ops.
//!
//! Convolutions route through GEMM (1x1 fast path, im2col otherwise) with a
//! direct loop for depthwise. Batch parallelism is per-sample with partial
//! results reduced in sample order so results do not depend on thread count.

use rayon::prelude::*;

use super::element::Element;

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = inp + 2 * pad;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

fn im2col<T: Element>(
    x: &[T], // one sample's group: (ci_per_g, h, w)
    d: &ConvDims,
    cols: &mut [T], // (ci_per_g*kh*kw, ho*wo)
) {
    let ci_g = d.c_in / d.groups;
    let out_hw = d.ho * d.wo;
    for ci in 0..ci_g {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (ci * d.kh + kh) * d.kw + kw;
                let dst = &mut cols[row * out_hw..(row + 1) * out_hw];
                for ho in 0..d.ho {
                    let ih = (ho * d.stride + kh) as isize - d.pad as isize;
                    let drow = &mut dst[ho * d.wo..(ho + 1) * d.wo];
                    if ih < 0 || ih as usize >= d.h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * d.h + ih as usize) * d.w..(ci * d.h + ih as usize + 1) * d.w];
                    for (wo, dv) in drow.iter_mut().enumerate() {
                        let iw = (wo * d.stride + kw) as isize - d.pad as isize;
                        *dv = if iw < 0 || iw as usize >= d.w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], d: &ConvDims, x_grad: &mut [T]) {
    let ci_g = d.c_in / d.groups;
    let out_hw = d.ho * d.wo;
    for ci in 0..ci_g {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (ci * d.kh + kh) * d.kw + kw;
                let src = &cols[row * out_hw..(row + 1) * out_hw];
                for ho in 0..d.ho {
                    let ih = (ho * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    let base = (ci * d.h + ih as usize) * d.w;
                    for wo in 0..d.wo {
                        let iw = (wo * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        x_grad[base + iw as usize] += src[ho * d.wo + wo];
                    }
                }
            }
        }
    }
}

fn is_depthwise(d: &ConvDims) -> bool {
    d.groups == d.c_in && d.c_out == d.c_in
}

fn pad_plane<T: Element>(x: &[T], h: usize, w: usize, pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); ph * pw];
    for r in 0..h {
        out[(r + pad) * pw + pad..(r + pad) * pw + pad + w].copy_from_slice(&x[r * w..(r + 1) * w]);
    }
    out
}

/// One-channel depthwise forward over a padded plane. Stride 1 uses
/// shift-and-multiply-add over contiguous rows.
fn dw_plane_forward<T: Element>(padded: &[T], ker: &[T], d: &ConvDims) -> Vec<T> {
    let pw = d.w + 2 * d.pad;
    let mut out = vec![T::zero(); d.ho * d.wo];
    if d.stride == 1 {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let kv = ker[kh * d.kw + kw];
                if kv == T::zero() {
                    continue;
                }
                for ho in 0..d.ho {
                    let src = &padded[(ho + kh) * pw + kw..(ho + kh) * pw + kw + d.wo];
                    let dst = &mut out[ho * d.wo..(ho + 1) * d.wo];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += s * kv;
                    }
                }
            }
        }
    } else {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let (by, bx) = (ho * d.stride, wo * d.stride);
                let mut acc = T::zero();
                for kh in 0..d.kh {
                    let row = &padded[(by + kh) * pw + bx..(by + kh) * pw + bx + d.kw];
                    for (kv, &s) in ker[kh * d.kw..(kh + 1) * d.kw].iter().zip(row) {
                        acc += *kv * s;
                    }
                }
                out[ho * d.wo + wo] = acc;
            }
        }
    }
    out
}

fn is_pointwise(d: &ConvDims) -> bool {
    d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0 && d.groups == 1
}

/// y[n,o,ho,wo] = sum_i x[n, g*ci_g + i, ...] * w[o, i, kh, kw] (+ bias[o])
pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let out_hw = d.ho * d.wo;
    let in_chw = d.c_in * d.h * d.w;
    let out_chw = d.c_out * out_hw;
    let mut y = vec![T::zero(); d.n * out_chw];

    if is_depthwise(d) {
        // channel-parallel with a zero-padded scratch plane per channel so
        // the inner loops carry no bounds checks
        let plane_in = d.h * d.w;
        let chans: Vec<(usize, usize)> = (0..d.n)
            .flat_map(|n| (0..d.c_in).map(move |c| (n, c)))
            .collect();
        let pieces: Vec<Vec<T>> = chans
            .par_iter()
            .map(|&(n, c)| {
                let xc = &x[n * in_chw + c * plane_in..n * in_chw + (c + 1) * plane_in];
                let ker = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
                let padded = pad_plane(xc, d.h, d.w, d.pad);
                dw_plane_forward(&padded, ker, d)
            })
            .collect();
        for (&(n, c), piece) in chans.iter().zip(&pieces) {
            y[n * out_chw + c * out_hw..n * out_chw + (c + 1) * out_hw].copy_from_slice(piece);
        }
    } else if is_pointwise(d) {
        // per-sample GEMM: (c_out x c_in) * (c_in x hw)
        y.par_chunks_mut(out_chw)
            .zip(x.par_chunks(in_chw))
            .for_each(|(yn, xn)| {
                T::gemm(
                    false,
                    false,
                    d.c_out,
                    out_hw,
                    d.c_in,
                    T::one(),
                    w,
                    d.c_in,
                    xn,
                    out_hw,
                    T::zero(),
                    yn,
                    out_hw,
                );
            });
    } else {
        let ci_g = d.c_in / d.groups;
        let co_g = d.c_out / d.groups;
        let krows = ci_g * d.kh * d.kw;
        y.par_chunks_mut(out_chw)
            .zip(x.par_chunks(in_chw))
            .for_each(|(yn, xn)| {
                let mut cols = vec![T::zero(); krows * out_hw];
                for g in 0..d.groups {
                    let xg = &xn[g * ci_g * d.h * d.w..(g + 1) * ci_g * d.h * d.w];
                    im2col(xg, d, &mut cols);
                    let wg = &w[g * co_g * krows..(g + 1) * co_g * krows];
                    let yg = &mut yn[g * co_g * out_hw..(g + 1) * co_g * out_hw];
                    T::gemm(
                        false, false, co_g, out_hw, krows,
                        T::one(), wg, krows, &cols, out_hw, T::zero(), yg, out_hw,
                    );
                }
            });
    }

    if let Some(b) = bias {
        y.par_chunks_mut(out_chw).for_each(|yn| {
            for o in 0..d.c_out {
                let bo = b[o];
                for v in &mut yn[o * out_hw..(o + 1) * out_hw] {
                    *v += bo;
                }
            }
        });
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    has_bias: bool,
    dy: &[T],
    d: &ConvDims,
) -> ConvGrads<T> {
    let out_hw = d.ho * d.wo;
    let in_chw = d.c_in * d.h * d.w;
    let out_chw = d.c_out * out_hw;
    let wlen = w.len();

    let db = if has_bias {
        let mut db = vec![T::zero(); d.c_out];
        for n in 0..d.n {
            let dyn_ = &dy[n * out_chw..(n + 1) * out_chw];
            for o in 0..d.c_out {
                let mut acc = T::zero();
                for &v in &dyn_[o * out_hw..(o + 1) * out_hw] {
                    acc += v;
                }
                db[o] += acc;
            }
        }
        Some(db)
    } else {
        None
    };

    let mut dx = vec![T::zero(); d.n * in_chw];

    if is_depthwise(d) {
        let plane_in = d.h * d.w;
        let ksz = d.kh * d.kw;
        let (pw_, ph_) = (d.w + 2 * d.pad, d.h + 2 * d.pad);
        let chans: Vec<(usize, usize)> = (0..d.n)
            .flat_map(|n| (0..d.c_in).map(move |c| (n, c)))
            .collect();
        // per-(sample, channel) dx plane and kernel-grad piece
        let pieces: Vec<(Vec<T>, Vec<T>)> = chans
            .par_iter()
            .map(|&(n, c)| {
                let xc = &x[n * in_chw + c * plane_in..n * in_chw + (c + 1) * plane_in];
                let dyc = &dy[n * out_chw + c * out_hw..n * out_chw + (c + 1) * out_hw];
                let ker = &w[c * ksz..(c + 1) * ksz];
                let padded = pad_plane(xc, d.h, d.w, d.pad);
                let mut dpad = vec![T::zero(); ph_ * pw_];
                let mut dker = vec![T::zero(); ksz];
                if d.stride == 1 {
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let kv = ker[kh * d.kw + kw];
                            let mut kacc = T::zero();
                            for ho in 0..d.ho {
                                let grow = &dyc[ho * d.wo..(ho + 1) * d.wo];
                                let base = (ho + kh) * pw_ + kw;
                                let xrow = &padded[base..base + d.wo];
                                let drow = &mut dpad[base..base + d.wo];
                                for ((dp, &g), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                                    *dp += g * kv;
                                    kacc += g * xv;
                                }
                            }
                            dker[kh * d.kw + kw] = kacc;
                        }
                    }
                } else {
                    for ho in 0..d.ho {
                        for wo in 0..d.wo {
                            let g = dyc[ho * d.wo + wo];
                            if g == T::zero() {
                                continue;
                            }
                            let (by, bx) = (ho * d.stride, wo * d.stride);
                            for kh in 0..d.kh {
                                for kw in 0..d.kw {
                                    let pi = (by + kh) * pw_ + bx + kw;
                                    dpad[pi] += g * ker[kh * d.kw + kw];
                                    dker[kh * d.kw + kw] += g * padded[pi];
                                }
                            }
                        }
                    }
                }
                // unpad
                let mut dxp = vec![T::zero(); plane_in];
                for r in 0..d.h {
                    dxp[r * d.w..(r + 1) * d.w].copy_from_slice(
                        &dpad[(r + d.pad) * pw_ + d.pad..(r + d.pad) * pw_ + d.pad + d.w],
                    );
                }
                (dxp, dker)
            })
            .collect();
        let mut dw = vec![T::zero(); wlen];
        for (&(n, c), (dxp, dker)) in chans.iter().zip(&pieces) {
            dx[n * in_chw + c * plane_in..n * in_chw + (c + 1) * plane_in].copy_from_slice(dxp);
            for (a, b) in dw[c * ksz..(c + 1) * ksz].iter_mut().zip(dker) {
                *a += *b;
            }
        }
        return ConvGrads { dx, dw, db };
    }

    if is_pointwise(d) {
        let partials: Vec<Vec<T>> = dx
            .par_chunks_mut(in_chw)
            .zip(x.par_chunks(in_chw))
            .zip(dy.par_chunks(out_chw))
            .map(|((dxn, xn), dyn_)| {
                // dx = w^T (c_in x c_out) * dy (c_out x hw)
                T::gemm(
                    true, false, d.c_in, out_hw, d.c_out,
                    T::one(), w, d.c_in, dyn_, out_hw, T::zero(), dxn, out_hw,
                );
                // dw_n = dy (c_out x hw) * x^T (hw x c_in)
                let mut dwn = vec![T::zero(); wlen];
                T::gemm(
                    false, true, d.c_out, d.c_in, out_hw,
                    T::one(), dyn_, out_hw, xn, out_hw, T::zero(), &mut dwn, d.c_in,
                );
                dwn
            })
            .collect();
        let mut dw = vec![T::zero(); wlen];
        for p in partials {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        return ConvGrads { dx, dw, db };
    }

    let ci_g = d.c_in / d.groups;
    let co_g = d.c_out / d.groups;
    let krows = ci_g * d.kh * d.kw;
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(in_chw)
        .zip(x.par_chunks(in_chw))
        .zip(dy.par_chunks(out_chw))
        .map(|((dxn, xn), dyn_)| {
            let mut dwn = vec![T::zero(); wlen];
            let mut cols = vec![T::zero(); krows * out_hw];
            let mut dcols = vec![T::zero(); krows * out_hw];
            for g in 0..d.groups {
                let xg = &xn[g * ci_g * d.h * d.w..(g + 1) * ci_g * d.h * d.w];
                im2col(xg, d, &mut cols);
                let wg = &w[g * co_g * krows..(g + 1) * co_g * krows];
                let dyg = &dyn_[g * co_g * out_hw..(g + 1) * co_g * out_hw];
                // dW_g = dy_g (co_g x hw) * cols^T (hw x krows)
                let dwg = &mut dwn[g * co_g * krows..(g + 1) * co_g * krows];
                T::gemm(
                    false, true, co_g, krows, out_hw,
                    T::one(), dyg, out_hw, &cols, out_hw, T::zero(), dwg, krows,
                );
                // dcols = w_g^T (krows x co_g) * dy_g (co_g x hw)
                T::gemm(
                    true, false, krows, out_hw, co_g,
                    T::one(), wg, krows, dyg, out_hw, T::zero(), &mut dcols, out_hw,
                );
                let dxg = &mut dxn[g * ci_g * d.h * d.w..(g + 1) * ci_g * d.h * d.w];
                col2im_add(&dcols, d, dxg);
            }
            dwn
        })
        .collect();
    let mut dw = vec![T::zero(); wlen];
    for p in partials {
        for (a, b) in dw.iter_mut().zip(p) {
            *a += b;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel valid cross-correlation of `x` with kernel `t`, per sample.
pub(crate) fn dw_xcorr_forward<T: Element>(
    x: &[T],
    t: &[T],
    n: usize,
    c: usize,
    hs: usize,
    ws: usize,
    ht: usize,
    wt: usize,
) -> Vec<T> {
    let ho = hs - ht + 1;
    let wo = ws - wt + 1;
    let mut y = vec![T::zero(); n * c * ho * wo];
    let x_chw = c * hs * ws;
    let t_chw = c * ht * wt;
    let y_chw = c * ho * wo;
    y.par_chunks_mut(y_chw)
        .zip(x.par_chunks(x_chw))
        .zip(t.par_chunks(t_chw))
        .for_each(|((yn, xn), tn)| {
            for ci in 0..c {
                let xc = &xn[ci * hs * ws..(ci + 1) * hs * ws];
                let tc = &tn[ci * ht * wt..(ci + 1) * ht * wt];
                let yc = &mut yn[ci * ho * wo..(ci + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = T::zero();
                        for u in 0..ht {
                            let xr = &xc[(i + u) * ws + j..(i + u) * ws + j + wt];
                            let tr = &tc[u * wt..(u + 1) * wt];
                            for (xv, tv) in xr.iter().zip(tr) {
                                acc += *xv * *tv;
                            }
                        }
                        yc[i * wo + j] = acc;
                    }
                }
            }
        });
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_xcorr_backward<T: Element>(
    x: &[T],
    t: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hs: usize,
    ws: usize,
    ht: usize,
    wt: usize,
) -> (Vec<T>, Vec<T>) {
    let ho = hs - ht + 1;
    let wo = ws - wt + 1;
    let x_chw = c * hs * ws;
    let t_chw = c * ht * wt;
    let y_chw = c * ho * wo;
    let mut dx = vec![T::zero(); n * x_chw];
    let mut dt = vec![T::zero(); n * t_chw];
    dx.par_chunks_mut(x_chw)
        .zip(dt.par_chunks_mut(t_chw))
        .zip(x.par_chunks(x_chw))
        .zip(t.par_chunks(t_chw))
        .zip(dy.par_chunks(y_chw))
        .for_each(|((((dxn, dtn), xn), tn), dyn_)| {
            for ci in 0..c {
                let xc = &xn[ci * hs * ws..(ci + 1) * hs * ws];
                let tc = &tn[ci * ht * wt..(ci + 1) * ht * wt];
                let dxc = &mut dxn[ci * hs * ws..(ci + 1) * hs * ws];
                let dtc = &mut dtn[ci * ht * wt..(ci + 1) * ht * wt];
                let dyc = &dyn_[ci * ho * wo..(ci + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let g = dyc[i * wo + j];
                        if g == T::zero() {
                            continue;
                        }
                        for u in 0..ht {
                            for v in 0..wt {
                                dxc[(i + u) * ws + (j + v)] += g * tc[u * wt + v];
                                dtc[u * wt + v] += g * xc[(i + u) * ws + (j + v)];
                            }
                        }
                    }
                }
            }
        });
    (dx, dt)
}

pub(crate) struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub var: Vec<T>,
}

/// Train-mode batch norm over (N, H, W) per channel. Channels are
/// independent, so the channel-parallel split leaves results identical.
pub(crate) fn bn_train_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let m = T::from_f64((n * hw) as f64);
    let per_channel: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut acc = T::zero();
            for ni in 0..n {
                let xs = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for &v in xs {
                    acc += v;
                }
            }
            let mu = acc / m;
            let mut vacc = T::zero();
            for ni in 0..n {
                let xs = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for &v in xs {
                    let dv = v - mu;
                    vacc += dv * dv;
                }
            }
            (mu, vacc / m)
        })
        .collect();
    let mean: Vec<T> = per_channel.iter().map(|p| p.0).collect();
    let var: Vec<T> = per_channel.iter().map(|p| p.1).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(c * hw)
        .zip(x.par_chunks(c * hw))
        .for_each(|(yn, xn)| {
            for ci in 0..c {
                let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
                let scale = is * g;
                for (yv, &xv) in yn[ci * hw..(ci + 1) * hw].iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]) {
                    *yv = (xv - mu) * scale + b;
                }
            }
        });
    (y, BnSaved { mean, inv_std, var })
}

/// dL/dx, dL/dgamma, dL/dbeta for train-mode batch norm.
pub(crate) fn bn_train_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    saved: &BnSaved<T>,
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let sums: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for k in 0..hw {
                    let g = dy[base + k];
                    s1 += g;
                    s2 += g * (x[base + k] - mu) * is;
                }
            }
            (s1, s2)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|s| s.0).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| s.1).collect();
    // dx = gamma*inv_std/m * (m*dy - sum_dy - xhat * sum_dy_xhat)
    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(c * hw)
        .zip(x.par_chunks(c * hw))
        .zip(dy.par_chunks(c * hw))
        .for_each(|((dxn, xn), dyn_)| {
            for ci in 0..c {
                let (mu, is, g) = (saved.mean[ci], saved.inv_std[ci], gamma[ci]);
                let k1 = g * is / m;
                let (s1, s2) = sums[ci];
                for k in 0..hw {
                    let xhat = (xn[ci * hw + k] - mu) * is;
                    dxn[ci * hw + k] = k1 * (m * dyn_[ci * hw + k] - s1 - xhat * s2);
                }
            }
        });
    (dx, dgamma, dbeta)
}

pub(crate) fn bn_eval_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    _n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(c * hw)
        .zip(x.par_chunks(c * hw))
        .for_each(|(yn, xn)| {
            for ci in 0..c {
                let is = (var[ci] + eps).sqrt().recip();
                let (mu, g, b) = (mean[ci], gamma[ci], beta[ci]);
                let scale = is * g;
                for (yv, &xv) in yn[ci * hw..(ci + 1) * hw].iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]) {
                    *yv = (xv - mu) * scale + b;
                }
            }
        });
    y
}

pub(crate) fn bn_eval_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    var: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let is = (var[ci] + eps).sqrt().recip();
            let (mu, g) = (mean[ci], gamma[ci]);
            for k in 0..hw {
                let gy = dy[base + k];
                dx[base + k] = gy * g * is;
                dgamma[ci] += gy * (x[base + k] - mu) * is;
                dbeta[ci] += gy;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel index permutation for a shuffle with `groups`.
/// Input channel `g*(c/groups)+k` moves to output channel `k*groups+g`.
pub(crate) fn shuffle_perm(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    let mut dst_of_src = vec![0usize; c];
    for g in 0..groups {
        for k in 0..per {
            dst_of_src[g * per + k] = k * groups + g;
        }
    }
    dst_of_src
}
