//! Raw compute kernels behind the tape ops.
//!
//! All kernels are deterministic: when a kernel parallelizes, the work is
//! split so that every output element is produced by exactly one task with a
//! fixed accumulation order, so results are bitwise independent of thread
//! count.

use crate::tensor::Tensor;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// out (m,n) = a (m,k) * b (k,n), all row-major. Overwrites out.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            row.fill(0.0);
            let ar = &a[i * k..(i + 1) * k];
            for (p, &av) in ar.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(br.iter()) {
                    *r += av * bv;
                }
            }
        });
}

fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Matrix product with optional transposes: op(a) (m,k) * op(b) (k,n).
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs rank");
    assert_eq!(b.rank(), 2, "matmul rhs rank");
    let (m, k) = if ta {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if tb {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let at;
    let al = if ta {
        at = transpose(a.shape()[0], a.shape()[1], a.data());
        &at[..]
    } else {
        a.data()
    };
    let bt;
    let bl = if tb {
        bt = transpose(b.shape()[0], b.shape()[1], b.data());
        &bt[..]
    } else {
        b.data()
    };
    let mut out = vec![0.0f32; m * n];
    gemm(m, n, k, al, bl, &mut out);
    Tensor::raw(&[m, n], out)
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), NCHW x OIkk
// ---------------------------------------------------------------------------

pub fn conv_out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Unpacks x (N,C,H,W) into rows of (C*k*k) per output position; row index is
/// (n*OH + oh)*OW + ow.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Vec<f32>, usize, usize) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let ckk = c * k * k;
    let mut cols = vec![0.0f32; n * oh * ow * ckk];
    let xd = x.data();
    cols.par_chunks_mut(oh * ow * ckk)
        .enumerate()
        .for_each(|(ni, sample)| {
            let xbase = ni * c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut sample[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let mut ci = 0;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                row[ci] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                {
                                    xd[xbase + (ch * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                ci += 1;
                            }
                        }
                    }
                }
            }
        });
    (cols, oh, ow)
}

/// y (N,O,OH,OW) = conv(x (N,C,H,W), w (O,C,k,k)).
pub fn conv2d(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (o, ci, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
    assert_eq!(c, ci, "conv channel mismatch");
    assert_eq!(k, wt.shape()[3], "square kernels only");
    let (cols, oh, ow) = im2col(x, k, stride, pad);
    let ckk = c * k * k;
    let rows = n * oh * ow;
    // g (rows, O) = cols (rows, ckk) @ w^T (ckk, O)
    let wt_t = transpose(o, ckk, wt.data());
    let mut g = vec![0.0f32; rows * o];
    gemm(rows, o, ckk, &cols, &wt_t, &mut g);
    // reorder position-major -> channel-major
    let mut y = vec![0.0f32; n * o * oh * ow];
    y.par_chunks_mut(o * oh * ow)
        .enumerate()
        .for_each(|(ni, sample)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = ((ni * oh + oy) * ow + ox) * o;
                    for oc in 0..o {
                        sample[(oc * oh + oy) * ow + ox] = g[r + oc];
                    }
                }
            }
        });
    Tensor::raw(&[n, o, oh, ow], y)
}

/// Gradient of conv wrt its input: scatter gy (N,O,OH,OW) through w (O,C,k,k)
/// back onto an (N,C,h,w) canvas.
pub fn conv2d_grad_input(
    gy: &Tensor,
    wt: &Tensor,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let (n, o, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (ko, c, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
    assert_eq!(o, ko);
    let ckk = c * k * k;
    let rows = n * oh * ow;
    // gy position-major
    let mut gym = vec![0.0f32; rows * o];
    let gyd = gy.data();
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    gym[((ni * oh + oy) * ow + ox) * o + oc] =
                        gyd[((ni * o + oc) * oh + oy) * ow + ox];
                }
            }
        }
    }
    // gcols (rows, ckk) = gym (rows, O) @ w (O, ckk)
    let mut gcols = vec![0.0f32; rows * ckk];
    gemm(rows, ckk, o, &gym, wt.data(), &mut gcols);
    // col2im scatter-add, parallel over samples
    let mut gx = vec![0.0f32; n * c * h * w];
    gx.par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(ni, sample)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &gcols[((ni * oh + oy) * ow + ox) * ckk..][..ckk];
                    let iy0 = (oy * stride) as isize - pad as isize;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let mut ci = 0;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    sample[(ch * h + iy as usize) * w + ix as usize] += row[ci];
                                }
                                ci += 1;
                            }
                        }
                    }
                }
            }
        });
    Tensor::raw(&[n, c, h, w], gx)
}

/// Gradient of conv wrt the kernel: gw (O,C,k,k) = gy^T @ im2col(x).
pub fn conv2d_grad_weight(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    k: usize,
) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (gn, o, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    assert_eq!(n, gn);
    let (cols, coh, cow) = im2col(x, k, stride, pad);
    assert_eq!((coh, cow), (oh, ow), "grad_weight size mismatch");
    let ckk = c * k * k;
    let rows = n * oh * ow;
    let gyd = gy.data();
    let mut gym_t = vec![0.0f32; o * rows]; // (O, rows)
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    gym_t[oc * rows + (ni * oh + oy) * ow + ox] =
                        gyd[((ni * o + oc) * oh + oy) * ow + ox];
                }
            }
        }
    }
    let mut gw = vec![0.0f32; o * ckk];
    gemm(o, ckk, rows, &gym_t, &cols, &mut gw);
    Tensor::raw(&[o, c, k, k], gw)
}

// ---------------------------------------------------------------------------
// Corner-aligned bilinear resize and nearest upsample
// ---------------------------------------------------------------------------

#[inline]
fn resize_coeffs(out_dim: usize, in_dim: usize) -> Vec<(usize, usize, f32)> {
    // (lo index, hi index, frac toward hi); corners map to corners.
    (0..out_dim)
        .map(|i| {
            if out_dim == 1 || in_dim == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f32 * (in_dim - 1) as f32 / (out_dim - 1) as f32;
            let lo = (pos.floor() as usize).min(in_dim - 1);
            let hi = (lo + 1).min(in_dim - 1);
            let f = pos - lo as f32;
            (lo, hi, f)
        })
        .collect()
}

/// Channel-wise corner-aligned bilinear resize of (N,C,H,W) to (N,C,oh,ow).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ys = resize_coeffs(oh, h);
    let xs = resize_coeffs(ow, w);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[i * ow + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        });
    Tensor::raw(&[n, c, oh, ow], out)
}

/// Adjoint of `resize_bilinear`: scatters gy (N,C,oh,ow) back to (N,C,h,w).
pub fn resize_bilinear_adjoint(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let ys = resize_coeffs(oh, h);
    let xs = resize_coeffs(ow, w);
    let gd = gy.data();
    let mut out = vec![0.0f32; n * c * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = src[i * ow + j];
                    dst[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                    dst[y0 * w + x1] += g * fx * (1.0 - fy);
                    dst[y1 * w + x0] += g * (1.0 - fx) * fy;
                    dst[y1 * w + x1] += g * fx * fy;
                }
            }
        });
    Tensor::raw(&[n, c, h, w], out)
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * f, w * f);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / f) * w + j / f];
                }
            }
        });
    Tensor::raw(&[n, c, oh, ow], out)
}

/// Adjoint of nearest upsample: f x f block sum.
pub fn upsample_nearest_adjoint(gy: &Tensor, f: usize) -> Tensor {
    let (n, c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (h, w) = (oh / f, ow / f);
    let gd = gy.data();
    let mut out = vec![0.0f32; n * c * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for di in 0..f {
                        for dj in 0..f {
                            s += src[(i * f + di) * ow + j * f + dj];
                        }
                    }
                    dst[i * w + j] = s;
                }
            }
        });
    Tensor::raw(&[n, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling (the morph primitive)
// ---------------------------------------------------------------------------

/// Snap tolerance in pixel units: grid values meant to address a texel
/// exactly can drift by a few ulp through the [-1,1] normalization round
/// trip (or a grid resize), and identity grids must reproduce the source
/// bit-exactly. The f64 unnormalization keeps the drift well under this
/// band for spatial sides up to a few hundred pixels.
const SNAP: f64 = 1e-5;

#[inline]
fn unnormalize(v: f32, dim: usize) -> f32 {
    let p = (v as f64 + 1.0) * 0.5 * (dim - 1) as f64;
    let r = libm::round(p);
    if (p - r).abs() <= SNAP {
        r as f32
    } else {
        p as f32
    }
}

struct GridPoint {
    x0: isize,
    y0: isize,
    fx: f32,
    fy: f32,
}

fn grid_points(grid: &Tensor, src_h: usize, src_w: usize) -> Vec<GridPoint> {
    let (n, _, gh, gw) = (
        grid.shape()[0],
        grid.shape()[1],
        grid.shape()[2],
        grid.shape()[3],
    );
    let gd = grid.data();
    let hw = gh * gw;
    let mut pts = Vec::with_capacity(n * hw);
    for ni in 0..n {
        let xs = &gd[ni * 2 * hw..ni * 2 * hw + hw];
        let ys = &gd[ni * 2 * hw + hw..ni * 2 * hw + 2 * hw];
        for i in 0..hw {
            let px = unnormalize(xs[i], src_w);
            let py = unnormalize(ys[i], src_h);
            let x0 = libm::floorf(px) as isize;
            let y0 = libm::floorf(py) as isize;
            pts.push(GridPoint {
                x0,
                y0,
                fx: px - x0 as f32,
                fy: py - y0 as f32,
            });
        }
    }
    pts
}

/// Gathers src (N,C,H,W) at grid (N,2,gh,gw) coordinates; grid channel 0 is
/// x in [-1,1], channel 1 is y. Samples outside the support fade to zero.
pub fn bilinear_sample(src: &Tensor, grid: &Tensor) -> Tensor {
    let (n, c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
    assert_eq!(grid.shape()[0], n, "grid batch mismatch");
    assert_eq!(grid.shape()[1], 2, "grid needs 2 coordinate channels");
    let (gh, gw) = (grid.shape()[2], grid.shape()[3]);
    let pts = grid_points(grid, h, w);
    let sd = src.data();
    let mut out = vec![0.0f32; n * c * gh * gw];
    out.par_chunks_mut(c * gh * gw)
        .enumerate()
        .for_each(|(ni, sample)| {
            let spts = &pts[ni * gh * gw..(ni + 1) * gh * gw];
            let sbase = ni * c * h * w;
            for (pi, pt) in spts.iter().enumerate() {
                let (x0, y0, fx, fy) = (pt.x0, pt.y0, pt.fx, pt.fy);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let in_x0 = x0 >= 0 && x0 < w as isize;
                let in_x1 = x0 + 1 >= 0 && x0 + 1 < w as isize;
                let in_y0 = y0 >= 0 && y0 < h as isize;
                let in_y1 = y0 + 1 >= 0 && y0 + 1 < h as isize;
                for ch in 0..c {
                    let plane = sbase + ch * h * w;
                    let mut acc = 0.0f32;
                    if in_y0 {
                        let r = plane + y0 as usize * w;
                        if in_x0 && w00 != 0.0 {
                            acc += sd[r + x0 as usize] * w00;
                        }
                        if in_x1 && w01 != 0.0 {
                            acc += sd[r + (x0 + 1) as usize] * w01;
                        }
                    }
                    if in_y1 {
                        let r = plane + (y0 + 1) as usize * w;
                        if in_x0 && w10 != 0.0 {
                            acc += sd[r + x0 as usize] * w10;
                        }
                        if in_x1 && w11 != 0.0 {
                            acc += sd[r + (x0 + 1) as usize] * w11;
                        }
                    }
                    sample[ch * gh * gw + pi] = acc;
                }
            }
        });
    Tensor::raw(&[n, c, gh, gw], out)
}

/// Gradient of bilinear_sample wrt the source: scatter of gout by the same
/// interpolation weights.
pub fn bilinear_grad_src(gout: &Tensor, grid: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, gh, gw) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    let pts = grid_points(grid, h, w);
    let gd = gout.data();
    let mut out = vec![0.0f32; n * c * h * w];
    out.par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(ni, sample)| {
            let spts = &pts[ni * gh * gw..(ni + 1) * gh * gw];
            for (pi, pt) in spts.iter().enumerate() {
                let (x0, y0, fx, fy) = (pt.x0, pt.y0, pt.fx, pt.fy);
                let weights = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1, (1.0 - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ];
                for ch in 0..c {
                    let g = gd[(ni * c + ch) * gh * gw + pi];
                    if g == 0.0 {
                        continue;
                    }
                    for &(xx, yy, wt) in &weights {
                        if wt != 0.0 && xx >= 0 && xx < w as isize && yy >= 0 && yy < h as isize {
                            sample[(ch * h + yy as usize) * w + xx as usize] += g * wt;
                        }
                    }
                }
            }
        });
    Tensor::raw(&[n, c, h, w], out)
}

/// Gradient of bilinear_sample wrt the grid coordinates (normalized units).
pub fn bilinear_grad_grid(src: &Tensor, grid: &Tensor, gout: &Tensor) -> Tensor {
    let (n, c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2], src.shape()[3]);
    let (gh, gw) = (grid.shape()[2], grid.shape()[3]);
    let pts = grid_points(grid, h, w);
    let sd = src.data();
    let gd = gout.data();
    let sx = 0.5 * (w - 1) as f32; // d px / d x_norm
    let sy = 0.5 * (h - 1) as f32;
    let mut out = vec![0.0f32; n * 2 * gh * gw];
    out.par_chunks_mut(2 * gh * gw)
        .enumerate()
        .for_each(|(ni, sample)| {
            let spts = &pts[ni * gh * gw..(ni + 1) * gh * gw];
            let sbase = ni * c * h * w;
            for (pi, pt) in spts.iter().enumerate() {
                let (x0, y0, fx, fy) = (pt.x0, pt.y0, pt.fx, pt.fy);
                let tex = |xx: isize, yy: isize, ch: usize| -> f32 {
                    if xx >= 0 && xx < w as isize && yy >= 0 && yy < h as isize {
                        sd[sbase + (ch * h + yy as usize) * w + xx as usize]
                    } else {
                        0.0
                    }
                };
                let mut gx = 0.0f32;
                let mut gy = 0.0f32;
                for ch in 0..c {
                    let g = gd[(ni * c + ch) * gh * gw + pi];
                    if g == 0.0 {
                        continue;
                    }
                    let t00 = tex(x0, y0, ch);
                    let t01 = tex(x0 + 1, y0, ch);
                    let t10 = tex(x0, y0 + 1, ch);
                    let t11 = tex(x0 + 1, y0 + 1, ch);
                    gx += g * ((1.0 - fy) * (t01 - t00) + fy * (t11 - t10));
                    gy += g * ((1.0 - fx) * (t10 - t00) + fx * (t11 - t01));
                }
                sample[pi] = gx * sx;
                sample[gh * gw + pi] = gy * sy;
            }
        });
    Tensor::raw(&[n, 2, gh, gw], out)
}

// ---------------------------------------------------------------------------
// Elementwise transcendentals (libm keeps them platform-stable)
// ---------------------------------------------------------------------------

#[inline]
pub fn tanh(x: f32) -> f32 {
    libm::tanhf(x)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + libm::log1pf(libm::expf(-x.abs()))
}

#[inline]
pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}
