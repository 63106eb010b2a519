//! 3-D convolution through chunked im2col and a dense GEMM.
//!
//! Columns are laid out `[K × P]` with `K = C_in · k³` ordered like the weight
//! tensor `[C_out, C_in, k, k, k]`, and `P` the output positions of a chunk of
//! output depth slices, so the forward pass is a single `W · col` product.

use crate::direct;
use crate::error::{NnError, Result};

/// Upper bound on the column buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
        let k = w[2];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = x[2 + a] + 2 * pad;
            if span < k {
                return Err(NnError::Shape(format!(
                    "conv kernel {k} larger than padded input {x:?}"
                )));
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom {
            n: x[0],
            c_in: x[1],
            c_out: w[0],
            k,
            stride,
            pad,
            input: [x[2], x[3], x[4]],
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.n,
            self.c_out,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn kk(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    /// Pointwise convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let plane = self.output[1] * self.output[2];
        let per = (COL_BUDGET / (self.kk() * plane).max(1)).max(1);
        (0..self.output[0])
            .step_by(per)
            .map(|z0| (z0, (z0 + per).min(self.output[0])))
            .collect()
    }
}

/// Fill `col` (`[K × P_chunk]`) for output slices `z0..z1` of one sample.
fn im2col(g: &ConvGeom, x: &[f64], z0: usize, z1: usize, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let pc = (z1 - z0) * ho * wo;
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.c_in {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    // valid output x-range for this kernel tap
                    let lo = ((p - kw as isize).max(0) as usize).div_ceil(s);
                    let hi = if (w as isize + p - kw as isize) <= 0 {
                        0
                    } else {
                        ((w as isize + p - kw as isize - 1) as usize / s + 1).min(wo)
                    };
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize - p + kd as isize;
                        for oy in 0..ho {
                            let iy = (oy * s) as isize - p + kh as isize;
                            let seg = &mut dst
                                [((oz - z0) * ho + oy) * wo..((oz - z0) * ho + oy + 1) * wo];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize || lo >= hi
                            {
                                seg.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..];
                            seg[..lo].fill(0.0);
                            seg[hi..].fill(0.0);
                            if s == 1 {
                                let ix0 = (lo as isize - p + kw as isize) as usize;
                                seg[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                            } else {
                                for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = src[(ox * s) + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of `col` back into the input gradient; transpose of `im2col`.
fn col2im(g: &ConvGeom, col: &[f64], z0: usize, z1: usize, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let pc = (z1 - z0) * ho * wo;
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &col[row * pc..(row + 1) * pc];
                    let lo = ((p - kw as isize).max(0) as usize).div_ceil(s);
                    let hi = if (w as isize + p - kw as isize) <= 0 {
                        0
                    } else {
                        ((w as isize + p - kw as isize - 1) as usize / s + 1).min(wo)
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize - p + kd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s) as isize - p + kh as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let seg = &src[((oz - z0) * ho + oy) * wo..];
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..];
                            for ox in lo..hi {
                                dst[ox * s + kw - g.pad] += seg[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C = A · B + beta · C` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(
        (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm output view out of bounds"
    );
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is borrowed mutably and exclusively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (p, kk, sin) = (g.out_spatial(), g.kk(), g.in_spatial());
    if direct::supports(g.k, g.stride, g.pad) {
        let mut out = direct::forward(g.n, g.c_in, g.input, g.pad, x, w, g.c_out);
        if let Some(b) = bias {
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bc = b[i % g.c_out];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        return out;
    }
    let mut out = vec![0.0; g.n * g.c_out * p];
    let mut col = Vec::new();
    for n in 0..g.n {
        let xn = &x[n * g.c_in * sin..(n + 1) * g.c_in * sin];
        let on = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        if g.is_pointwise() {
            gemm(g.c_out, kk, p, w, (kk, 1), xn, (p, 1), 0.0, on, (p, 1));
        } else {
            let plane = g.output[1] * g.output[2];
            for (z0, z1) in g.chunks() {
                let pc = (z1 - z0) * plane;
                col.resize(kk * pc, 0.0);
                im2col(g, xn, z0, z1, &mut col);
                gemm(
                    g.c_out,
                    kk,
                    pc,
                    w,
                    (kk, 1),
                    &col,
                    (pc, 1),
                    0.0,
                    &mut on[z0 * plane..],
                    (p, 1),
                );
            }
        }
        if let Some(b) = bias {
            for (c, &bc) in b.iter().enumerate() {
                on[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

/// Input and weight gradients for an output gradient `dy`.
pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, kk, sin) = (g.out_spatial(), g.kk(), g.in_spatial());
    if direct::supports(g.k, g.stride, g.pad) {
        let dx =
            need_x.then(|| direct::backward_input(g.n, g.c_in, g.c_out, g.output, g.pad, w, dy));
        let dw = need_w.then(|| {
            direct::backward_weight(g.n, g.c_in, g.c_out, g.input, g.output, g.pad, x, dy)
        });
        return (dx, dw);
    }
    let mut dx = need_x.then(|| vec![0.0; g.n * g.c_in * sin]);
    let mut dw = need_w.then(|| vec![0.0; g.c_out * kk]);
    let mut col = Vec::new();
    for n in 0..g.n {
        let xn = &x[n * g.c_in * sin..(n + 1) * g.c_in * sin];
        let dyn_ = &dy[n * g.c_out * p..(n + 1) * g.c_out * p];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(g.c_out, p, kk, dyn_, (p, 1), xn, (1, p), 1.0, dw, (kk, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * g.c_in * sin..(n + 1) * g.c_in * sin];
                gemm(kk, g.c_out, p, w, (1, kk), dyn_, (p, 1), 1.0, dxn, (p, 1));
            }
            continue;
        }
        let plane = g.output[1] * g.output[2];
        for (z0, z1) in g.chunks() {
            let pc = (z1 - z0) * plane;
            let dyc = &dyn_[z0 * plane..];
            col.resize(kk * pc, 0.0);
            if let Some(dw) = dw.as_mut() {
                im2col(g, xn, z0, z1, &mut col);
                gemm(
                    g.c_out,
                    pc,
                    kk,
                    dyc,
                    (p, 1),
                    &col,
                    (1, pc),
                    1.0,
                    dw,
                    (kk, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    g.c_out,
                    pc,
                    w,
                    (1, kk),
                    dyc,
                    (p, 1),
                    0.0,
                    &mut col,
                    (pc, 1),
                );
                col2im(
                    g,
                    &col,
                    z0,
                    z1,
                    &mut dx[n * g.c_in * sin..(n + 1) * g.c_in * sin],
                );
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.k;
        let mut out = vec![0.0; g.n * g.c_out * od * oh * ow];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.c_in {
                                for a in 0..k {
                                    for b in 0..k {
                                        for c in 0..k {
                                            let iz = (z * g.stride + a) as isize - g.pad as isize;
                                            let iy = (y * g.stride + b) as isize - g.pad as isize;
                                            let ix = (xx * g.stride + c) as isize - g.pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((n * g.c_in + ci) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi = (((co * g.c_in + ci) * k + a) * k + b) * k + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * g.c_out + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 ^ seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn matches_direct_convolution() {
        for &(xs, ws, stride, pad) in &[
            ([2usize, 3, 5, 4, 6], [4usize, 3, 3, 3, 3], 1usize, 1usize),
            ([1, 2, 6, 6, 6], [3, 2, 3, 3, 3], 2, 1),
            ([1, 2, 5, 7, 4], [2, 2, 3, 3, 3], 2, 0),
            ([2, 4, 3, 3, 3], [5, 4, 1, 1, 1], 1, 0),
            ([1, 1, 4, 4, 4], [1, 1, 3, 3, 3], 1, 2),
            ([2, 9, 7, 5, 19], [11, 9, 3, 3, 3], 1, 1),
            ([1, 3, 4, 6, 33], [17, 3, 3, 3, 3], 1, 0),
        ] {
            let g = ConvGeom::new(&xs, &ws, stride, pad).unwrap();
            let x = pseudo(xs.iter().product(), 1);
            let w = pseudo(ws.iter().product(), 2);
            let got = forward(&g, &x, &w, None);
            let want = naive(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{xs:?} {ws:?} s{stride} p{pad}");
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x), dy> = <x, conv^T(dy)> and likewise for w
        for &(xs, ws, stride, pad) in &[
            ([2usize, 3, 5, 4, 6], [4usize, 3, 3, 3, 3], 1usize, 1usize),
            ([1, 2, 6, 5, 6], [3, 2, 3, 3, 3], 2, 1),
            ([2, 4, 3, 3, 3], [5, 4, 1, 1, 1], 1, 0),
            ([2, 9, 7, 5, 19], [11, 9, 3, 3, 3], 1, 1),
            ([1, 3, 4, 6, 33], [17, 3, 3, 3, 3], 1, 0),
            ([1, 2, 4, 4, 4], [3, 2, 3, 3, 3], 1, 2),
        ] {
            let g = ConvGeom::new(&xs, &ws, stride, pad).unwrap();
            let x = pseudo(xs.iter().product(), 3);
            let w = pseudo(ws.iter().product(), 4);
            let dy = pseudo(g.out_shape().iter().product(), 5);
            let y = forward(&g, &x, &w, None);
            let (dx, dw) = backward(&g, &x, &w, &dy, true, true);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.iter().zip(dx.unwrap()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(dw.unwrap()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }
}
