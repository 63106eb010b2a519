//! Register-tiled direct convolution for the hot case: 3×3×3 kernels, stride 1.
//!
//! im2col + GEMM is memory bound when the output has few channels (the column
//! matrix is touched once per output channel), so on CPUs with AVX-512 the
//! full-resolution layers use these kernels instead. Other CPUs take the GEMM
//! path in `conv`.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

const LANES: usize = 8;
/// Output channels per register tile.
const CB: usize = 8;
const K: usize = 3;
const TAPS: usize = K * K * K;

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

pub(crate) fn supports(k: usize, stride: usize, pad: usize) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        k == K && stride == 1 && pad < K && std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = (k, stride, pad);
        false
    }
}

/// Zero-padded copy of one sample, rows widened so every vector load stays in bounds.
struct Padded {
    data: Vec<f64>,
    dp: usize,
    hp: usize,
    rp: usize,
}

impl Padded {
    fn new(x: &[f64], c: usize, [d, h, w]: [usize; 3], pad: usize, row_len: usize) -> Padded {
        let (dp, hp) = (d + 2 * pad, h + 2 * pad);
        let rp = row_len.max(w + 2 * pad);
        let mut data = vec![0.0; c * dp * hp * rp];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[((ci * d + z) * h + y) * w..][..w];
                    let dst = ((ci * dp + z + pad) * hp + y + pad) * rp + pad;
                    data[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        Padded { data, dp, hp, rp }
    }

    #[inline(always)]
    fn row(&self, c: usize, z: usize, y: usize) -> &[f64] {
        &self.data[((c * self.dp + z) * self.hp + y) * self.rp..][..self.rp]
    }
}

/// Weights `[co, ci, 3, 3, 3]` regrouped as `[co_block][ci][tap][CB]`, zero-filled past `c_out`.
fn block_weights(w: &[f64], c_out: usize, c_in: usize) -> Vec<f64> {
    let blocks = c_out.div_ceil(CB);
    let mut out = vec![0.0; blocks * c_in * TAPS * CB];
    for co in 0..c_out {
        let (b, c) = (co / CB, co % CB);
        for ci in 0..c_in {
            for t in 0..TAPS {
                out[((b * c_in + ci) * TAPS + t) * CB + c] = w[(co * c_in + ci) * TAPS + t];
            }
        }
    }
    out
}

/// One `CB × (V·8)` output tile at `(z, y, x0..)`; returns the accumulated values.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn fwd_tile<const V: usize>(
    xp: &Padded,
    wblk: &[f64],
    c_in: usize,
    z: usize,
    y: usize,
    x0: usize,
) -> [[f64; 16]; CB] {
    let mut acc = [[_mm512_setzero_pd(); V]; CB];
    for ci in 0..c_in {
        for kd in 0..K {
            for kh in 0..K {
                let row = xp.row(ci, z + kd, y + kh);
                let wrow = &wblk[((ci * K + kd) * K + kh) * K * CB..][..K * CB];
                for kw in 0..K {
                    let seg = &row[x0 + kw..x0 + kw + V * LANES];
                    // SAFETY: `seg` holds exactly V·8 contiguous values.
                    let xv: [__m512d; V] = std::array::from_fn(|v| unsafe {
                        _mm512_loadu_pd(seg.as_ptr().add(v * LANES))
                    });
                    let wv = &wrow[kw * CB..kw * CB + CB];
                    for c in 0..CB {
                        let wc = _mm512_set1_pd(wv[c]);
                        for v in 0..V {
                            acc[c][v] = _mm512_fmadd_pd(wc, xv[v], acc[c][v]);
                        }
                    }
                }
            }
        }
    }
    let mut out = [[0.0; 16]; CB];
    for c in 0..CB {
        for v in 0..V {
            // SAFETY: out[c] has room for two vectors and V ≤ 2.
            unsafe { _mm512_storeu_pd(out[c].as_mut_ptr().add(v * LANES), acc[c][v]) };
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn correlate_avx512(
    xp: &Padded,
    wb: &[f64],
    c_in: usize,
    c_out: usize,
    [od, oh, ow]: [usize; 3],
    out: &mut [f64],
) {
    let block_len = c_in * TAPS * CB;
    for cb in 0..c_out.div_ceil(CB) {
        let wblk = &wb[cb * block_len..(cb + 1) * block_len];
        for z in 0..od {
            for y in 0..oh {
                let mut x0 = 0;
                while x0 < ow {
                    let (tile, width) = if x0 + LANES < ow {
                        (fwd_tile::<2>(xp, wblk, c_in, z, y, x0), 2 * LANES)
                    } else {
                        (fwd_tile::<1>(xp, wblk, c_in, z, y, x0), LANES)
                    };
                    let n_valid = (ow - x0).min(width);
                    for (c, vals) in tile.iter().enumerate() {
                        let co = cb * CB + c;
                        if co >= c_out {
                            break;
                        }
                        out[((co * od + z) * oh + y) * ow + x0..][..n_valid]
                            .copy_from_slice(&vals[..n_valid]);
                    }
                    x0 += width;
                }
            }
        }
    }
}

/// Stride-1 3×3×3 correlation of one sample: `x [c_in, d, h, w]` → `[c_out, ...]`.
fn correlate(
    x: &[f64],
    c_in: usize,
    dims: [usize; 3],
    pad: usize,
    w_blocked: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let out_dims = dims.map(|d| d + 2 * pad + 1 - K);
    let row_len = round_up(out_dims[2], 2 * LANES) + K - 1;
    let xp = Padded::new(x, c_in, dims, pad, row_len);
    let mut out = vec![0.0; c_out * out_dims.iter().product::<usize>()];
    #[cfg(target_arch = "x86_64")]
    // SAFETY: callers only reach this module after `supports` detected AVX-512.
    unsafe {
        correlate_avx512(&xp, w_blocked, c_in, c_out, out_dims, &mut out)
    };
    out
}

/// Forward pass for a batch; `x [n, c_in, d, h, w]`, `w [c_out, c_in, 3, 3, 3]`.
pub(crate) fn forward(
    n: usize,
    c_in: usize,
    dims: [usize; 3],
    pad: usize,
    x: &[f64],
    w: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let wb = block_weights(w, c_out, c_in);
    let sin: usize = dims.iter().product();
    let mut out = Vec::new();
    for s in 0..n {
        out.extend(correlate(
            &x[s * c_in * sin..(s + 1) * c_in * sin],
            c_in,
            dims,
            pad,
            &wb,
            c_out,
        ));
    }
    out
}

/// Input gradient: correlation of `dy` with the flipped, channel-transposed kernel.
pub(crate) fn backward_input(
    n: usize,
    c_in: usize,
    c_out: usize,
    out_dims: [usize; 3],
    pad: usize,
    w: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..TAPS {
                wt[(ci * c_out + co) * TAPS + (TAPS - 1 - t)] = w[(co * c_in + ci) * TAPS + t];
            }
        }
    }
    let wb = block_weights(&wt, c_in, c_out);
    let sout: usize = out_dims.iter().product();
    let mut dx = Vec::new();
    for s in 0..n {
        dx.extend(correlate(
            &dy[s * c_out * sout..(s + 1) * c_out * sout],
            c_out,
            out_dims,
            K - 1 - pad,
            &wb,
            c_in,
        ));
    }
    dx
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
fn dw_avx512(
    xp: &Padded,
    dyp: &[f64],
    rq: usize,
    c_in: usize,
    c_out: usize,
    [od, oh, _]: [usize; 3],
    dw: &mut [f64],
) {
    let segs = rq / LANES;
    let plane = od * oh * rq;
    for cb in 0..c_out.div_ceil(CB) {
        let dyb = &dyp[cb * CB * plane..(cb + 1) * CB * plane];
        for ci in 0..c_in {
            for kd in 0..K {
                for kh in 0..K {
                    let mut acc = [[_mm512_setzero_pd(); K]; CB];
                    for z in 0..od {
                        for y in 0..oh {
                            let xrow = xp.row(ci, z + kd, y + kh);
                            let base = (z * oh + y) * rq;
                            for s in 0..segs {
                                let x0 = s * LANES;
                                let seg = &xrow[x0..x0 + LANES + K - 1];
                                // SAFETY: `seg` covers all three shifted 8-wide loads.
                                let xs: [__m512d; K] = std::array::from_fn(|kw| unsafe {
                                    _mm512_loadu_pd(seg.as_ptr().add(kw))
                                });
                                for c in 0..CB {
                                    let d = &dyb[c * plane + base + x0..][..LANES];
                                    // SAFETY: `d` holds 8 values.
                                    let dv = unsafe { _mm512_loadu_pd(d.as_ptr()) };
                                    for kw in 0..K {
                                        acc[c][kw] = _mm512_fmadd_pd(dv, xs[kw], acc[c][kw]);
                                    }
                                }
                            }
                        }
                    }
                    for (c, per_tap) in acc.iter().enumerate() {
                        let co = cb * CB + c;
                        if co >= c_out {
                            break;
                        }
                        for (kw, v) in per_tap.iter().enumerate() {
                            dw[(co * c_in + ci) * TAPS + (kd * K + kh) * K + kw] +=
                                _mm512_reduce_add_pd(*v);
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient accumulated over the batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_weight(
    n: usize,
    c_in: usize,
    c_out: usize,
    dims: [usize; 3],
    out_dims: [usize; 3],
    pad: usize,
    x: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let mut dw = vec![0.0; c_out * c_in * TAPS];
    let sin: usize = dims.iter().product();
    let sout: usize = out_dims.iter().product();
    let [od, oh, ow] = out_dims;
    let rq = round_up(ow, LANES);
    let padded_co = round_up(c_out, CB);
    for s in 0..n {
        let xp = Padded::new(
            &x[s * c_in * sin..(s + 1) * c_in * sin],
            c_in,
            dims,
            pad,
            rq + K - 1,
        );
        let mut dyp = vec![0.0; padded_co * od * oh * rq];
        let dys = &dy[s * c_out * sout..(s + 1) * c_out * sout];
        for co in 0..c_out {
            for z in 0..od {
                for y in 0..oh {
                    let src = &dys[((co * od + z) * oh + y) * ow..][..ow];
                    let dst = ((co * od + z) * oh + y) * rq;
                    dyp[dst..dst + ow].copy_from_slice(src);
                }
            }
        }
        #[cfg(target_arch = "x86_64")]
        // SAFETY: callers only reach this module after `supports` detected AVX-512.
        unsafe {
            dw_avx512(&xp, &dyp, rq, c_in, c_out, out_dims, &mut dw)
        };
    }
    dw
}
