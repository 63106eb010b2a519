//! Image fidelity metrics: PSNR, windowed 3D SSIM and multi-reference SSIM.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pairwise (cascade) summation; fixed association order regardless of threading.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `10 log10(range^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    a.check_geometry(b)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    let sq: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        SsimParams {
            window: SSIM_WINDOW,
            k1: SSIM_K1,
            k2: SSIM_K2,
            data_range,
        }
    }
}

/// Sums over every length-`w` run along `axis` (valid positions only).
fn window_sums(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w;
    let stride = |d: [usize; 3]| [d[1] * d[2], d[2], 1];
    let (si, so) = (stride(dims), stride(out_dims));
    let mut out = vec![0.0; out_dims[0] * out_dims[1] * out_dims[2]];
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let base = i * si[0] + j * si[1] + k * si[2];
                let mut s = 0.0;
                for q in 0..w {
                    s += data[base + q * si[axis]];
                }
                out[i * so[0] + j * so[1] + k * so[2]] = s;
            }
        }
    }
    (out, out_dims)
}

fn box_mean(data: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let (s0, d0) = window_sums(data, dims, 0, w);
    let (s1, d1) = window_sums(&s0, d0, 1, w);
    let (s2, _) = window_sums(&s1, d1, 2, w);
    let n = (w * w * w) as f64;
    s2.into_iter().map(|v| v / n).collect()
}

/// Per-window SSIM values over all valid `w³` window positions.
pub fn ssim_map(a: &Volume, b: &Volume, params: &SsimParams) -> Result<Vec<f64>> {
    a.check_geometry(b)?;
    let w = params.window;
    let dims = a.dims();
    if w % 2 == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "SSIM window must be odd, got {w}"
        )));
    }
    if dims.iter().any(|&d| d < w) {
        return Err(Error::InvalidArgument(format!(
            "SSIM window {w} larger than volume dims {dims:?}"
        )));
    }
    if !(params.data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data_range must be positive, got {}",
            params.data_range
        )));
    }
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mx, my) = (box_mean(x, dims, w), box_mean(y, dims, w));
    let (mxx, myy, mxy) = (
        box_mean(&xx, dims, w),
        box_mean(&yy, dims, w),
        box_mean(&xy, dims, w),
    );
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    Ok((0..mx.len())
        .map(|i| ssim_window(mx[i], my[i], mxx[i], myy[i], mxy[i], c1, c2))
        .collect())
}

#[inline]
pub(crate) fn ssim_window(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64, c1: f64, c2: f64) -> f64 {
    let vx = mxx - mx * mx;
    let vy = myy - my * my;
    let cov = mxy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

pub fn ssim(a: &Volume, b: &Volume, params: &SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, params)?;
    Ok(pairwise_sum(&map) / map.len() as f64)
}

fn content_key(v: &Volume) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(v.to_bytes());
    h.update(
        v.data()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect::<Vec<u8>>(),
    );
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize()[..32]);
    key
}

/// Mean SSIM against `n_refs` references drawn without replacement. The pool is
/// put in a canonical (content-hash) order first, so the selection depends only
/// on the pool's contents and the seed.
pub fn mr_ssim(
    generated: &Volume,
    references: &[Volume],
    n_refs: usize,
    seed: u64,
    params: &SsimParams,
) -> Result<f64> {
    if n_refs == 0 || references.len() < n_refs {
        return Err(Error::InvalidArgument(format!(
            "need at least {n_refs} (>= 1) references, got {}",
            references.len()
        )));
    }
    let mut order: Vec<(usize, [u8; 32])> =
        references.iter().map(content_key).enumerate().collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut canonical: Vec<usize> = order.into_iter().map(|(i, _)| i).collect();
    canonical.shuffle(&mut rng::stream(seed, "mr-ssim", &[]));
    let scores = canonical[..n_refs]
        .iter()
        .map(|&i| ssim(generated, &references[i], params))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&scores) / n_refs as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSource {
    Explicit,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
    pub data_range_source: RangeSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mr_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assd_white: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assd_pial: Option<f64>,
    #[serde(skip)]
    pub ssim_map: Option<Vec<f64>>,
}

/// PSNR + SSIM of `generated` against `reference`. Without an explicit range the
/// reference's `max - min` is used (1.0 if the reference is constant).
pub fn evaluate(
    generated: &Volume,
    reference: &Volume,
    data_range: Option<f64>,
    keep_map: bool,
) -> Result<MetricReport> {
    let (range, source) = match data_range {
        Some(r) => (r, RangeSource::Explicit),
        None => {
            let (lo, hi) = reference.min_max();
            let r = hi - lo;
            (if r > 0.0 { r } else { 1.0 }, RangeSource::Reference)
        }
    };
    let params = SsimParams::with_range(range);
    let map = ssim_map(generated, reference, &params)?;
    let ssim = pairwise_sum(&map) / map.len() as f64;
    Ok(MetricReport {
        psnr: psnr(generated, reference, range)?,
        ssim,
        data_range: range,
        data_range_source: source,
        mr_ssim: None,
        assd_white: None,
        assd_pial: None,
        ssim_map: keep_map.then_some(map),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use rand::Rng;

    fn random(seed: u64, dims: [usize; 3]) -> Volume {
        let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let mut r = rng::stream(seed, "metrics-test", &[]);
        Volume::new(grid, (0..grid.len()).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    /// Direct per-window evaluation, no separable sums.
    fn naive_ssim(a: &Volume, b: &Volume, p: &SsimParams) -> f64 {
        let w = p.window;
        let [nx, ny, nz] = a.dims();
        let c1 = (p.k1 * p.data_range).powi(2);
        let c2 = (p.k2 * p.data_range).powi(2);
        let n = (w * w * w) as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..=nx - w {
            for j in 0..=ny - w {
                for k in 0..=nz - w {
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for di in 0..w {
                        for dj in 0..w {
                            for dk in 0..w {
                                let x = a.get(i + di, j + dj, k + dk);
                                let y = b.get(i + di, j + dj, k + dk);
                                sx += x;
                                sy += y;
                                sxx += x * x;
                                syy += y * y;
                                sxy += x * y;
                            }
                        }
                    }
                    let (mx, my) = (sx / n, sy / n);
                    let vx = sxx / n - mx * mx;
                    let vy = syy / n - my * my;
                    let cov = sxy / n - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_cases() {
        let a = random(1, [6, 5, 4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = random(2, [6, 5, 4]);
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a.data()[i] - c.data()[i]).powi(2);
        }
        mse /= a.len() as f64;
        let naive = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &c, 1.0).unwrap() - naive).abs() < 1e-9);
        // only |c| matters for constant offsets
        assert_eq!(
            psnr(&a, &a.map(|v| v + 0.25), 1.0).unwrap(),
            psnr(&a, &a.map(|v| v - 0.25), 1.0).unwrap()
        );
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random(3, [10, 9, 8]);
        let p = SsimParams::with_range(1.0);
        assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
        let grid = *a.grid();
        let hc = Volume::from_fn(grid, |q| {
            if (q[0] as i64 + q[1] as i64 + q[2] as i64) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let inv = hc.map(|v| 1.0 - v);
        assert!(ssim(&hc, &inv, &p).unwrap() < 0.2);
    }

    #[test]
    fn ssim_matches_naive() {
        let a = random(4, [11, 9, 8]);
        let b = random(5, [11, 9, 8]);
        for w in [3, 7] {
            let p = SsimParams {
                window: w,
                ..SsimParams::with_range(1.0)
            };
            assert!((ssim(&a, &b, &p).unwrap() - naive_ssim(&a, &b, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_symmetry_and_rescaling() {
        let a = random(6, [9, 9, 9]);
        let b = random(7, [9, 9, 9]);
        let p = SsimParams::with_range(1.0);
        let ab = ssim(&a, &b, &p).unwrap();
        assert!((ab - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        // the luminance term is not offset invariant, so only the scale part applies
        let s = 3.5;
        let scaled = ssim(
            &a.map(|v| s * v),
            &b.map(|v| s * v),
            &SsimParams::with_range(s),
        )
        .unwrap();
        assert!((scaled - ab).abs() < 1e-6);
    }

    #[test]
    fn ssim_errors() {
        let a = random(8, [5, 5, 5]);
        let p = SsimParams::with_range(1.0);
        assert!(ssim(&a, &a, &p).is_err());
        let even = SsimParams { window: 4, ..p };
        assert!(ssim(&a, &a, &even).is_err());
        assert!(ssim(&a, &random(8, [5, 5, 6]), &SsimParams { window: 3, ..p }).is_err());
    }

    #[test]
    fn mr_ssim_cases() {
        let g = random(9, [8, 8, 8]);
        let p = SsimParams::with_range(1.0);
        let same = vec![g.clone(); 10];
        assert_eq!(mr_ssim(&g, &same, 10, 1, &p).unwrap(), 1.0);
        let r = random(10, [8, 8, 8]);
        assert_eq!(
            mr_ssim(&g, std::slice::from_ref(&r), 1, 3, &p).unwrap(),
            ssim(&g, &r, &p).unwrap()
        );
        let pool: Vec<Volume> = (0..6).map(|i| random(20 + i, [8, 8, 8])).collect();
        let mut rev = pool.clone();
        rev.reverse();
        assert_eq!(
            mr_ssim(&g, &pool, 3, 5, &p).unwrap(),
            mr_ssim(&g, &rev, 3, 5, &p).unwrap()
        );
        assert!(mr_ssim(&g, &pool, 7, 5, &p).is_err());
    }

    #[test]
    fn report_serializes_infinity() {
        let a = random(11, [8, 8, 8]);
        let rep = evaluate(&a, &a, None, false).unwrap();
        assert_eq!(rep.ssim, 1.0);
        assert_eq!(rep.data_range_source, RangeSource::Reference);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["psnr"], "inf");
    }
}
