//! Signed distance maps for binary lumen masks.
//!
//! Distances are Euclidean between pixel centers, measured to the nearest
//! opposite-class pixel. Values are negative inside the foreground, clamped
//! to `±clamp_px`, then divided by `clamp_px` so the stored range is [-1, 1].

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensorio::check_binary;

const INF: f64 = 1e20;

/// Clamped, scale-normalized signed distance representation of a mask.
#[derive(Debug, Clone)]
pub struct SdfMap {
    /// Values in [-1, 1]; negative inside the foreground.
    pub values: Array2<f64>,
    /// Clamp radius in pixels used for normalization.
    pub clamp_px: f64,
    /// True when the mask had a single class, so every distance saturated.
    pub saturated: bool,
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
/// Returns `d(p) = min_q (p-q)^2 + f(q)`.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        let mut s;
        loop {
            let vk = v[k];
            s = ((f[q] + (q * q) as f64) - (f[vk] + (vk * vk) as f64))
                / (2.0 * q as f64 - 2.0 * vk as f64);
            if s <= z[k] {
                if k == 0 {
                    // replace the degenerate head parabola
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    // Handle the case where f[0] itself is INF but v[0] stayed 0.
    let mut j = 0usize;
    for p in 0..n {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let vj = v[j];
        let dp = p as f64 - vj as f64;
        d[p] = dp * dp + f[vj];
    }
}

/// Exact squared Euclidean distance to the nearest pixel where `feature` is
/// true. Pixels with no feature anywhere get `INF`.
fn squared_edt(feature: &Array2<bool>) -> Array2<f64> {
    let (h, w) = feature.dim();
    let mut g = Array2::<f64>::zeros((h, w));
    let n = h.max(w);
    let mut f_buf = vec![0.0; n];
    let mut d_buf = vec![0.0; n];
    let mut v_buf = vec![0usize; n];
    let mut z_buf = vec![0.0; n + 1];

    // Pass 1: per column, distance along rows.
    for c in 0..w {
        let mut any = false;
        for r in 0..h {
            let on = feature[[r, c]];
            any |= on;
            f_buf[r] = if on { 0.0 } else { INF };
        }
        if any {
            dt1d(&f_buf[..h], &mut d_buf[..h], &mut v_buf[..h], &mut z_buf[..h + 1]);
            for r in 0..h {
                g[[r, c]] = d_buf[r];
            }
        } else {
            for r in 0..h {
                g[[r, c]] = INF;
            }
        }
    }

    // Pass 2: per row, combine across columns.
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        let mut any = false;
        for c in 0..w {
            let v = g[[r, c]];
            any |= v < INF;
            f_buf[c] = v;
        }
        if any {
            dt1d(&f_buf[..w], &mut d_buf[..w], &mut v_buf[..w], &mut z_buf[..w + 1]);
            for c in 0..w {
                out[[r, c]] = d_buf[c];
            }
        } else {
            for c in 0..w {
                out[[r, c]] = INF;
            }
        }
    }
    out
}

/// Unclamped signed distance in pixels: negative inside the foreground,
/// positive outside, magnitude = Euclidean distance to the nearest
/// opposite-class pixel center. Single-class masks produce `±INF`-like
/// saturation which [`mask_to_sdf`] clamps.
pub fn signed_distance_px(mask: &Array2<u8>) -> Array2<f64> {
    let fg = mask.mapv(|v| v == 1);
    let bg = mask.mapv(|v| v == 0);
    let d_to_fg = squared_edt(&fg);
    let d_to_bg = squared_edt(&bg);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if mask[[r, c]] == 1 {
            -d_to_bg[[r, c]].sqrt()
        } else {
            d_to_fg[[r, c]].sqrt()
        }
    })
}

/// Convert a binary mask to its clamped, normalized signed distance map.
pub fn mask_to_sdf(mask: &Array2<u8>, clamp_px: f64) -> Result<SdfMap> {
    check_binary(mask)?;
    if !(clamp_px > 0.0) {
        return Err(Error::Config(format!(
            "clamp_px must be positive, got {clamp_px}"
        )));
    }
    let n_fg = mask.iter().filter(|&&v| v == 1).count();
    let saturated = n_fg == 0 || n_fg == mask.len();
    let signed = signed_distance_px(mask);
    let values = signed.mapv(|d| d.clamp(-clamp_px, clamp_px) / clamp_px);
    Ok(SdfMap {
        values,
        clamp_px,
        saturated,
    })
}

/// Recover the binary mask: strictly negative values are foreground,
/// zeros and positives are background.
pub fn sdf_to_mask(sdf: &SdfMap) -> Result<Array2<u8>> {
    if sdf.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sdf holds non-finite values".into()));
    }
    Ok(sdf.values.mapv(|v| (v < 0.0) as u8))
}

/// Threshold an arbitrary real-valued map the same way (used on the network
/// head output, which is already in [-1, 1]).
pub fn threshold_sdf_values(values: &Array2<f64>) -> Array2<u8> {
    values.mapv(|v| (v < 0.0) as u8)
}

/// Default clamp radius: 10% of the larger image side.
pub fn default_clamp_px(shape: (usize, usize)) -> f64 {
    (0.1 * shape.0.max(shape.1) as f64).max(1.0)
}
