//! Image-quality and segmentation metrics plus clinical AAA measurements,
//! and the test-split evaluation driver.
//!
//! Image metrics (PSNR, SSIM, perceptual distance) are computed on crops of
//! the ground-truth aorta bounding box, in normalized intensity space with
//! data range 2.0. The lumen diameter is the maximum Feret diameter of the
//! 2D mask; both choices are recorded in the report header.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{bbox_of, BBox, PerceptualNet};
use crate::tensorio::{self, check_binary, load_case, Manifest, Split};

/// 10*log10(range^2 / MSE); identical inputs give the +inf sentinel,
/// reported as `None`.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> Result<Option<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("psnr: shape mismatch".into()));
    }
    if !(data_range > 0.0) {
        return Err(Error::Config("psnr: data_range must be positive".into()));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(None);
    }
    Ok(Some(10.0 * (data_range * data_range / mse).log10()))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter evaluated on the valid region only
/// (windows fully inside the image).
fn gaussian_filter_valid(x: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel_1d();
    let (h, w) = x.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // rows
    let mut tmp = Array2::<f64>::zeros((h, wo));
    for r in 0..h {
        for c in 0..wo {
            let mut s = 0.0;
            for (dk, kk) in k.iter().enumerate() {
                s += kk * x[[r, c + dk]];
            }
            tmp[[r, c]] = s;
        }
    }
    // cols
    let mut out = Array2::<f64>::zeros((ho, wo));
    for r in 0..ho {
        for c in 0..wo {
            let mut s = 0.0;
            for (dk, kk) in k.iter().enumerate() {
                s += kk * tmp[[r + dk, c]];
            }
            out[[r, c]] = s;
        }
    }
    out
}

/// Mean local SSIM over valid 11x11 Gaussian windows.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("ssim: shape mismatch".into()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}px window"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mu_a = gaussian_filter_valid(a);
    let mu_b = gaussian_filter_valid(b);
    let aa = gaussian_filter_valid(&(a * a));
    let bb = gaussian_filter_valid(&(b * b));
    let ab = gaussian_filter_valid(&(a * b));
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Dice overlap. Both-empty is defined as 1.0 and flagged.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<(f64, bool)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape("dice: shape mismatch".into()));
    }
    check_binary(pred)?;
    check_binary(gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p == 1 && g == 1) as usize;
        total += (p == 1) as usize + (g == 1) as usize;
    }
    if total == 0 {
        Ok((1.0, true))
    } else {
        Ok((2.0 * inter as f64 / total as f64, false))
    }
}

/// Thrombus = aorta AND NOT lumen.
pub fn thrombus_from(aorta: &Array2<u8>, lumen: &Array2<u8>) -> Result<Array2<u8>> {
    if aorta.dim() != lumen.dim() {
        return Err(Error::Shape("thrombus_from: shape mismatch".into()));
    }
    check_binary(aorta)?;
    check_binary(lumen)?;
    Ok(ndarray::Zip::from(aorta)
        .and(lumen)
        .map_collect(|&a, &l| (a == 1 && l == 0) as u8))
}

/// Convex hull of integer points (monotone chain). Returns hull vertices.
fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    let n = pts.len();
    if n <= 2 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| -> i64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull = Vec::with_capacity(2 * n);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Maximum Feret diameter: the largest Euclidean distance between any two
/// foreground pixel centers, scaled by the pixel spacing. The hull
/// restriction is exact because axis scaling preserves convex hulls.
pub fn lumen_diameter(mask: &Array2<u8>, spacing_mm: (f64, f64)) -> Result<f64> {
    check_binary(mask)?;
    let points: Vec<(i64, i64)> = mask
        .indexed_iter()
        .filter(|(_, &v)| v == 1)
        .map(|((r, c), _)| (r as i64, c as i64))
        .collect();
    if points.is_empty() {
        return Err(Error::Degenerate("diameter of an empty mask".into()));
    }
    let hull = convex_hull(&points);
    let mut best_sq = 0.0f64;
    for i in 0..hull.len() {
        for j in (i + 1)..hull.len() {
            let dr = (hull[i].0 - hull[j].0) as f64 * spacing_mm.0;
            let dc = (hull[i].1 - hull[j].1) as f64 * spacing_mm.1;
            let d = dr * dr + dc * dc;
            if d > best_sq {
                best_sq = d;
            }
        }
    }
    Ok(best_sq.sqrt())
}

/// Percent thrombus area error; `None` (flagged) when the ground truth is
/// empty.
pub fn thrombus_area_error(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    spacing_mm: (f64, f64),
) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape("area error: shape mismatch".into()));
    }
    check_binary(pred)?;
    check_binary(gt)?;
    let px_area = spacing_mm.0 * spacing_mm.1;
    let ap = pred.iter().filter(|&&v| v == 1).count() as f64 * px_area;
    let ag = gt.iter().filter(|&&v| v == 1).count() as f64 * px_area;
    if ag == 0.0 {
        return Ok(None);
    }
    Ok(Some(100.0 * (ap - ag).abs() / ag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

pub fn regression_stats(pred: &[f64], gt: &[f64]) -> Result<RegressionStats> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(
            "regression_stats: series must have equal nonzero length".into(),
        ));
    }
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;
    let rmse = (pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
        .sqrt();
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let vp = pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>();
    let vg = gt.iter().map(|g| (g - mg) * (g - mg)).sum::<f64>();
    let pearson_r = if vp > 0.0 && vg > 0.0 {
        let cov = pred
            .iter()
            .zip(gt.iter())
            .map(|(p, g)| (p - mp) * (g - mg))
            .sum::<f64>();
        Some(cov / (vp.sqrt() * vg.sqrt()))
    } else {
        None
    };
    Ok(RegressionStats {
        mae,
        rmse,
        pearson_r,
        n: pred.len(),
    })
}

/// Otsu threshold over the values inside a mask; used to derive a lumen
/// mask from a synthesized CECT when no segmentation head output exists.
pub fn lumen_from_cect_threshold(cect: &Array2<f64>, aorta: &Array2<u8>) -> Result<Array2<u8>> {
    if cect.dim() != aorta.dim() {
        return Err(Error::Shape("threshold: shape mismatch".into()));
    }
    check_binary(aorta)?;
    let vals: Vec<f64> = cect
        .iter()
        .zip(aorta.iter())
        .filter(|(_, &a)| a == 1)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Ok(Array2::zeros(cect.dim()));
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(Array2::zeros(cect.dim()));
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in &vals {
        let b = (((v - lo) / (hi - lo)) * (BINS as f64 - 1.0)).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = vals.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0.0f64, 0usize);
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += t as f64 * hist[t] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t);
        }
    }
    let thresh = lo + (best.1 as f64 + 0.5) / (BINS as f64 - 1.0) * (hi - lo);
    Ok(ndarray::Zip::from(cect)
        .and(aorta)
        .map_collect(|&v, &a| (a == 1 && v > thresh) as u8))
}

/// Expand a bounding box symmetrically until both sides reach `min_side`,
/// clipped to the image.
pub fn expand_bbox_to_min(bbox: &BBox, min_side: usize, shape: (usize, usize)) -> BBox {
    let mut b = *bbox;
    while b.row1 - b.row0 < min_side {
        if b.row0 > 0 {
            b.row0 -= 1;
        }
        if b.row1 < shape.0 && b.row1 - b.row0 < min_side {
            b.row1 += 1;
        }
        if b.row0 == 0 && b.row1 == shape.0 {
            break;
        }
    }
    while b.col1 - b.col0 < min_side {
        if b.col0 > 0 {
            b.col0 -= 1;
        }
        if b.col1 < shape.1 && b.col1 - b.col0 < min_side {
            b.col1 += 1;
        }
        if b.col0 == 0 && b.col1 == shape.1 {
            break;
        }
    }
    b
}

// ---------------------------------------------------------------------------
// Evaluation driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportHeader {
    pub intensity_space: String,
    pub data_range: f64,
    pub bbox: String,
    pub diameter_definition: String,
    pub perceptual: String,
    pub perceptual_seed: u64,
    pub csv_columns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// `None` encodes the +inf PSNR sentinel (zero MSE).
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
    pub lumen_dice: Option<f64>,
    pub thrombus_dice: Option<f64>,
    pub lumen_dice_posthoc: Option<f64>,
    pub thrombus_dice_posthoc: Option<f64>,
    pub lumen_diam_mm_pred: Option<f64>,
    pub lumen_diam_mm_posthoc: Option<f64>,
    pub lumen_diam_mm_gt: Option<f64>,
    pub thrombus_area_err_pct: Option<f64>,
    pub thrombus_area_err_pct_posthoc: Option<f64>,
    pub failed: bool,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_cases: usize,
    pub n_failed: usize,
    pub n_psnr_inf: usize,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_perceptual: Option<f64>,
    pub mean_lumen_dice: Option<f64>,
    pub mean_thrombus_dice: Option<f64>,
    pub mean_lumen_dice_posthoc: Option<f64>,
    pub mean_thrombus_dice_posthoc: Option<f64>,
    pub diameter: Option<RegressionStats>,
    pub diameter_posthoc: Option<RegressionStats>,
    pub area_err_mean_pct: Option<f64>,
    pub area_err_sd_pct: Option<f64>,
    pub area_err_mean_pct_posthoc: Option<f64>,
    pub area_err_sd_pct_posthoc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub per_case: Vec<CaseMetrics>,
    pub aggregates: Aggregates,
}

pub const EVAL_DATA_RANGE: f64 = 2.0;

const CSV_COLUMNS: [&str; 14] = [
    "case_id",
    "psnr_db",
    "ssim",
    "perceptual",
    "lumen_dice",
    "thrombus_dice",
    "lumen_dice_posthoc",
    "thrombus_dice_posthoc",
    "lumen_diam_mm_pred",
    "lumen_diam_mm_posthoc",
    "lumen_diam_mm_gt",
    "thrombus_area_err_pct",
    "thrombus_area_err_pct_posthoc",
    "flags",
];

fn opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn sd_of(values: &[f64]) -> Option<f64> {
    let m = mean_of(values)?;
    if values.len() < 2 {
        return Some(0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

/// Evaluate every test-split case against predictions in `pred_dir`
/// (`<pred_dir>/<case_id>/{cect_hat.tns[, lumen_hat.tns]}`).
pub fn evaluate(
    data_root: &Path,
    pred_dir: &Path,
    perceptual: &PerceptualNet,
) -> Result<EvalReport> {
    let manifest = Manifest::load(data_root)?;
    manifest.validate_on_disk(data_root)?;
    let mut per_case = Vec::new();

    for entry in manifest.split(Split::Test) {
        let gt = load_case(data_root, entry)?;
        let mut flags = Vec::new();
        let case_pred = pred_dir.join(&entry.case_id);
        let cect_hat_path = case_pred.join("cect_hat.tns");
        if !cect_hat_path.is_file() {
            per_case.push(CaseMetrics {
                case_id: entry.case_id.clone(),
                psnr_db: None,
                ssim: None,
                perceptual: None,
                lumen_dice: None,
                thrombus_dice: None,
                lumen_dice_posthoc: None,
                thrombus_dice_posthoc: None,
                lumen_diam_mm_pred: None,
                lumen_diam_mm_posthoc: None,
                lumen_diam_mm_gt: None,
                thrombus_area_err_pct: None,
                thrombus_area_err_pct_posthoc: None,
                failed: true,
                flags: vec!["missing_prediction".into()],
            });
            continue;
        }
        let (cect_hat_data, _) = tensorio::read_array(&cect_hat_path)?;
        let cect_hat = match cect_hat_data {
            tensorio::ArrayData::F32(a) => a.mapv(f64::from),
            _ => return Err(Error::Format("cect_hat must be f32".into())),
        };
        if cect_hat.dim() != gt.cect.shape() {
            return Err(Error::Shape(format!(
                "case {}: prediction shape mismatch",
                entry.case_id
            )));
        }

        // image metrics on the ground-truth aorta bbox crop
        let bbox = bbox_of(&gt.aorta_mask, 0)?;
        let bbox = expand_bbox_to_min(&bbox, SSIM_WINDOW, gt.cect.shape());
        let crop_gt = bbox.crop(&gt.cect.data);
        let crop_hat = bbox.crop(&cect_hat);
        let psnr_db = psnr(&crop_gt, &crop_hat, EVAL_DATA_RANGE)?;
        if psnr_db.is_none() {
            flags.push("psnr_inf".into());
        }
        let ssim_v = ssim(&crop_gt, &crop_hat, EVAL_DATA_RANGE)?;
        let perc = perceptual.distance64(&crop_gt, &crop_hat)?;

        // segmentation metrics
        let lumen_gt = gt
            .lumen_mask
            .as_ref()
            .ok_or_else(|| Error::Degenerate(format!("test case {} lacks lumen", entry.case_id)))?;
        let thrombus_gt = thrombus_from(&gt.aorta_mask, lumen_gt)?;
        let spacing = gt.ncct.spacing_mm;
        let diam_gt = lumen_diameter(lumen_gt, spacing).ok();

        let lumen_hat_path = case_pred.join("lumen_hat.tns");
        let (mut lumen_dice_v, mut th_dice_v, mut diam_pred, mut area_err) =
            (None, None, None, None);
        if lumen_hat_path.is_file() {
            let lumen_hat = tensorio::read_mask(&lumen_hat_path)?;
            let (d, both_empty) = dice(&lumen_hat, lumen_gt)?;
            if both_empty {
                flags.push("lumen_dice_both_empty".into());
            }
            lumen_dice_v = Some(d);
            let th_hat = thrombus_from(&gt.aorta_mask, &lumen_hat)?;
            let (td, th_both_empty) = dice(&th_hat, &thrombus_gt)?;
            if th_both_empty {
                flags.push("thrombus_dice_both_empty".into());
            }
            th_dice_v = Some(td);
            match lumen_diameter(&lumen_hat, spacing) {
                Ok(d) => diam_pred = Some(d),
                Err(_) => flags.push("pred_lumen_empty".into()),
            }
            area_err = thrombus_area_error(&th_hat, &thrombus_gt, spacing)?;
            if area_err.is_none() {
                flags.push("thrombus_gt_empty".into());
            }
        }

        // post-hoc thresholding pipeline on the synthesized image
        let lumen_post = lumen_from_cect_threshold(&cect_hat, &gt.aorta_mask)?;
        let (lumen_dice_post, _) = dice(&lumen_post, lumen_gt)?;
        let th_post = thrombus_from(&gt.aorta_mask, &lumen_post)?;
        let (th_dice_post, _) = dice(&th_post, &thrombus_gt)?;
        let diam_post = lumen_diameter(&lumen_post, spacing).ok();
        if diam_post.is_none() {
            flags.push("posthoc_lumen_empty".into());
        }
        let area_err_post = thrombus_area_error(&th_post, &thrombus_gt, spacing)?;

        per_case.push(CaseMetrics {
            case_id: entry.case_id.clone(),
            psnr_db,
            ssim: Some(ssim_v),
            perceptual: Some(perc),
            lumen_dice: lumen_dice_v,
            thrombus_dice: th_dice_v,
            lumen_dice_posthoc: Some(lumen_dice_post),
            thrombus_dice_posthoc: Some(th_dice_post),
            lumen_diam_mm_pred: diam_pred,
            lumen_diam_mm_posthoc: diam_post,
            lumen_diam_mm_gt: diam_gt,
            thrombus_area_err_pct: area_err,
            thrombus_area_err_pct_posthoc: area_err_post,
            failed: false,
            flags,
        });
    }

    let ok_cases: Vec<&CaseMetrics> = per_case.iter().filter(|c| !c.failed).collect();
    let collect = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> {
        ok_cases.iter().filter_map(|c| f(c)).collect()
    };

    let psnr_vals = collect(&|c| c.psnr_db);
    let n_psnr_inf = ok_cases
        .iter()
        .filter(|c| c.flags.iter().any(|f| f == "psnr_inf"))
        .count();

    let diam_pairs: Vec<(f64, f64)> = ok_cases
        .iter()
        .filter_map(|c| Some((c.lumen_diam_mm_pred?, c.lumen_diam_mm_gt?)))
        .collect();
    let diameter = if diam_pairs.is_empty() {
        None
    } else {
        let (p, g): (Vec<f64>, Vec<f64>) = diam_pairs.into_iter().unzip();
        Some(regression_stats(&p, &g)?)
    };
    let diam_pairs_post: Vec<(f64, f64)> = ok_cases
        .iter()
        .filter_map(|c| Some((c.lumen_diam_mm_posthoc?, c.lumen_diam_mm_gt?)))
        .collect();
    let diameter_posthoc = if diam_pairs_post.is_empty() {
        None
    } else {
        let (p, g): (Vec<f64>, Vec<f64>) = diam_pairs_post.into_iter().unzip();
        Some(regression_stats(&p, &g)?)
    };

    let area_errs = collect(&|c| c.thrombus_area_err_pct);
    let area_errs_post = collect(&|c| c.thrombus_area_err_pct_posthoc);

    let aggregates = Aggregates {
        n_cases: per_case.len(),
        n_failed: per_case.iter().filter(|c| c.failed).count(),
        n_psnr_inf,
        mean_psnr_db: mean_of(&psnr_vals),
        mean_ssim: mean_of(&collect(&|c| c.ssim)),
        mean_perceptual: mean_of(&collect(&|c| c.perceptual)),
        mean_lumen_dice: mean_of(&collect(&|c| c.lumen_dice)),
        mean_thrombus_dice: mean_of(&collect(&|c| c.thrombus_dice)),
        mean_lumen_dice_posthoc: mean_of(&collect(&|c| c.lumen_dice_posthoc)),
        mean_thrombus_dice_posthoc: mean_of(&collect(&|c| c.thrombus_dice_posthoc)),
        diameter,
        diameter_posthoc,
        area_err_mean_pct: mean_of(&area_errs),
        area_err_sd_pct: sd_of(&area_errs),
        area_err_mean_pct_posthoc: mean_of(&area_errs_post),
        area_err_sd_pct_posthoc: sd_of(&area_errs_post),
    };

    Ok(EvalReport {
        header: ReportHeader {
            intensity_space: "NORM".into(),
            data_range: EVAL_DATA_RANGE,
            bbox: "tight aorta bbox from ground-truth mask, expanded to >= 11 px".into(),
            diameter_definition: "max Feret diameter of the 2D lumen mask".into(),
            perceptual: "fixed seeded untrained conv stack (not LPIPS)".into(),
            perceptual_seed: perceptual.seed,
            csv_columns: CSV_COLUMNS.iter().map(|s| s.to_string()).collect(),
        },
        per_case,
        aggregates,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for c in &self.per_case {
            let row = [
                c.case_id.clone(),
                opt(&c.psnr_db),
                opt(&c.ssim),
                opt(&c.perceptual),
                opt(&c.lumen_dice),
                opt(&c.thrombus_dice),
                opt(&c.lumen_dice_posthoc),
                opt(&c.thrombus_dice_posthoc),
                opt(&c.lumen_diam_mm_pred),
                opt(&c.lumen_diam_mm_posthoc),
                opt(&c.lumen_diam_mm_gt),
                opt(&c.thrombus_area_err_pct),
                opt(&c.thrombus_area_err_pct_posthoc),
                c.flags.join(";"),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report: {e}")))?;
        fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }
}
