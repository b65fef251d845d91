//! Deterministic synthetic paired NCCT/CECT slice generator with aorta,
//! lumen, and thrombus ground truth.
//!
//! Geometry: the aorta is a filled ellipse; the lumen an eccentric, smaller
//! ellipse strictly inside it; thrombus is their set difference. In NCCT
//! both lumen and thrombus carry blood-like intensities (heavily
//! overlapping distributions); in CECT only the lumen is enhanced. The
//! background is a smooth sum of seeded Gaussian blobs, optionally shifted
//! between modalities to mimic residual registration error.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{
    normalize_hu, save_case, CaseNormMeta, CaseRecord, Manifest, ManifestEntry, SliceArray, Space,
    Split,
};

/// Mean/std pair for a tissue class, in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuLevel {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub image_size: usize,
    pub spacing_mm: (f64, f64),
    /// Semi-axis range of the aorta ellipse, in pixels.
    pub aorta_radius_px: (f64, f64),
    /// Lumen center offset as a fraction of the available margin.
    pub lumen_eccentricity: (f64, f64),
    /// Fraction of the aorta area taken by thrombus.
    pub thrombus_fraction: (f64, f64),
    pub hu_tissue: HuLevel,
    pub hu_blood: HuLevel,
    pub hu_thrombus: HuLevel,
    pub hu_enhanced: HuLevel,
    /// Maximum integer background shift between modalities, in pixels.
    pub jitter_px: usize,
    /// Per-pixel sensor noise, in HU.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            image_size: 64,
            spacing_mm: (1.0, 1.0),
            aorta_radius_px: (10.0, 16.0),
            lumen_eccentricity: (0.1, 0.8),
            thrombus_fraction: (0.25, 0.55),
            hu_tissue: HuLevel {
                mean: 40.0,
                std: 20.0,
            },
            hu_blood: HuLevel {
                mean: 45.0,
                std: 10.0,
            },
            hu_thrombus: HuLevel {
                mean: 40.0,
                std: 10.0,
            },
            hu_enhanced: HuLevel {
                mean: 250.0,
                std: 20.0,
            },
            jitter_px: 0,
            noise_std: 4.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size as f64;
        let (rmin, rmax) = self.aorta_radius_px;
        if !(rmin > 2.0 && rmax >= rmin) {
            return Err(Error::Config(format!(
                "aorta radius range invalid: ({rmin}, {rmax})"
            )));
        }
        if rmax > s / 2.0 - 4.0 {
            return Err(Error::Config(format!(
                "aorta radius {rmax} does not fit a {}px image with margin",
                self.image_size
            )));
        }
        let (fmin, fmax) = self.thrombus_fraction;
        if !(fmin > 0.0 && fmax >= fmin && fmax < 0.9) {
            return Err(Error::Config(format!(
                "thrombus fraction range invalid: ({fmin}, {fmax})"
            )));
        }
        let (emin, emax) = self.lumen_eccentricity;
        if !(emin >= 0.0 && emax >= emin && emax <= 0.95) {
            return Err(Error::Config(format!(
                "eccentricity range invalid: ({emin}, {emax})"
            )));
        }
        // NCCT indistinguishability premise: blood and thrombus overlap heavily.
        let pooled = ((self.hu_blood.std.powi(2) + self.hu_thrombus.std.powi(2)) / 2.0).sqrt();
        if (self.hu_blood.mean - self.hu_thrombus.mean).abs() > pooled {
            return Err(Error::Config(
                "blood and thrombus HU distributions must overlap heavily".into(),
            ));
        }
        // Enhanced lumen must be unambiguous in CECT.
        let sd = self.hu_enhanced.std.max(self.hu_thrombus.std);
        if self.hu_enhanced.mean - self.hu_thrombus.mean < 5.0 * sd {
            return Err(Error::Config(
                "enhanced lumen mean must exceed thrombus mean by >= 5 standard deviations".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cr: f64,
    cc: f64,
    ra: f64,
    rb: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dr = r - self.cr;
        let dc = c - self.cc;
        let (s, co) = self.theta.sin_cos();
        let u = dc * co + dr * s;
        let v = -dc * s + dr * co;
        (u / self.ra).powi(2) + (v / self.rb).powi(2) <= 1.0
    }

    fn rasterize(&self, size: usize) -> Array2<u8> {
        Array2::from_shape_fn((size, size), |(r, c)| {
            self.contains(r as f64, c as f64) as u8
        })
    }
}

/// The ground-truth HU images and masks of one slice, before normalization.
#[derive(Debug, Clone)]
pub struct HuCase {
    pub ncct_hu: Array2<f64>,
    pub cect_hu: Array2<f64>,
    pub aorta: Array2<u8>,
    pub lumen: Array2<u8>,
}

impl HuCase {
    pub fn thrombus(&self) -> Array2<u8> {
        ndarray::Zip::from(&self.aorta)
            .and(&self.lumen)
            .map_collect(|&a, &l| (a == 1 && l == 0) as u8)
    }
}

fn draw_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn normal<R: Rng>(rng: &mut R, level: HuLevel) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    level.mean + level.std * z
}

/// Smooth background field: tissue mean plus a sum of seeded Gaussian blobs.
fn background_field<R: Rng>(rng: &mut R, params: &PhantomParams) -> Array2<f64> {
    let n = params.image_size;
    let blob_count = 6;
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let cr = draw_uniform(rng, 0.0, n as f64);
        let cc = draw_uniform(rng, 0.0, n as f64);
        let sigma = draw_uniform(rng, n as f64 / 16.0, n as f64 / 4.0);
        let amp = draw_uniform(rng, -1.5, 1.5) * params.hu_tissue.std;
        blobs.push((cr, cc, sigma, amp));
    }
    Array2::from_shape_fn((n, n), |(r, c)| {
        let mut v = params.hu_tissue.mean;
        for &(cr, cc, sigma, amp) in &blobs {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v
    })
}

/// Shift a field by whole pixels, clamping reads to the border.
fn shift_field(field: &Array2<f64>, dr: isize, dc: isize) -> Array2<f64> {
    let (h, w) = field.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
        let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
        field[[rr, cc]]
    })
}

const GEOMETRY_RETRIES: usize = 32;

/// Generate the HU-space content of one case. Deterministic given
/// `(params, case_seed)`.
pub fn generate_case_hu(params: &PhantomParams, case_seed: u64) -> Result<HuCase> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(case_seed);
    let n = params.image_size;
    let center = n as f64 / 2.0;

    // geometry with bounded retries until strict containment holds
    let mut geometry = None;
    for _ in 0..GEOMETRY_RETRIES {
        let ra = draw_uniform(&mut rng, params.aorta_radius_px.0, params.aorta_radius_px.1);
        let rb = draw_uniform(&mut rng, params.aorta_radius_px.0, params.aorta_radius_px.1);
        let theta = draw_uniform(&mut rng, 0.0, PI);
        let cr = center + draw_uniform(&mut rng, -0.08, 0.08) * n as f64;
        let cc = center + draw_uniform(&mut rng, -0.08, 0.08) * n as f64;
        let aorta = Ellipse {
            cr,
            cc,
            ra,
            rb,
            theta,
        };

        let frac = draw_uniform(
            &mut rng,
            params.thrombus_fraction.0,
            params.thrombus_fraction.1,
        );
        let scale = (1.0 - frac).sqrt();
        let ecc = draw_uniform(
            &mut rng,
            params.lumen_eccentricity.0,
            params.lumen_eccentricity.1,
        );
        let phi = draw_uniform(&mut rng, 0.0, 2.0 * PI);
        // available margin along the offset direction, in the ellipse metric
        let margin = (1.0 - scale) * ra.min(rb);
        let offset = ecc * margin;
        let lumen = Ellipse {
            cr: cr + offset * phi.sin(),
            cc: cc + offset * phi.cos(),
            ra: scale * ra,
            rb: scale * rb,
            theta,
        };

        let aorta_mask = aorta.rasterize(n);
        let lumen_mask = lumen.rasterize(n);
        let lumen_inside = lumen_mask
            .iter()
            .zip(aorta_mask.iter())
            .all(|(&l, &a)| l == 0 || a == 1);
        let lumen_count = lumen_mask.iter().filter(|&&v| v == 1).count();
        let aorta_count = aorta_mask.iter().filter(|&&v| v == 1).count();
        if lumen_inside && lumen_count > 4 && aorta_count > lumen_count {
            geometry = Some((aorta_mask, lumen_mask));
            break;
        }
    }
    let (aorta, lumen) = geometry.ok_or_else(|| {
        Error::Degenerate(format!(
            "could not draw contained lumen geometry after {GEOMETRY_RETRIES} tries"
        ))
    })?;

    // shared background and aorta interior
    let bg = background_field(&mut rng, params);
    let mut ncct = bg.clone();
    let mut cect_interior = Array2::<f64>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            if aorta[[r, c]] == 1 {
                let v = if lumen[[r, c]] == 1 {
                    normal(&mut rng, params.hu_blood)
                } else {
                    normal(&mut rng, params.hu_thrombus)
                };
                ncct[[r, c]] = v;
                cect_interior[[r, c]] = v;
            }
        }
    }
    // enhanced lumen draws for CECT
    for r in 0..n {
        for c in 0..n {
            if lumen[[r, c]] == 1 {
                cect_interior[[r, c]] = normal(&mut rng, params.hu_enhanced);
            }
        }
    }

    // CECT background, optionally misaligned
    let (dr, dc) = if params.jitter_px > 0 {
        let j = params.jitter_px as isize;
        (
            (rng.next_u64() % (2 * params.jitter_px as u64 + 1)) as isize - j,
            (rng.next_u64() % (2 * params.jitter_px as u64 + 1)) as isize - j,
        )
    } else {
        (0, 0)
    };
    let cect_bg = if (dr, dc) == (0, 0) {
        bg.clone()
    } else {
        shift_field(&bg, dr, dc)
    };
    let mut cect = cect_bg;
    for r in 0..n {
        for c in 0..n {
            if aorta[[r, c]] == 1 {
                cect[[r, c]] = cect_interior[[r, c]];
            }
        }
    }

    // independent per-modality sensor noise
    if params.noise_std > 0.0 {
        for v in ncct.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += params.noise_std * z;
        }
        for v in cect.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += params.noise_std * z;
        }
    }

    Ok(HuCase {
        ncct_hu: ncct,
        cect_hu: cect,
        aorta,
        lumen,
    })
}

/// Generate one normalized [`CaseRecord`].
pub fn generate_case(
    params: &PhantomParams,
    case_seed: u64,
    case_id: &str,
    keep_lumen: bool,
) -> Result<CaseRecord> {
    let hu = generate_case_hu(params, case_seed)?;
    let ncct_hu = SliceArray::new(hu.ncct_hu, params.spacing_mm, Space::Hu)?;
    let cect_hu = SliceArray::new(hu.cect_hu, params.spacing_mm, Space::Hu)?;
    let (ncct, ncct_meta) = normalize_hu(&ncct_hu)?;
    let (cect, cect_meta) = normalize_hu(&cect_hu)?;
    let record = CaseRecord {
        case_id: case_id.to_string(),
        ncct,
        cect,
        aorta_mask: hu.aorta,
        lumen_mask: if keep_lumen { Some(hu.lumen) } else { None },
        norm_meta: CaseNormMeta {
            ncct: ncct_meta,
            cect: cect_meta,
        },
    };
    record.validate()?;
    Ok(record)
}

/// Counts shaping a generated dataset. Slices of one patient share the
/// split and label status, mirroring patient-level split discipline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub slices_per_case: usize,
}

/// Derive the per-slice RNG stream id from patient and slice indices.
fn slice_stream(patient: usize, slice: usize) -> u64 {
    ((patient as u64) << 16) | slice as u64
}

/// Generate a dataset on disk and return its manifest.
pub fn generate_dataset(
    params: &PhantomParams,
    counts: DatasetCounts,
    seed: u64,
    out_root: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    if counts.slices_per_case == 0 {
        return Err(Error::Config("slices_per_case must be >= 1".into()));
    }
    let mut params = params.clone();
    params.seed = seed;
    params.validate()?;

    if out_root.exists() {
        let non_empty = fs::read_dir(out_root)
            .map_err(|e| Error::io(out_root, e))?
            .next()
            .is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Overwrite(out_root.to_path_buf()));
            }
            fs::remove_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
        }
    }
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    let mut entries = Vec::new();
    let total = counts.labeled + counts.unlabeled + counts.test;
    for patient in 0..total {
        let (split, has_lumen) = if patient < counts.labeled {
            (Split::Train, true)
        } else if patient < counts.labeled + counts.unlabeled {
            (Split::Train, false)
        } else {
            // test cases always keep ground truth for evaluation
            (Split::Test, true)
        };
        for slice in 0..counts.slices_per_case {
            let case_id = format!("p{patient:04}_s{slice:02}");
            let record =
                generate_case(&params, slice_stream(patient, slice), &case_id, has_lumen)?;
            save_case(out_root, &record)?;
            entries.push(ManifestEntry {
                case_id,
                has_lumen,
                split,
            });
        }
    }
    let manifest = Manifest::new(entries);
    manifest.validate_on_disk(out_root)?;
    manifest.save(out_root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> PhantomParams {
        PhantomParams {
            jitter_px: 0,
            noise_std: 0.0,
            ..PhantomParams::default()
        }
    }

    #[test]
    fn default_params_validate() {
        PhantomParams::default().validate().unwrap();
    }

    #[test]
    fn rejects_separable_blood_thrombus() {
        let p = PhantomParams {
            hu_blood: HuLevel {
                mean: 120.0,
                std: 5.0,
            },
            ..PhantomParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn difference_confined_to_lumen_when_quiet() {
        let hu = generate_case_hu(&quiet_params(), 3).unwrap();
        for ((d, &l), &_a) in hu
            .cect_hu
            .iter()
            .zip(hu.ncct_hu.iter())
            .map(|(c, n)| c - n)
            .zip(hu.lumen.iter())
            .zip(hu.aorta.iter())
        {
            if l == 0 {
                assert_eq!(d, 0.0);
            }
        }
        // and the lumen really is enhanced
        let mut enhanced = 0usize;
        let mut lumen_px = 0usize;
        for ((c, n), &l) in hu
            .cect_hu
            .iter()
            .zip(hu.ncct_hu.iter())
            .zip(hu.lumen.iter())
        {
            if l == 1 {
                lumen_px += 1;
                if c - n > 50.0 {
                    enhanced += 1;
                }
            }
        }
        assert!(lumen_px > 4);
        assert!(enhanced * 10 >= lumen_px * 9);
    }

    #[test]
    fn lumen_contained_and_thrombus_is_set_difference() {
        for seed in 0..12u64 {
            let hu = generate_case_hu(&PhantomParams::default(), seed).unwrap();
            for (&l, &a) in hu.lumen.iter().zip(hu.aorta.iter()) {
                assert!(l == 0 || a == 1, "lumen escapes aorta at seed {seed}");
            }
            let th = hu.thrombus();
            for ((&t, &a), &l) in th.iter().zip(hu.aorta.iter()).zip(hu.lumen.iter()) {
                assert_eq!(t, (a == 1 && l == 0) as u8);
            }
            assert!(th.iter().any(|&v| v == 1), "thrombus empty at seed {seed}");
        }
    }

    #[test]
    fn determinism_same_seed_same_bytes() {
        let p = PhantomParams::default();
        let a = generate_case(&p, 7, "x", true).unwrap();
        let b = generate_case(&p, 7, "x", true).unwrap();
        assert_eq!(a.ncct.data, b.ncct.data);
        assert_eq!(a.cect.data, b.cect.data);
        assert_eq!(a.aorta_mask, b.aorta_mask);
        assert_eq!(a.lumen_mask, b.lumen_mask);
        let c = generate_case(&p, 8, "x", true).unwrap();
        assert_ne!(a.ncct.data, c.ncct.data);
    }

    #[test]
    fn lumen_thrombus_separation_statistics() {
        // |CECT-NCCT| inside lumen >= 10x the same statistic inside thrombus
        let p = PhantomParams::default(); // noise on, jitter 0
        let mut lumen_diff = 0.0;
        let mut lumen_n = 0usize;
        let mut th_diff = 0.0;
        let mut th_n = 0usize;
        // NCCT indistinguishability: aggregate lumen vs thrombus HU stats
        let mut l_sum = 0.0;
        let mut l_sq = 0.0;
        let mut t_sum = 0.0;
        let mut t_sq = 0.0;
        for seed in 0..50u64 {
            let hu = generate_case_hu(&p, seed).unwrap();
            let th = hu.thrombus();
            for r in 0..p.image_size {
                for c in 0..p.image_size {
                    let d = (hu.cect_hu[[r, c]] - hu.ncct_hu[[r, c]]).abs();
                    if hu.lumen[[r, c]] == 1 {
                        lumen_diff += d;
                        lumen_n += 1;
                        let v = hu.ncct_hu[[r, c]];
                        l_sum += v;
                        l_sq += v * v;
                    } else if th[[r, c]] == 1 {
                        th_diff += d;
                        th_n += 1;
                        let v = hu.ncct_hu[[r, c]];
                        t_sum += v;
                        t_sq += v * v;
                    }
                }
            }
        }
        let lumen_mean = lumen_diff / lumen_n as f64;
        let th_mean = th_diff / th_n as f64;
        assert!(
            lumen_mean >= 10.0 * th_mean,
            "separation too weak: lumen {lumen_mean:.2} vs thrombus {th_mean:.2}"
        );

        let lm = l_sum / lumen_n as f64;
        let tm = t_sum / th_n as f64;
        let lv = l_sq / lumen_n as f64 - lm * lm;
        let tv = t_sq / th_n as f64 - tm * tm;
        let pooled = ((lv + tv) / 2.0).sqrt();
        assert!(
            (lm - tm).abs() < 0.5 * pooled,
            "NCCT lumen/thrombus means too far apart: |{lm:.2} - {tm:.2}| vs 0.5*{pooled:.2}"
        );
    }

    #[test]
    fn dataset_layout_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let counts = DatasetCounts {
            labeled: 3,
            unlabeled: 4,
            test: 2,
            slices_per_case: 1,
        };
        let p = PhantomParams::default();
        let m1 = generate_dataset(&p, counts, 99, &root, false).unwrap();
        assert_eq!(m1.entries.len(), 9);
        let with_lumen = m1.entries.iter().filter(|e| e.has_lumen).count();
        assert_eq!(with_lumen, 3 + 2);
        let test_cases = m1.split(Split::Test).count();
        assert_eq!(test_cases, 2);

        // refuse silent overwrite
        assert!(matches!(
            generate_dataset(&p, counts, 99, &root, false),
            Err(Error::Overwrite(_))
        ));

        // same seed, fresh dir -> identical manifest and files
        let root2 = dir.path().join("ds2");
        let m2 = generate_dataset(&p, counts, 99, &root2, false).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        let f1 = std::fs::read(root.join("cases/p0000_s00/ncct.tns")).unwrap();
        let f2 = std::fs::read(root2.join("cases/p0000_s00/ncct.tns")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn fully_supervised_dataset_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let counts = DatasetCounts {
            labeled: 2,
            unlabeled: 0,
            test: 1,
            slices_per_case: 2,
        };
        let m = generate_dataset(
            &PhantomParams::default(),
            counts,
            1,
            &dir.path().join("ds"),
            false,
        )
        .unwrap();
        assert_eq!(m.entries.len(), 6);
        assert!(m.entries.iter().all(|e| e.has_lumen));
    }
}
