//! On-disk tensor format, dataset layout, and HU preprocessing.
//!
//! The `.tns` container is a little-endian header-length prefix (u64),
//! a UTF-8 JSON header, then the raw row-major payload. Images are stored
//! as `f32`, masks as `u8`; round trips are bit-exact.
//!
//! Dataset layout on disk:
//! ```text
//! <root>/manifest.json
//! <root>/cases/<case_id>/{ncct.tns, cect.tns, aorta.tns[, lumen.tns]}
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HU clipping window applied before per-slice normalization.
pub const HU_CLIP_MIN: f64 = -1000.0;
pub const HU_CLIP_MAX: f64 = 1000.0;

/// Minimum image side accepted anywhere in the pipeline.
pub const MIN_SIDE: usize = 8;

/// Intensity space a slice lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "NORM")]
    Norm,
}

/// A 2D real-valued slice with physical spacing metadata.
#[derive(Debug, Clone)]
pub struct SliceArray {
    pub data: Array2<f64>,
    /// (row, col) pixel spacing in millimetres.
    pub spacing_mm: (f64, f64),
    pub space: Space,
}

impl SliceArray {
    pub fn new(data: Array2<f64>, spacing_mm: (f64, f64), space: Space) -> Result<Self> {
        let s = SliceArray {
            data,
            spacing_mm,
            space,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "slice must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0) {
            return Err(Error::Config(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.space == Space::Norm {
            for &v in self.data.iter() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Numeric(format!(
                        "normalized slice holds out-of-range value {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-slice (min, max) HU used by the linear normalization map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub min_hu: f64,
    pub max_hu: f64,
}

/// Normalization metadata for both modalities of a case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseNormMeta {
    pub ncct: NormMeta,
    pub cect: NormMeta,
}

/// One paired sample: NCCT slice, CECT slice, aorta mask, optional lumen mask.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub ncct: SliceArray,
    pub cect: SliceArray,
    pub aorta_mask: Array2<u8>,
    pub lumen_mask: Option<Array2<u8>>,
    pub norm_meta: CaseNormMeta,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        self.ncct.validate()?;
        self.cect.validate()?;
        let shape = self.ncct.shape();
        if self.cect.shape() != shape || self.aorta_mask.dim() != shape {
            return Err(Error::Shape(format!(
                "case {}: arrays disagree on shape",
                self.case_id
            )));
        }
        if self.ncct.spacing_mm != self.cect.spacing_mm {
            return Err(Error::Shape(format!(
                "case {}: spacing disagrees between modalities",
                self.case_id
            )));
        }
        check_binary(&self.aorta_mask)?;
        if let Some(lumen) = &self.lumen_mask {
            if lumen.dim() != shape {
                return Err(Error::Shape(format!(
                    "case {}: lumen mask shape mismatch",
                    self.case_id
                )));
            }
            check_binary(lumen)?;
            for (l, a) in lumen.iter().zip(self.aorta_mask.iter()) {
                if *l == 1 && *a == 0 {
                    return Err(Error::Degenerate(format!(
                        "case {}: lumen mask escapes aorta mask",
                        self.case_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reject masks holding anything other than {0, 1}.
pub fn check_binary(mask: &Array2<u8>) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Format("mask holds values outside {0,1}".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub has_lumen: bool,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            version: 1,
            entries,
        }
    }

    /// Uniqueness of ids (an id may not appear twice, so it cannot sit in
    /// two splits either).
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Format(format!(
                    "manifest lists case {} twice",
                    e.case_id
                )));
            }
        }
        Ok(())
    }

    /// Validate and check that every listed case resolves to files on disk.
    pub fn validate_on_disk(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for e in &self.entries {
            let dir = case_dir(root, &e.case_id);
            for name in ["ncct.tns", "cect.tns", "aorta.tns"] {
                let p = dir.join(name);
                if !p.is_file() {
                    return Err(Error::Missing(p));
                }
            }
            if e.has_lumen && !dir.join("lumen.tns").is_file() {
                return Err(Error::Missing(dir.join("lumen.tns")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn case_dir(root: &Path, case_id: &str) -> PathBuf {
    root.join("cases").join(case_id)
}

// ---------------------------------------------------------------------------
// HU preprocessing
// ---------------------------------------------------------------------------

/// Clip to the HU window and min-max map onto [-1, 1] using the clipped
/// slice's own extrema.
pub fn normalize_hu(slice: &SliceArray) -> Result<(SliceArray, NormMeta)> {
    if slice.space != Space::Hu {
        return Err(Error::Config("normalize_hu expects an HU slice".into()));
    }
    let clipped = slice.data.mapv(|v| v.clamp(HU_CLIP_MIN, HU_CLIP_MAX));
    let min = clipped.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::Degenerate(
            "constant slice after clipping cannot be normalized".into(),
        ));
    }
    let scale = max - min;
    let data = clipped.mapv(|v| 2.0 * ((v - min) / scale) - 1.0);
    let out = SliceArray {
        data,
        spacing_mm: slice.spacing_mm,
        space: Space::Norm,
    };
    Ok((
        out,
        NormMeta {
            min_hu: min,
            max_hu: max,
        },
    ))
}

/// Invert [`normalize_hu`] using the recorded per-slice extrema.
pub fn denormalize_hu(slice: &SliceArray, meta: &NormMeta) -> Result<SliceArray> {
    if slice.space != Space::Norm {
        return Err(Error::Config("denormalize_hu expects a NORM slice".into()));
    }
    if !(meta.max_hu > meta.min_hu) {
        return Err(Error::Degenerate(format!(
            "norm meta must satisfy max > min, got {meta:?}"
        )));
    }
    let half_span = 0.5 * (meta.max_hu - meta.min_hu);
    let data = slice.data.mapv(|v| (v + 1.0) * half_span + meta.min_hu);
    Ok(SliceArray {
        data,
        spacing_mm: slice.spacing_mm,
        space: Space::Hu,
    })
}

// ---------------------------------------------------------------------------
// .tns container
// ---------------------------------------------------------------------------

/// JSON header of a `.tns` file. Field order is the serialization order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TnsHeader {
    pub dtype: String,
    pub shape: [usize; 2],
    pub order: String,
    pub spacing_mm: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<Space>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_max: Option<f64>,
}

/// Array payload of a `.tns` file.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Array2<f32>),
    U8(Array2<u8>),
}

impl ArrayData {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            ArrayData::F32(a) => a.dim(),
            ArrayData::U8(a) => a.dim(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::U8(_) => "u8",
        }
    }
}

/// Write an array with its metadata header. Bit-exact round trip.
pub fn write_array(path: &Path, array: &ArrayData, header: &TnsHeader) -> Result<()> {
    let (h, w) = array.dim();
    if header.shape != [h, w] {
        return Err(Error::Shape(format!(
            "header shape {:?} does not match array {h}x{w}",
            header.shape
        )));
    }
    if header.dtype != array.dtype() {
        return Err(Error::Format(format!(
            "header dtype {} does not match payload {}",
            header.dtype,
            array.dtype()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut buf = Vec::with_capacity(8 + json.len() + h * w * 4);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    match array {
        ArrayData::F32(a) => {
            for &v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        ArrayData::U8(a) => {
            for &v in a.iter() {
                buf.push(v);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a `.tns` file back. Checks the payload length against the header.
pub fn read_array(path: &Path) -> Result<(ArrayData, TnsHeader)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "{}: too short for a header length",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Format(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: TnsHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    let [h, w] = header.shape;
    let payload = &bytes[8 + hlen..];
    let data = match header.dtype.as_str() {
        "f32" => {
            if payload.len() != h * w * 4 {
                return Err(Error::Format(format!(
                    "{}: payload holds {} bytes, header implies {}",
                    path.display(),
                    payload.len(),
                    h * w * 4
                )));
            }
            let mut v = Vec::with_capacity(h * w);
            for c in payload.chunks_exact(4) {
                v.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
            ArrayData::F32(Array2::from_shape_vec((h, w), v).unwrap())
        }
        "u8" => {
            if payload.len() != h * w {
                return Err(Error::Format(format!(
                    "{}: payload holds {} bytes, header implies {}",
                    path.display(),
                    payload.len(),
                    h * w
                )));
            }
            ArrayData::U8(Array2::from_shape_vec((h, w), payload.to_vec()).unwrap())
        }
        other => {
            return Err(Error::Format(format!(
                "{}: unknown dtype {other}",
                path.display()
            )))
        }
    };
    Ok((data, header))
}

// ---------------------------------------------------------------------------
// Case save/load on the dataset layout
// ---------------------------------------------------------------------------

fn image_header(slice: &SliceArray, norm: Option<&NormMeta>) -> TnsHeader {
    let (h, w) = slice.shape();
    TnsHeader {
        dtype: "f32".into(),
        shape: [h, w],
        order: "row-major".into(),
        spacing_mm: [slice.spacing_mm.0, slice.spacing_mm.1],
        space: Some(slice.space),
        norm_min: norm.map(|n| n.min_hu),
        norm_max: norm.map(|n| n.max_hu),
    }
}

fn mask_header(mask: &Array2<u8>, spacing_mm: (f64, f64)) -> TnsHeader {
    let (h, w) = mask.dim();
    TnsHeader {
        dtype: "u8".into(),
        shape: [h, w],
        order: "row-major".into(),
        spacing_mm: [spacing_mm.0, spacing_mm.1],
        space: None,
        norm_min: None,
        norm_max: None,
    }
}

/// Persist a case under `<root>/cases/<case_id>/`.
pub fn save_case(root: &Path, case: &CaseRecord) -> Result<()> {
    case.validate()?;
    let dir = case_dir(root, &case.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let f32_of = |s: &SliceArray| s.data.mapv(|v| v as f32);
    write_array(
        &dir.join("ncct.tns"),
        &ArrayData::F32(f32_of(&case.ncct)),
        &image_header(&case.ncct, Some(&case.norm_meta.ncct)),
    )?;
    write_array(
        &dir.join("cect.tns"),
        &ArrayData::F32(f32_of(&case.cect)),
        &image_header(&case.cect, Some(&case.norm_meta.cect)),
    )?;
    write_array(
        &dir.join("aorta.tns"),
        &ArrayData::U8(case.aorta_mask.clone()),
        &mask_header(&case.aorta_mask, case.ncct.spacing_mm),
    )?;
    if let Some(lumen) = &case.lumen_mask {
        write_array(
            &dir.join("lumen.tns"),
            &ArrayData::U8(lumen.clone()),
            &mask_header(lumen, case.ncct.spacing_mm),
        )?;
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<(SliceArray, NormMeta)> {
    let (data, header) = read_array(path)?;
    let arr = match data {
        ArrayData::F32(a) => a.mapv(f64::from),
        ArrayData::U8(_) => {
            return Err(Error::Format(format!(
                "{}: expected f32 image",
                path.display()
            )))
        }
    };
    let space = header.space.unwrap_or(Space::Norm);
    let slice = SliceArray {
        data: arr,
        spacing_mm: (header.spacing_mm[0], header.spacing_mm[1]),
        space,
    };
    let meta = match (header.norm_min, header.norm_max) {
        (Some(min), Some(max)) => NormMeta {
            min_hu: min,
            max_hu: max,
        },
        _ => {
            return Err(Error::Format(format!(
                "{}: image lacks norm metadata",
                path.display()
            )))
        }
    };
    Ok((slice, meta))
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let (data, _) = read_array(path)?;
    match data {
        ArrayData::U8(a) => {
            check_binary(&a)?;
            Ok(a)
        }
        ArrayData::F32(_) => Err(Error::Format(format!(
            "{}: expected u8 mask",
            path.display()
        ))),
    }
}

/// Load a case given its manifest entry.
pub fn load_case(root: &Path, entry: &ManifestEntry) -> Result<CaseRecord> {
    let dir = case_dir(root, &entry.case_id);
    let (ncct, ncct_meta) = read_image(&dir.join("ncct.tns"))?;
    let (cect, cect_meta) = read_image(&dir.join("cect.tns"))?;
    let aorta_mask = read_mask(&dir.join("aorta.tns"))?;
    let lumen_mask = if entry.has_lumen {
        Some(read_mask(&dir.join("lumen.tns"))?)
    } else {
        None
    };
    let case = CaseRecord {
        case_id: entry.case_id.clone(),
        ncct,
        cect,
        aorta_mask,
        lumen_mask,
        norm_meta: CaseNormMeta {
            ncct: ncct_meta,
            cect: cect_meta,
        },
    };
    case.validate()?;
    Ok(case)
}

// ---------------------------------------------------------------------------
// Alignment filter and slice subsampling
// ---------------------------------------------------------------------------

fn mask_dice(a: &Array2<u8>, b: &Array2<u8>) -> Option<f64> {
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x == 1 && y == 1) as usize;
        total += (x == 1) as usize + (y == 1) as usize;
    }
    if total == 0 {
        None
    } else {
        Some(2.0 * inter as f64 / total as f64)
    }
}

/// Retain the indices of mask pairs with Dice above 0.9. Pairs where both
/// masks are empty have no defined Dice and are rejected with a warning.
pub fn alignment_filter(pairs: &[(Array2<u8>, Array2<u8>)]) -> Result<Vec<usize>> {
    let mut retained = Vec::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "alignment pair {i}: masks disagree on shape"
            )));
        }
        check_binary(a)?;
        check_binary(b)?;
        match mask_dice(a, b) {
            Some(d) if d > 0.9 => retained.push(i),
            Some(_) => {}
            None => {
                log::warn!("alignment pair {i}: both masks empty, Dice undefined; rejected");
            }
        }
    }
    Ok(retained)
}

/// Keep one out of every three slices (positions 0, 3, 6, ... of the
/// axially ordered id list).
pub fn subsample_slices<I: Clone>(ids: &[I]) -> Vec<I> {
    ids.iter().step_by(3).cloned().collect()
}
