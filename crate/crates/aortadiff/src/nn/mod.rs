//! Minimal neural-network substrate: scalar abstraction, flat parameter
//! store, and layers with hand-written forward/backward passes.
//!
//! Everything is generic over `f32`/`f64` so training runs in `f32` while
//! gradient checks run against central finite differences in `f64`.

pub mod layers;

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type of all network math.
pub trait Scalar: NdFloat + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Draw a standard normal deviate through the `f64` path so that `f32`
/// and `f64` models consume identical random streams.
pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R) -> T {
    let v: f64 = StandardNormal.sample(rng);
    T::from_f64(v)
}

pub fn normal_array2<T: Scalar, R: Rng>(rng: &mut R, dim: (usize, usize)) -> Array2<T> {
    let mut out = Array2::zeros(dim);
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
    out
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All learnable weights in one flat buffer with a named registry.
///
/// Flat storage keeps the optimizer, gradient clipping, checkpointing,
/// finite-difference probes, and per-head gradient masks trivial.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    pub data: Vec<T>,
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            data: Vec::new(),
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter tensor filled with zeros. Registration order
    /// fixes the flat layout.
    pub fn alloc(&mut self, name: &str, shape: &[usize]) -> ParamRef {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, T::zero());
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        self.by_name.insert(name.to_string(), idx);
        ParamRef(idx)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, r: ParamRef) -> &ParamEntry {
        &self.entries[r.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamRef> {
        self.by_name.get(name).map(|&i| ParamRef(i))
    }

    pub fn slice(&self, r: ParamRef) -> &[T] {
        let e = &self.entries[r.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn slice_mut(&mut self, r: ParamRef) -> &mut [T] {
        let e = &self.entries[r.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn view2(&self, r: ParamRef) -> ArrayView2<'_, T> {
        let e = &self.entries[r.0];
        assert_eq!(e.shape.len(), 2);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), self.slice(r)).unwrap()
    }

    pub fn view1(&self, r: ParamRef) -> ArrayView1<'_, T> {
        let e = &self.entries[r.0];
        assert_eq!(e.shape.len(), 1);
        ArrayView1::from_shape(e.shape[0], self.slice(r)).unwrap()
    }

    /// Fill a weight tensor with fan-in scaled Gaussian values.
    pub fn init_normal<R: Rng>(&mut self, r: ParamRef, rng: &mut R, std: f64) {
        for v in self.slice_mut(r) {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::from_f64(z * std);
        }
    }

    pub fn fill(&mut self, r: ParamRef, value: T) {
        for v in self.slice_mut(r) {
            *v = value;
        }
    }

    /// Convert every element (used to build an `f64` twin for FD checks).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
        }
    }

    /// Simple order-dependent checksum for determinism assertions.
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0f64;
        for (i, v) in self.data.iter().enumerate() {
            acc += v.as_f64() * (((i % 97) + 1) as f64);
        }
        acc
    }
}

/// Gradient buffer matching a store's flat layout.
pub struct GradBuf<'a, T> {
    pub data: &'a mut [T],
}

impl<'a, T: Scalar> GradBuf<'a, T> {
    pub fn view2_mut(&mut self, e: &ParamEntry) -> ArrayViewMut2<'_, T> {
        assert_eq!(e.shape.len(), 2);
        ArrayViewMut2::from_shape(
            (e.shape[0], e.shape[1]),
            &mut self.data[e.offset..e.offset + e.len],
        )
        .unwrap()
    }

    pub fn slice_mut(&mut self, e: &ParamEntry) -> &mut [T] {
        &mut self.data[e.offset..e.offset + e.len]
    }
}

/// Global-norm gradient clipping. Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for v in grad.iter() {
        let x = v.as_f64();
        sq += x * x;
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for v in grad.iter_mut() {
            *v = *v * scale;
        }
    }
    norm
}

/// Check that every value is finite.
pub fn all_finite<T: Scalar>(values: &[T]) -> Result<()> {
    for v in values {
        if !v.as_f64().is_finite() {
            return Err(Error::Numeric("non-finite value encountered".into()));
        }
    }
    Ok(())
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    assert!(dim >= 4 && dim % 2 == 0, "embedding dim must be even, >= 4");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    let t = t as f64;
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (-(10_000.0f64).ln() * exponent).exp();
        out[i] = T::from_f64((t * freq).sin());
        out[half + i] = T::from_f64((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_store_layout_is_registration_order() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.alloc("a", &[2, 3]);
        let b = ps.alloc("b", &[4]);
        assert_eq!(ps.entry(a).offset, 0);
        assert_eq!(ps.entry(b).offset, 6);
        assert_eq!(ps.len(), 10);
        assert_eq!(ps.by_name("b"), Some(b));
    }

    #[test]
    fn embedding_distinguishes_timesteps() {
        let e1 = sinusoidal_embedding::<f64>(3, 16);
        let e2 = sinusoidal_embedding::<f64>(4, 16);
        assert_ne!(e1, e2);
        assert_eq!(e1.len(), 16);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![3.0f64, 4.0];
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }
}
