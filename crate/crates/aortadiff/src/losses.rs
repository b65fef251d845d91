//! Training objectives: the aorta-restricted perceptual reconstruction
//! loss, the SDF L1 segmentation loss, and the uncertainty-weighted joint
//! objective with two trainable log-noise scales.
//!
//! The perceptual distance runs on a fixed, seeded, untrained strided
//! convolution stack. Replacing a pretrained feature network with seeded
//! random features keeps the loss shift-tolerant without an external
//! weight dependency; the seed is part of the configuration.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{leaky_relu_backward, leaky_relu_forward, Conv2d};
use crate::nn::{GradBuf, ParamStore, Scalar};
use crate::tensorio::check_binary;

/// Inclusive-exclusive rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn crop<T: Clone>(&self, x: &Array2<T>) -> Array2<T> {
        x.slice(ndarray::s![self.row0..self.row1, self.col0..self.col1])
            .to_owned()
    }
}

/// Minimal box containing all mask foreground, expanded by `pad_px` and
/// clipped to the image bounds.
pub fn bbox_of(mask: &Array2<u8>, pad_px: usize) -> Result<BBox> {
    check_binary(mask)?;
    let (h, w) = mask.dim();
    let mut r0 = usize::MAX;
    let mut c0 = usize::MAX;
    let mut r1 = 0usize;
    let mut c1 = 0usize;
    for ((r, c), &v) in mask.indexed_iter() {
        if v == 1 {
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
        }
    }
    if r0 == usize::MAX {
        return Err(Error::Degenerate("bbox of an empty mask".into()));
    }
    Ok(BBox {
        row0: r0.saturating_sub(pad_px),
        col0: c0.saturating_sub(pad_px),
        row1: (r1 + pad_px).min(h),
        col1: (c1 + pad_px).min(w),
    })
}

/// Trainable log noise scales: `s1 = log sigma1`, `s2 = log sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub s1: f64,
    pub s2: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { s1: 0.0, s2: 0.0 }
    }
}

/// `0.5 e^{-2 s1} l_seg + 0.5 e^{-2 s2} l_recon + s1 + s2`
/// (log-sigma form of the uncertainty-weighted objective).
pub fn joint_loss(l_seg: f64, l_recon: f64, w: &TaskWeights) -> f64 {
    0.5 * (-2.0 * w.s1).exp() * l_seg + 0.5 * (-2.0 * w.s2).exp() * l_recon + w.s1 + w.s2
}

/// Partial derivatives of [`joint_loss`]: (d/ds1, d/ds2, d/dl_seg, d/dl_recon).
pub fn joint_loss_grads(l_seg: f64, l_recon: f64, w: &TaskWeights) -> (f64, f64, f64, f64) {
    let e1 = (-2.0 * w.s1).exp();
    let e2 = (-2.0 * w.s2).exp();
    (
        -e1 * l_seg + 1.0,
        -e2 * l_recon + 1.0,
        0.5 * e1,
        0.5 * e2,
    )
}

/// Mean absolute difference between predicted and target SDF maps.
pub fn seg_loss<T: Scalar>(sdf_hat: &Array2<T>, sdf_gt: &Array2<T>) -> Result<f64> {
    if sdf_hat.dim() != sdf_gt.dim() {
        return Err(Error::Shape("seg_loss: shape mismatch".into()));
    }
    let n = sdf_hat.len() as f64;
    Ok(sdf_hat
        .iter()
        .zip(sdf_gt.iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

/// Gradient of [`seg_loss`] with respect to the prediction.
pub fn seg_loss_grad<T: Scalar>(sdf_hat: &Array2<T>, sdf_gt: &Array2<T>) -> Array2<T> {
    let n = T::from_f64(sdf_hat.len() as f64);
    ndarray::Zip::from(sdf_hat)
        .and(sdf_gt)
        .map_collect(|&a, &b| {
            if a > b {
                T::one() / n
            } else if a < b {
                -T::one() / n
            } else {
                T::zero()
            }
        })
}

/// Number of extractor layers whose features enter the distance.
const PERCEPTUAL_LAYERS: usize = 3;
const PERCEPTUAL_CHANNELS: [usize; PERCEPTUAL_LAYERS] = [8, 16, 32];
const LRELU_ALPHA: f64 = 0.2;
const NORM_EPS: f64 = 1e-10;

/// Minimum patch side accepted by the extractor.
pub const PERCEPTUAL_MIN_SIDE: usize = 8;

/// Fixed, seeded, untrained feature extractor: three stride-2
/// convolutions with leaky-ReLU, features channel-normalized per
/// location, squared differences averaged per layer then across layers.
pub struct PerceptualNet {
    pub seed: u64,
    ps32: ParamStore<f32>,
    ps64: ParamStore<f64>,
    convs: Vec<Conv2d>,
}

/// Selects the parameter store matching the scalar type.
pub trait PerceptualStore<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
}

impl PerceptualStore<f32> for PerceptualNet {
    fn store(&self) -> &ParamStore<f32> {
        &self.ps32
    }
}

impl PerceptualStore<f64> for PerceptualNet {
    fn store(&self) -> &ParamStore<f64> {
        &self.ps64
    }
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut ps = ParamStore::<f64>::new();
        let mut convs = Vec::new();
        let mut cin = 1usize;
        for (i, &cout) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("perc{i}"), cin, cout, 3, 2, 1));
            cin = cout;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &convs {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            ps.init_normal(conv.w, &mut rng, (2.0 / fan_in).sqrt());
            // biases stay zero: keeps d(a, a) = 0 exact and features centered
        }
        PerceptualNet {
            seed,
            ps32: ps.cast(),
            ps64: ps,
            convs,
        }
    }

    fn check_input<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
        if a.dim() != b.dim() {
            return Err(Error::Shape("perceptual: patch shapes differ".into()));
        }
        let (h, w) = a.dim();
        if h < PERCEPTUAL_MIN_SIDE || w < PERCEPTUAL_MIN_SIDE {
            return Err(Error::Degenerate(format!(
                "perceptual: patch {h}x{w} below the {PERCEPTUAL_MIN_SIDE}px receptive floor"
            )));
        }
        Ok(())
    }

    /// Raw (pre-normalization) features plus pre-activation caches.
    fn features<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array2<T>,
    ) -> (Vec<Array3<T>>, Vec<Array3<T>>) {
        let (h, w) = x.dim();
        let mut cur = x
            .to_owned()
            .into_shape_with_order((1, h, w))
            .unwrap();
        let mut feats = Vec::with_capacity(PERCEPTUAL_LAYERS);
        let mut pre = Vec::with_capacity(PERCEPTUAL_LAYERS);
        for conv in &self.convs {
            let z = conv.forward(ps, &cur);
            let f = leaky_relu_forward(&z, LRELU_ALPHA);
            pre.push(z);
            feats.push(f.clone());
            cur = f;
        }
        (feats, pre)
    }

    /// Distance plus, optionally, the gradient with respect to `b`.
    fn distance_impl<T: Scalar>(
        &self,
        a: &Array2<T>,
        b: &Array2<T>,
        want_grad: bool,
    ) -> Result<(f64, Option<Array2<T>>)>
    where
        Self: PerceptualStore<T>,
    {
        Self::check_input(a, b)?;
        let ps = self.store();
        let (fa, _) = self.features(ps, a);
        let (fb, pre_b) = self.features(ps, b);

        let mut total = 0.0f64;
        // per-layer normalized features and difference grads for b
        let mut layer_dfb: Vec<Array3<T>> = Vec::with_capacity(PERCEPTUAL_LAYERS);
        for l in 0..PERCEPTUAL_LAYERS {
            let na = channel_normalize(&fa[l]);
            let nb = channel_normalize(&fb[l]);
            let n_elems = na.len() as f64;
            let mut acc = 0.0f64;
            ndarray::Zip::from(&na).and(&nb).for_each(|&x, &y| {
                let d = (x - y).as_f64();
                acc += d * d;
            });
            total += acc / n_elems;
            if want_grad {
                // d(total)/d(nb) = 2 (nb - na) / (n_elems * L)
                let scale = T::from_f64(2.0 / (n_elems * PERCEPTUAL_LAYERS as f64));
                let d_nb = ndarray::Zip::from(&nb)
                    .and(&na)
                    .map_collect(|&y, &x| (y - x) * scale);
                layer_dfb.push(channel_normalize_backward(&fb[l], &d_nb));
            }
        }
        total /= PERCEPTUAL_LAYERS as f64;

        if !want_grad {
            return Ok((total, None));
        }

        // backprop through the conv stack into b (extractor weights fixed;
        // the input of layer l is fb[l-1], layer 0 sees the patch itself)
        let mut scratch = vec![T::zero(); ps.len()];
        let (h, w) = b.dim();
        let b3 = b.to_owned().into_shape_with_order((1, h, w)).unwrap();
        let mut grad_out: Option<Array3<T>> = None;
        for l in (0..PERCEPTUAL_LAYERS).rev() {
            let mut dy = layer_dfb[l].clone();
            if let Some(g) = grad_out.take() {
                ndarray::Zip::from(&mut dy).and(&g).for_each(|a, &b| {
                    *a = *a + b;
                });
            }
            let dz = leaky_relu_backward(&pre_b[l], &dy, LRELU_ALPHA);
            let input = if l == 0 { &b3 } else { &fb[l - 1] };
            let dx = self.convs[l].backward(ps, input, &dz, &mut GradBuf { data: &mut scratch });
            grad_out = Some(dx);
        }
        let g3 = grad_out.unwrap();
        Ok((total, Some(g3.into_shape_with_order((h, w)).unwrap())))
    }

    pub fn distance<T: Scalar>(&self, a: &Array2<T>, b: &Array2<T>) -> Result<f64>
    where
        Self: PerceptualStore<T>,
    {
        Ok(self.distance_impl(a, b, false)?.0)
    }

    /// Distance and gradient with respect to the second argument.
    pub fn distance_with_grad<T: Scalar>(
        &self,
        a: &Array2<T>,
        b: &Array2<T>,
    ) -> Result<(f64, Array2<T>)>
    where
        Self: PerceptualStore<T>,
    {
        let (d, g) = self.distance_impl(a, b, true)?;
        Ok((d, g.unwrap()))
    }

    pub fn distance64(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
        self.distance(a, b)
    }
}

/// Per-location channel normalization: v / sqrt(sum_c v^2 + eps).
fn channel_normalize<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sq = 0.0f64;
            for ci in 0..c {
                let v = x[[ci, i, j]].as_f64();
                sq += v * v;
            }
            let inv = T::from_f64(1.0 / (sq + NORM_EPS).sqrt());
            for ci in 0..c {
                out[[ci, i, j]] = x[[ci, i, j]] * inv;
            }
        }
    }
    out
}

/// Backward of [`channel_normalize`]: dx = dy/n - x (x . dy) / n^3.
fn channel_normalize_backward<T: Scalar>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut dx = Array3::<T>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sq = 0.0f64;
            let mut dot = 0.0f64;
            for ci in 0..c {
                let v = x[[ci, i, j]].as_f64();
                sq += v * v;
                dot += v * dy[[ci, i, j]].as_f64();
            }
            let n2 = sq + NORM_EPS;
            let inv_n = 1.0 / n2.sqrt();
            let inv_n3 = inv_n / n2;
            for ci in 0..c {
                let xv = x[[ci, i, j]].as_f64();
                let dv = dy[[ci, i, j]].as_f64();
                dx[[ci, i, j]] = T::from_f64(dv * inv_n - xv * dot * inv_n3);
            }
        }
    }
    dx
}

/// Perceptual distance between two same-shape patches.
pub fn perceptual_distance<T: Scalar>(
    net: &PerceptualNet,
    a: &Array2<T>,
    b: &Array2<T>,
) -> Result<f64>
where
    PerceptualNet: PerceptualStore<T>,
{
    net.distance(a, b)
}

/// Reconstruction loss: perceptual distance of the bbox crops.
pub fn recon_loss<T: Scalar>(
    net: &PerceptualNet,
    x0: &Array2<T>,
    x0_hat: &Array2<T>,
    bbox: &BBox,
) -> Result<f64>
where
    PerceptualNet: PerceptualStore<T>,
{
    if x0.dim() != x0_hat.dim() {
        return Err(Error::Shape("recon_loss: shape mismatch".into()));
    }
    net.distance(&bbox.crop(x0), &bbox.crop(x0_hat))
}

/// Reconstruction loss plus its gradient with respect to the full
/// predicted image (zero outside the bbox).
pub fn recon_loss_with_grad<T: Scalar>(
    net: &PerceptualNet,
    x0: &Array2<T>,
    x0_hat: &Array2<T>,
    bbox: &BBox,
) -> Result<(f64, Array2<T>)>
where
    PerceptualNet: PerceptualStore<T>,
{
    if x0.dim() != x0_hat.dim() {
        return Err(Error::Shape("recon_loss: shape mismatch".into()));
    }
    let (loss, crop_grad) = net.distance_with_grad(&bbox.crop(x0), &bbox.crop(x0_hat))?;
    let mut full = Array2::<T>::zeros(x0.dim());
    full.slice_mut(ndarray::s![bbox.row0..bbox.row1, bbox.col0..bbox.col1])
        .assign(&crop_grad);
    Ok((loss, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::normal_array2;

    #[test]
    fn bbox_examples() {
        let mut m = Array2::<u8>::zeros((8, 8));
        m[[3, 4]] = 1;
        let b = bbox_of(&m, 0).unwrap();
        assert_eq!(
            b,
            BBox {
                row0: 3,
                col0: 4,
                row1: 4,
                col1: 5
            }
        );
        let full = Array2::<u8>::ones((8, 8));
        let bf = bbox_of(&full, 0).unwrap();
        assert_eq!(
            bf,
            BBox {
                row0: 0,
                col0: 0,
                row1: 8,
                col1: 8
            }
        );
        let mut two = Array2::<u8>::zeros((16, 16));
        two[[2, 2]] = 1;
        two[[10, 7]] = 1;
        let b2 = bbox_of(&two, 1).unwrap();
        assert_eq!(
            b2,
            BBox {
                row0: 1,
                col0: 1,
                row1: 12,
                col1: 9
            }
        );
        assert!(bbox_of(&Array2::<u8>::zeros((8, 8)), 0).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        // unit sigmas: 0.5*2 + 0.5*4 + 0 = 3
        let w = TaskWeights { s1: 0.0, s2: 0.0 };
        assert_eq!(joint_loss(2.0, 4.0, &w), 3.0);
        // sigma = e (s = 1), zero losses: log term only = s1 + s2 = 2
        let we = TaskWeights { s1: 1.0, s2: 1.0 };
        assert_eq!(joint_loss(0.0, 0.0, &we), 2.0);
    }

    #[test]
    fn joint_loss_grads_match_fd() {
        let w = TaskWeights { s1: 0.3, s2: -0.2 };
        let (l_seg, l_recon) = (1.7, 0.9);
        let (ds1, ds2, dls, dlr) = joint_loss_grads(l_seg, l_recon, &w);
        let h = 1e-6;
        let fd_s1 = (joint_loss(
            l_seg,
            l_recon,
            &TaskWeights {
                s1: w.s1 + h,
                ..w
            },
        ) - joint_loss(
            l_seg,
            l_recon,
            &TaskWeights {
                s1: w.s1 - h,
                ..w
            },
        )) / (2.0 * h);
        assert!((fd_s1 - ds1).abs() / ds1.abs().max(1e-8) < 1e-4);
        let fd_s2 = (joint_loss(
            l_seg,
            l_recon,
            &TaskWeights {
                s2: w.s2 + h,
                ..w
            },
        ) - joint_loss(
            l_seg,
            l_recon,
            &TaskWeights {
                s2: w.s2 - h,
                ..w
            },
        )) / (2.0 * h);
        assert!((fd_s2 - ds2).abs() / ds2.abs().max(1e-8) < 1e-4);
        let fd_ls =
            (joint_loss(l_seg + h, l_recon, &w) - joint_loss(l_seg - h, l_recon, &w)) / (2.0 * h);
        assert!((fd_ls - dls).abs() < 1e-8);
        let fd_lr =
            (joint_loss(l_seg, l_recon + h, &w) - joint_loss(l_seg, l_recon - h, &w)) / (2.0 * h);
        assert!((fd_lr - dlr).abs() < 1e-8);
    }

    #[test]
    fn joint_loss_stationary_point() {
        // minimizing over s1 at fixed l_seg: s1* = 0.5 ln(l_seg), where
        // e^{-2 s1*} l_seg = 1
        let l_seg: f64 = 2.5;
        let s1_star = 0.5 * l_seg.ln();
        let w = TaskWeights {
            s1: s1_star,
            s2: 0.0,
        };
        let (ds1, _, _, _) = joint_loss_grads(l_seg, 1.0, &w);
        assert!(ds1.abs() < 1e-12);
        // numeric minimization agrees
        let mut best = (f64::INFINITY, 0.0);
        let mut s = -3.0;
        while s < 3.0 {
            let v = joint_loss(l_seg, 1.0, &TaskWeights { s1: s, s2: 0.0 });
            if v < best.0 {
                best = (v, s);
            }
            s += 1e-4;
        }
        assert!((best.1 - s1_star).abs() < 1e-3);
        // scaling both losses by c shifts optimum by 0.5 ln c
        let c = 3.7;
        let s1_scaled = 0.5 * (c * l_seg).ln();
        assert!((s1_scaled - (s1_star + 0.5 * c.ln())).abs() < 1e-12);
        let w2 = TaskWeights {
            s1: s1_scaled,
            s2: 0.0,
        };
        let (ds1b, _, _, _) = joint_loss_grads(c * l_seg, 1.0, &w2);
        assert!(ds1b.abs() < 1e-12);
    }

    #[test]
    fn seg_loss_examples() {
        let a = Array2::<f64>::from_elem((4, 4), 0.3);
        assert_eq!(seg_loss(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((seg_loss(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let p = ndarray::array![[0.0, 0.2], [0.4, 0.2]];
        let q = Array2::<f64>::zeros((2, 2));
        assert!((seg_loss(&p, &q).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = normal_array2::<f64, _>(&mut rng, (6, 6));
        let b = normal_array2::<f64, _>(&mut rng, (6, 6));
        let g = seg_loss_grad(&a, &b);
        let h = 1e-7;
        for idx in [0usize, 7, 13, 35] {
            let mut ap = a.clone();
            ap.as_slice_mut().unwrap()[idx] += h;
            let lp = seg_loss(&ap, &b).unwrap();
            ap.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let lm = seg_loss(&ap, &b).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn perceptual_identity_symmetry() {
        let net = PerceptualNet::new(7171);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = normal_array2::<f64, _>(&mut rng, (16, 16));
        let b = normal_array2::<f64, _>(&mut rng, (16, 16));
        assert_eq!(net.distance(&a, &a).unwrap(), 0.0);
        let dab = net.distance(&a, &b).unwrap();
        let dba = net.distance(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-12);
        assert!(dab > 0.0);
    }

    #[test]
    fn perceptual_rejects_small_patches() {
        let net = PerceptualNet::new(7171);
        let a = Array2::<f64>::zeros((4, 4));
        assert!(net.distance(&a, &a).is_err());
    }

    #[test]
    fn perceptual_shift_tolerance_vs_inversion() {
        // one-pixel shift of a textured phantom patch stays closer than
        // intensity inversion
        let net = PerceptualNet::new(7171);
        let params = crate::phantom::PhantomParams::default();
        let mut shift_wins = 0;
        let total = 6;
        for seed in 0..total {
            let hu = crate::phantom::generate_case_hu(&params, 400 + seed).unwrap();
            let (h, w) = hu.ncct_hu.dim();
            // normalized, textured central crop
            let lo = hu.ncct_hu.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = hu.ncct_hu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm = hu.ncct_hu.mapv(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
            let crop = |dr: usize, dc: usize| -> Array2<f64> {
                norm.slice(ndarray::s![
                    h / 2 - 12 + dr..h / 2 + 12 + dr,
                    w / 2 - 12 + dc..w / 2 + 12 + dc
                ])
                .to_owned()
            };
            let base = crop(0, 0);
            let shifted = crop(1, 0);
            let inverted = base.mapv(|v| -v);
            let d_shift = net.distance(&base, &shifted).unwrap();
            let d_inv = net.distance(&base, &inverted).unwrap();
            if d_shift < d_inv {
                shift_wins += 1;
            }
        }
        assert_eq!(
            shift_wins, total,
            "shifted copies must stay perceptually closer than inverted ones"
        );
    }

    #[test]
    fn perceptual_grad_matches_fd() {
        let net = PerceptualNet::new(7171);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = normal_array2::<f64, _>(&mut rng, (9, 9));
        let b = normal_array2::<f64, _>(&mut rng, (9, 9));
        let (_, g) = net.distance_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for idx in [0usize, 11, 40, 77] {
            let mut bp = b.clone();
            bp.as_slice_mut().unwrap()[idx] += h;
            let lp = net.distance(&a, &bp).unwrap();
            bp.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let lm = net.distance(&a, &bp).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "idx {idx}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn recon_loss_ignores_outside_bbox() {
        let net = PerceptualNet::new(7171);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x0 = normal_array2::<f64, _>(&mut rng, (32, 32));
        let mut x0_hat = normal_array2::<f64, _>(&mut rng, (32, 32));
        let bbox = BBox {
            row0: 8,
            col0: 8,
            row1: 24,
            col1: 24,
        };
        let l1 = recon_loss(&net, &x0, &x0_hat, &bbox).unwrap();
        // scribble outside the box
        x0_hat[[0, 0]] = 99.0;
        x0_hat[[31, 31]] = -99.0;
        x0_hat[[7, 23]] = 5.0;
        let l2 = recon_loss(&net, &x0, &x0_hat, &bbox).unwrap();
        assert_eq!(l1, l2);
        // identical inside -> zero
        let same = x0.clone();
        assert_eq!(recon_loss(&net, &x0, &same, &bbox).unwrap(), 0.0);
        // compositional oracle: equals manual crop + distance
        let manual = net
            .distance(&bbox.crop(&x0), &bbox.crop(&x0_hat))
            .unwrap();
        assert_eq!(l2, manual);
    }

    #[test]
    fn recon_grad_zero_outside_bbox_and_matches_fd() {
        let net = PerceptualNet::new(7171);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x0 = normal_array2::<f64, _>(&mut rng, (24, 24));
        let x0_hat = normal_array2::<f64, _>(&mut rng, (24, 24));
        let bbox = BBox {
            row0: 4,
            col0: 6,
            row1: 18,
            col1: 20,
        };
        let (_, g) = recon_loss_with_grad(&net, &x0, &x0_hat, &bbox).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[23, 23]], 0.0);
        assert_eq!(g[[3, 10]], 0.0);
        let h = 1e-6;
        for (r, c) in [(5usize, 7usize), (10, 10), (17, 19)] {
            let mut xp = x0_hat.clone();
            xp[[r, c]] += h;
            let lp = recon_loss(&net, &x0, &xp, &bbox).unwrap();
            xp[[r, c]] -= 2.0 * h;
            let lm = recon_loss(&net, &x0, &xp, &bbox).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = g[[r, c]];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-10) < 1e-5);
        }
    }
}
