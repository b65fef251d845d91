//! Shared-backbone dual-head denoising U-Net.
//!
//! The noisy CECT state and the NCCT condition enter as two channels; the
//! encoder/decoder trunk is fully shared and two heads branch from the
//! final decoder feature map: a linear (1x1) projection for the noise
//! estimate and a 3x3 projection with tanh for the SDF estimate.
//! Timestep conditioning is a sinusoidal embedding passed through a small
//! MLP and injected per stage as a per-channel bias.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    add_channel_bias, avgpool2_backward, avgpool2_forward, channel_bias_grad, concat_channels,
    silu1_backward, silu1_forward, silu_backward, silu_forward, split_channels, tanh_backward,
    tanh_forward, upsample2_backward, upsample2_forward, Conv2d, GnCache, GroupNorm, Linear,
};
use crate::nn::{sinusoidal_embedding, GradBuf, ParamStore, Scalar};

/// Conditioning channels: noisy CECT + NCCT.
pub const IN_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            base_width: 32,
            depth: 3,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.len() != self.depth {
            return Err(Error::Config(format!(
                "channel_mults length {} must equal depth {}",
                self.channel_mults.len(),
                self.depth
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by 2^depth = {}",
                self.image_size,
                1 << self.depth
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "time_embed_dim must be even and >= 4".into(),
            ));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }
}

/// conv -> (+ timestep bias) -> group norm -> SiLU
#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    gn: GroupNorm,
    temb: Option<Linear>,
}

struct BlockCache<T> {
    x: Array3<T>,
    z: Array3<T>,
    gn: GnCache<T>,
    y: Array3<T>,
}

impl Block {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        let conv = Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 3, 1, 1);
        let gn = GroupNorm::new(ps, &format!("{name}.gn"), cout);
        let temb = temb_dim.map(|e| Linear::new(ps, &format!("{name}.temb"), e, cout));
        Block { conv, gn, temb }
    }

    fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: Array3<T>,
        emb: &Array1<T>,
    ) -> (Array3<T>, BlockCache<T>) {
        let mut z = self.conv.forward(ps, &x);
        if let Some(temb) = &self.temb {
            let bias = temb.forward(ps, emb);
            add_channel_bias(&mut z, &bias);
        }
        let (y, gn_cache) = self.gn.forward(ps, &z);
        let out = silu_forward(&y);
        (
            out,
            BlockCache {
                x,
                z,
                gn: gn_cache,
                y,
            },
        )
    }

    /// Returns dx; accumulates parameter grads and (for conditioned
    /// blocks) the embedding gradient.
    fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Array3<T>,
        emb: &Array1<T>,
        demb: &mut Array1<T>,
        grad: &mut GradBuf<T>,
    ) -> Array3<T> {
        let d_gn_out = silu_backward(&cache.y, dy);
        let dz = self.gn.backward(ps, &cache.z, &cache.gn, &d_gn_out, grad);
        if let Some(temb) = &self.temb {
            let dbias = channel_bias_grad(&dz);
            let de = temb.backward(ps, emb, &dbias, grad);
            for (a, b) in demb.iter_mut().zip(de.iter()) {
                *a = *a + *b;
            }
        }
        self.conv.backward(ps, &cache.x, &dz, grad)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    b1: Block,
    b2: Block,
}

struct StageCache<T> {
    b1: BlockCache<T>,
    b2: BlockCache<T>,
}

impl Stage {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
    ) -> Self {
        Stage {
            b1: Block::new(ps, &format!("{name}.b1"), cin, cout, Some(temb_dim)),
            b2: Block::new(ps, &format!("{name}.b2"), cout, cout, None),
        }
    }

    fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: Array3<T>,
        emb: &Array1<T>,
    ) -> (Array3<T>, StageCache<T>) {
        let (h, c1) = self.b1.forward(ps, x, emb);
        let (out, c2) = self.b2.forward(ps, h, emb);
        (out, StageCache { b1: c1, b2: c2 })
    }

    fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &StageCache<T>,
        dy: &Array3<T>,
        emb: &Array1<T>,
        demb: &mut Array1<T>,
        grad: &mut GradBuf<T>,
    ) -> Array3<T> {
        let dh = self.b2.backward(ps, &cache.b2, dy, emb, demb, grad);
        self.b1.backward(ps, &cache.b1, &dh, emb, demb, grad)
    }
}

/// The dual-head U-Net. Holds parameter handles only; the weights live in
/// a [`ParamStore`] owned by the caller.
pub struct UNet {
    pub config: NetConfig,
    enc: Vec<Stage>,
    bott: Stage,
    dec: Vec<Stage>,
    noise_head: Conv2d,
    sdf_head: Conv2d,
    t1: Linear,
    t2: Linear,
}

/// Everything the backward pass needs from a forward evaluation.
pub struct ForwardCache<T> {
    emb_raw: Array1<T>,
    emb_h1: Array1<T>,
    emb: Array1<T>,
    enc: Vec<StageCache<T>>,
    bott: StageCache<T>,
    dec: Vec<StageCache<T>>,
    /// (input spatial dims) of each pooling op, in forward order.
    pool_dims: Vec<(usize, usize)>,
    /// channel count of the upsampled half of each decoder concat.
    concat_up_channels: Vec<usize>,
    head_in: Array3<T>,
    sdf_out: Array3<T>,
}

impl UNet {
    /// Register all parameters in a deterministic order.
    pub fn build<T: Scalar>(ps: &mut ParamStore<T>, config: &NetConfig) -> Result<UNet> {
        config.validate()?;
        let ch = config.stage_channels();
        let e = config.time_embed_dim;
        let t1 = Linear::new(ps, "temb.l1", e, e);
        let t2 = Linear::new(ps, "temb.l2", e, e);
        let mut enc = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 { IN_CHANNELS } else { ch[i - 1] };
            enc.push(Stage::new(ps, &format!("enc{i}"), cin, ch[i], e));
        }
        let c_last = *ch.last().unwrap();
        let bott = Stage::new(ps, "bott", c_last, c_last, e);
        let mut dec = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_up = if i == config.depth - 1 { c_last } else { ch[i + 1] };
            dec.push(Stage::new(ps, &format!("dec{i}"), c_up + ch[i], ch[i], e));
        }
        let noise_head = Conv2d::new(ps, "noise_head", ch[0], 1, 1, 1, 0);
        let sdf_head = Conv2d::new(ps, "sdf_head", ch[0], 1, 3, 1, 1);
        Ok(UNet {
            config: config.clone(),
            enc,
            bott,
            dec,
            noise_head,
            sdf_head,
            t1,
            t2,
        })
    }

    /// Build and deterministically initialize (fan-in scaled Gaussian
    /// weights, unit GN gains, zero biases).
    pub fn init_params<T: Scalar>(config: &NetConfig, seed: u64) -> Result<(UNet, ParamStore<T>)> {
        let mut ps = ParamStore::new();
        let net = UNet::build(&mut ps, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs: Vec<&Conv2d> = Vec::new();
        for s in net.enc.iter().chain([&net.bott]).chain(net.dec.iter()) {
            convs.push(&s.b1.conv);
            convs.push(&s.b2.conv);
        }
        convs.push(&net.noise_head);
        convs.push(&net.sdf_head);
        for conv in convs {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            ps.init_normal(conv.w, &mut rng, (1.0 / fan_in).sqrt());
        }
        for s in net.enc.iter().chain([&net.bott]).chain(net.dec.iter()) {
            ps.fill(s.b1.gn.gamma, T::one());
            ps.fill(s.b2.gn.gamma, T::one());
        }
        for lin in [&net.t1, &net.t2] {
            let fan_in = lin.dim_in as f64;
            ps.init_normal(lin.w, &mut rng, (1.0 / fan_in).sqrt());
        }
        for s in &net.enc {
            if let Some(l) = &s.b1.temb {
                ps.init_normal(l.w, &mut rng, (1.0 / l.dim_in as f64).sqrt());
            }
        }
        if let Some(l) = &net.bott.b1.temb {
            ps.init_normal(l.w, &mut rng, (1.0 / l.dim_in as f64).sqrt());
        }
        for s in &net.dec {
            if let Some(l) = &s.b1.temb {
                ps.init_normal(l.w, &mut rng, (1.0 / l.dim_in as f64).sqrt());
            }
        }
        Ok((net, ps))
    }

    fn check_inputs<T: Scalar>(&self, x_t: &Array2<T>, ncct: &Array2<T>) -> Result<()> {
        let s = self.config.image_size;
        if x_t.dim() != (s, s) || ncct.dim() != (s, s) {
            return Err(Error::Shape(format!(
                "network expects {s}x{s} inputs, got {:?} and {:?}",
                x_t.dim(),
                ncct.dim()
            )));
        }
        Ok(())
    }

    /// Forward pass producing the noise estimate and the bounded SDF
    /// estimate, plus the cache for a subsequent backward pass.
    pub fn forward_cached<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x_t: &Array2<T>,
        ncct: &Array2<T>,
        t: usize,
    ) -> Result<(Array2<T>, Array2<T>, ForwardCache<T>)> {
        self.check_inputs(x_t, ncct)?;
        let s = self.config.image_size;

        let emb_raw = sinusoidal_embedding::<T>(t, self.config.time_embed_dim);
        let emb_h1 = self.t1.forward(ps, &emb_raw);
        let emb_a1 = silu1_forward(&emb_h1);
        let emb = self.t2.forward(ps, &emb_a1);

        let mut x = Array3::<T>::zeros((IN_CHANNELS, s, s));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(x_t);
        x.index_axis_mut(ndarray::Axis(0), 1).assign(ncct);

        let mut enc_caches = Vec::with_capacity(self.config.depth);
        let mut skips: Vec<Array3<T>> = Vec::with_capacity(self.config.depth);
        let mut pool_dims = Vec::new();
        let mut h = x;
        for (i, stage) in self.enc.iter().enumerate() {
            if i > 0 {
                let (_, hh, ww) = h.dim();
                pool_dims.push((hh, ww));
                h = avgpool2_forward(&h);
            }
            let (out, cache) = stage.forward(ps, h, &emb);
            enc_caches.push(cache);
            skips.push(out.clone());
            h = out;
        }
        {
            let (_, hh, ww) = h.dim();
            pool_dims.push((hh, ww));
            h = avgpool2_forward(&h);
        }
        let (mut h, bott_cache) = {
            let (out, cache) = self.bott.forward(ps, h, &emb);
            (out, cache)
        };

        let mut dec_caches: Vec<Option<StageCache<T>>> =
            (0..self.config.depth).map(|_| None).collect();
        let mut concat_up_channels = vec![0usize; self.config.depth];
        for i in (0..self.config.depth).rev() {
            let up = upsample2_forward(&h);
            concat_up_channels[i] = up.dim().0;
            let cat = concat_channels(&up, &skips[i]);
            let (out, cache) = self.dec[i].forward(ps, cat, &emb);
            dec_caches[i] = Some(cache);
            h = out;
        }
        let dec_caches: Vec<StageCache<T>> =
            dec_caches.into_iter().map(|c| c.unwrap()).collect();

        let head_in = h;
        let eps3 = self.noise_head.forward(ps, &head_in);
        let sdf_pre = self.sdf_head.forward(ps, &head_in);
        let sdf3 = tanh_forward(&sdf_pre);

        let eps = eps3.index_axis(ndarray::Axis(0), 0).to_owned();
        let sdf = sdf3.index_axis(ndarray::Axis(0), 0).to_owned();
        Ok((
            eps,
            sdf,
            ForwardCache {
                emb_raw,
                emb_h1,
                emb,
                enc: enc_caches,
                bott: bott_cache,
                dec: dec_caches,
                pool_dims,
                concat_up_channels,
                head_in,
                sdf_out: sdf3,
            },
        ))
    }

    /// Forward pass without retaining the backward cache.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x_t: &Array2<T>,
        ncct: &Array2<T>,
        t: usize,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let (eps, sdf, _) = self.forward_cached(ps, x_t, ncct, t)?;
        Ok((eps, sdf))
    }

    /// Backward pass from head-output gradients; accumulates parameter
    /// gradients into `grad` (flat, same layout as the store).
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &ForwardCache<T>,
        d_eps: &Array2<T>,
        d_sdf: &Array2<T>,
        grad: &mut [T],
    ) -> Result<()> {
        let s = self.config.image_size;
        if d_eps.dim() != (s, s) || d_sdf.dim() != (s, s) {
            return Err(Error::Shape("backward: gradient shape mismatch".into()));
        }
        let mut grad = GradBuf { data: grad };
        let mut demb = Array1::<T>::zeros(self.config.time_embed_dim);

        let d_eps3 = d_eps
            .to_owned()
            .into_shape_with_order((1, s, s))
            .unwrap();
        let d_sdf3 = d_sdf
            .to_owned()
            .into_shape_with_order((1, s, s))
            .unwrap();

        let d_sdf_pre = tanh_backward(&cache.sdf_out, &d_sdf3);
        let mut dh = self
            .noise_head
            .backward(ps, &cache.head_in, &d_eps3, &mut grad);
        let dh_sdf = self
            .sdf_head
            .backward(ps, &cache.head_in, &d_sdf_pre, &mut grad);
        ndarray::Zip::from(&mut dh).and(&dh_sdf).for_each(|a, &b| {
            *a = *a + b;
        });

        // decoder stages were applied depth-1 .. 0, so backward runs 0 .. depth-1
        let mut d_skips: Vec<Option<Array3<T>>> = (0..self.config.depth).map(|_| None).collect();
        for i in 0..self.config.depth {
            let dcat = self.dec[i].backward(ps, &cache.dec[i], &dh, &cache.emb, &mut demb, &mut grad);
            let (d_up, d_skip) = split_channels(&dcat, cache.concat_up_channels[i]);
            d_skips[i] = Some(d_skip);
            dh = upsample2_backward(&d_up);
        }

        dh = self
            .bott
            .backward(ps, &cache.bott, &dh, &cache.emb, &mut demb, &mut grad);

        let mut pool_dims = cache.pool_dims.clone();
        dh = avgpool2_backward(&dh, pool_dims.pop().expect("bottleneck pool"));

        for i in (0..self.config.depth).rev() {
            let dskip = d_skips[i].take().unwrap();
            ndarray::Zip::from(&mut dh).and(&dskip).for_each(|a, &b| {
                *a = *a + b;
            });
            dh = self.enc[i].backward(ps, &cache.enc[i], &dh, &cache.emb, &mut demb, &mut grad);
            if i > 0 {
                dh = avgpool2_backward(&dh, pool_dims.pop().expect("encoder pool"));
            }
        }

        // timestep MLP
        let emb_a1 = silu1_forward(&cache.emb_h1);
        let da1 = self.t2.backward(ps, &emb_a1, &demb, &mut grad);
        let dh1 = silu1_backward(&cache.emb_h1, &da1);
        let _ = self.t1.backward(ps, &cache.emb_raw, &dh1, &mut grad);
        Ok(())
    }

    /// Parameter names of the noise head (private layers).
    pub fn noise_head_params(&self) -> [crate::nn::ParamRef; 2] {
        [self.noise_head.w, self.noise_head.b]
    }

    /// Parameter names of the SDF head (private layers).
    pub fn sdf_head_params(&self) -> [crate::nn::ParamRef; 2] {
        [self.sdf_head.w, self.sdf_head.b]
    }

    /// A representative encoder parameter (first conv weight).
    pub fn first_encoder_param(&self) -> crate::nn::ParamRef {
        self.enc[0].b1.conv.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_array2;

    fn tiny_config() -> NetConfig {
        NetConfig {
            image_size: 16,
            base_width: 2,
            depth: 2,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let bad = NetConfig {
            image_size: 60,
            ..NetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad2 = NetConfig {
            channel_mults: vec![1, 2],
            ..NetConfig::default()
        };
        assert!(bad2.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config();
        let (net, ps) = UNet::init_params::<f64>(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_t = normal_array2::<f64, _>(&mut rng, (16, 16));
        let ncct = normal_array2::<f64, _>(&mut rng, (16, 16));
        let (eps, sdf) = net.forward(&ps, &x_t, &ncct, 3).unwrap();
        assert_eq!(eps.dim(), (16, 16));
        assert_eq!(sdf.dim(), (16, 16));
        assert!(eps.iter().all(|v| v.is_finite()));
        assert!(sdf.iter().all(|v| v.abs() <= 1.0));
        let (eps2, sdf2) = net.forward(&ps, &x_t, &ncct, 3).unwrap();
        assert_eq!(eps, eps2);
        assert_eq!(sdf, sdf2);
        // wrong input size rejected
        let small = normal_array2::<f64, _>(&mut rng, (8, 8));
        assert!(net.forward(&ps, &small, &small, 3).is_err());
    }

    #[test]
    fn timestep_conditioning_is_wired() {
        let cfg = tiny_config();
        let (net, ps) = UNet::init_params::<f64>(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_t = normal_array2::<f64, _>(&mut rng, (16, 16));
        let ncct = normal_array2::<f64, _>(&mut rng, (16, 16));
        let (e1, s1) = net.forward(&ps, &x_t, &ncct, 1).unwrap();
        let (e2, s2) = net.forward(&ps, &x_t, &ncct, 9).unwrap();
        assert_ne!(e1, e2);
        assert_ne!(s1, s2);
    }

    #[test]
    fn init_seed_determinism() {
        let cfg = tiny_config();
        let (_, ps1) = UNet::init_params::<f64>(&cfg, 7).unwrap();
        let (_, ps2) = UNet::init_params::<f64>(&cfg, 7).unwrap();
        let (_, ps3) = UNet::init_params::<f64>(&cfg, 8).unwrap();
        assert_eq!(ps1.checksum(), ps2.checksum());
        assert_ne!(ps1.checksum(), ps3.checksum());
    }

    #[test]
    fn shared_backbone_weight_touches_both_heads() {
        let cfg = tiny_config();
        let (net, mut ps) = UNet::init_params::<f64>(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_t = normal_array2::<f64, _>(&mut rng, (16, 16));
        let ncct = normal_array2::<f64, _>(&mut rng, (16, 16));
        let (e1, s1) = net.forward(&ps, &x_t, &ncct, 5).unwrap();
        let enc_w = net.first_encoder_param();
        let off = ps.entry(enc_w).offset;
        ps.data[off] += 0.05;
        let (e2, s2) = net.forward(&ps, &x_t, &ncct, 5).unwrap();
        let de: f64 = e1.iter().zip(e2.iter()).map(|(a, b)| (a - b).abs()).sum();
        let ds: f64 = s1.iter().zip(s2.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(de > 0.0, "noise head insensitive to encoder weight");
        assert!(ds > 0.0, "sdf head insensitive to encoder weight");
    }

    #[test]
    fn head_privacy_in_gradients() {
        let cfg = tiny_config();
        let (net, ps) = UNet::init_params::<f64>(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_t = normal_array2::<f64, _>(&mut rng, (16, 16));
        let ncct = normal_array2::<f64, _>(&mut rng, (16, 16));
        let (_, _, cache) = net.forward_cached(&ps, &x_t, &ncct, 5).unwrap();
        let ones = Array2::<f64>::ones((16, 16));
        let zeros = Array2::<f64>::zeros((16, 16));

        // reconstruction-only gradient: sdf head must stay zero
        let mut g_recon = vec![0.0; ps.len()];
        net.backward(&ps, &cache, &ones, &zeros, &mut g_recon).unwrap();
        for r in net.sdf_head_params() {
            let e = ps.entry(r);
            assert!(g_recon[e.offset..e.offset + e.len].iter().all(|&v| v == 0.0));
        }
        for r in net.noise_head_params() {
            let e = ps.entry(r);
            assert!(g_recon[e.offset..e.offset + e.len].iter().any(|&v| v != 0.0));
        }
        // encoder reached
        let enc = ps.entry(net.first_encoder_param());
        assert!(g_recon[enc.offset..enc.offset + enc.len]
            .iter()
            .any(|&v| v != 0.0));

        // segmentation-only gradient: noise head must stay zero
        let mut g_seg = vec![0.0; ps.len()];
        net.backward(&ps, &cache, &zeros, &ones, &mut g_seg).unwrap();
        for r in net.noise_head_params() {
            let e = ps.entry(r);
            assert!(g_seg[e.offset..e.offset + e.len].iter().all(|&v| v == 0.0));
        }
        for r in net.sdf_head_params() {
            let e = ps.entry(r);
            assert!(g_seg[e.offset..e.offset + e.len].iter().any(|&v| v != 0.0));
        }
        assert!(g_seg[enc.offset..enc.offset + enc.len]
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn full_network_gradients_match_fd() {
        // tiny config so the FD sweep over every parameter stays fast
        let cfg = NetConfig {
            image_size: 8,
            base_width: 2,
            depth: 1,
            channel_mults: vec![1],
            time_embed_dim: 4,
        };
        let (net, mut ps) = UNet::init_params::<f64>(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = normal_array2::<f64, _>(&mut rng, (8, 8));
        let ncct = normal_array2::<f64, _>(&mut rng, (8, 8));
        let t = 2usize;

        // probe loss: fixed weighted sum over both outputs
        let loss = |net: &UNet, ps: &ParamStore<f64>| -> f64 {
            let (eps, sdf) = net.forward(ps, &x_t, &ncct, t).unwrap();
            let mut l = 0.0;
            for (i, v) in eps.iter().enumerate() {
                l += v * (0.05 + (i % 5) as f64 * 0.01);
            }
            for (i, v) in sdf.iter().enumerate() {
                l += v * (0.03 + (i % 3) as f64 * 0.02);
            }
            l
        };
        let (eps, sdf, cache) = net.forward_cached(&ps, &x_t, &ncct, t).unwrap();
        let d_eps = Array2::from_shape_fn(eps.dim(), |(r, c)| {
            let i = r * 8 + c;
            0.05 + (i % 5) as f64 * 0.01
        });
        let d_sdf = Array2::from_shape_fn(sdf.dim(), |(r, c)| {
            let i = r * 8 + c;
            0.03 + (i % 3) as f64 * 0.02
        });
        let mut g = vec![0.0; ps.len()];
        net.backward(&ps, &cache, &d_eps, &d_sdf, &mut g).unwrap();

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..ps.len() {
            let orig = ps.data[i];
            ps.data[i] = orig + h;
            let lp = loss(&net, &ps);
            ps.data[i] = orig - h;
            let lm = loss(&net, &ps);
            ps.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max((fd - g[i]).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative grad error {worst}");
    }
}
