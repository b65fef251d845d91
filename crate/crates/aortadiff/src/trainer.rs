//! Two-phase semi-supervised training: a labeled warm-up pass, then mixed
//! batches with exact 1:1 labeled/unlabeled composition and per-sample
//! loss masking. Deterministic end to end: the batch streams, the
//! timestep/noise draws, and the optimizer are all seeded, and checkpoints
//! capture enough state for bit-exact resumption.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainMode};
use crate::error::{Error, Result};
use crate::losses::{
    bbox_of, recon_loss_with_grad, seg_loss, seg_loss_grad, BBox, PerceptualNet, PerceptualStore,
    TaskWeights,
};
use crate::network::UNet;
use crate::nn::{clip_global_norm, normal_array2, ParamStore, Scalar};
use crate::schedule::{dx0_deps_coeff, make_linear_schedule, predict_x0_with_mask, q_sample,
    NoiseSchedule, ScheduleConfig};
use crate::sdf::mask_to_sdf;
use crate::tensorio::{load_case, Manifest, Split};

/// One preloaded training sample in network precision.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub ncct: Array2<f32>,
    pub cect: Array2<f32>,
    pub aorta_bbox: BBox,
    pub sdf_gt: Option<Array2<f32>>,
    pub has_lumen: bool,
}

/// Load the training pools for a mode. Gen-only consumes every training
/// pair (labels ignored); label-aware modes split by lumen availability.
pub fn load_training_pools(
    data_root: &Path,
    cfg: &Config,
    mode: TrainMode,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let manifest = Manifest::load(data_root)?;
    let clamp = cfg.sdf_clamp_px();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for entry in manifest.split(Split::Train) {
        let case = load_case(data_root, entry)?;
        let (h, w) = case.ncct.shape();
        if (h, w) != (cfg.image_size, cfg.image_size) {
            return Err(Error::Shape(format!(
                "case {} is {h}x{w}, config expects {}",
                entry.case_id, cfg.image_size
            )));
        }
        let sdf_gt = match (&case.lumen_mask, mode.uses_seg()) {
            (Some(lumen), true) => Some(mask_to_sdf(lumen, clamp)?.values.mapv(|v| v as f32)),
            _ => None,
        };
        let sample = Sample {
            case_id: case.case_id.clone(),
            ncct: case.ncct.data.mapv(|v| v as f32),
            cect: case.cect.data.mapv(|v| v as f32),
            aorta_bbox: bbox_of(&case.aorta_mask, cfg.bbox_pad_px)?,
            has_lumen: sdf_gt.is_some(),
            sdf_gt,
        };
        if sample.has_lumen {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    Ok((labeled, unlabeled))
}

// ---------------------------------------------------------------------------
// Batch streams
// ---------------------------------------------------------------------------

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates with the stream's own draws
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Index of one batch element: (pool index, labeled flag).
pub type BatchItem = (usize, bool);

/// Deterministic stream of exactly 1:1 labeled/unlabeled batches. Each
/// pool cycles through independent seeded shuffles, reshuffled on
/// exhaustion. With an empty unlabeled pool the stream degrades to fully
/// labeled batches (logged once).
pub struct MixedBatchStream {
    order_l: Vec<usize>,
    order_u: Vec<usize>,
    pos_l: usize,
    pos_u: usize,
    rng_l: ChaCha8Rng,
    rng_u: ChaCha8Rng,
    batch_size: usize,
    n_labeled: usize,
    n_unlabeled: usize,
}

impl MixedBatchStream {
    pub fn new(
        n_labeled: usize,
        n_unlabeled: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::Config("labeled pool is empty".into()));
        }
        if n_unlabeled > 0 && batch_size % 2 != 0 {
            return Err(Error::Config(
                "batch_size must be even when mixing labeled and unlabeled pools".into(),
            ));
        }
        if n_unlabeled == 0 {
            log::warn!("unlabeled pool empty; mixed stream degrades to fully labeled batches");
        }
        let mut rng_l = ChaCha8Rng::seed_from_u64(seed);
        rng_l.set_stream(1);
        let mut rng_u = ChaCha8Rng::seed_from_u64(seed);
        rng_u.set_stream(2);
        let order_l = shuffled_indices(n_labeled, &mut rng_l);
        let order_u = shuffled_indices(n_unlabeled, &mut rng_u);
        Ok(MixedBatchStream {
            order_l,
            order_u,
            pos_l: 0,
            pos_u: 0,
            rng_l,
            rng_u,
            batch_size,
            n_labeled,
            n_unlabeled,
        })
    }

    fn next_labeled(&mut self) -> usize {
        if self.pos_l == self.order_l.len() {
            self.order_l = shuffled_indices(self.n_labeled, &mut self.rng_l);
            self.pos_l = 0;
        }
        let v = self.order_l[self.pos_l];
        self.pos_l += 1;
        v
    }

    fn next_unlabeled(&mut self) -> usize {
        if self.pos_u == self.order_u.len() {
            self.order_u = shuffled_indices(self.n_unlabeled, &mut self.rng_u);
            self.pos_u = 0;
        }
        let v = self.order_u[self.pos_u];
        self.pos_u += 1;
        v
    }

    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        let mut batch = Vec::with_capacity(self.batch_size);
        if self.n_unlabeled == 0 {
            for _ in 0..self.batch_size {
                batch.push((self.next_labeled(), true));
            }
            return batch;
        }
        let half = self.batch_size / 2;
        for _ in 0..half {
            batch.push((self.next_labeled(), true));
        }
        for _ in 0..half {
            batch.push((self.next_unlabeled(), false));
        }
        batch
    }
}

/// Single-pool epoch-order stream (warm-up and single-pool modes).
pub struct PoolStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    n: usize,
    batch_size: usize,
    labeled: bool,
}

impl PoolStream {
    pub fn new(n: usize, batch_size: usize, seed: u64, labeled: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("pool is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let order = shuffled_indices(n, &mut rng);
        Ok(PoolStream {
            order,
            pos: 0,
            rng,
            n,
            batch_size,
            labeled,
        })
    }

    /// Steps in one epoch (partial trailing batches are dropped).
    pub fn steps_per_epoch(&self) -> u64 {
        (self.n / self.batch_size) as u64
    }

    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.pos == self.order.len() {
                self.order = shuffled_indices(self.n, &mut self.rng);
                self.pos = 0;
            }
            batch.push((self.order[self.pos], self.labeled));
            self.pos += 1;
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay fixed to zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.t as i32);
        let lr = self.lr;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] as f64 / bc1;
            let vhat = self.v[i] as f64 / bc2;
            params[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// Training state and step
// ---------------------------------------------------------------------------

/// Serializable ChaCha state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model parameters, task weights, optimizer moments, iteration counter,
/// and the sample-noise random stream.
pub struct TrainState {
    pub params: ParamStore<f32>,
    /// (s1, s2) log noise scales.
    pub s: [f32; 2],
    pub adam: Adam,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn task_weights(&self) -> TaskWeights {
        TaskWeights {
            s1: self.s[0] as f64,
            s2: self.s[1] as f64,
        }
    }
}

/// Per-batch loss report (the JSONL log line body).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub phase: String,
    pub l_recon: Option<f64>,
    pub l_seg: Option<f64>,
    pub s1: f64,
    pub s2: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

/// Loss, flat parameter gradient, and task-weight gradients for a single
/// sample. Pure given the drawn `(t, eps)`; exposed for gradient audits.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_and_grads<T: Scalar>(
    net: &UNet,
    ps: &ParamStore<T>,
    perceptual: &PerceptualNet,
    sched: &NoiseSchedule,
    cect: &Array2<T>,
    ncct: &Array2<T>,
    bbox: &BBox,
    sdf_gt: Option<&Array2<T>>,
    t: usize,
    eps: &Array2<T>,
    weights: &TaskWeights,
    mode: TrainMode,
) -> Result<(SampleLosses, Vec<T>, f64, f64)>
where
    PerceptualNet: PerceptualStore<T>,
{
    let x_t = q_sample(cect, t, eps, sched)?;
    let (eps_hat, sdf_hat, cache) = net.forward_cached(ps, &x_t, ncct, t)?;

    let use_seg = mode.uses_seg() && sdf_gt.is_some();
    let use_recon = mode.uses_recon();
    let uncertainty = matches!(mode, TrainMode::SemiSup | TrainMode::FullSup);

    let mut loss = 0.0f64;
    let mut l_recon_raw = None;
    let mut l_seg_raw = None;
    let mut ds1 = 0.0f64;
    let mut ds2 = 0.0f64;

    let zero = Array2::<T>::zeros(eps_hat.dim());
    let mut d_eps = zero.clone();
    let mut d_sdf = zero;

    if use_recon {
        let (x0_hat, inside) = predict_x0_with_mask(&x_t, t, &eps_hat, sched)?;
        let (l_recon, d_x0) = recon_loss_with_grad(perceptual, cect, &x0_hat, bbox)?;
        l_recon_raw = Some(l_recon);
        let w_recon = if uncertainty {
            0.5 * (-2.0 * weights.s2).exp()
        } else {
            1.0
        };
        if uncertainty {
            loss += w_recon * l_recon + weights.s2;
            ds2 = -(-2.0 * weights.s2).exp() * l_recon + 1.0;
        } else {
            loss += l_recon;
        }
        // chain rule through the clamped clean-image recovery
        let coeff = T::from_f64(dx0_deps_coeff(t, sched) * w_recon);
        ndarray::Zip::from(&mut d_eps)
            .and(&d_x0)
            .and(&inside)
            .for_each(|o, &g, &in_range| {
                if in_range {
                    *o = g * coeff;
                }
            });
    }

    if use_seg {
        let sdf_gt = sdf_gt.unwrap();
        let l_seg = seg_loss(&sdf_hat, sdf_gt)?;
        l_seg_raw = Some(l_seg);
        let w_seg = if uncertainty {
            0.5 * (-2.0 * weights.s1).exp()
        } else {
            1.0
        };
        if uncertainty {
            loss += w_seg * l_seg + weights.s1;
            ds1 = -(-2.0 * weights.s1).exp() * l_seg + 1.0;
        } else {
            loss += l_seg;
        }
        let scale = T::from_f64(w_seg);
        let g = seg_loss_grad(&sdf_hat, sdf_gt);
        ndarray::Zip::from(&mut d_sdf).and(&g).for_each(|o, &v| {
            *o = v * scale;
        });
    }

    let mut grad = vec![T::zero(); ps.len()];
    net.backward(ps, &cache, &d_eps, &d_sdf, &mut grad)?;
    Ok((
        SampleLosses {
            total: loss,
            l_recon: l_recon_raw,
            l_seg: l_seg_raw,
        },
        grad,
        ds1,
        ds2,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub total: f64,
    pub l_recon: Option<f64>,
    pub l_seg: Option<f64>,
}

/// One optimizer update over a batch. Draws `(t, eps)` per sample from the
/// state RNG in batch order, evaluates per-sample gradients (order
/// preserved under parallelism), averages, clips, and steps.
pub fn train_step(
    state: &mut TrainState,
    net: &UNet,
    sched: &NoiseSchedule,
    perceptual: &PerceptualNet,
    batch: &[(&Sample, bool)],
    cfg: &Config,
    mode: TrainMode,
    phase: &str,
) -> Result<StepReport> {
    let t_count = sched.timesteps();
    // sequential draws keep the random stream deterministic
    let draws: Vec<(usize, Array2<f32>)> = batch
        .iter()
        .map(|(s, _)| {
            let t = (state.rng.next_u64() % t_count as u64) as usize;
            let eps = normal_array2::<f32, _>(&mut state.rng, s.cect.dim());
            (t, eps)
        })
        .collect();

    let weights = state.task_weights();
    let results: Vec<Result<(SampleLosses, Vec<f32>, f64, f64)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|((sample, labeled), (t, eps))| {
            let sdf_gt = if *labeled { sample.sdf_gt.as_ref() } else { None };
            sample_loss_and_grads(
                net,
                &state.params,
                perceptual,
                sched,
                &sample.cect,
                &sample.ncct,
                &sample.aorta_bbox,
                sdf_gt,
                *t,
                eps,
                &weights,
                mode,
            )
        })
        .collect();

    let b = batch.len() as f64;
    let mut grad = vec![0.0f32; state.params.len() + 2];
    let mut recon_sum = 0.0;
    let mut recon_n = 0usize;
    let mut seg_sum = 0.0;
    let mut seg_n = 0usize;
    for (i, res) in results.into_iter().enumerate() {
        let (losses, g, ds1, ds2) = res.map_err(|e| {
            Error::Numeric(format!(
                "batch sample {} (case {}, t={}): {e}",
                i, batch[i].0.case_id, draws[i].0
            ))
        })?;
        if !losses.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|(s, _)| s.case_id.as_str()).collect();
            let ts: Vec<usize> = draws.iter().map(|(t, _)| *t).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}; batch cases {:?} with t {:?}",
                state.iteration + 1,
                ids,
                ts
            )));
        }
        for (acc, v) in grad.iter_mut().zip(g.iter()) {
            *acc += *v;
        }
        let n = state.params.len();
        grad[n] += ds1 as f32;
        grad[n + 1] += ds2 as f32;
        if let Some(r) = losses.l_recon {
            recon_sum += r;
            recon_n += 1;
        }
        if let Some(s) = losses.l_seg {
            seg_sum += s;
            seg_n += 1;
        }
    }
    let inv_b = (1.0 / b) as f32;
    for v in grad.iter_mut() {
        *v *= inv_b;
    }
    if cfg.grad_clip_norm > 0.0 {
        clip_global_norm(&mut grad, cfg.grad_clip_norm);
    }
    crate::nn::all_finite(&grad)?;

    // one flat parameter vector: network weights then (s1, s2)
    let n = state.params.len();
    let mut flat = Vec::with_capacity(n + 2);
    flat.extend_from_slice(&state.params.data);
    flat.extend_from_slice(&state.s);
    state.adam.step(&mut flat, &grad);
    state.params.data.copy_from_slice(&flat[..n]);
    state.s.copy_from_slice(&flat[n..]);
    state.iteration += 1;

    let n_labeled = batch.iter().filter(|(_, l)| *l).count();
    Ok(StepReport {
        iteration: state.iteration,
        phase: phase.to_string(),
        l_recon: if recon_n > 0 {
            Some(recon_sum / recon_n as f64)
        } else {
            None
        },
        l_seg: if seg_n > 0 {
            Some(seg_sum / seg_n as f64)
        } else {
            None
        },
        s1: state.s[0] as f64,
        s2: state.s[1] as f64,
        n_labeled,
        n_unlabeled: batch.len() - n_labeled,
    })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub net: crate::network::NetConfig,
    pub schedule: ScheduleConfig,
    pub config: Config,
    pub mode: String,
    pub iteration: u64,
    pub seed: u64,
    pub s: [f32; 2],
    pub adam_t: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorIndexEntry>,
}

/// Header JSON (u64 length prefix) followed by raw little-endian f32
/// payloads in index order: every named weight tensor, then the two
/// optimizer moment vectors.
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    cfg: &Config,
    mode: TrainMode,
) -> Result<()> {
    let mut tensors: Vec<TensorIndexEntry> = state
        .params
        .entries()
        .iter()
        .map(|e| TensorIndexEntry {
            name: e.name.clone(),
            len: e.len,
        })
        .collect();
    tensors.push(TensorIndexEntry {
        name: "adam.m".into(),
        len: state.adam.m.len(),
    });
    tensors.push(TensorIndexEntry {
        name: "adam.v".into(),
        len: state.adam.v.len(),
    });
    let header = CheckpointHeader {
        version: 1,
        net: cfg.net(),
        schedule: cfg.schedule(),
        config: cfg.clone(),
        mode: mode.as_str().to_string(),
        iteration: state.iteration,
        seed: cfg.seed,
        s: state.s,
        adam_t: state.adam.t,
        rng: RngState::capture(&state.rng),
        tensors,
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    let mut buf = Vec::with_capacity(8 + json.len() + 4 * (state.params.len() + 2 * state.adam.m.len()));
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &v in state
        .params
        .data
        .iter()
        .chain(state.adam.m.iter())
        .chain(state.adam.v.iter())
    {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, rebuilding the network and verifying the tensor
/// index against the rebuilt parameter layout.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, UNet, TrainState)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut ps = ParamStore::<f32>::new();
    let net = UNet::build(&mut ps, &header.net)?;
    // verify the index
    let expected: Vec<TensorIndexEntry> = ps
        .entries()
        .iter()
        .map(|e| TensorIndexEntry {
            name: e.name.clone(),
            len: e.len,
        })
        .collect();
    let stored_params = &header.tensors[..header.tensors.len().saturating_sub(2)];
    if stored_params.len() != expected.len()
        || stored_params
            .iter()
            .zip(expected.iter())
            .any(|(a, b)| a.name != b.name || a.len != b.len)
    {
        return Err(Error::Checkpoint(
            "tensor index does not match the network layout".into(),
        ));
    }
    let n = ps.len();
    let payload = &bytes[8 + hlen..];
    // payload: n weights, then two moment vectors of length n + 2
    let need = 4 * (n + 2 * (n + 2));
    if payload.len() != need {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut floats = Vec::with_capacity(3 * n + 4);
    for c in payload.chunks_exact(4) {
        floats.push(f32::from_le_bytes(c.try_into().unwrap()));
    }
    ps.data.copy_from_slice(&floats[..n]);
    let mut adam = Adam::new(header.config.learning_rate, n + 2);
    adam.t = header.adam_t;
    adam.m.copy_from_slice(&floats[n..n + (n + 2)]);
    adam.v.copy_from_slice(&floats[n + (n + 2)..]);
    let state = TrainState {
        params: ps,
        s: header.s,
        adam,
        iteration: header.iteration,
        rng: header.rng.restore(),
    };
    Ok((header, net, state))
}

// ---------------------------------------------------------------------------
// fit: warm-up phase then mixed phase
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub iterations: u64,
}

/// Warm-up step budget: full passes over the labeled pool.
pub fn warmup_steps(n_labeled: usize, batch_size: usize, warmup_epochs: usize) -> u64 {
    (n_labeled / batch_size) as u64 * warmup_epochs as u64
}

/// Run (or resume) a full training job, writing a JSONL loss log and
/// periodic checkpoints under `out_dir`.
pub fn fit(
    data_root: &Path,
    out_dir: &Path,
    cfg: &Config,
    mode: TrainMode,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (labeled, unlabeled) = load_training_pools(data_root, cfg, mode)?;
    let sched = make_linear_schedule(&cfg.schedule())?;
    let perceptual = PerceptualNet::new(cfg.perceptual_seed);

    let (net, mut state) = match resume {
        Some(ckpt_path) => {
            let (header, net, state) = load_checkpoint(ckpt_path)?;
            if header.net != cfg.net() || header.schedule != cfg.schedule() {
                return Err(Error::Checkpoint(
                    "resume config disagrees with checkpoint".into(),
                ));
            }
            if header.mode != mode.as_str() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained in mode {}, requested {}",
                    header.mode,
                    mode.as_str()
                )));
            }
            (net, state)
        }
        None => {
            let (net, params) = UNet::init_params::<f32>(&cfg.net(), cfg.seed)?;
            let n = params.len();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(4);
            (
                net,
                TrainState {
                    params,
                    s: [0.0, 0.0],
                    adam: Adam::new(cfg.learning_rate, n + 2),
                    iteration: 0,
                    rng,
                },
            )
        }
    };

    // phase layout: warm-up always runs over the labeled pool
    let wsteps = match mode {
        TrainMode::GenOnly => 0,
        _ => warmup_steps(labeled.len(), cfg.batch_size, cfg.warmup_epochs),
    };

    // streams, replayed to the resume point
    let mut warm = PoolStream::new(
        labeled.len().max(1),
        cfg.batch_size,
        cfg.seed.wrapping_add(101),
        true,
    )?;
    let mut mixed: Box<dyn FnMut() -> Vec<BatchItem>> = match mode {
        TrainMode::SemiSup => {
            let mut s =
                MixedBatchStream::new(labeled.len(), unlabeled.len(), cfg.batch_size, cfg.seed)?;
            Box::new(move || s.next_batch())
        }
        TrainMode::FullSup | TrainMode::SegOnly => {
            let mut s = PoolStream::new(
                labeled.len(),
                cfg.batch_size,
                cfg.seed.wrapping_add(202),
                true,
            )?;
            Box::new(move || s.next_batch())
        }
        TrainMode::GenOnly => {
            let n_all = labeled.len() + unlabeled.len();
            let mut s = PoolStream::new(n_all, cfg.batch_size, cfg.seed.wrapping_add(202), false)?;
            Box::new(move || s.next_batch())
        }
    };
    // replay to the resume point so the batch sequence continues exactly
    for i in 0..state.iteration {
        if i < wsteps {
            let _ = warm.next_batch();
        } else {
            let _ = mixed();
        }
    }

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let gen_pool_all: Vec<&Sample> = labeled.iter().chain(unlabeled.iter()).collect();

    while state.iteration < cfg.total_iterations {
        let in_warmup = state.iteration < wsteps;
        let (items, phase) = if in_warmup {
            (warm.next_batch(), "warmup")
        } else {
            (mixed(), "mixed")
        };
        let batch: Vec<(&Sample, bool)> = items
            .iter()
            .map(|&(idx, lab)| {
                if in_warmup {
                    (&labeled[idx], true)
                } else {
                    match mode {
                        TrainMode::SemiSup => {
                            if lab {
                                (&labeled[idx], true)
                            } else {
                                (&unlabeled[idx], false)
                            }
                        }
                        TrainMode::FullSup | TrainMode::SegOnly => (&labeled[idx], true),
                        TrainMode::GenOnly => (gen_pool_all[idx], false),
                    }
                }
            })
            .collect();

        let report = train_step(
            &mut state,
            &net,
            &sched,
            &perceptual,
            &batch,
            cfg,
            mode,
            phase,
        )?;

        if cfg.log_every > 0 && report.iteration % cfg.log_every == 0 {
            let line = serde_json::to_string(&report)
                .map_err(|e| Error::Format(format!("log: {e}")))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{:08}.ckpt", state.iteration));
            save_checkpoint(&path, &state, cfg, mode)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&final_path, &state, cfg, mode)?;
    Ok(FitSummary {
        final_checkpoint: final_path,
        log_path,
        iterations: state.iteration,
    })
}
