//! Linear noise schedule, forward noising, clean-image recovery, and the
//! ancestral reverse step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Schedule hyperparameters as they appear in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Desk-scale default; 1000 steps available through config.
        ScheduleConfig {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// β sequence with derived cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// ᾱ extended with ᾱ(-1) = 1 (the clean state).
    pub fn alpha_bar_ext(&self, t: isize) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bar[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::Config(format!(
                "timestep {t} out of range [0, {})",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// Build the linear β schedule with inclusive endpoints.
pub fn make_linear_schedule(config: &ScheduleConfig) -> Result<NoiseSchedule> {
    let t = config.timesteps;
    let (b0, b1) = (config.beta_start, config.beta_end);
    if t < 2 {
        return Err(Error::Config(format!("need at least 2 timesteps, got {t}")));
    }
    if !(b0 > 0.0 && b0 <= b1 && b1 < 1.0) {
        return Err(Error::Config(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got ({b0}, {b1})"
        )));
    }
    let beta: Vec<f64> = (0..t)
        .map(|i| b0 + (b1 - b0) * i as f64 / (t - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Forward noising: `x_t = sqrt(ᾱ_t) x0 + sqrt(1-ᾱ_t) ε`.
pub fn q_sample<T: Scalar>(
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
    sched: &NoiseSchedule,
) -> Result<Array2<T>> {
    sched.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Shape("q_sample: x0 and eps shapes differ".into()));
    }
    let ab = sched.alpha_bar[t];
    let a = T::from_f64(ab.sqrt());
    let b = T::from_f64((1.0 - ab).sqrt());
    let mut out = x0.mapv(|v| v * a);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o = *o + b * e;
    });
    Ok(out)
}

/// Transition from time `s` (or the clean state when `s = -1`) to a later
/// time `u > s`: `x_u = sqrt(ᾱ_u/ᾱ_s) x_s + sqrt(1-ᾱ_u/ᾱ_s) ε`.
pub fn q_transition<T: Scalar>(
    x_s: &Array2<T>,
    s: isize,
    u: usize,
    eps: &Array2<T>,
    sched: &NoiseSchedule,
) -> Result<Array2<T>> {
    sched.check_t(u)?;
    if (u as isize) <= s {
        return Err(Error::Config(format!(
            "q_transition requires u > s, got s={s}, u={u}"
        )));
    }
    let ratio = sched.alpha_bar[u] / sched.alpha_bar_ext(s);
    let a = T::from_f64(ratio.sqrt());
    let b = T::from_f64((1.0 - ratio).sqrt());
    let mut out = x_s.mapv(|v| v * a);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o = *o + b * e;
    });
    Ok(out)
}

/// Recover the clean image estimate from a noise prediction and clamp it
/// into the data domain [-1, 1].
pub fn predict_x0_from_eps<T: Scalar>(
    x_t: &Array2<T>,
    t: usize,
    eps_hat: &Array2<T>,
    sched: &NoiseSchedule,
) -> Result<Array2<T>> {
    sched.check_t(t)?;
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::Shape("predict_x0: shape mismatch".into()));
    }
    let ab = sched.alpha_bar[t];
    let inv_sqrt_ab = T::from_f64(1.0 / ab.sqrt());
    let sqrt_1m = T::from_f64((1.0 - ab).sqrt());
    let one = T::one();
    let mut out = Array2::<T>::zeros(x_t.dim());
    ndarray::Zip::from(&mut out)
        .and(x_t)
        .and(eps_hat)
        .for_each(|o, &x, &e| {
            let v = (x - sqrt_1m * e) * inv_sqrt_ab;
            *o = v.max(-one).min(one);
        });
    Ok(out)
}

/// Clamped recovery plus the mask of pixels that stayed strictly inside
/// the clamp (needed to backpropagate through the clamped estimate).
pub fn predict_x0_with_mask<T: Scalar>(
    x_t: &Array2<T>,
    t: usize,
    eps_hat: &Array2<T>,
    sched: &NoiseSchedule,
) -> Result<(Array2<T>, Array2<bool>)> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let inv_sqrt_ab = T::from_f64(1.0 / ab.sqrt());
    let sqrt_1m = T::from_f64((1.0 - ab).sqrt());
    let one = T::one();
    let raw = ndarray::Zip::from(x_t)
        .and(eps_hat)
        .map_collect(|&x, &e| (x - sqrt_1m * e) * inv_sqrt_ab);
    let clamped = raw.mapv(|v| v.max(-one).min(one));
    let inside = raw.mapv(|v| v > -one && v < one);
    Ok((clamped, inside))
}

/// Coefficient of `d x0_hat / d eps_hat` on unclamped pixels.
pub fn dx0_deps_coeff(t: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar[t];
    -(1.0 - ab).sqrt() / ab.sqrt()
}

/// One ancestral reverse step. `z` is ignored at `t = 0` (no noise is
/// added on the terminal step); variance is fixed to β_t.
pub fn reverse_step<T: Scalar>(
    x_t: &Array2<T>,
    t: usize,
    eps_hat: &Array2<T>,
    z: &Array2<T>,
    sched: &NoiseSchedule,
) -> Result<Array2<T>> {
    sched.check_t(t)?;
    if x_t.dim() != eps_hat.dim() || x_t.dim() != z.dim() {
        return Err(Error::Shape("reverse_step: shape mismatch".into()));
    }
    let beta = sched.beta[t];
    let alpha = sched.alpha[t];
    let ab = sched.alpha_bar[t];
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha.sqrt());
    let eps_coeff = T::from_f64(beta / (1.0 - ab).sqrt());
    let sigma = if t == 0 {
        T::zero()
    } else {
        T::from_f64(beta.sqrt())
    };
    let mut out = Array2::<T>::zeros(x_t.dim());
    ndarray::Zip::from(&mut out)
        .and(x_t)
        .and(eps_hat)
        .and(z)
        .for_each(|o, &x, &e, &n| {
            *o = inv_sqrt_alpha * (x - eps_coeff * e) + sigma * n;
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::normal_array2;

    fn default_sched() -> NoiseSchedule {
        make_linear_schedule(&ScheduleConfig {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        })
        .unwrap()
    }

    #[test]
    fn linear_endpoints_inclusive() {
        let s = make_linear_schedule(&ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        })
        .unwrap();
        assert!((s.beta[0] - 1e-4).abs() < 1e-15);
        assert!((s.beta[999] - 0.02).abs() < 1e-15);
        // nondecreasing
        for w in s.beta.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_first_value() {
        let s = default_sched();
        assert!((s.alpha_bar[0] - (1.0 - s.beta[0])).abs() < 1e-15);
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn hand_product_t2() {
        let s = make_linear_schedule(&ScheduleConfig {
            timesteps: 2,
            beta_start: 0.5,
            beta_end: 0.5,
        })
        .unwrap();
        assert!((s.alpha_bar[0] - 0.5).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_endpoints() {
        for (a, b) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.5)] {
            assert!(make_linear_schedule(&ScheduleConfig {
                timesteps: 10,
                beta_start: a,
                beta_end: b,
            })
            .is_err());
        }
    }

    #[test]
    fn q_sample_zero_noise_scales_by_sqrt_alpha_bar() {
        let s = default_sched();
        let x0 = Array2::<f64>::from_elem((8, 8), 0.5);
        let eps = Array2::<f64>::zeros((8, 8));
        let t = 57;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let expect = 0.5 * s.alpha_bar[t].sqrt();
        for &v in xt.iter() {
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn q_sample_t0_coefficients() {
        let s = make_linear_schedule(&ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        })
        .unwrap();
        // at t=0: sqrt(1-1e-4) and sqrt(1e-4) = 0.01
        let a = s.alpha_bar[0].sqrt();
        let b = (1.0 - s.alpha_bar[0]).sqrt();
        assert!((a - (1.0f64 - 1e-4).sqrt()).abs() < 1e-12);
        assert!((b - 0.01).abs() < 1e-12);
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = normal_array2::<f64, _>(&mut rng, (16, 16)).mapv(|v| (v * 0.4).clamp(-1.0, 1.0));
        for &t in &[0usize, 42, 120, 199] {
            let eps = normal_array2::<f64, _>(&mut rng, (16, 16));
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
            for (a, b) in rec.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predict_x0_clamps_into_range() {
        let s = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x_t = normal_array2::<f64, _>(&mut rng, (16, 16)).mapv(|v| v * 3.0);
        let eps_hat = Array2::<f64>::zeros((16, 16));
        let t = s.timesteps() - 1;
        let rec = predict_x0_from_eps(&x_t, t, &eps_hat, &s).unwrap();
        // unclamped formula would exceed the range, output must not
        let inv = 1.0 / s.alpha_bar[t].sqrt();
        assert!(x_t.iter().any(|&v| (v * inv).abs() > 1.0));
        for &v in rec.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reverse_step_t0_is_deterministic_and_coefficients_recompute() {
        let s = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = normal_array2::<f64, _>(&mut rng, (8, 8));
        let e = normal_array2::<f64, _>(&mut rng, (8, 8));
        let z1 = normal_array2::<f64, _>(&mut rng, (8, 8));
        let z2 = normal_array2::<f64, _>(&mut rng, (8, 8));
        let a = reverse_step(&x, 0, &e, &z1, &s).unwrap();
        let b = reverse_step(&x, 0, &e, &z2, &s).unwrap();
        assert_eq!(a, b, "terminal step must ignore z");

        // independent recomputation of the coefficients from beta alone
        let t = 77;
        let beta: Vec<f64> = (0..s.timesteps())
            .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (s.timesteps() - 1) as f64)
            .collect();
        let alpha_prod: f64 = beta.iter().take(t + 1).map(|b| 1.0 - b).product();
        let c1 = 1.0 / (1.0 - beta[t]).sqrt();
        let c2 = beta[t] / (1.0 - alpha_prod).sqrt();
        let zero = Array2::<f64>::zeros((8, 8));
        let y = reverse_step(&x, t, &e, &zero, &s).unwrap();
        for ((&yv, &xv), &ev) in y.iter().zip(x.iter()).zip(e.iter()) {
            let manual = c1 * (xv - c2 * ev);
            assert!((yv - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_reduces_distance_in_expectation() {
        let s = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut closer = 0usize;
        let trials = 200;
        for _ in 0..trials {
            let x0 = normal_array2::<f64, _>(&mut rng, (8, 8)).mapv(|v| (v * 0.5).clamp(-1.0, 1.0));
            let t = 1 + (rng.next_u32() as usize % (s.timesteps() - 1));
            let eps = normal_array2::<f64, _>(&mut rng, (8, 8));
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let zero = Array2::<f64>::zeros((8, 8));
            let xprev = reverse_step(&xt, t, &eps, &zero, &s).unwrap();
            let d_before: f64 = xt
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b * s.alpha_bar[t].sqrt()).powi(2))
                .sum();
            let d_after: f64 = xprev
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b * s.alpha_bar[t - 1].sqrt()).powi(2))
                .sum();
            if d_after < d_before {
                closer += 1;
            }
        }
        assert!(
            closer * 10 >= trials * 9,
            "reverse step moved closer in only {closer}/{trials} trials"
        );
    }

    #[test]
    fn q_transition_from_clean_matches_q_sample() {
        let s = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = normal_array2::<f64, _>(&mut rng, (8, 8)).mapv(|v| (v * 0.4).clamp(-1.0, 1.0));
        let eps = normal_array2::<f64, _>(&mut rng, (8, 8));
        let via_transition = q_transition(&x0, -1, 9, &eps, &s).unwrap();
        let via_sample = q_sample(&x0, 9, &eps, &s).unwrap();
        for (a, b) in via_transition.iter().zip(via_sample.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
