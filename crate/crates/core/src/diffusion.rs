//! Brownian-bridge diffusion between an image `x0` and a shape condition `xT`.
//!
//! Marginal: `x_t ~ N((1 - a_t) x0 + a_t xT, d_t I)` with `a_t = t/T` and
//! `d_t = 2 (a_t - a_t^2)`. The denoiser regresses `a_t (xT - x0) + sqrt(d_t) eps`
//! and sampling walks `x_{s'} = c_xt x_s + c_st xT - c_ft f + sqrt(d~) eps`.
//!
//! Coefficients are kept in `f64`. At `t = T` the variance `d_T` is zero and the
//! ratios are 0/0; their limits are used there (`c_xt = 1`, `c_st = 0`,
//! `c_ft = 1 - a_{s'}`, `d~ = d_{s'}`).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConditionSet, PrimaryCondition};
use crate::rng;
use crate::volume::Volume;

/// Reverse-step coefficients between two timesteps `s > s'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCoefficients {
    /// `d_{s|s'}`
    pub delta_cond: f64,
    pub c_xt: f64,
    pub c_st: f64,
    pub c_ft: f64,
    /// posterior variance `d~`
    pub delta_tilde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    total: usize,
    alpha: Vec<f64>,
    delta: Vec<f64>,
    /// Index `t` holds the step `t -> t-1`; index 0 is unused.
    steps: Vec<StepCoefficients>,
}

/// `2 (a - a^2)` with `a = t/T`, evaluated as `2 t (T - t) / T^2` so the numerator is
/// an exact integer: this keeps `d_t = d_{T-t}` bit-for-bit and `d_{T/2} = 1/2` exactly.
fn bridge_delta(t: usize, total: usize) -> f64 {
    (2 * t * (total - t)) as f64 / (total * total) as f64
}

impl BridgeSchedule {
    pub fn new(total: usize) -> Result<Self> {
        if total < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, got {total}"
            )));
        }
        let alpha: Vec<f64> = (0..=total).map(|t| t as f64 / total as f64).collect();
        let delta: Vec<f64> = (0..=total).map(|t| bridge_delta(t, total)).collect();
        let mut sched = BridgeSchedule {
            total,
            alpha,
            delta,
            steps: Vec::with_capacity(total + 1),
        };
        sched.steps.push(StepCoefficients {
            delta_cond: 0.0,
            c_xt: 0.0,
            c_st: 0.0,
            c_ft: 0.0,
            delta_tilde: 0.0,
        });
        for t in 1..=total {
            let c = sched.between(t, t - 1)?;
            sched.steps.push(c);
        }
        Ok(sched)
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    /// Coefficients of the consecutive step `t -> t-1` (`1 <= t <= T`).
    pub fn step(&self, t: usize) -> &StepCoefficients {
        &self.steps[t]
    }

    /// Coefficients for a jump `s -> s_prev`, the non-consecutive generalization
    /// used for accelerated sampling. Reduces to the consecutive formulas when
    /// `s_prev = s - 1`.
    pub fn between(&self, s: usize, s_prev: usize) -> Result<StepCoefficients> {
        if s == 0 || s > self.total || s_prev >= s {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= s' < s <= T, got s={s}, s'={s_prev}, T={}",
                self.total
            )));
        }
        let (a, b) = (self.alpha[s], self.alpha[s_prev]);
        let (d, d_prev) = (self.delta[s], self.delta[s_prev]);
        let decay = (1.0 - a) / (1.0 - b);
        let delta_cond = d - d_prev * decay * decay;
        if s == self.total {
            // d_s = 0 and delta_cond = 0: take the a -> 1 limits.
            return Ok(StepCoefficients {
                delta_cond,
                c_xt: 1.0,
                c_st: 0.0,
                c_ft: 1.0 - b,
                delta_tilde: d_prev,
            });
        }
        let c_xt = (d_prev / d) * decay + (delta_cond / d) * (1.0 - b);
        let c_st = b - a * decay * (d_prev / d);
        let c_ft = (1.0 - b) * delta_cond / d;
        let delta_tilde = delta_cond * d_prev / d;
        Ok(StepCoefficients {
            delta_cond,
            c_xt,
            c_st,
            c_ft,
            delta_tilde,
        })
    }

    /// CSV with one row per timestep; step columns are empty at `t = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,alpha,delta,delta_cond,c_xt,c_st,c_ft,delta_tilde\n");
        for t in 0..=self.total {
            if t == 0 {
                out.push_str(&format!("0,{:e},{:e},,,,,\n", self.alpha[0], self.delta[0]));
                continue;
            }
            let c = &self.steps[t];
            out.push_str(&format!(
                "{t},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                self.alpha[t], self.delta[t], c.delta_cond, c.c_xt, c.c_st, c.c_ft, c.delta_tilde
            ));
        }
        out
    }
}

fn check_t(sched: &BridgeSchedule, t: usize) -> Result<()> {
    if t > sched.total {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [0, {}]",
            sched.total
        )));
    }
    Ok(())
}

fn check_all(vols: &[&Volume]) -> Result<()> {
    for v in &vols[1..] {
        vols[0].check_geometry(v)?;
    }
    Ok(())
}

/// `(1 - a_t) x0 + a_t xT + sqrt(d_t) eps`
pub fn forward_sample(
    x0: &Volume,
    x_end: &Volume,
    t: usize,
    eps: &Volume,
    sched: &BridgeSchedule,
) -> Result<Volume> {
    check_t(sched, t)?;
    check_all(&[x0, x_end, eps])?;
    let (a, s) = (sched.alpha(t), sched.delta(t).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(x_end.data())
        .zip(eps.data())
        .map(|((&x, &y), &e)| (1.0 - a) * x + a * y + s * e)
        .collect();
    Volume::new(*x0.grid(), data)
}

/// Regression target `a_t (xT - x0) + sqrt(d_t) eps`.
pub fn loss_target(
    x0: &Volume,
    x_end: &Volume,
    t: usize,
    eps: &Volume,
    sched: &BridgeSchedule,
) -> Result<Volume> {
    check_t(sched, t)?;
    check_all(&[x0, x_end, eps])?;
    let (a, s) = (sched.alpha(t), sched.delta(t).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(x_end.data())
        .zip(eps.data())
        .map(|((&x, &y), &e)| a * (y - x) + s * e)
        .collect();
    Volume::new(*x0.grid(), data)
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Volume, target: &Volume) -> Result<f64> {
    pred.check_geometry(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

fn apply_step(
    c: &StepCoefficients,
    x_t: &Volume,
    f_pred: &Volume,
    x_end: &Volume,
    eps: Option<&Volume>,
) -> Result<Volume> {
    check_all(&[x_t, f_pred, x_end])?;
    let sd = c.delta_tilde.max(0.0).sqrt();
    let mut data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(f_pred.data())
        .zip(x_end.data())
        .map(|((&x, &f), &y)| c.c_xt * x + c.c_st * y - c.c_ft * f)
        .collect();
    if let Some(eps) = eps {
        x_t.check_geometry(eps)?;
        for (d, &e) in data.iter_mut().zip(eps.data()) {
            *d += sd * e;
        }
    }
    Volume::new(*x_t.grid(), data)
}

/// One consecutive reverse step `t -> t-1`. `eps` must be zero at `t = 1`.
pub fn reverse_step(
    x_t: &Volume,
    f_pred: &Volume,
    x_end: &Volume,
    t: usize,
    eps: &Volume,
    sched: &BridgeSchedule,
) -> Result<Volume> {
    if t == 0 || t > sched.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "reverse step needs 1 <= t <= T, got {t}"
        )));
    }
    if t == 1 && eps.data().iter().any(|&e| e != 0.0) {
        return Err(Error::InvalidArgument(
            "noise must be zero on the final step (t = 1)".into(),
        ));
    }
    apply_step(sched.step(t), x_t, f_pred, x_end, Some(eps))
}

/// Evenly spaced, strictly decreasing timesteps starting at `T`; the step after
/// the last entry lands on 0.
pub fn ddim_timesteps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::InvalidArgument(format!(
            "n_steps must be in [1, {total}], got {n_steps}"
        )));
    }
    Ok((0..n_steps)
        .map(|i| {
            // round(i * T / n) in integer arithmetic
            let offset = (2 * i * total + n_steps) / (2 * n_steps);
            total - offset
        })
        .collect())
}

/// Anything that predicts the regression target for `(x_t, conditions, t)`.
pub trait Denoiser {
    fn predict(&self, x_t: &Volume, cond: &ConditionSet, t: usize) -> Result<Volume>;
}

impl<F> Denoiser for F
where
    F: Fn(&Volume, &ConditionSet, usize) -> Result<Volume>,
{
    fn predict(&self, x_t: &Volume, cond: &ConditionSet, t: usize) -> Result<Volume> {
        self(x_t, cond, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// 0 gives the deterministic sampler; 1 adds the full posterior variance.
    pub eta: f64,
    pub primary: PrimaryCondition,
    pub seed: u64,
    /// Distinguishes noise streams of different samples under one seed.
    pub sample_id: u64,
}

impl SamplerConfig {
    pub fn deterministic(n_steps: usize, seed: u64) -> Self {
        SamplerConfig {
            n_steps,
            eta: 0.0,
            primary: PrimaryCondition::Cortex,
            seed,
            sample_id: 0,
        }
    }
}

/// Noise volume for `(seed, sample, timestep)`.
pub fn step_noise(like: &Volume, seed: u64, sample_id: u64, t: usize) -> Volume {
    let mut r = rng::stream(seed, "reverse-noise", &[sample_id, t as u64]);
    let data = (0..like.len())
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    Volume::new(*like.grid(), data).expect("gaussian draws are finite")
}

/// Run the reverse bridge from the primary condition down to an image estimate.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &ConditionSet,
    sched: &BridgeSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(Error::InvalidArgument(format!(
            "eta must be in [0, 1], got {}",
            cfg.eta
        )));
    }
    let steps = ddim_timesteps(sched.total_steps(), cfg.n_steps)?;
    let x_end = cond.primary(cfg.primary);
    let mut x = x_end.clone();
    for (i, &s) in steps.iter().enumerate() {
        let s_prev = steps.get(i + 1).copied().unwrap_or(0);
        let f = denoiser.predict(&x, cond, s)?;
        x.check_geometry(&f)?;
        let mut c = sched.between(s, s_prev)?;
        c.delta_tilde *= cfg.eta * cfg.eta;
        let noise =
            (s_prev > 0 && c.delta_tilde > 0.0).then(|| step_noise(&x, cfg.seed, cfg.sample_id, s));
        x = apply_step(&c, &x, &f, &x_end, noise.as_ref())?;
    }
    Ok(x)
}
