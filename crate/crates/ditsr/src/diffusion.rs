//! Residual-shifting diffusion.
//!
//! Instead of destroying the clean image `x0` into pure noise, the forward
//! process shifts it toward the degraded observation `y0` along the residual
//! `e0 = y0 - x0`, with noise growing as the shift progresses:
//!
//! ```text
//! q(x_t | x0, y0) = N(x0 + eta_t * e0,  kappa^2 * eta_t * I)
//! ```
//!
//! The reverse chain plugs an `x0` prediction into the Gaussian posterior
//! mean `(eta_{t-1}/eta_t) x_t + (alpha_t/eta_t) x0_pred`. With `eta_0 = 0`
//! the final step is exact and deterministic, so short chains (default 15
//! steps) suffice.

use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ShiftSchedule {
    pub steps: usize,
    /// `eta[0..=T]` with `eta[0] = 0`, strictly increasing.
    pub eta: Vec<f64>,
    pub kappa: f64,
}

impl ShiftSchedule {
    /// Geometric interpolation in `sqrt(eta)` between exact endpoints.
    pub fn build(steps: usize, eta1: f64, eta_t: f64, kappa: f64) -> Result<ShiftSchedule> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(eta1 > 0.0 && eta1 <= 0.05) {
            return Err(Error::Config(format!("eta1 = {eta1} outside (0, 0.05]")));
        }
        if !(0.99..1.0).contains(&eta_t) {
            return Err(Error::Config(format!("etaT = {eta_t} outside [0.99, 1)")));
        }
        if kappa <= 0.0 {
            return Err(Error::Config(format!("kappa = {kappa} must be positive")));
        }
        let mut eta = Vec::with_capacity(steps + 1);
        eta.push(0.0);
        if steps == 1 {
            eta.push(eta_t);
        } else {
            let (r1, rt) = (eta1.sqrt(), eta_t.sqrt());
            for t in 1..=steps {
                let frac = (t - 1) as f64 / (steps - 1) as f64;
                let root = r1 * (rt / r1).powf(frac);
                eta.push(root * root);
            }
            // endpoint exactness regardless of powf rounding
            eta[1] = eta1;
            eta[steps] = eta_t;
        }
        for t in 1..=steps {
            debug_assert!(eta[t] > eta[t - 1], "eta not strictly increasing at t={t}");
        }
        Ok(ShiftSchedule { steps, eta, kappa })
    }

    /// Per-step shift increment `alpha_t = eta_t - eta_{t-1}`, `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "t = {t} outside 1..={}", self.steps);
        self.eta[t] - self.eta[t - 1]
    }
}

/// Default chain: 15 steps with the stock endpoints and noise scale.
pub fn default_schedule() -> ShiftSchedule {
    ShiftSchedule::build(15, 0.04, 0.999, 2.0).expect("defaults are valid")
}

fn check_t(sched: &ShiftSchedule, t: usize) -> Result<()> {
    if t < 1 || t > sched.steps {
        return Err(Error::Invalid(format!(
            "timestep {t} outside 1..={}",
            sched.steps
        )));
    }
    Ok(())
}

/// Draws `x_t` from the marginal `q(x_t | x0, y0)` given a standard-normal
/// `noise` tensor of matching shape.
pub fn forward_marginal(
    x0: &Tensor,
    y0: &Tensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    check_t(sched, t)?;
    let eta = sched.eta[t];
    let e0 = y0.sub(x0);
    Ok(x0
        .add(&e0.scale(eta))
        .add(&noise.scale(sched.kappa * eta.sqrt())))
}

/// One forward step `x_t = x_{t-1} + alpha_t * e0 + kappa * sqrt(alpha_t) * noise`.
pub fn forward_transition(
    x_prev: &Tensor,
    e0: &Tensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    check_t(sched, t)?;
    let a = sched.alpha(t);
    Ok(x_prev
        .add(&e0.scale(a))
        .add(&noise.scale(sched.kappa * a.sqrt())))
}

/// One reverse step. At `t = 1` the posterior collapses onto `x0_pred`
/// exactly and `noise` is ignored.
pub fn posterior_step(
    x_t: &Tensor,
    x0_pred: &Tensor,
    t: usize,
    sched: &ShiftSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    check_t(sched, t)?;
    if t == 1 {
        return Ok(x0_pred.clone());
    }
    let (eta_prev, eta) = (sched.eta[t - 1], sched.eta[t]);
    let a = sched.alpha(t);
    let (c_xt, c_x0) = (eta_prev / eta, a / eta);
    debug_assert!((c_xt + c_x0 - 1.0).abs() < 1e-12, "posterior coefficients must sum to 1");
    let std = sched.kappa * (c_xt * a).sqrt();
    Ok(x_t
        .scale(c_xt)
        .add(&x0_pred.scale(c_x0))
        .add(&noise.scale(std)))
}

/// Anything that predicts `x0` from `(x_t, y0, t)`.
pub trait DenoiserFn {
    fn predict_x0(&self, x_t: &Tensor, y0: &Tensor, t: usize) -> Result<Tensor>;
}

impl DenoiserFn for crate::arch::Denoiser {
    fn predict_x0(&self, x_t: &Tensor, y0: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x_t, y0, t)
    }
}

impl<F> DenoiserFn for F
where
    F: Fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    fn predict_x0(&self, x_t: &Tensor, y0: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, y0, t)
    }
}

pub struct SampleOutput {
    pub x0_hat: Tensor,
    /// Per-step `(t, eta_t, x0_pred)` in sampling order `t = T .. 1`, kept
    /// only when requested.
    pub trajectory: Vec<(usize, f64, Tensor)>,
}

/// Runs the full reverse chain from `x_T = y0 + kappa * sqrt(eta_T) * eps`
/// (the `eta_T -> 1` limit of the marginal mean). `stochastic = false` zeroes
/// every injected noise, giving the deterministic mean path.
pub fn sample(
    denoiser: &dyn DenoiserFn,
    y0: &Tensor,
    sched: &ShiftSchedule,
    seed: u64,
    stochastic: bool,
    keep_trajectory: bool,
) -> Result<SampleOutput> {
    let mut rng = crate::rng::stream(seed, 2);
    let n = y0.numel();
    let draw = |rng: &mut ChaCha8Rng| -> Tensor {
        if stochastic {
            Tensor::from_vec(crate::rng::normal_vec(rng, n), y0.shape())
        } else {
            Tensor::zeros(y0.shape())
        }
    };
    let t_top = sched.steps;
    let init_noise = draw(&mut rng);
    let mut x = y0.add(&init_noise.scale(sched.kappa * sched.eta[t_top].sqrt()));
    let mut trajectory = Vec::new();
    for t in (1..=t_top).rev() {
        let x0_pred = denoiser.predict_x0(&x, y0, t)?.detach();
        if keep_trajectory {
            trajectory.push((t, sched.eta[t], x0_pred.clone()));
        }
        let noise = draw(&mut rng);
        x = posterior_step(&x, &x0_pred, t, sched, &noise)?;
    }
    Ok(SampleOutput { x0_hat: x, trajectory })
}

/// Draws a training example: `t` uniform on `{1..T}`, `x_t` from the
/// marginal. The regression target is `x0` itself.
pub fn training_pair(
    x0: &Tensor,
    y0: &Tensor,
    sched: &ShiftSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, usize)> {
    use rand::Rng;
    let t = rng.gen_range(1..=sched.steps);
    let noise = Tensor::from_vec(crate::rng::normal_vec(rng, x0.numel()), x0.shape());
    Ok((forward_marginal(x0, y0, t, sched, &noise)?, t))
}
