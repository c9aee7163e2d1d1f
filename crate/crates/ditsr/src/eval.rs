//! PSNR evaluation and spectrum-trajectory analysis of the reverse chain.

use crate::diffusion::{sample, DenoiserFn, ShiftSchedule};
use crate::fourier::radial_power_spectrum;
use crate::tensor::Tensor;
use crate::Result;

/// Peak signal-to-noise ratio against peak 1.0, capped at 99.0 dB for
/// (near-)identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "PSNR operands must share a shape");
    let (av, bv) = (a.to_vec(), b.to_vec());
    let mse: f64 =
        av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

fn clamp_unit(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect(), x.shape())
}

/// Runs the sampler on every held-out pair and scores the clamped output
/// against the HR target. Per-sample chains use seeds derived from `seed`,
/// so the whole evaluation is reproducible.
pub fn evaluate_psnr(
    denoiser: &dyn DenoiserFn,
    dataset: &[(Tensor, Tensor)],
    sched: &ShiftSchedule,
    seed: u64,
    stochastic: bool,
) -> Result<(Vec<f64>, f64)> {
    let mut scores = Vec::with_capacity(dataset.len());
    for (i, (x0, y0)) in dataset.iter().enumerate() {
        let out = sample(denoiser, y0, sched, seed.wrapping_add(i as u64), stochastic, false)?;
        scores.push(psnr(&clamp_unit(&out.x0_hat), x0));
    }
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok((scores, mean))
}

/// Mean PSNR of the degraded inputs themselves (the bicubic baseline the
/// denoiser has to beat).
pub fn baseline_psnr(dataset: &[(Tensor, Tensor)]) -> f64 {
    let sum: f64 = dataset.iter().map(|(x0, y0)| psnr(&clamp_unit(y0), x0)).sum();
    sum / dataset.len().max(1) as f64
}

/// Radial power spectrum of the predicted `x0` at every reverse step.
/// Row `i` corresponds to `t = T - i` (sampling order), so the last row is
/// the final prediction.
pub fn spectrum_trajectory(
    denoiser: &dyn DenoiserFn,
    y0: &Tensor,
    sched: &ShiftSchedule,
    seed: u64,
    stochastic: bool,
    n_bins: usize,
) -> Result<Vec<Vec<f64>>> {
    let out = sample(denoiser, y0, sched, seed, stochastic, true)?;
    out.trajectory
        .iter()
        .map(|(_, _, x0_pred)| radial_power_spectrum(x0_pred, n_bins))
        .collect()
}

/// Per-band 90%-convergence step: the first `t`, scanning from `T` down,
/// whose band power reaches 90% of the final (t = 1) value. Bands that end
/// at zero power report `T` (converged from the start).
pub fn convergence_steps(trajectory: &[Vec<f64>]) -> Vec<usize> {
    assert!(!trajectory.is_empty(), "empty trajectory");
    let t_top = trajectory.len();
    let final_row = trajectory.last().unwrap();
    let n_bins = final_row.len();
    let mut steps = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let target = 0.9 * final_row[b];
        if final_row[b] == 0.0 {
            steps.push(t_top);
            continue;
        }
        let mut conv = 1; // the final row always qualifies
        for (i, row) in trajectory.iter().enumerate() {
            if row[b] >= target {
                conv = t_top - i;
                break;
            }
        }
        steps.push(conv);
    }
    steps
}
