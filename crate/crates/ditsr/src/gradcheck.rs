//! Finite-difference verification of the autodiff engine.
//!
//! Analytic gradients from `backward()` are compared against central
//! differences at a random sample of coordinates per parameter tensor. The
//! comparison metric is the L2 relative error between the sampled analytic
//! and numeric gradient vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Denoiser, DenoiserConfig};
use crate::blocks::{sinusoidal_embed, AttentionWindowSpec, CondMode, TransformerBlock};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub rel_err: f64,
    pub pass: bool,
}

/// Checks analytic gradients of `loss_fn` w.r.t. each named parameter. The
/// closure must rebuild the graph on every call (each perturbation reruns the
/// forward pass). At most `max_coords` coordinates per tensor are probed.
pub fn check_params(
    loss_fn: &dyn Fn() -> Tensor,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();

    let mut reports = Vec::with_capacity(params.len());
    for (name, p) in params {
        let analytic_full = p
            .grad()
            .unwrap_or_else(|| panic!("no gradient reached parameter {name}"));
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < max_coords {
                seen.insert(rng.gen_range(0..n));
            }
            seen.into_iter().collect()
        };

        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut data = p.to_vec();
            let orig = data[c];
            data[c] = orig + eps;
            p.set_data(data.clone());
            let lp = loss_fn().item();
            data[c] = orig - eps;
            p.set_data(data.clone());
            let lm = loss_fn().item();
            data[c] = orig;
            p.set_data(data);
            analytic.push(analytic_full[c]);
            numeric.push((lp - lm) / (2.0 * eps));
        }
        let e = rel_err(&analytic, &numeric);
        reports.push(GradCheckReport {
            name: name.clone(),
            rel_err: e,
            pass: e < tol,
        });
    }
    reports
}

/// Adds small Gaussian jitter to every parameter so zero-initialized layers
/// (output heads, time-MLP projections, bias tables) carry signal.
fn jitter(params: &[(String, Tensor)], scale: f64, rng: &mut ChaCha8Rng) {
    for (_, p) in params {
        let noise = crate::rng::normal_vec(rng, p.numel());
        let data: Vec<f64> = p
            .to_vec()
            .iter()
            .zip(&noise)
            .map(|(v, n)| v + scale * n)
            .collect();
        p.set_data(data);
    }
}

/// Gradchecks a single transformer block (width 8, 8x8 map, shifted 4x4
/// attention windows, 4x4 fft window). Returns the worst relative error
/// across all parameters and the input map.
pub fn check_block(cond: CondMode, tol: f64) -> f64 {
    let mut rng = crate::rng::seeded(1234);
    let block = TransformerBlock::new(
        8,
        cond,
        16,
        4,
        AttentionWindowSpec::new(4, 2, 2, 8),
        2,
        true,
        &mut rng,
    );
    let mut params = Vec::new();
    block.collect_params("block", &mut params);
    jitter(&params, 0.02, &mut rng);

    let x = Tensor::param(crate::rng::normal_vec(&mut rng, 8 * 8 * 8), &[8, 8, 8]);
    params.push(("input".into(), x.clone()));
    let r = Tensor::from_vec(crate::rng::normal_vec(&mut rng, 8 * 8 * 8), &[8, 8, 8]);
    let embed = sinusoidal_embed(5, 16);

    let loss_fn = move || block.forward(&x, &embed).mul(&r).sum();
    let reports = check_params(&loss_fn, &params, 1e-5, tol, 6, &mut rng);
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

/// Gradchecks the full denoiser end to end on a small input. Every parameter
/// tensor is probed at up to `max_coords` coordinates.
pub fn check_denoiser(
    config: &DenoiserConfig,
    tol: f64,
    max_coords: usize,
    resolution: usize,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = crate::rng::seeded(4321);
    let model = Denoiser::build(config, 77)?;
    let params = model.named_params();
    jitter(&params, 0.02, &mut rng);

    let c_img = config.out_channels;
    let n = c_img * resolution * resolution;
    let x_t = Tensor::from_vec(crate::rng::normal_vec(&mut rng, n), &[c_img, resolution, resolution]);
    let y = Tensor::from_vec(crate::rng::normal_vec(&mut rng, n), &[c_img, resolution, resolution]);
    let r = Tensor::from_vec(crate::rng::normal_vec(&mut rng, n), &[c_img, resolution, resolution]);

    let loss_fn = move || {
        model
            .forward(&x_t, &y, 3)
            .expect("forward failed during gradcheck")
            .mul(&r)
            .sum()
    };
    Ok(check_params(&loss_fn, &params, 1e-5, tol, max_coords, &mut rng))
}

/// The CLI verification suite: both block conditioning modes plus the full
/// micro-config network. Errors if any comparison exceeds its tolerance.
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for cond in [CondMode::AdaLN, CondMode::AdaFM] {
        let worst = check_block(cond, 1e-5);
        reports.push(GradCheckReport {
            name: format!("block_{cond:?}").to_lowercase(),
            rel_err: worst,
            pass: worst < 1e-5,
        });
    }
    let micro = crate::arch::preset("micro")?;
    reports.extend(check_denoiser(&micro, 1e-4, 2, 16)?);
    if let Some(bad) = reports.iter().find(|r| !r.pass) {
        return Err(Error::Check(format!(
            "gradient check failed for {}: rel err {:.3e}",
            bad.name, bad.rel_err
        )));
    }
    Ok(reports)
}
