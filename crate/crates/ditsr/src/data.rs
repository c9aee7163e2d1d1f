//! Toy dataset synthesis and image I/O.
//!
//! HR targets are procedural mixtures of oriented sinusoids (one of them
//! forced into the top radial-frequency quartile) plus piecewise-constant
//! rectangles, clamped to `[0,1]`. The LR condition is produced by Gaussian
//! blur, s-fold decimation, additive noise and bicubic upsampling back to HR
//! size, so both halves of a pair share one shape and the residual `y0 - x0`
//! is defined elementwise.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_samples: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub channels: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_samples: 16,
            hr_size: 64,
            scale: 4,
            blur_sigma: 1.2,
            noise_sigma: 0.03,
            seed: 0,
            channels: 3,
        }
    }
}

/// One clean HR image: base 0.5, three to five sinusoids (amplitudes
/// 0.05..0.25, one forced to fx,fy in [0.38, 0.47]), two or three rectangles,
/// a mild per-channel affine, clamp to [0,1].
fn synth_hr(size: usize, channels: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut base = vec![0.5; size * size];
    let n_waves = rng.gen_range(3..=5);
    for wave in 0..n_waves {
        let amp = if wave == 0 {
            rng.gen_range(0.15..0.25)
        } else {
            rng.gen_range(0.05..0.25)
        };
        let (fx, fy) = if wave == 0 {
            // guaranteed top-quartile radial frequency (radius > 0.53)
            (rng.gen_range(0.38..0.47), rng.gen_range(0.38..0.47))
        } else {
            (rng.gen_range(0.02..0.47), rng.gen_range(0.02..0.47))
        };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                base[y * size + x] += amp
                    * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            }
        }
    }
    let n_rects = rng.gen_range(2..=3);
    for _ in 0..n_rects {
        let x0 = rng.gen_range(0..size / 2);
        let y0 = rng.gen_range(0..size / 2);
        let w = rng.gen_range(size / 8..size / 2);
        let h = rng.gen_range(size / 8..size / 2);
        let delta = rng.gen_range(0.1..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                base[y * size + x] += delta;
            }
        }
    }
    let mut data = Vec::with_capacity(channels * size * size);
    for _ in 0..channels {
        let s = rng.gen_range(0.8..1.0);
        let o = rng.gen_range(-0.05..0.05);
        data.extend(base.iter().map(|v| (v * s + o).clamp(0.0, 1.0)));
    }
    Tensor::from_vec(data, &[channels, size, size])
}

/// Separable Gaussian blur with clamp padding; `sigma <= 0` is a no-op.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return x.clone();
    }
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }
    let src = x.to_vec();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (xx as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[ch * h * w + y * w + sx];
                }
                tmp[ch * h * w + y * w + xx] = acc;
            }
        }
    }
    // horizontal pass result feeds the vertical pass
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[ch * h * w + sy * w + xx];
                }
                out[ch * h * w + y * w + xx] = acc;
            }
        }
    }
    Tensor::from_vec(out, sh)
}

/// Keeps every `s`-th pixel.
pub fn decimate(x: &Tensor, s: usize) -> Tensor {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(h % s == 0 && w % s == 0, "size {h}x{w} not divisible by scale {s}");
    let (oh, ow) = (h / s, w / s);
    let src = x.to_vec();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(src[ch * h * w + y * s * w + xx * s]);
            }
        }
    }
    Tensor::from_vec(out, &[c, oh, ow])
}

fn catmull_rom(t: f64) -> [f64; 4] {
    // Catmull-Rom cubic (a = -0.5) weights for the 4 neighbors of a sample
    // at fractional offset t from the second one
    let a = -0.5;
    let w = |x: f64| -> f64 {
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Bicubic upsampling by integer factor `s` with half-pixel alignment
/// (`src = (dst + 0.5)/s - 0.5`) and clamped borders. `s = 1` is exact
/// identity.
pub fn bicubic_upsample(x: &Tensor, s: usize) -> Tensor {
    if s == 1 {
        return x.clone();
    }
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = (h * s, w * s);
    let src = x.to_vec();
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    // precompute per-output-column base index and weights
    let prep = |n_out: usize| -> Vec<(i64, [f64; 4])> {
        (0..n_out)
            .map(|d| {
                let sc = (d as f64 + 0.5) / s as f64 - 0.5;
                let base = sc.floor();
                (base as i64, catmull_rom(sc - base))
            })
            .collect()
    };
    let cols = prep(ow);
    let rows = prep(oh);

    // horizontal then vertical
    let mut tmp = vec![0.0; c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            for (xx, (base, wt)) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (k, wk) in wt.iter().enumerate() {
                    acc += wk * src[ch * h * w + y * w + clampi(base + k as i64 - 1, w)];
                }
                tmp[ch * h * ow + y * ow + xx] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for (y, (base, wt)) in rows.iter().enumerate() {
            for xx in 0..ow {
                let mut acc = 0.0;
                for (k, wk) in wt.iter().enumerate() {
                    acc += wk * tmp[ch * h * ow + clampi(base + k as i64 - 1, h) * ow + xx];
                }
                out[ch * oh * ow + y * ow + xx] = acc;
            }
        }
    }
    Tensor::from_vec(out, &[c, oh, ow])
}

/// Runs the full degradation on one HR image: blur, decimate, noise,
/// bicubic upsample back to HR size.
pub fn degrade(x0: &Tensor, spec: &ToyDatasetSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let blurred = gaussian_blur(x0, spec.blur_sigma);
    let lr = decimate(&blurred, spec.scale);
    let noisy = if spec.noise_sigma > 0.0 {
        let noise = crate::rng::normal_vec(rng, lr.numel());
        let data: Vec<f64> = lr
            .to_vec()
            .iter()
            .zip(&noise)
            .map(|(v, n)| v + spec.noise_sigma * n)
            .collect();
        Tensor::from_vec(data, lr.shape())
    } else {
        lr
    };
    bicubic_upsample(&noisy, spec.scale)
}

/// `(x0, y0)` pairs, bit-reproducible from `spec.seed`.
pub fn synth_dataset(spec: &ToyDatasetSpec) -> Result<Vec<(Tensor, Tensor)>> {
    if spec.hr_size % spec.scale != 0 {
        return Err(Error::Config(format!(
            "hr_size {} not divisible by scale {}",
            spec.hr_size, spec.scale
        )));
    }
    if spec.n_samples == 0 || spec.channels == 0 {
        return Err(Error::Config("empty dataset spec".into()));
    }
    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = crate::rng::stream(spec.seed, 1000 + i as u64);
        let x0 = synth_hr(spec.hr_size, spec.channels, &mut rng);
        let y0 = degrade(&x0, spec, &mut rng);
        out.push((x0, y0));
    }
    Ok(out)
}

// ── PFM I/O ─────────────────────────────────────────────────────────

/// Writes a `(C,H,W)` tensor (C = 1 or 3) as a little-endian PFM file
/// (rows bottom to top, per the format).
pub fn write_pfm(path: &Path, x: &Tensor) -> Result<()> {
    let sh = x.shape();
    if sh.len() != 3 || !(sh[0] == 1 || sh[0] == 3) {
        return Err(Error::Invalid(format!(
            "PFM needs a (1|3,H,W) tensor, got {sh:?}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let tag = if c == 3 { "PF" } else { "Pf" };
    write!(f, "{tag}\n{w} {h}\n-1.0\n")?;
    let data = x.to_vec();
    for y in (0..h).rev() {
        for xx in 0..w {
            for ch in 0..c {
                let v = data[ch * h * w + y * w + xx] as f32;
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a little-endian PFM file back into a `(C,H,W)` tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-UTF8 PFM header".into()))?
            .to_string();
        pos += 1; // single whitespace after each token
        Ok(s)
    };
    let tag = token()?;
    let c = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Format(format!("unknown PFM tag '{other}'"))),
    };
    let w: usize = token()?.parse().map_err(|_| Error::Format("bad PFM width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Format("bad PFM height".into()))?;
    let scale: f64 = token()?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Format("big-endian PFM not supported".into()));
    }
    let need = c * h * w * 4;
    if bytes.len() < pos + need {
        return Err(Error::Format("truncated PFM payload".into()));
    }
    let mut data = vec![0.0; c * h * w];
    let mut off = pos;
    for y in (0..h).rev() {
        for xx in 0..w {
            for ch in 0..c {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                data[ch * h * w + y * w + xx] = v as f64;
                off += 4;
            }
        }
    }
    Ok(Tensor::from_vec(data, &[c, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_pipeline_is_identity() {
        let spec = ToyDatasetSpec {
            n_samples: 2,
            hr_size: 16,
            scale: 1,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed: 7,
            channels: 3,
        };
        for (x0, y0) in synth_dataset(&spec).unwrap() {
            assert_eq!(x0.to_vec(), y0.to_vec(), "degenerate pipeline must be identity");
        }
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let spec = ToyDatasetSpec { n_samples: 3, hr_size: 32, ..Default::default() };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        for ((x, y), (x2, y2)) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), x2.to_vec());
            assert_eq!(y.to_vec(), y2.to_vec());
        }
        let c = synth_dataset(&ToyDatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a[0].0.to_vec(), c[0].0.to_vec());
    }

    #[test]
    fn rejects_indivisible_scale() {
        let spec = ToyDatasetSpec { hr_size: 30, scale: 4, ..Default::default() };
        assert!(matches!(synth_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn values_stay_in_unit_range_for_hr() {
        let spec = ToyDatasetSpec { n_samples: 4, hr_size: 32, ..Default::default() };
        for (x0, _) in synth_dataset(&spec).unwrap() {
            for v in x0.to_vec() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn degradation_strips_top_quartile_energy_in_every_sample() {
        let spec = ToyDatasetSpec { n_samples: 8, hr_size: 64, ..Default::default() };
        let n_bins = 8;
        for (i, (x0, y0)) in synth_dataset(&spec).unwrap().iter().enumerate() {
            let px = crate::fourier::radial_power_spectrum(x0, n_bins).unwrap();
            let py = crate::fourier::radial_power_spectrum(y0, n_bins).unwrap();
            let top = n_bins - n_bins / 4;
            let hi_x: f64 = px[top..].iter().sum();
            let hi_y: f64 = py[top..].iter().sum();
            assert!(
                hi_y < hi_x,
                "sample {i}: LR top-quartile energy {hi_y:.3e} not below HR {hi_x:.3e}"
            );
        }
    }

    #[test]
    fn bicubic_identity_at_scale_one_and_constant_preservation() {
        let mut rng = crate::rng::seeded(0);
        let x = Tensor::randn(&[2, 8, 8], &mut rng);
        assert_eq!(bicubic_upsample(&x, 1).to_vec(), x.to_vec());
        // cubic kernel has unit DC gain: constants upsample to constants
        let c = Tensor::full(&[1, 4, 4], 0.37);
        for v in bicubic_upsample(&c, 4).to_vec() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        let up = bicubic_upsample(&x, 2);
        assert_eq!(up.shape(), &[2, 16, 16]);
    }

    #[test]
    fn blur_preserves_mean_and_smooths() {
        let mut rng = crate::rng::seeded(1);
        let x = Tensor::randn(&[1, 16, 16], &mut rng);
        let b = gaussian_blur(&x, 1.5);
        let roughness = |t: &Tensor| -> f64 {
            let d = t.to_vec();
            let mut acc = 0.0;
            for y in 0..16 {
                for xx in 0..15 {
                    let diff = d[y * 16 + xx + 1] - d[y * 16 + xx];
                    acc += diff * diff;
                }
            }
            acc
        };
        assert!(roughness(&b) < 0.2 * roughness(&x), "blur did not smooth");
        // constants are fixed points (kernel normalized, clamp padding)
        let c = Tensor::full(&[1, 8, 8], 0.4);
        for v in gaussian_blur(&c, 2.0).to_vec() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::seeded(2);
        for c in [1usize, 3] {
            let x = Tensor::randn(&[c, 6, 5], &mut rng);
            let path = dir.path().join(format!("t{c}.pfm"));
            write_pfm(&path, &x).unwrap();
            let back = read_pfm(&path).unwrap();
            assert_eq!(back.shape(), x.shape());
            for (a, b) in x.to_vec().iter().zip(back.to_vec()) {
                assert!((a - b).abs() < 1e-6, "f32 round trip drifted: {a} vs {b}");
            }
        }
    }
}
