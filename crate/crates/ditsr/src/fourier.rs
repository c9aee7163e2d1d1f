//! Windowed 2-D discrete Fourier transforms and spectral utilities.
//!
//! Spectra are stored centered: after the forward transform the DC bin sits
//! at index `(p/2, p/2)` so that [`pixel_frequency`] indexing and the AdaFM
//! scale-matrix indexing line up literally. The forward DFT is unnormalized;
//! the inverse carries the `1/p^2` factor.
//!
//! Transforms are computed separably (rows then columns) with direct
//! per-axis DFTs; at window size 8 this is plenty.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `p x p` exact tiling of a `(C, H, W)` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub p: usize,
    pub nh: usize,
    pub nw: usize,
    pub channels: usize,
}

impl WindowGrid {
    pub fn new(p: usize, channels: usize, h: usize, w: usize) -> Result<WindowGrid> {
        if p < 2 || p % 2 != 0 {
            return Err(Error::Invalid(format!(
                "window side {p} must be even and >= 2"
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Dim(format!(
                "feature map {h}x{w} is not an exact tiling of {p}x{p} windows"
            )));
        }
        Ok(WindowGrid {
            p,
            nh: h / p,
            nw: w / p,
            channels,
        })
    }

    pub fn window_count(&self) -> usize {
        self.nh * self.nw
    }
}

/// Complex array stored as separate real/imag planes.
#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl ComplexTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

// ── raw DFT kernels ─────────────────────────────────────────────────

/// Separable 2-D DFT on an `h x w` complex array, uncentered layout.
/// `inverse` flips the twiddle sign and applies the `1/(h*w)` factor.
pub(crate) fn dft2_rect(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    // rows
    let (cw, sw) = twiddles(w, sign);
    let mut rre = vec![0.0; h * w];
    let mut rim = vec![0.0; h * w];
    for r in 0..h {
        for v in 0..w {
            let mut are = 0.0;
            let mut aim = 0.0;
            for b in 0..w {
                let (c, s) = (cw[(v * b) % w], sw[(v * b) % w]);
                let (xr, xi) = (re[r * w + b], im[r * w + b]);
                are += xr * c - xi * s;
                aim += xr * s + xi * c;
            }
            rre[r * w + v] = are;
            rim[r * w + v] = aim;
        }
    }
    // columns
    let (ch, sh) = twiddles(h, sign);
    let mut ore = vec![0.0; h * w];
    let mut oim = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut are = 0.0;
            let mut aim = 0.0;
            for a in 0..h {
                let (c, s) = (ch[(u * a) % h], sh[(u * a) % h]);
                let (xr, xi) = (rre[a * w + v], rim[a * w + v]);
                are += xr * c - xi * s;
                aim += xr * s + xi * c;
            }
            ore[u * w + v] = are;
            oim[u * w + v] = aim;
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        for v in ore.iter_mut().chain(oim.iter_mut()) {
            *v *= norm;
        }
    }
    (ore, oim)
}

fn twiddles(n: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut c = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for k in 0..n {
        let ang = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        c.push(ang.cos());
        s.push(ang.sin());
    }
    (c, s)
}

/// Swap quadrants so DC moves from (0,0) to (h/2, w/2). Even dims only;
/// the shift is then an involution (its own inverse).
pub(crate) fn fftshift(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert!(h % 2 == 0 && w % 2 == 0, "fftshift requires even dims");
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] = data[((u + h / 2) % h) * w + (v + w / 2) % w];
        }
    }
    out
}

// ── public transform API ────────────────────────────────────────────

/// Unnormalized forward 2-D DFT of a real square window, centered storage.
pub fn dft2(window: &Tensor) -> ComplexTensor {
    let sh = window.shape();
    assert_eq!(sh.len(), 2, "dft2 expects a 2-D window");
    assert_eq!(sh[0], sh[1], "dft2 expects a square window");
    let p = sh[0];
    let data = window.to_vec();
    let (re, im) = dft2_rect(&data, &vec![0.0; p * p], p, p, false);
    ComplexTensor {
        shape: vec![p, p],
        real: fftshift(&re, p, p),
        imag: fftshift(&im, p, p),
    }
}

/// Inverse of [`dft2`]: uncenters, applies the `1/p^2`-normalized inverse DFT.
pub fn idft2(spec: &ComplexTensor) -> ComplexTensor {
    assert_eq!(spec.shape.len(), 2, "idft2 expects a 2-D spectrum");
    assert_eq!(spec.shape[0], spec.shape[1], "idft2 expects a square spectrum");
    let p = spec.shape[0];
    let re = fftshift(&spec.real, p, p);
    let im = fftshift(&spec.imag, p, p);
    let (ore, oim) = dft2_rect(&re, &im, p, p, true);
    ComplexTensor {
        shape: vec![p, p],
        real: ore,
        imag: oim,
    }
}

// ── fold / unfold ───────────────────────────────────────────────────

fn unfold_indices(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (nh, nw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for wi in 0..nh {
        for wj in 0..nw {
            for ch in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        idx.push(ch * h * w + (wi * p + i) * w + (wj * p + j));
                    }
                }
            }
        }
    }
    idx
}

/// Rearranges `(C, H, W)` into `(H*W/p^2, C, p, p)` windows, row-major window
/// order. Lossless; [`fold_windows`] inverts it exactly.
pub fn unfold_windows(x: &Tensor, p: usize) -> Tensor {
    let sh = x.shape();
    assert_eq!(sh.len(), 3, "unfold_windows expects (C,H,W)");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(
        h % p == 0 && w % p == 0,
        "feature map {h}x{w} not divisible by window size {p}"
    );
    let idx = unfold_indices(c, h, w, p);
    x.index_map(&[h * w / (p * p), c, p, p], Rc::new(idx))
}

/// Inverse of [`unfold_windows`].
pub fn fold_windows(wins: &Tensor, h: usize, w: usize) -> Tensor {
    let sh = wins.shape();
    assert_eq!(sh.len(), 4, "fold_windows expects (nwin,C,p,p)");
    let (nwin, c, p) = (sh[0], sh[1], sh[2]);
    assert_eq!(sh[2], sh[3], "fold_windows expects square windows");
    assert_eq!(nwin * p * p, h * w, "window count inconsistent with H,W");
    let fwd = unfold_indices(c, h, w, p);
    // invert the bijection
    let mut idx = vec![0usize; fwd.len()];
    for (out_i, &src) in fwd.iter().enumerate() {
        idx[src] = out_i;
    }
    wins.index_map(&[c, h, w], Rc::new(idx))
}

// ── frequency coordinates ───────────────────────────────────────────

/// Frequency of the centered-spectrum bin at `(u, v)`:
/// `f_u = (u - H/2)/H * F_s`, `f_v = (v - W/2)/W * F_s`.
pub fn pixel_frequency(u: usize, v: usize, h: usize, w: usize, f_s: f64) -> (f64, f64) {
    assert!(u < h && v < w, "bin ({u},{v}) out of range for {h}x{w}");
    let fu = (u as f64 - h as f64 / 2.0) / h as f64 * f_s;
    let fv = (v as f64 - w as f64 / 2.0) / w as f64 * f_s;
    (fu, fv)
}

// ── radial power spectrum ───────────────────────────────────────────

/// Mean `|DFT|^2` binned by radial frequency. Accepts `(H,W)` or `(C,H,W)`
/// input (channel-averaged). Bin edges are uniform on `[0, 0.5*sqrt(2)*F_s]`
/// with `F_s = 1`.
pub fn radial_power_spectrum(x: &Tensor, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::Invalid("radial spectrum needs n_bins >= 2".into()));
    }
    let sh = x.shape();
    let (h, w, img) = match sh.len() {
        2 => (sh[0], sh[1], x.to_vec()),
        3 => {
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let d = x.to_vec();
            let mut avg = vec![0.0; h * w];
            for ch in 0..c {
                for i in 0..h * w {
                    avg[i] += d[ch * h * w + i];
                }
            }
            for v in avg.iter_mut() {
                *v /= c as f64;
            }
            (h, w, avg)
        }
        _ => return Err(Error::Dim("radial spectrum expects 2-D or 3-D input".into())),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim("radial spectrum requires even dims".into()));
    }
    let (re, im) = dft2_rect(&img, &vec![0.0; h * w], h, w, false);
    let re = fftshift(&re, h, w);
    let im = fftshift(&im, h, w);

    let rmax = 0.5 * std::f64::consts::SQRT_2;
    let mut power = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for u in 0..h {
        for v in 0..w {
            let (fu, fv) = pixel_frequency(u, v, h, w, 1.0);
            let r = (fu * fu + fv * fv).sqrt();
            let bin = ((r / rmax * n_bins as f64) as usize).min(n_bins - 1);
            let i = u * w + v;
            power[bin] += re[i] * re[i] + im[i] * im[i];
            count[bin] += 1;
        }
    }
    for b in 0..n_bins {
        if count[b] > 0 {
            power[b] /= count[b] as f64;
        }
    }
    Ok(power)
}

/// Center frequency of each radial bin, matching [`radial_power_spectrum`].
pub fn radial_bin_centers(n_bins: usize) -> Vec<f64> {
    let rmax = 0.5 * std::f64::consts::SQRT_2;
    (0..n_bins)
        .map(|b| (b as f64 + 0.5) / n_bins as f64 * rmax)
        .collect()
}

/// CSV dump with columns `bin_center_frequency,power`.
pub fn write_spectrum_csv(path: &std::path::Path, power: &[f64]) -> Result<()> {
    let centers = radial_bin_centers(power.len());
    let mut s = String::from("bin_center_frequency,power\n");
    for (c, p) in centers.iter().zip(power) {
        s.push_str(&format!("{c},{p}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}
