//! The DiT-SR transformer block and its time-conditioning mechanisms.
//!
//! Each block is two residual branches:
//!
//! ```text
//! x = MHSA(Cond(Norm(x), f_time1)) + x
//! x = MLP (Cond(Norm(x), f_time2)) + x
//! ```
//!
//! `Cond` is either AdaLN (per-channel scale/shift with a gate on the
//! residual branch) or AdaFM (a learned `p x p` scale matrix applied
//! multiplicatively in the centered spectrum of every window). The AdaFM
//! branch carries no gate; the AdaLN parameter accounting is
//! `d_t * C * 3 * 2` against AdaFM's `d_t * p^2 * 2`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fourier::dft2_rect;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondMode {
    AdaLN,
    AdaFM,
}

/// Mapping parameters of one block's conditioning head, per the two
/// closed-form counts (final projection layer only).
pub fn conditioning_param_count(mode: CondMode, d_t: usize, c: usize, p: usize) -> usize {
    match mode {
        CondMode::AdaLN => d_t * c * 3 * 2,
        CondMode::AdaFM => d_t * p * p * 2,
    }
}

// ── time embedding ──────────────────────────────────────────────────

/// Sinusoidal timestep embedding: interleaved sin/cos at geometric
/// frequencies with base period 10000. Width must be even.
pub fn sinusoidal_embed(t: usize, d_t: usize) -> Tensor {
    assert!(d_t % 2 == 0, "time embedding width {d_t} must be even");
    let half = d_t / 2;
    let mut out = vec![0.0; d_t];
    for k in 0..half {
        let freq = 10_000f64.powf(-(2.0 * k as f64) / d_t as f64);
        let ang = t as f64 * freq;
        out[2 * k] = ang.sin();
        out[2 * k + 1] = ang.cos();
    }
    Tensor::from_vec(out, &[d_t])
}

/// A dense layer `y = W x + b` with `W: [out, in]`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = crate::rng::normal_vec(rng, out_dim * in_dim)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Linear {
            w: Tensor::param(w, &[out_dim, in_dim]),
            b: Tensor::param(vec![0.0; out_dim], &[out_dim]),
        }
    }

    /// All-zero weights and bias (identity-conditioned / silent heads).
    pub fn zeros(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            w: Tensor::param(vec![0.0; out_dim * in_dim], &[out_dim, in_dim]),
            b: Tensor::param(vec![0.0; out_dim], &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// Pixelwise application over a `(C_in, H, W)` map -> `(C_out, H, W)`.
    pub fn forward_chw(&self, x: &Tensor) -> Tensor {
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "forward_chw expects (C,H,W)");
        assert_eq!(sh[0], self.in_dim(), "channel mismatch in linear layer");
        let hw = sh[1] * sh[2];
        let y = self.w.matmul(&x.reshape(&[sh[0], hw]));
        y.add_channels(&self.b).reshape(&[self.out_dim(), sh[1], sh[2]])
    }

    /// Application to a flat vector.
    pub fn forward_vec(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.ndim(), 1, "forward_vec expects a vector");
        let n = x.shape()[0];
        let y = self.w.matmul(&x.reshape(&[n, 1]));
        y.add_channels(&self.b).reshape(&[self.out_dim()])
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Per-block 2-layer MLP mapping the base time embedding to the pair
/// `(f_time1, f_time2)`. The final layer starts at zero so a fresh block is
/// identity-conditioned.
pub struct TimeMlp {
    pub hidden: Linear,
    pub proj: Linear,
    out_width: usize,
}

impl TimeMlp {
    pub fn new(d_t: usize, out_width: usize, rng: &mut ChaCha8Rng) -> TimeMlp {
        TimeMlp {
            hidden: Linear::new(d_t, d_t, rng),
            proj: Linear::zeros(d_t, 2 * out_width),
            out_width,
        }
    }

    pub fn forward(&self, base_embed: &Tensor) -> (Tensor, Tensor) {
        let h = self.hidden.forward_vec(base_embed).gelu();
        let o = self.proj.forward_vec(&h);
        (
            o.narrow0(0, self.out_width),
            o.narrow0(self.out_width, self.out_width),
        )
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.proj.param_count()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.hidden.collect_params(&format!("{prefix}.hidden"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

// ── AdaLN ───────────────────────────────────────────────────────────

/// Channel-wise modulation `x*(1+scale) + shift`, spatially uniform. Returns
/// the modulated map and the gate vector for the residual branch.
pub fn adaln_modulate(x: &Tensor, f_time: &Tensor) -> (Tensor, Tensor) {
    let c = x.shape()[0];
    assert_eq!(
        f_time.shape(),
        &[3 * c],
        "AdaLN expects f_time of width 3C = {}",
        3 * c
    );
    let scale = f_time.narrow0(0, c);
    let shift = f_time.narrow0(c, c);
    let gate = f_time.narrow0(2 * c, c);
    let modulated = x.mul_channels(&scale.add_scalar(1.0)).add_channels(&shift);
    (modulated, gate)
}

// ── AdaFM ───────────────────────────────────────────────────────────

/// Conjugate-mirror bin of a centered even-sized spectrum index.
fn mirror(u: usize, p: usize) -> usize {
    (p - u) % p
}

/// Averages each entry of the raw scale matrix with its conjugate-mirror bin
/// so that modulating the spectrum of a real signal keeps it conjugate
/// symmetric (the modulated feature stays real).
pub fn adafm_symmetrize(s_raw: &Tensor) -> Tensor {
    let sh = s_raw.shape();
    assert_eq!(sh.len(), 2, "scale matrix must be 2-D");
    assert_eq!(sh[0], sh[1], "scale matrix must be square");
    let p = sh[0];
    let mut idx = Vec::with_capacity(p * p);
    for u in 0..p {
        for v in 0..p {
            idx.push(mirror(u, p) * p + mirror(v, p));
        }
    }
    let mirrored = s_raw.index_map(&[p, p], Rc::new(idx));
    s_raw.add(&mirrored).scale(0.5)
}

/// Applies the window-spectrum operator `fold(idft2(S * dft2(unfold(x))))`
/// to raw data. Returns the real output plus the largest imaginary residue.
/// `s` is given in centered layout.
fn adafm_apply(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    s_centered: &[f64],
    p: usize,
) -> (Vec<f64>, f64) {
    // Re-index the scale matrix into uncentered layout once so the per-window
    // transforms skip the fftshift shuffles.
    let mut s_us = vec![0.0; p * p];
    for u in 0..p {
        for v in 0..p {
            s_us[((u + p / 2) % p) * p + (v + p / 2) % p] = s_centered[u * p + v];
        }
    }
    let (nh, nw) = (h / p, w / p);
    let zero = vec![0.0; p * p];
    let mut out = vec![0.0; c * h * w];
    let mut win = vec![0.0; p * p];
    let mut max_im: f64 = 0.0;
    for wi in 0..nh {
        for wj in 0..nw {
            for ch in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        win[i * p + j] = x[ch * h * w + (wi * p + i) * w + (wj * p + j)];
                    }
                }
                let (mut re, mut im) = dft2_rect(&win, &zero, p, p, false);
                for k in 0..p * p {
                    re[k] *= s_us[k];
                    im[k] *= s_us[k];
                }
                let (ore, oim) = dft2_rect(&re, &im, p, p, true);
                for k in 0..p * p {
                    max_im = max_im.max(oim[k].abs());
                }
                for i in 0..p {
                    for j in 0..p {
                        out[ch * h * w + (wi * p + i) * w + (wj * p + j)] = ore[i * p + j];
                    }
                }
            }
        }
    }
    (out, max_im)
}

/// Gradient of the AdaFM output w.r.t. the centered scale matrix:
/// `gS[k] = (1/p^2) * sum_{windows,channels} Re(X[k] * conj(G[k]))`.
fn adafm_scale_grad(
    x: &[f64],
    go: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Vec<f64> {
    let (nh, nw) = (h / p, w / p);
    let zero = vec![0.0; p * p];
    let mut gs_us = vec![0.0; p * p];
    let mut xwin = vec![0.0; p * p];
    let mut gwin = vec![0.0; p * p];
    for wi in 0..nh {
        for wj in 0..nw {
            for ch in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        let src = ch * h * w + (wi * p + i) * w + (wj * p + j);
                        xwin[i * p + j] = x[src];
                        gwin[i * p + j] = go[src];
                    }
                }
                let (xr, xi) = dft2_rect(&xwin, &zero, p, p, false);
                let (gr, gi) = dft2_rect(&gwin, &zero, p, p, false);
                for k in 0..p * p {
                    gs_us[k] += xr[k] * gr[k] + xi[k] * gi[k];
                }
            }
        }
    }
    let norm = 1.0 / (p * p) as f64;
    let mut gs = vec![0.0; p * p];
    for u in 0..p {
        for v in 0..p {
            gs[u * p + v] = gs_us[((u + p / 2) % p) * p + (v + p / 2) % p] * norm;
        }
    }
    gs
}

/// Largest imaginary component left after modulating `x` by the centered
/// scale matrix `s` and transforming back. Zero up to rounding when `s` is
/// conjugate-mirror symmetric; a diagnostic for symmetrization.
pub fn adafm_imag_residue(x: &Tensor, s: &Tensor) -> f64 {
    let sh = x.shape();
    let p = s.shape()[0];
    let (_, max_im) = adafm_apply(&x.to_vec(), sh[0], sh[1], sh[2], &s.to_vec(), p);
    max_im
}

/// Frequency-domain modulation: every `p x p` window's centered spectrum is
/// multiplied by the same scale matrix across all windows and channels. The
/// operator is linear and self-adjoint in `x`, which gives the backward pass
/// in closed form. An imaginary residue above 1e-9 signals a
/// conjugate-symmetry violation in the scale matrix and is an error.
pub fn adafm_modulate(x: &Tensor, s: &Tensor) -> Tensor {
    let sh = x.shape().to_vec();
    assert_eq!(sh.len(), 3, "adafm_modulate expects (C,H,W)");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let ssh = s.shape();
    assert_eq!(ssh.len(), 2, "scale matrix must be 2-D");
    assert_eq!(ssh[0], ssh[1], "scale matrix must be square");
    let p = ssh[0];
    assert!(
        h % p == 0 && w % p == 0,
        "feature map {h}x{w} not divisible by fft window {p}"
    );
    let xd = x.to_vec();
    let sd = s.to_vec();
    let (out, max_im) = adafm_apply(&xd, c, h, w, &sd, p);
    assert!(
        max_im < 1e-9,
        "AdaFM imaginary residue {max_im:.3e} exceeds 1e-9: scale matrix violates conjugate symmetry"
    );
    let xd2 = xd.clone();
    let sd2 = sd.clone();
    Tensor::from_op(
        sh,
        out,
        vec![x.clone(), s.clone()],
        "adafm_modulate",
        Box::new(move |go| {
            let (gx, _) = adafm_apply(go, c, h, w, &sd2, p);
            let gs = adafm_scale_grad(&xd2, go, c, h, w, p);
            vec![gx, gs]
        }),
    )
}

// ── windowed multi-head self-attention ──────────────────────────────

/// Window geometry of one attention layer: side length, cyclic shift
/// (0 or window/2 on alternating blocks), head count and per-head width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWindowSpec {
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionWindowSpec {
    pub fn new(window: usize, shift: usize, heads: usize, dim: usize) -> AttentionWindowSpec {
        assert!(
            dim % heads == 0,
            "channel width {dim} not divisible by {heads} heads"
        );
        assert!(shift == 0 || shift == window / 2, "shift must be 0 or window/2");
        AttentionWindowSpec {
            window,
            shift,
            heads,
            head_dim: dim / heads,
        }
    }
}

fn roll_indices(c: usize, h: usize, w: usize, dy: usize, dx: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                idx.push(ch * h * w + ((y + dy) % h) * w + (x + dx) % w);
            }
        }
    }
    idx
}

/// Cyclic 2-D shift of a `(C,H,W)` map.
pub fn roll_chw(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    x.index_map(sh, Rc::new(roll_indices(c, h, w, dy, dx)))
}

pub struct WindowedAttention {
    pub spec: AttentionWindowSpec,
    dim: usize,
    qkv: Linear,
    proj: Linear,
    /// Per-head relative-position bias table, `[heads, (2w-1)^2]`.
    pub rel_bias: Option<Tensor>,
}

impl WindowedAttention {
    pub fn new(
        dim: usize,
        spec: AttentionWindowSpec,
        rel_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> WindowedAttention {
        let table = (2 * spec.window - 1) * (2 * spec.window - 1);
        WindowedAttention {
            spec,
            dim,
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            rel_bias: rel_bias.then(|| Tensor::param(vec![0.0; spec.heads * table], &[spec.heads, table])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert_eq!(c, self.dim);
        let win = self.spec.window;
        assert!(
            h % win == 0 && w % win == 0,
            "feature map {h}x{w} not divisible by attention window {win}"
        );
        let shift = self.spec.shift;
        let shifted = if shift > 0 { roll_chw(x, shift, shift) } else { x.clone() };

        let qkv = self.qkv.forward_chw(&shifted); // [3C, H, W]
        let (nh, nw) = (h / win, w / win);
        let nwin = nh * nw;
        let t = win * win;
        let heads = self.spec.heads;
        let hd = self.spec.head_dim;

        // gather [nwin, heads, t, hd] views of q, k, v from the qkv map
        let part = |offset: usize| -> Tensor {
            let mut idx = Vec::with_capacity(nwin * heads * t * hd);
            for wi in 0..nh {
                for wj in 0..nw {
                    for head in 0..heads {
                        for tok in 0..t {
                            let (a, b) = (tok / win, tok % win);
                            for d in 0..hd {
                                let ch = offset * c + head * hd + d;
                                idx.push(ch * h * w + (wi * win + a) * w + (wj * win + b));
                            }
                        }
                    }
                }
            }
            qkv.index_map(&[nwin, heads, t, hd], Rc::new(idx))
        };
        let q = part(0).scale(1.0 / (hd as f64).sqrt());
        let k = part(1);
        let v = part(2);

        let mut attn = q.matmul(&k.permute(&[0, 1, 3, 2])); // [nwin, heads, t, t]
        if let Some(table) = &self.rel_bias {
            let span = 2 * win - 1;
            let mut idx = Vec::with_capacity(heads * t * t);
            for head in 0..heads {
                for i in 0..t {
                    for j in 0..t {
                        let (ai, bi) = (i / win, i % win);
                        let (aj, bj) = (j / win, j % win);
                        let rel = (ai + win - 1 - aj) * span + (bi + win - 1 - bj);
                        idx.push(head * span * span + rel);
                    }
                }
            }
            let bias = table.index_map(&[heads, t, t], Rc::new(idx));
            attn = attn.add(&bias);
        }
        let attn = attn.softmax(3);
        let out = attn.matmul(&v); // [nwin, heads, t, hd]

        // back to (C, H, W)
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let (head, d) = (ch / hd, ch % hd);
            for y in 0..h {
                for xx in 0..w {
                    let (wi, wj) = (y / win, xx / win);
                    let tok = (y % win) * win + xx % win;
                    idx.push((((wi * nw + wj) * heads + head) * t + tok) * hd + d);
                }
            }
        }
        let merged = out.index_map(&[c, h, w], Rc::new(idx));
        let projected = self.proj.forward_chw(&merged);
        if shift > 0 {
            roll_chw(&projected, h - shift, w - shift)
        } else {
            projected
        }
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count()
            + self.proj.param_count()
            + self.rel_bias.as_ref().map_or(0, |t| t.numel())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.qkv.collect_params(&format!("{prefix}.qkv"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        if let Some(t) = &self.rel_bias {
            out.push((format!("{prefix}.rel_bias"), t.clone()));
        }
    }
}

/// Two dense layers separated by GELU, expansion ratio 4.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Mlp {
        Mlp {
            fc1: Linear::new(dim, 4 * dim, rng),
            fc2: Linear::new(4 * dim, dim, rng),
        }
    }

    pub fn forward_chw(&self, x: &Tensor) -> Tensor {
        self.fc2.forward_chw(&self.fc1.forward_chw(x).gelu())
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Per-channel affine used after group normalization.
pub struct NormAffine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormAffine {
    pub fn new(c: usize) -> NormAffine {
        NormAffine {
            gamma: Tensor::param(vec![1.0; c], &[c]),
            beta: Tensor::param(vec![0.0; c], &[c]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct TransformerBlock {
    pub width: usize,
    pub cond: CondMode,
    pub fft_window: usize,
    pub groups: usize,
    norm1: NormAffine,
    norm2: NormAffine,
    pub time_mlp: TimeMlp,
    pub attn: WindowedAttention,
    pub mlp: Mlp,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        cond: CondMode,
        d_t: usize,
        fft_window: usize,
        attn_spec: AttentionWindowSpec,
        groups: usize,
        rel_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> TransformerBlock {
        assert!(width % groups == 0, "width {width} not divisible by {groups} norm groups");
        let out_width = match cond {
            CondMode::AdaLN => 3 * width,
            CondMode::AdaFM => fft_window * fft_window,
        };
        TransformerBlock {
            width,
            cond,
            fft_window,
            groups,
            norm1: NormAffine::new(width),
            norm2: NormAffine::new(width),
            time_mlp: TimeMlp::new(d_t, out_width, rng),
            attn: WindowedAttention::new(width, attn_spec, rel_bias, rng),
            mlp: Mlp::new(width, rng),
        }
    }

    fn branch<F: Fn(&Tensor) -> Tensor>(
        &self,
        x: &Tensor,
        normed: &Tensor,
        f_time: &Tensor,
        body: F,
    ) -> Tensor {
        match self.cond {
            CondMode::AdaLN => {
                let (modulated, gate) = adaln_modulate(normed, f_time);
                x.add(&body(&modulated).mul_channels(&gate))
            }
            CondMode::AdaFM => {
                let p = self.fft_window;
                let s = adafm_symmetrize(&f_time.reshape(&[p, p]));
                x.add(&body(&adafm_modulate(normed, &s)))
            }
        }
    }

    pub fn forward(&self, x: &Tensor, base_embed: &Tensor) -> Tensor {
        assert_eq!(x.shape()[0], self.width, "block width mismatch");
        let (f1, f2) = self.time_mlp.forward(base_embed);
        let n1 = x.group_norm(self.groups, &self.norm1.gamma, &self.norm1.beta, GROUP_NORM_EPS);
        let x = self.branch(x, &n1, &f1, |m| self.attn.forward(m));
        let n2 = x.group_norm(self.groups, &self.norm2.gamma, &self.norm2.beta, GROUP_NORM_EPS);
        self.branch(&x, &n2, &f2, |m| self.mlp.forward_chw(m))
    }

    /// Attention + MLP weights only (identical across conditioning modes).
    pub fn attn_mlp_param_count(&self) -> usize {
        self.attn.param_count() + self.mlp.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.attn_mlp_param_count()
            + self.time_mlp.param_count()
            + self.norm1.param_count()
            + self.norm2.param_count()
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.time_mlp.collect_params(&format!("{prefix}.time_mlp"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_t0_and_injectivity() {
        let e = sinusoidal_embed(0, 8).to_vec();
        for k in 0..4 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        let e1 = sinusoidal_embed(1, 8).to_vec();
        let e2 = sinusoidal_embed(2, 8).to_vec();
        for k in 0..4 {
            assert_ne!(e1[2 * k], e2[2 * k], "sin component {k} equal for t=1,2");
        }
        // exhaustive distinctness for a T=15 chain
        let embeds: Vec<Vec<f64>> = (0..=15).map(|t| sinusoidal_embed(t, 16).to_vec()).collect();
        for a in 0..embeds.len() {
            for b in a + 1..embeds.len() {
                let gap: f64 = embeds[a]
                    .iter()
                    .zip(&embeds[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(gap > 1e-6, "timesteps {a} and {b} too close: {gap}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "must be even")]
    fn sinusoidal_odd_width_panics() {
        let _ = sinusoidal_embed(1, 7);
    }

    #[test]
    fn time_mlp_output_widths() {
        let mut rng = crate::rng::seeded(0);
        let m = TimeMlp::new(256, 8 * 8, &mut rng); // adafm, p=8
        let (f1, f2) = m.forward(&sinusoidal_embed(3, 256));
        assert_eq!(f1.shape(), &[64]);
        assert_eq!(f2.shape(), &[64]);

        let m = TimeMlp::new(256, 3 * 192, &mut rng); // adaln, C=192
        let (f1, _) = m.forward(&sinusoidal_embed(3, 256));
        assert_eq!(f1.shape(), &[576]);
    }

    #[test]
    fn time_mlp_zero_final_layer_outputs_bias() {
        let mut rng = crate::rng::seeded(1);
        let m = TimeMlp::new(16, 4, &mut rng);
        m.proj.b.set_data(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (f1, f2) = m.forward(&sinusoidal_embed(9, 16));
        assert_eq!(f1.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f2.to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn adaln_identity_and_spatial_uniformity() {
        let mut rng = crate::rng::seeded(2);
        let c = 4;
        let x = Tensor::randn(&[c, 3, 3], &mut rng);
        // scale=0, shift=0, gate=1 -> modulated == x
        let mut ft = vec![0.0; 3 * c];
        ft[2 * c..].fill(1.0);
        let (m, gate) = adaln_modulate(&x, &Tensor::from_vec(ft, &[3 * c]));
        assert_eq!(m.to_vec(), x.to_vec());
        assert_eq!(gate.to_vec(), vec![1.0; c]);

        // arbitrary modulation is uniform across (h, w) per channel
        let ft = crate::rng::normal_vec(&mut rng, 3 * c);
        let scale = ft[..c].to_vec();
        let (m, _) = adaln_modulate(&x, &Tensor::from_vec(ft, &[3 * c]));
        let (xd, md) = (x.to_vec(), m.to_vec());
        for ch in 0..c {
            let delta0 = md[ch * 9] - xd[ch * 9] * (1.0 + scale[ch]);
            for s in 1..9 {
                let delta = md[ch * 9 + s] - xd[ch * 9 + s] * (1.0 + scale[ch]);
                assert!((delta - delta0).abs() < 1e-12, "non-uniform modulation");
            }
        }
    }

    #[test]
    fn adaln_scale_minus_one_leaves_shift() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let ft = Tensor::from_vec(vec![-1.0, -1.0, 7.0, 8.0, 0.0, 0.0], &[6]);
        let (m, _) = adaln_modulate(&x, &ft);
        assert_eq!(m.to_vec(), vec![7.0, 7.0, 8.0, 8.0]);
    }

    #[test]
    fn adafm_all_ones_is_identity() {
        let mut rng = crate::rng::seeded(3);
        let x = Tensor::randn(&[3, 8, 8], &mut rng);
        let s = Tensor::ones(&[4, 4]);
        let y = adafm_modulate(&x, &s);
        let (xd, yd) = (x.to_vec(), y.to_vec());
        for i in 0..xd.len() {
            assert!((xd[i] - yd[i]).abs() < 1e-9);
        }
        // S = 2 doubles
        let y = adafm_modulate(&x, &Tensor::full(&[4, 4], 2.0));
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adafm_dc_only_gives_window_means() {
        let mut rng = crate::rng::seeded(4);
        let p = 4;
        let x = Tensor::randn(&[2, 8, 8], &mut rng);
        let mut s = vec![0.0; p * p];
        s[(p / 2) * p + p / 2] = 1.0; // DC bin only
        let y = adafm_modulate(&x, &Tensor::from_vec(s, &[p, p]));
        // brute-force mean-filter oracle
        let xd = x.to_vec();
        let yd = y.to_vec();
        for ch in 0..2 {
            for wi in 0..2 {
                for wj in 0..2 {
                    let mut mean = 0.0;
                    for i in 0..p {
                        for j in 0..p {
                            mean += xd[ch * 64 + (wi * p + i) * 8 + wj * p + j];
                        }
                    }
                    mean /= (p * p) as f64;
                    for i in 0..p {
                        for j in 0..p {
                            let got = yd[ch * 64 + (wi * p + i) * 8 + wj * p + j];
                            assert!((got - mean).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn adafm_linearity_in_input() {
        let mut rng = crate::rng::seeded(5);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let y = Tensor::randn(&[1, 8, 8], &mut rng);
        let s_raw = Tensor::randn(&[4, 4], &mut rng);
        let s = adafm_symmetrize(&s_raw);
        let (a, b) = (0.7, -1.9);
        let lhs = adafm_modulate(&x.scale(a).add(&y.scale(b)), &s).to_vec();
        let rhs = adafm_modulate(&x, &s)
            .scale(a)
            .add(&adafm_modulate(&y, &s).scale(b))
            .to_vec();
        for (u, v) in lhs.iter().zip(&rhs) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetrize_fixed_point_and_mirror_property() {
        let mut rng = crate::rng::seeded(6);
        let p = 4;
        let raw = Tensor::randn(&[p, p], &mut rng);
        let s = adafm_symmetrize(&raw).to_vec();
        for u in 0..p {
            for v in 0..p {
                let m = s[mirror(u, p) * p + mirror(v, p)];
                assert_eq!(s[u * p + v], m);
            }
        }
        // symmetric input is a fixed point
        let again = adafm_symmetrize(&Tensor::from_vec(s.clone(), &[p, p])).to_vec();
        for (a, b) in s.iter().zip(&again) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetrized_random_scale_keeps_output_real() {
        // realness is enforced inside adafm_modulate (residue < 1e-9); check
        // the tighter 1e-10 bound directly
        let mut rng = crate::rng::seeded(7);
        for _ in 0..4 {
            let x = Tensor::randn(&[2, 8, 8], &mut rng);
            let s = adafm_symmetrize(&Tensor::randn(&[4, 4], &mut rng));
            let (_, max_im) = adafm_apply(&x.to_vec(), 2, 8, 8, &s.to_vec(), 4);
            assert!(max_im < 1e-10, "imaginary residue {max_im}");
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = crate::rng::seeded(8);
        let dim = 4;
        let spec = AttentionWindowSpec::new(4, 0, 2, dim);
        let attn = WindowedAttention::new(dim, spec, true, &mut rng);
        let x = Tensor::randn(&[dim, 4, 4], &mut rng);

        // probe the softmax output by running with V = one-hot basis:
        // uniform-attention case below covers the row-sum invariant; here we
        // check output stays within the convex hull of values when the value
        // projection is an identity slice.
        let mut w = vec![0.0; 3 * dim * dim];
        for i in 0..dim {
            w[(2 * dim + i) * dim + i] = 1.0; // V = x, Q = K = 0
        }
        attn.qkv.w.set_data(w);
        let mut pw = vec![0.0; dim * dim];
        for i in 0..dim {
            pw[i * dim + i] = 1.0;
        }
        attn.proj.w.set_data(pw);
        let y = attn.forward(&x).to_vec();
        let xd = x.to_vec();
        for ch in 0..dim {
            let vals = &xd[ch * 16..(ch + 1) * 16];
            let (mn, mx) = vals
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for &o in &y[ch * 16..(ch + 1) * 16] {
                assert!(o >= mn - 1e-12 && o <= mx + 1e-12, "not a convex combination");
            }
        }
    }

    #[test]
    fn uniform_attention_averages_window() {
        // Q = K = 0 -> uniform attention -> output is the per-window mean of V
        let mut rng = crate::rng::seeded(9);
        let dim = 2;
        let spec = AttentionWindowSpec::new(2, 1, 2, dim); // shifted
        let attn = WindowedAttention::new(dim, spec, false, &mut rng);
        let mut w = vec![0.0; 3 * dim * dim];
        for i in 0..dim {
            w[(2 * dim + i) * dim + i] = 1.0;
        }
        attn.qkv.w.set_data(w);
        let mut pw = vec![0.0; dim * dim];
        for i in 0..dim {
            pw[i * dim + i] = 1.0;
        }
        attn.proj.w.set_data(pw);

        let x = Tensor::randn(&[dim, 4, 4], &mut rng);
        let y = attn.forward(&x).to_vec();
        // oracle: roll, average 2x2 windows, un-roll
        let rolled = roll_chw(&x, 1, 1).to_vec();
        let mut expect = vec![0.0; dim * 16];
        for ch in 0..dim {
            for wi in 0..2 {
                for wj in 0..2 {
                    let mut mean = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            mean += rolled[ch * 16 + (wi * 2 + a) * 4 + wj * 2 + b];
                        }
                    }
                    mean /= 4.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            expect[ch * 16 + (wi * 2 + a) * 4 + wj * 2 + b] = mean;
                        }
                    }
                }
            }
        }
        let unrolled = roll_chw(&Tensor::from_vec(expect, &[dim, 4, 4]), 3, 3).to_vec();
        for (a, b) in y.iter().zip(&unrolled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance_without_bias() {
        let mut rng = crate::rng::seeded(10);
        let dim = 4;
        let spec = AttentionWindowSpec::new(4, 0, 2, dim);
        let attn = WindowedAttention::new(dim, spec, false, &mut rng);
        let x = Tensor::randn(&[dim, 4, 4], &mut rng);
        let y = attn.forward(&x).to_vec();

        // swap two tokens inside the single window and rerun
        let swap = |d: &mut Vec<f64>, i: usize, j: usize| {
            for ch in 0..dim {
                d.swap(ch * 16 + i, ch * 16 + j);
            }
        };
        let mut xd = x.to_vec();
        swap(&mut xd, 3, 11);
        let y2 = attn.forward(&Tensor::from_vec(xd, &[dim, 4, 4])).to_vec();
        let mut y_swapped = y.clone();
        swap(&mut y_swapped, 3, 11);
        for (a, b) in y2.iter().zip(&y_swapped) {
            assert!((a - b).abs() < 1e-10, "attention not permutation-equivariant");
        }
    }

    #[test]
    fn constant_map_invariant_under_shift_choice() {
        let mut rng = crate::rng::seeded(11);
        let dim = 4;
        let mk = |shift: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            WindowedAttention::new(dim, AttentionWindowSpec::new(4, shift, 2, dim), true, rng)
        };
        let a0 = mk(0, &mut rng);
        let a1 = mk(2, &mut rng);
        // same weights
        a1.qkv.w.set_data(a0.qkv.w.to_vec());
        a1.qkv.b.set_data(a0.qkv.b.to_vec());
        a1.proj.w.set_data(a0.proj.w.to_vec());
        a1.proj.b.set_data(a0.proj.b.to_vec());
        let x = Tensor::full(&[dim, 8, 8], 0.37);
        let y0 = a0.forward(&x).to_vec();
        let y1 = a1.forward(&x).to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_block_is_identity_and_shape_preserving() {
        let mut rng = crate::rng::seeded(12);
        for cond in [CondMode::AdaLN, CondMode::AdaFM] {
            let block = TransformerBlock::new(
                8,
                cond,
                16,
                4,
                AttentionWindowSpec::new(4, 0, 2, 8),
                2,
                true,
                &mut rng,
            );
            let x = Tensor::randn(&[8, 8, 8], &mut rng);
            let y = block.forward(&x, &sinusoidal_embed(5, 16));
            assert_eq!(y.shape(), x.shape());
            // zero-init time-mlp projection conditions every block to identity
            for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
                assert!((a - b).abs() < 1e-12, "fresh {cond:?} block not identity");
            }
        }
    }

    #[test]
    fn conditioning_param_count_values() {
        assert_eq!(conditioning_param_count(CondMode::AdaLN, 256, 192, 8), 294_912);
        assert_eq!(conditioning_param_count(CondMode::AdaFM, 256, 192, 8), 32_768);
        // ratio p^2 / (3C), independent of d_t
        for d_t in [64usize, 256, 1024] {
            let adafm = conditioning_param_count(CondMode::AdaFM, d_t, 192, 8);
            let adaln = conditioning_param_count(CondMode::AdaLN, d_t, 192, 8);
            assert_eq!(adafm * 3 * 192, adaln * 64, "ratio mismatch at d_t={d_t}");
        }
    }

    #[test]
    fn block_gradcheck_both_modes() {
        for cond in [CondMode::AdaLN, CondMode::AdaFM] {
            let worst = crate::gradcheck::check_block(cond, 1e-5);
            assert!(worst < 1e-5, "{cond:?} block gradcheck worst rel err {worst}");
        }
    }
}
