//! The learnable scene: positional encoding, density trunk, color head,
//! local concealing head with its spatial convolution, and the global
//! per-depth concealing vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{GradStore, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{
    linear, linear_acc, linear_backward, linear_backward_into, relu_backward_inplace, relu_inplace,
    Mat, CHUNK_ROWS,
};
use crate::real::{log_sigmoid, sigmoid, Real};

/// Initial value of every global concealing entry.
pub const THETA_G_INIT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub pos_enc_levels: usize,
    pub dir_enc_levels: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub conv_kernel: usize,
    pub n_samples: usize,
    /// When false the concealing kernel stays at its box-filter init.
    pub learnable_kernel: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_enc_levels: 10,
            dir_enc_levels: 4,
            trunk_layers: 4,
            trunk_width: 128,
            conv_kernel: 3,
            n_samples: 64,
            learnable_kernel: true,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel must be odd and >= 1, got {}",
                self.conv_kernel
            )));
        }
        if self.trunk_layers == 0 || self.trunk_width == 0 || self.n_samples == 0 {
            return Err(Error::Config(
                "trunk_layers, trunk_width and n_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(self.pos_enc_levels)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(self.dir_enc_levels)
    }

    pub fn color_width(&self) -> usize {
        self.trunk_width.div_ceil(2)
    }

    /// Trunk layer that also receives the encoded position.
    pub fn skip_layer(&self) -> Option<usize> {
        (self.trunk_layers >= 3).then_some(2)
    }

    /// Expected length of every parameter array, in store order.
    pub fn param_shapes(&self) -> Vec<(String, usize)> {
        let w = self.trunk_width;
        let mut out = Vec::new();
        for l in 0..self.trunk_layers {
            let fan_in = if l == 0 { self.pos_dim() } else { w };
            out.push((names::trunk_weight(l), fan_in * w));
            out.push((names::trunk_bias(l), w));
            if Some(l) == self.skip_layer() {
                out.push((names::trunk_skip(l), self.pos_dim() * w));
            }
        }
        let cw = self.color_width();
        out.push((names::SIGMA_W.into(), w));
        out.push((names::SIGMA_B.into(), 1));
        out.push((names::COLOR_HIDDEN_W.into(), (w + self.dir_dim()) * cw));
        out.push((names::COLOR_HIDDEN_B.into(), cw));
        out.push((names::COLOR_OUT_W.into(), cw * 3));
        out.push((names::COLOR_OUT_B.into(), 3));
        out.push((names::CONCEAL_HEAD_W.into(), w));
        out.push((names::CONCEAL_HEAD_B.into(), 1));
        out.push((
            names::CONCEAL_KERNEL.into(),
            self.conv_kernel * self.conv_kernel,
        ));
        out.push((names::CONCEAL_KERNEL_B.into(), 1));
        out.push((names::GLOBAL_LOGITS.into(), self.n_samples));
        out
    }
}

pub mod names {
    pub fn trunk_weight(l: usize) -> String {
        format!("trunk.{l}.weight")
    }
    pub fn trunk_bias(l: usize) -> String {
        format!("trunk.{l}.bias")
    }
    pub fn trunk_skip(l: usize) -> String {
        format!("trunk.{l}.skip_weight")
    }
    pub const SIGMA_W: &str = "sigma.weight";
    pub const SIGMA_B: &str = "sigma.bias";
    pub const COLOR_HIDDEN_W: &str = "color.hidden.weight";
    pub const COLOR_HIDDEN_B: &str = "color.hidden.bias";
    pub const COLOR_OUT_W: &str = "color.out.weight";
    pub const COLOR_OUT_B: &str = "color.out.bias";
    pub const CONCEAL_HEAD_W: &str = "conceal.head.weight";
    pub const CONCEAL_HEAD_B: &str = "conceal.head.bias";
    pub const CONCEAL_KERNEL: &str = "conceal.kernel";
    pub const CONCEAL_KERNEL_B: &str = "conceal.kernel_bias";
    pub const GLOBAL_LOGITS: &str = "conceal.global_logits";

    /// Parameters that only influence low-light rendering.
    pub fn is_concealing(name: &str) -> bool {
        name.starts_with("conceal.")
    }
}

/// Seeded initialization. Hidden layers use uniform Kaiming fan-in bounds,
/// heads use `1/sqrt(fan_in)`, biases start at zero, the concealing kernel
/// starts as a normalized box filter and the global logits start at
/// `logit(0.3)`.
pub fn init_params<T: Real>(cfg: &FieldConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, bound: f64| -> Vec<T> {
        (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect()
    };
    let w = cfg.trunk_width;
    let cw = cfg.color_width();
    let mut p = ParamStore::new();
    for l in 0..cfg.trunk_layers {
        let skip = Some(l) == cfg.skip_layer();
        let fan_in = if l == 0 { cfg.pos_dim() } else { w } + if skip { cfg.pos_dim() } else { 0 };
        let bound = (6.0 / fan_in as f64).sqrt();
        let fan_main = if l == 0 { cfg.pos_dim() } else { w };
        p.insert(names::trunk_weight(l), uniform(fan_main * w, bound))?;
        p.insert(names::trunk_bias(l), vec![T::zero(); w])?;
        if skip {
            p.insert(names::trunk_skip(l), uniform(cfg.pos_dim() * w, bound))?;
        }
    }
    let head = (1.0 / w as f64).sqrt();
    p.insert(names::SIGMA_W, uniform(w, head))?;
    p.insert(names::SIGMA_B, vec![T::zero()])?;
    let fan_c = w + cfg.dir_dim();
    p.insert(
        names::COLOR_HIDDEN_W,
        uniform(fan_c * cw, (6.0 / fan_c as f64).sqrt()),
    )?;
    p.insert(names::COLOR_HIDDEN_B, vec![T::zero(); cw])?;
    p.insert(
        names::COLOR_OUT_W,
        uniform(cw * 3, (1.0 / cw as f64).sqrt()),
    )?;
    p.insert(names::COLOR_OUT_B, vec![T::zero(); 3])?;
    p.insert(names::CONCEAL_HEAD_W, uniform(w, head))?;
    p.insert(names::CONCEAL_HEAD_B, vec![T::zero()])?;
    let k2 = cfg.conv_kernel * cfg.conv_kernel;
    p.insert(
        names::CONCEAL_KERNEL,
        vec![T::from_f64(1.0 / k2 as f64); k2],
    )?;
    p.insert(names::CONCEAL_KERNEL_B, vec![T::zero()])?;
    let logit = (THETA_G_INIT / (1.0 - THETA_G_INIT)).ln();
    p.insert(
        names::GLOBAL_LOGITS,
        vec![T::from_f64(logit); cfg.n_samples],
    )?;
    Ok(p)
}

/// Checks that `params` has exactly the arrays `cfg` implies.
pub fn check_layout<T: Real>(cfg: &FieldConfig, params: &ParamStore<T>) -> Result<()> {
    let shapes = cfg.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::shape(format!(
            "expected {} parameter arrays, found {}",
            shapes.len(),
            params.len()
        )));
    }
    for ((name, len), (pname, vals)) in shapes.iter().zip(params.iter()) {
        if name != pname || *len != vals.len() {
            return Err(Error::shape(format!(
                "parameter {pname:?} has length {}, expected {name:?} of length {len}",
                vals.len()
            )));
        }
    }
    Ok(())
}

pub fn encoded_len(levels: usize) -> usize {
    3 + 6 * levels
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`,
/// each term a 3-vector.
pub fn positional_encode(v: Vec3, levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(levels)];
    encode_into(v, levels, &mut out);
    out
}

fn encode_into<T: Real>(v: Vec3, levels: usize, out: &mut [T]) {
    for c in 0..3 {
        out[c] = T::from_f64(v[c]);
    }
    // double-angle recurrence from the base frequency
    let mut sc = [(0.0, 0.0); 3];
    for c in 0..3 {
        sc[c] = (std::f64::consts::PI * v[c]).sin_cos();
    }
    for l in 0..levels {
        let base = 3 + 6 * l;
        for c in 0..3 {
            let (s, co) = sc[c];
            out[base + c] = T::from_f64(s);
            out[base + 3 + c] = T::from_f64(co);
            sc[c] = (2.0 * s * co, co * co - s * s);
        }
    }
}

/// Encodes a batch of points into an `n x (3 + 6L)` matrix.
pub fn encode_batch<T: Real>(points: &[Vec3], levels: usize) -> Mat<T> {
    let dim = encoded_len(levels);
    let mut m = Mat::zeros(points.len(), dim);
    m.data
        .par_chunks_mut(dim * CHUNK_ROWS)
        .zip(points.par_chunks(CHUNK_ROWS))
        .for_each(|(out, pts)| {
            for (row, p) in out.chunks_mut(dim).zip(pts) {
                encode_into(*p, levels, row);
            }
        });
    m
}

/// Batched field evaluation with everything the backward pass needs.
///
/// Samples are grouped by ray: sample `s` belongs to ray `s / samples_per_ray`.
#[derive(Debug, Clone)]
pub struct FieldTrace<T> {
    pub samples_per_ray: usize,
    enc: Mat<T>,
    dir_enc: Mat<T>,
    acts: Vec<Mat<T>>,
    sigma_raw: Vec<T>,
    color_hidden: Mat<T>,
    /// Density per sample, after ReLU.
    pub sigma: Vec<T>,
    /// Color per sample, `3` entries each, after sigmoid.
    pub rgb: Vec<T>,
    /// Local concealing head output per sample, before convolution.
    pub conceal_head: Option<Vec<T>>,
}

impl<T: Real> FieldTrace<T> {
    pub fn hidden(&self) -> &Mat<T> {
        self.acts.last().expect("trunk has at least one layer")
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

fn add_scaled_row<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d = *d + s * *v;
    }
}

/// Evaluates the field for every sample. `points` has one entry per sample;
/// `dirs` one unit direction per ray.
pub fn forward<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    points: &[Vec3],
    dirs: &[Vec3],
    with_conceal: bool,
) -> Result<FieldTrace<T>> {
    if dirs.is_empty() || !points.len().is_multiple_of(dirs.len()) {
        return Err(Error::shape(format!(
            "{} samples cannot be split over {} rays",
            points.len(),
            dirs.len()
        )));
    }
    let spr = points.len() / dirs.len();
    let enc: Mat<T> = encode_batch(points, cfg.pos_enc_levels);
    let dir_enc: Mat<T> = encode_batch(dirs, cfg.dir_enc_levels);

    let mut acts: Vec<Mat<T>> = Vec::with_capacity(cfg.trunk_layers);
    for l in 0..cfg.trunk_layers {
        let input = if l == 0 { &enc } else { &acts[l - 1] };
        let mut a = linear(
            input,
            params.expect(&names::trunk_weight(l)),
            params.expect(&names::trunk_bias(l)),
        );
        if Some(l) == cfg.skip_layer() {
            linear_acc(&mut a, &enc, params.expect(&names::trunk_skip(l)));
        }
        relu_inplace(&mut a);
        acts.push(a);
    }
    let h = acts.last().unwrap();

    let sigma_raw = linear(
        h,
        params.expect(names::SIGMA_W),
        params.expect(names::SIGMA_B),
    )
    .data;
    let sigma: Vec<T> = sigma_raw
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();

    let w = cfg.trunk_width;
    let cw = cfg.color_width();
    let chw = params.expect(names::COLOR_HIDDEN_W);
    let (ch_h, ch_d) = chw.split_at(w * cw);
    let mut color_hidden = linear(h, ch_h, params.expect(names::COLOR_HIDDEN_B));
    let zero = vec![T::zero(); cw];
    let dir_proj = linear(&dir_enc, ch_d, &zero);
    color_hidden
        .data
        .par_chunks_mut(cw * spr)
        .enumerate()
        .for_each(|(r, rows)| {
            let proj = dir_proj.row(r);
            for row in rows.chunks_mut(cw) {
                add_scaled_row(row, proj, T::one());
            }
        });
    relu_inplace(&mut color_hidden);
    let rgb_raw = linear(
        &color_hidden,
        params.expect(names::COLOR_OUT_W),
        params.expect(names::COLOR_OUT_B),
    );
    let rgb: Vec<T> = rgb_raw.data.iter().map(|&v| sigmoid(v)).collect();

    let conceal_head = with_conceal.then(|| {
        linear(
            h,
            params.expect(names::CONCEAL_HEAD_W),
            params.expect(names::CONCEAL_HEAD_B),
        )
        .data
    });

    Ok(FieldTrace {
        samples_per_ray: spr,
        enc,
        dir_enc,
        acts,
        sigma_raw,
        color_hidden,
        sigma,
        rgb,
        conceal_head,
    })
}

/// Accumulates parameter gradients of the field given upstream gradients
/// on density, color and (optionally) the concealing head output.
pub fn backward<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    trace: &FieldTrace<T>,
    d_sigma: &[T],
    d_rgb: &[T],
    d_conceal_head: Option<&[T]>,
    grads: &mut GradStore<T>,
) {
    let s = trace.len();
    let w = cfg.trunk_width;
    let cw = cfg.color_width();
    let spr = trace.samples_per_ray;
    let h = trace.hidden();

    // color output
    let d_rgb_raw: Vec<T> = d_rgb
        .iter()
        .zip(&trace.rgb)
        .map(|(&g, &c)| g * c * (T::one() - c))
        .collect();
    let d_rgb_raw = Mat::from_vec(s, 3, d_rgb_raw);
    let (dw, db, dch) = linear_backward(
        &trace.color_hidden,
        params.expect(names::COLOR_OUT_W),
        &d_rgb_raw,
        true,
    );
    add_into(grads, names::COLOR_OUT_W, &dw);
    add_into(grads, names::COLOR_OUT_B, &db);
    let mut dch = dch.unwrap();
    relu_backward_inplace(&mut dch, &trace.color_hidden);

    // color hidden: position-feature part and per-ray direction part
    let chw = params.expect(names::COLOR_HIDDEN_W);
    let (ch_h, _) = chw.split_at(w * cw);
    let (dw_h, db_c, dh_color) = linear_backward(h, ch_h, &dch, true);
    let rays = s / spr;
    let mut dch_ray = Mat::zeros(rays, cw);
    for r in 0..rays {
        let acc = &mut dch_ray.data[r * cw..(r + 1) * cw];
        for i in 0..spr {
            add_scaled_row(acc, dch.row(r * spr + i), T::one());
        }
    }
    let (dw_d, _, _) = linear_backward(&trace.dir_enc, &chw[w * cw..], &dch_ray, false);
    {
        let g = grads.expect_mut(names::COLOR_HIDDEN_W);
        add_scaled_row(&mut g[..w * cw], &dw_h, T::one());
        add_scaled_row(&mut g[w * cw..], &dw_d, T::one());
    }
    add_into(grads, names::COLOR_HIDDEN_B, &db_c);
    let mut dh = dh_color.unwrap();

    // density head
    let d_sigma_raw: Vec<T> = d_sigma
        .iter()
        .zip(&trace.sigma_raw)
        .map(|(&g, &r)| if r > T::zero() { g } else { T::zero() })
        .collect();
    let d_sigma_raw = Mat::from_vec(s, 1, d_sigma_raw);
    let sw = params.expect(names::SIGMA_W);
    let (dw, db, _) = linear_backward(h, sw, &d_sigma_raw, false);
    add_into(grads, names::SIGMA_W, &dw);
    add_into(grads, names::SIGMA_B, &db);
    let cw_head = params.expect(names::CONCEAL_HEAD_W);
    dh.data
        .par_chunks_mut(w * CHUNK_ROWS)
        .enumerate()
        .for_each(|(c, rows)| {
            for (i, row) in rows.chunks_mut(w).enumerate() {
                let idx = c * CHUNK_ROWS + i;
                add_scaled_row(row, sw, d_sigma_raw.data[idx]);
                if let Some(dz) = d_conceal_head {
                    add_scaled_row(row, cw_head, dz[idx]);
                }
            }
        });

    // concealing head
    if let Some(dz) = d_conceal_head {
        let dz = Mat::from_vec(s, 1, dz.to_vec());
        let (dw, db, _) = linear_backward(h, cw_head, &dz, false);
        add_into(grads, names::CONCEAL_HEAD_W, &dw);
        add_into(grads, names::CONCEAL_HEAD_B, &db);
    }

    // trunk; one spare buffer holds each layer's input gradient
    let mut spare = Mat::zeros(0, 0);
    for l in (0..cfg.trunk_layers).rev() {
        relu_backward_inplace(&mut dh, &trace.acts[l]);
        let input = if l == 0 {
            &trace.enc
        } else {
            &trace.acts[l - 1]
        };
        let wname = names::trunk_weight(l);
        if l > 0 && (spare.rows, spare.cols) != (input.rows, input.cols) {
            spare = Mat::zeros(input.rows, input.cols);
        }
        let dx = (l > 0).then_some(&mut spare);
        let (dw, db) = linear_backward_into(input, params.expect(&wname), &dh, dx);
        add_into(grads, &wname, &dw);
        add_into(grads, &names::trunk_bias(l), &db);
        if Some(l) == cfg.skip_layer() {
            let sname = names::trunk_skip(l);
            let (dws, _, _) = linear_backward(&trace.enc, params.expect(&sname), &dh, false);
            add_into(grads, &sname, &dws);
        }
        if l > 0 {
            std::mem::swap(&mut dh, &mut spare);
        }
    }
}

fn add_into<T: Real>(grads: &mut GradStore<T>, name: &str, delta: &[T]) {
    add_scaled_row(grads.expect_mut(name), delta, T::one());
}

/// Density and trunk feature at one point.
pub fn eval_density<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    point: Vec3,
) -> Result<(T, Vec<T>)> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("point must be finite"));
    }
    let trace = forward(params, cfg, &[point], &[[0.0, 0.0, -1.0]], false)?;
    Ok((trace.sigma[0], trace.hidden().data.clone()))
}

/// View-dependent color for a trunk feature and unit direction.
pub fn eval_color<T: Real>(
    params: &ParamStore<T>,
    cfg: &FieldConfig,
    hidden: &[T],
    dir: Vec3,
) -> Result<[T; 3]> {
    let w = cfg.trunk_width;
    let cw = cfg.color_width();
    if hidden.len() != w {
        return Err(Error::shape(format!(
            "hidden has {} entries, expected {w}",
            hidden.len()
        )));
    }
    let h = Mat::from_vec(1, w, hidden.to_vec());
    let chw = params.expect(names::COLOR_HIDDEN_W);
    let mut ch = linear(&h, &chw[..w * cw], params.expect(names::COLOR_HIDDEN_B));
    let denc: Mat<T> = encode_batch(&[dir], cfg.dir_enc_levels);
    linear_acc(&mut ch, &denc, &chw[w * cw..]);
    relu_inplace(&mut ch);
    let raw = linear(
        &ch,
        params.expect(names::COLOR_OUT_W),
        params.expect(names::COLOR_OUT_B),
    );
    Ok([
        sigmoid(raw.data[0]),
        sigmoid(raw.data[1]),
        sigmoid(raw.data[2]),
    ])
}

/// Local concealing field over a patch.
///
/// `head` holds the linear head output for a `ph x pw` patch with `n`
/// samples per pixel (pixel-major). Each depth slice is convolved with the
/// shared kernel (replicate padding) and passed through a sigmoid. Returns
/// `(omega, log_omega, pre_activation)`.
#[allow(clippy::type_complexity)]
pub fn conceal_local<T: Real>(
    params: &ParamStore<T>,
    head: &[T],
    ph: usize,
    pw: usize,
    n: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if ph < 2 || pw < 2 {
        return Err(Error::domain(format!(
            "concealing convolution needs a patch of at least 2x2, got {pw}x{ph}"
        )));
    }
    if head.len() != ph * pw * n {
        return Err(Error::shape("concealing head length does not match patch"));
    }
    let kernel = params.expect(names::CONCEAL_KERNEL);
    let bias = params.expect(names::CONCEAL_KERNEL_B)[0];
    let pre = conv_replicate(head, ph, pw, n, kernel, bias);
    let omega = pre.iter().map(|&v| sigmoid(v)).collect();
    let log_omega = pre.iter().map(|&v| log_sigmoid(v)).collect();
    Ok((omega, log_omega, pre))
}

/// Convenience wrapper returning only the concealing values.
pub fn eval_conceal_local<T: Real>(
    params: &ParamStore<T>,
    head: &[T],
    ph: usize,
    pw: usize,
    n: usize,
) -> Result<Vec<T>> {
    conceal_local(params, head, ph, pw, n).map(|(o, _, _)| o)
}

fn kernel_side(len: usize) -> usize {
    let k = (len as f64).sqrt().round() as usize;
    debug_assert_eq!(k * k, len);
    k
}

/// Per-depth 2D convolution with replicate padding.
pub fn conv_replicate<T: Real>(
    input: &[T],
    ph: usize,
    pw: usize,
    n: usize,
    kernel: &[T],
    bias: T,
) -> Vec<T> {
    let k = kernel_side(kernel.len());
    let r = (k / 2) as isize;
    let mut out = vec![bias; input.len()];
    out.par_chunks_mut(pw * n).enumerate().for_each(|(y, row)| {
        for x in 0..pw {
            let o = &mut row[x * n..(x + 1) * n];
            for ky in 0..k {
                let sy = (y as isize + ky as isize - r).clamp(0, ph as isize - 1) as usize;
                for kx in 0..k {
                    let sx = (x as isize + kx as isize - r).clamp(0, pw as isize - 1) as usize;
                    let kv = kernel[ky * k + kx];
                    let src = &input[(sy * pw + sx) * n..(sy * pw + sx + 1) * n];
                    add_scaled_row(o, src, kv);
                }
            }
        }
    });
    out
}

/// Backward of [`conv_replicate`]: returns `(d_input, d_kernel, d_bias)`.
pub fn conv_replicate_backward<T: Real>(
    input: &[T],
    d_out: &[T],
    ph: usize,
    pw: usize,
    n: usize,
    kernel: &[T],
) -> (Vec<T>, Vec<T>, T) {
    let k = kernel_side(kernel.len());
    let r = (k / 2) as isize;
    let mut d_in = vec![T::zero(); input.len()];
    let mut d_k = vec![T::zero(); k * k];
    let mut d_b = T::zero();
    for y in 0..ph {
        for x in 0..pw {
            let g = &d_out[(y * pw + x) * n..(y * pw + x + 1) * n];
            for v in g {
                d_b = d_b + *v;
            }
            for ky in 0..k {
                let sy = (y as isize + ky as isize - r).clamp(0, ph as isize - 1) as usize;
                for kx in 0..k {
                    let sx = (x as isize + kx as isize - r).clamp(0, pw as isize - 1) as usize;
                    let base = (sy * pw + sx) * n;
                    let kv = kernel[ky * k + kx];
                    let mut dk = T::zero();
                    for i in 0..n {
                        d_in[base + i] = d_in[base + i] + kv * g[i];
                        dk = dk + input[base + i] * g[i];
                    }
                    d_k[ky * k + kx] = d_k[ky * k + kx] + dk;
                }
            }
        }
    }
    (d_in, d_k, d_b)
}

/// Global concealing vector `sigmoid(logits)` and its logarithm.
pub fn theta_global<T: Real>(params: &ParamStore<T>) -> Vec<T> {
    params
        .expect(names::GLOBAL_LOGITS)
        .iter()
        .map(|&l| sigmoid(l))
        .collect()
}

pub fn log_theta_global<T: Real>(params: &ParamStore<T>) -> Vec<T> {
    params
        .expect(names::GLOBAL_LOGITS)
        .iter()
        .map(|&l| log_sigmoid(l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_check, Objective};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            pos_enc_levels: 2,
            dir_enc_levels: 1,
            trunk_layers: 3,
            trunk_width: 6,
            conv_kernel: 3,
            n_samples: 3,
            learnable_kernel: true,
        }
    }

    #[test]
    fn encoding_of_origin() {
        let e = positional_encode([0.0; 3], 3);
        assert_eq!(e.len(), 21);
        for l in 0..3 {
            assert_eq!(&e[3 + 6 * l..6 + 6 * l], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * l..9 + 6 * l], &[1.0; 3]);
        }
    }

    #[test]
    fn encoding_with_no_levels_is_identity() {
        assert_eq!(positional_encode([0.1, -2.0, 3.5], 0), vec![0.1, -2.0, 3.5]);
    }

    #[test]
    fn encoding_by_hand() {
        let e = positional_encode([0.5, 0.0, 0.0], 2);
        assert_abs_diff_eq!(e[3], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[9], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_output_layers_give_zero_density_and_gray() {
        let cfg = small_cfg();
        let mut p = init_params::<f64>(&cfg, 3).unwrap();
        p.expect_mut(names::SIGMA_W)
            .iter_mut()
            .for_each(|v| *v = 0.0);
        p.expect_mut(names::COLOR_OUT_W)
            .iter_mut()
            .for_each(|v| *v = 0.0);
        for pt in [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]] {
            let (sigma, h) = eval_density(&p, &cfg, pt).unwrap();
            assert_eq!(sigma, 0.0);
            let c = eval_color(&p, &cfg, &h, [0.0, 1.0, 0.0]).unwrap();
            assert_eq!(c, [0.5; 3]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = init_params::<f32>(&cfg, 11).unwrap();
        let b = init_params::<f32>(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let pt = [0.3, -0.1, 0.2];
        assert_eq!(
            eval_density(&a, &cfg, pt).unwrap(),
            eval_density(&b, &cfg, pt).unwrap()
        );
        check_layout(&cfg, &a).unwrap();
    }

    #[test]
    fn color_depends_on_direction() {
        let cfg = small_cfg();
        let p = init_params::<f64>(&cfg, 5).unwrap();
        let (_, h) = eval_density(&p, &cfg, [0.2, 0.1, -0.3]).unwrap();
        let a = eval_color(&p, &cfg, &h, [0.0, 0.0, 1.0]).unwrap();
        let b = eval_color(&p, &cfg, &h, [0.0, 0.0, -1.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn global_field_starts_at_point_three() {
        let p = init_params::<f64>(&small_cfg(), 0).unwrap();
        for v in theta_global(&p) {
            assert_abs_diff_eq!(v, 0.3, epsilon = 1e-6);
        }
        let mut q = p.clone();
        q.expect_mut(names::GLOBAL_LOGITS)
            .iter_mut()
            .for_each(|v| *v = 0.0);
        assert!(theta_global(&q).iter().all(|&v| v == 0.5));
    }

    fn with_kernel(k: usize, kernel: Vec<f64>, bias: f64) -> ParamStore<f64> {
        let cfg = FieldConfig {
            conv_kernel: k,
            ..small_cfg()
        };
        let mut p = init_params::<f64>(&cfg, 0).unwrap();
        *p.expect_mut(names::CONCEAL_KERNEL) = kernel;
        p.expect_mut(names::CONCEAL_KERNEL_B)[0] = bias;
        p
    }

    #[test]
    fn identity_kernel_is_pointwise_sigmoid() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let p = with_kernel(3, kernel, 0.0);
        let head: Vec<f64> = (0..4 * 3 * 2)
            .map(|i| (i as f64 * 0.7).sin() * 3.0)
            .collect();
        let omega = eval_conceal_local(&p, &head, 4, 3, 2).unwrap();
        for (o, z) in omega.iter().zip(&head) {
            assert_abs_diff_eq!(*o, sigmoid(*z), epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_head_gives_closed_form() {
        let kernel: Vec<f64> = (0..25).map(|i| (i as f64 * 0.31).cos() * 0.2).collect();
        let s: f64 = kernel.iter().sum();
        let p = with_kernel(5, kernel, -0.4);
        let z = 1.3;
        let omega = eval_conceal_local(&p, &vec![z; 5 * 4 * 3], 5, 4, 3).unwrap();
        for o in omega {
            assert_abs_diff_eq!(o, sigmoid(s * z - 0.4), epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_kernel_is_per_pixel() {
        let p = with_kernel(1, vec![1.0], 0.0);
        let head = vec![0.3, -2.0, 1.0, 4.0];
        let omega = eval_conceal_local(&p, &head, 2, 2, 1).unwrap();
        for (o, z) in omega.iter().zip(&head) {
            assert_abs_diff_eq!(*o, sigmoid(*z), epsilon = 1e-15);
        }
    }

    #[test]
    fn tiny_patch_is_rejected() {
        let p = with_kernel(1, vec![1.0], 0.0);
        assert!(eval_conceal_local(&p, &[0.0; 2], 1, 2, 1).is_err());
    }

    #[test]
    fn interior_translation_equivariance() {
        let kernel: Vec<f64> = (0..9).map(|i| (i as f64 * 1.1).sin()).collect();
        let p = with_kernel(3, kernel, 0.1);
        let (ph, pw, n) = (8, 9, 2);
        let f = |y: usize, x: usize, i: usize| ((y * 31 + x * 17 + i * 5) as f64 * 0.13).sin();
        let a: Vec<f64> = (0..ph * pw * n)
            .map(|j| f(j / n / pw, j / n % pw, j % n))
            .collect();
        // shift right by one column
        let b: Vec<f64> = (0..ph * pw * n)
            .map(|j| f(j / n / pw, (j / n % pw).saturating_sub(1), j % n))
            .collect();
        let oa = eval_conceal_local(&p, &a, ph, pw, n).unwrap();
        let ob = eval_conceal_local(&p, &b, ph, pw, n).unwrap();
        for y in 1..ph - 1 {
            for x in 2..pw - 1 {
                for i in 0..n {
                    assert_abs_diff_eq!(
                        ob[(y * pw + x) * n + i],
                        oa[(y * pw + x - 1) * n + i],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    /// Scalar objective over field outputs used for gradient checks.
    struct FieldProbe {
        cfg: FieldConfig,
        points: Vec<Vec3>,
        dirs: Vec<Vec3>,
    }

    impl FieldProbe {
        fn weights(&self, s: usize) -> (f64, [f64; 3], f64) {
            let t = s as f64;
            (
                (t * 0.7).sin() + 0.3,
                [(t * 1.3).cos(), (t * 0.4).sin(), 0.5 - t * 0.1],
                (t * 0.9).cos(),
            )
        }
    }

    impl Objective<f64> for FieldProbe {
        fn loss(&self, params: &ParamStore<f64>) -> Result<f64> {
            let tr = forward(params, &self.cfg, &self.points, &self.dirs, true)?;
            let head = tr.conceal_head.as_ref().unwrap();
            Ok((0..tr.len())
                .map(|s| {
                    let (a, b, c) = self.weights(s);
                    a * tr.sigma[s]
                        + (0..3).map(|k| b[k] * tr.rgb[3 * s + k]).sum::<f64>()
                        + c * head[s]
                })
                .sum())
        }

        fn loss_and_grads(&self, params: &ParamStore<f64>) -> Result<(f64, GradStore<f64>)> {
            let tr = forward(params, &self.cfg, &self.points, &self.dirs, true)?;
            let n = tr.len();
            let mut ds = vec![0.0; n];
            let mut dc = vec![0.0; 3 * n];
            let mut dz = vec![0.0; n];
            for s in 0..n {
                let (a, b, c) = self.weights(s);
                ds[s] = a;
                dc[3 * s..3 * s + 3].copy_from_slice(&b);
                dz[s] = c;
            }
            let mut g = params.zeros_like();
            backward(params, &self.cfg, &tr, &ds, &dc, Some(&dz), &mut g);
            Ok((self.loss(params)?, g))
        }
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut p = init_params::<f64>(&cfg, 21).unwrap();
        // lift the density bias so ReLUs sit away from their kink
        p.expect_mut(names::SIGMA_B)[0] = 0.7;
        let probe = FieldProbe {
            cfg,
            points: vec![
                [0.1, 0.2, -0.3],
                [0.4, -0.2, 0.1],
                [-0.3, 0.3, 0.2],
                [0.0, 0.1, 0.4],
            ],
            dirs: vec![[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]],
        };
        let r = finite_difference_check(&probe, &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (ph, pw, n) = (3, 4, 2);
        let input: Vec<f64> = (0..ph * pw * n).map(|i| (i as f64 * 0.77).sin()).collect();
        let kernel: Vec<f64> = (0..9).map(|i| (i as f64 * 0.41).cos()).collect();
        let up: Vec<f64> = (0..ph * pw * n).map(|i| (i as f64 * 0.29).cos()).collect();
        let f = |inp: &[f64], ker: &[f64], b: f64| -> f64 {
            conv_replicate(inp, ph, pw, n, ker, b)
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (di, dk, db) = conv_replicate_backward(&input, &up, ph, pw, n, &kernel);
        let eps = 1e-6;
        for j in 0..input.len() {
            let mut a = input.clone();
            a[j] += eps;
            let mut b = input.clone();
            b[j] -= eps;
            let num = (f(&a, &kernel, 0.2) - f(&b, &kernel, 0.2)) / (2.0 * eps);
            assert_abs_diff_eq!(di[j], num, epsilon = 1e-7);
        }
        for j in 0..9 {
            let mut a = kernel.clone();
            a[j] += eps;
            let mut b = kernel.clone();
            b[j] -= eps;
            let num = (f(&input, &a, 0.2) - f(&input, &b, 0.2)) / (2.0 * eps);
            assert_abs_diff_eq!(dk[j], num, epsilon = 1e-7);
        }
        let num = (f(&input, &kernel, 0.2 + eps) - f(&input, &kernel, 0.2 - eps)) / (2.0 * eps);
        assert_abs_diff_eq!(db, num, epsilon = 1e-7);
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in any::<u64>(), x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0, scale in 0.1f64..20.0) {
            let cfg = small_cfg();
            let mut p = init_params::<f64>(&cfg, seed).unwrap();
            for (_, v) in p.iter_mut() {
                v.iter_mut().for_each(|e| *e *= scale);
            }
            let (sigma, h) = eval_density(&p, &cfg, [x, y, z]).unwrap();
            prop_assert!(sigma >= 0.0);
            let c = eval_color(&p, &cfg, &h, [0.0, 0.0, -1.0]).unwrap();
            prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let omega = eval_conceal_local(&p, &[x, y, z, x * y], 2, 2, 1).unwrap();
            prop_assert!(omega.iter().all(|&o| (0.0..=1.0).contains(&o)));
        }
    }
}
