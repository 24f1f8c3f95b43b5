//! Training losses over rendered patches.
//!
//! Images are flat row-major buffers with three channels per pixel. Every
//! loss is a mean so the weights keep their meaning across patch sizes, and
//! every loss has a matching `*_grad` returning the gradient with respect to
//! its image (or concealing) input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Window and stride of the concealing-field pooling.
pub const CONTROL_POOL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Concealing degree, the target mean of the local concealing field.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1e-3,
            lambda3: 1e-4,
            eta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Gray-world formulation used by the color constancy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorConstancy {
    /// Pairwise differences of the patch channel means.
    #[default]
    PatchMean,
    /// Pairwise channel differences averaged over pixels.
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nerf: f64,
    pub con: f64,
    pub st: f64,
    pub cc: f64,
    pub total: f64,
}

fn check_same(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    if !a.is_multiple_of(3) || a == 0 {
        return Err(Error::shape(format!(
            "{what}: expected a non-empty RGB buffer"
        )));
    }
    Ok(())
}

/// Mean over pixels of the squared color distance.
pub fn loss_nerf<T: Real>(pred: &[T], gt: &[T]) -> Result<T> {
    check_same(pred.len(), gt.len(), "loss_nerf")?;
    let pixels = T::from_f64((pred.len() / 3) as f64);
    let sum: T = pred.iter().zip(gt).map(|(&p, &g)| (p - g) * (p - g)).sum();
    Ok(sum / pixels)
}

pub fn loss_nerf_grad<T: Real>(pred: &[T], gt: &[T]) -> Vec<T> {
    let scale = T::from_f64(2.0 / (pred.len() / 3) as f64);
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| scale * (p - g))
        .collect()
}

/// Spatial pooling cells over an `ph x pw` plane: `(y0, y1, x0, x1)`.
fn pool_cells(ph: usize, pw: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut cells = Vec::new();
    for y0 in (0..ph).step_by(CONTROL_POOL) {
        for x0 in (0..pw).step_by(CONTROL_POOL) {
            cells.push((
                y0,
                (y0 + CONTROL_POOL).min(ph),
                x0,
                (x0 + CONTROL_POOL).min(pw),
            ));
        }
    }
    cells
}

/// Control loss on the local concealing field `omega` (`ph x pw x n`,
/// pixel-major). Each 64x64 window (clipped to the patch) is averaged over
/// its pixels and all depths; the loss is the mean squared distance of those
/// cell means from `eta`.
pub fn loss_control<T: Real>(omega: &[T], ph: usize, pw: usize, n: usize, eta: f64) -> Result<T> {
    if omega.len() != ph * pw * n || omega.is_empty() {
        return Err(Error::shape("loss_control: omega does not match patch"));
    }
    let eta = T::from_f64(eta);
    let cells = pool_cells(ph, pw);
    let mut total = T::zero();
    for &(y0, y1, x0, x1) in &cells {
        let m = cell_mean(omega, pw, n, y0, y1, x0, x1);
        total = total + (m - eta) * (m - eta);
    }
    Ok(total / T::from_f64(cells.len() as f64))
}

/// Mean shifted by the first value of the cell, exact for constant cells.
fn cell_mean<T: Real>(
    omega: &[T],
    pw: usize,
    n: usize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
) -> T {
    let shift = omega[(y0 * pw + x0) * n];
    let mut sum = T::zero();
    for y in y0..y1 {
        for x in x0..x1 {
            let base = (y * pw + x) * n;
            for v in &omega[base..base + n] {
                sum = sum + (*v - shift);
            }
        }
    }
    shift + sum / T::from_f64(((y1 - y0) * (x1 - x0) * n) as f64)
}

pub fn loss_control_grad<T: Real>(omega: &[T], ph: usize, pw: usize, n: usize, eta: f64) -> Vec<T> {
    let eta = T::from_f64(eta);
    let cells = pool_cells(ph, pw);
    let mut grad = vec![T::zero(); omega.len()];
    let nc = T::from_f64(cells.len() as f64);
    for &(y0, y1, x0, x1) in &cells {
        let m = cell_mean(omega, pw, n, y0, y1, x0, x1);
        let count = T::from_f64(((y1 - y0) * (x1 - x0) * n) as f64);
        let g = T::from_f64(2.0) * (m - eta) / (nc * count);
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * pw + x) * n;
                grad[base..base + n].iter_mut().for_each(|v| *v = g);
            }
        }
    }
    grad
}

/// Number of squared terms in the structure loss.
fn structure_terms(pw: usize, ph: usize) -> usize {
    ph * (pw - 2) * 2 * 3
}

fn check_structure(len_pred: usize, len_gt: usize, pw: usize, ph: usize, eta: f64) -> Result<()> {
    if pw < 3 {
        return Err(Error::domain(format!(
            "structure loss needs width >= 3, got {pw}"
        )));
    }
    if !(eta > 0.0) {
        return Err(Error::domain("eta must be positive"));
    }
    if len_pred != len_gt || len_pred != 3 * pw * ph {
        return Err(Error::shape("loss_structure: buffers do not match patch"));
    }
    Ok(())
}

/// Structure loss between the unconcealed prediction and the low-light
/// input. For every interior pixel `r` of a row and `k` in `{-1, +1}`:
/// `d = (pred[r] - pred[r+k]) - (0.5/eta)(gt[r] - gt[r+k])`, averaged as `d^2`.
pub fn loss_structure<T: Real>(pred: &[T], gt: &[T], pw: usize, ph: usize, eta: f64) -> Result<T> {
    check_structure(pred.len(), gt.len(), pw, ph, eta)?;
    let gain = T::from_f64(0.5 / eta);
    let mut sum = T::zero();
    for y in 0..ph {
        for x in 1..pw - 1 {
            let r = y * pw + x;
            for nb in [r - 1, r + 1] {
                for c in 0..3 {
                    let d = (pred[3 * r + c] - pred[3 * nb + c])
                        - gain * (gt[3 * r + c] - gt[3 * nb + c]);
                    sum = sum + d * d;
                }
            }
        }
    }
    Ok(sum / T::from_f64(structure_terms(pw, ph) as f64))
}

pub fn loss_structure_grad<T: Real>(
    pred: &[T],
    gt: &[T],
    pw: usize,
    ph: usize,
    eta: f64,
) -> Vec<T> {
    let gain = T::from_f64(0.5 / eta);
    let scale = T::from_f64(2.0 / structure_terms(pw, ph) as f64);
    let mut grad = vec![T::zero(); pred.len()];
    for y in 0..ph {
        for x in 1..pw - 1 {
            let r = y * pw + x;
            for nb in [r - 1, r + 1] {
                for c in 0..3 {
                    let d = (pred[3 * r + c] - pred[3 * nb + c])
                        - gain * (gt[3 * r + c] - gt[3 * nb + c]);
                    grad[3 * r + c] = grad[3 * r + c] + scale * d;
                    grad[3 * nb + c] = grad[3 * nb + c] - scale * d;
                }
            }
        }
    }
    grad
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

fn channel_means<T: Real>(img: &[T]) -> [T; 3] {
    let mut m = [T::zero(); 3];
    for px in img.chunks(3) {
        for c in 0..3 {
            m[c] = m[c] + px[c];
        }
    }
    let n = T::from_f64((img.len() / 3) as f64);
    [m[0] / n, m[1] / n, m[2] / n]
}

/// Gray-world color constancy on the unconcealed prediction.
pub fn loss_color<T: Real>(pred: &[T], mode: ColorConstancy) -> Result<T> {
    if pred.is_empty() || !pred.len().is_multiple_of(3) {
        return Err(Error::shape("loss_color: expected a non-empty RGB buffer"));
    }
    Ok(match mode {
        ColorConstancy::PatchMean => {
            let m = channel_means(pred);
            PAIRS
                .iter()
                .map(|&(p, q)| (m[p] - m[q]) * (m[p] - m[q]))
                .sum()
        }
        ColorConstancy::PerPixel => {
            let n = T::from_f64((pred.len() / 3) as f64);
            let s: T = pred
                .chunks(3)
                .map(|px| {
                    PAIRS
                        .iter()
                        .map(|&(p, q)| (px[p] - px[q]) * (px[p] - px[q]))
                        .sum::<T>()
                })
                .sum();
            s / n
        }
    })
}

pub fn loss_color_grad<T: Real>(pred: &[T], mode: ColorConstancy) -> Vec<T> {
    let n = T::from_f64((pred.len() / 3) as f64);
    let two = T::from_f64(2.0);
    match mode {
        ColorConstancy::PatchMean => {
            let m = channel_means(pred);
            let mut dm = [T::zero(); 3];
            for &(p, q) in &PAIRS {
                let d = two * (m[p] - m[q]);
                dm[p] = dm[p] + d;
                dm[q] = dm[q] - d;
            }
            let per: Vec<T> = dm.iter().map(|&d| d / n).collect();
            (0..pred.len()).map(|i| per[i % 3]).collect()
        }
        ColorConstancy::PerPixel => {
            let mut g = vec![T::zero(); pred.len()];
            for (px, gp) in pred.chunks(3).zip(g.chunks_mut(3)) {
                for &(p, q) in &PAIRS {
                    let d = two * (px[p] - px[q]) / n;
                    gp[p] = gp[p] + d;
                    gp[q] = gp[q] - d;
                }
            }
            g
        }
    }
}

/// Weighted total of the four components.
pub fn loss_total(
    nerf: f64,
    con: f64,
    st: f64,
    cc: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if ![nerf, con, st, cc].iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("loss components"));
    }
    Ok(LossBreakdown {
        nerf,
        con,
        st,
        cc,
        total: nerf + weights.lambda1 * con + weights.lambda2 * st + weights.lambda3 * cc,
    })
}
