//! Image fidelity metrics and classical enhancement baselines.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{read_image, Image};
use crate::error::{Error, Result};

/// Reported for identical images, where the true PSNR is infinite.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) || a.data.len() != b.data.len() {
        return Err(Error::shape(format!(
            "images are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn luminance(img: &Image) -> Vec<f64> {
    img.data
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Structural similarity of the luminance channels, averaged over every
/// fully contained 11x11 gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (la, lb) = (luminance(a), luminance(b));
    let win = gaussian_window();
    let w = a.width;
    let (ny, nx) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let rows: Vec<f64> = (0..ny)
        .into_par_iter()
        .map(|y0| {
            let mut row_sum = 0.0;
            for x0 in 0..nx {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        let i = (y0 + dy) * w + x0 + dx;
                        let (u, v) = (la[i], lb[i]);
                        ma += k * u;
                        mb += k * v;
                        saa += k * u * u;
                        sbb += k * v * v;
                        sab += k * u * v;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                row_sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            row_sum
        })
        .collect();
    Ok(rows.iter().sum::<f64>() / (nx * ny) as f64)
}

fn byte_of(v: f32) -> usize {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as usize
}

/// Per-channel histogram equalization over 256 bins. Channels holding a
/// single level are left unchanged.
pub fn hist_equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let n = img.width * img.height;
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for p in 0..n {
            hist[byte_of(img.data[3 * p + c])] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = cdf[hist.iter().position(|&h| h > 0).unwrap_or(0)];
        if cdf_min == n {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        for p in 0..n {
            let b = byte_of(img.data[3 * p + c]);
            let v = (cdf[b] - cdf_min) as f64 / denom;
            out.data[3 * p + c] = ((v * 255.0).round() / 255.0) as f32;
        }
    }
    out
}

/// `clamp(gain * img^gamma, 0, 1)`.
pub fn gamma_correct(img: &Image, gamma: f64, gain: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::domain(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let data = img
        .data
        .iter()
        .map(|&v| (gain * (v as f64).powf(gamma)).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(img.width, img.height, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(label: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Self {
            label: label.into(),
            rows,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{:.6}\n", r.name, r.psnr, r.ssim));
        }
        s.push_str(&format!(
            "mean,{:.4},{:.6}\n",
            self.mean_psnr, self.mean_ssim
        ));
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} images, mean PSNR {:.2} dB, mean SSIM {:.4}",
            self.label,
            self.rows.len(),
            self.mean_psnr,
            self.mean_ssim
        )
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.summary() + "\n")?;
        Ok(())
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

/// Compares every PNG in `render_dir` with the same-named PNG in `gt_dir`.
pub fn evaluate(render_dir: &Path, gt_dir: &Path, label: &str) -> Result<EvalReport> {
    let renders = png_names(render_dir)?;
    let gts = png_names(gt_dir)?;
    let unmatched: Vec<String> = renders
        .symmetric_difference(&gts)
        .map(|n| {
            let side = if renders.contains(n) {
                render_dir
            } else {
                gt_dir
            };
            side.join(n).display().to_string()
        })
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    if renders.is_empty() {
        return Err(Error::domain(format!(
            "no PNG images in {}",
            render_dir.display()
        )));
    }
    let names: Vec<&String> = renders.iter().collect();
    let rows = names
        .par_iter()
        .map(|name| {
            let a = read_image(&render_dir.join(name))?;
            let b = read_image(&gt_dir.join(name))?;
            Ok(EvalRow {
                name: name.to_string(),
                psnr: psnr(&a, &b)?,
                ssim: ssim(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(label, rows))
}
