//! Visual-fidelity metrics. All of them work on the 0–255 scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::ImageSample;

const PEAK: f64 = 255.0;

/// Structural-similarity settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    /// Side of the Gaussian window; must be odd.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Side of the uniform window for the quality index.
pub const UQI_WINDOW: usize = 8;

/// Windows whose summed variances fall below this are treated as flat.
const FLAT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rmse: f64,
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
}

pub fn fidelity(a: &ImageSample, b: &ImageSample) -> Result<FidelityReport> {
    Ok(FidelityReport {
        rmse: rmse(a, b)?,
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        uqi: uqi(a, b)?,
    })
}

pub fn rmse(a: &ImageSample, b: &ImageSample) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = PEAK * (x - y);
            d * d
        })
        .sum();
    Ok((sum / a.pixels().len() as f64).sqrt())
}

/// `20 · log10(255 / rmse)`; infinite when the images are identical.
pub fn psnr(a: &ImageSample, b: &ImageSample) -> Result<f64> {
    let e = rmse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 20.0 * (PEAK / e).log10() })
}

/// One channel on the 255 scale, row-major.
fn channel(img: &ImageSample, c: usize) -> Vec<f64> {
    img.pixels().iter().skip(c).step_by(3).map(|v| PEAK * v).collect()
}

fn check_window(img: &ImageSample, window: usize) -> Result<()> {
    if img.height() < window || img.width() < window {
        return Err(Error::InvalidImage(format!(
            "{}x{} image is smaller than the {window}x{window} window",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|j| k[j] * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM with the default parameters.
pub fn ssim(a: &ImageSample, b: &ImageSample) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean SSIM over all valid windows, averaged over the three channels.
pub fn ssim_with(a: &ImageSample, b: &ImageSample, p: &SsimParams) -> Result<f64> {
    a.check_same_shape(b)?;
    if p.window % 2 == 0 || p.window == 0 || !(p.sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "ssim window {} must be odd and sigma {} positive",
            p.window, p.sigma
        )));
    }
    check_window(a, p.window)?;
    let (h, w) = a.size();
    let k = gaussian_kernel(p.window, p.sigma);
    let c1 = (p.k1 * PEAK).powi(2);
    let c2 = (p.k2 * PEAK).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        for i in 0..mx.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// The universal quality index over 8×8 uniform windows.
pub fn uqi(a: &ImageSample, b: &ImageSample) -> Result<f64> {
    uqi_with(a, b, UQI_WINDOW)
}

/// Quality index `4·σxy·μx·μy / ((σx² + σy²)(μx² + μy²))`, averaged over
/// valid windows and channels.
///
/// Where both windows are flat the structure term is taken as 1, leaving
/// `2μxμy / (μx² + μy²)`; where both are also black the window scores 1.
pub fn uqi_with(a: &ImageSample, b: &ImageSample, window: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    if window == 0 {
        return Err(Error::InvalidConfig("uqi window must be positive".into()));
    }
    check_window(a, window)?;
    let (h, w) = a.size();
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        for r in 0..=h - window {
            for c in 0..=w - window {
                let cells = || (r..r + window).flat_map(move |i| (c..c + window).map(move |j| i * w + j));
                let mx = cells().map(|i| x[i]).sum::<f64>() / n;
                let my = cells().map(|i| y[i]).sum::<f64>() / n;
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in cells() {
                    let (dx, dy) = (x[i] - mx, y[i] - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
                let (vx, vy, cov) = (vx / n, vy / n, cov / n);
                let means = mx * mx + my * my;
                total += if vx + vy <= FLAT {
                    if means == 0.0 {
                        1.0
                    } else {
                        2.0 * mx * my / means
                    }
                } else if means == 0.0 {
                    0.0
                } else {
                    4.0 * cov * mx * my / ((vx + vy) * means)
                };
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
