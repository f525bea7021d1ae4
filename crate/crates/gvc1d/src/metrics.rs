//! Evaluation metrics over 8-bit planar RGB frames: PSNR and MS-SSIM
//! (with a single-scale SSIM fallback for frames too small to survive
//! five dyadic downsamplings).

use crate::detmath;
use crate::error::{GvcError, Result};

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB over any equal-length 8-bit buffers.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GvcError::dim(format!(
            "psnr over {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * detmath::log2(255.0 * 255.0 / mse) / detmath::log2(10.0)).min(PSNR_CAP))
}

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;
const WIN: usize = 11;
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Minimum frame side for the full 5-scale pyramid.
pub const MSSSIM_MIN_DIM: usize = 160;

fn gaussian_window() -> Vec<f64> {
    let sigma = 1.5;
    let c = (WIN as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..WIN * WIN)
        .map(|i| {
            let y = (i / WIN) as f64 - c;
            let x = (i % WIN) as f64 - c;
            detmath::exp(-(x * x + y * y) / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// Mean SSIM and mean contrast-structure term over one plane.
fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (K1 * L) * (K1 * L);
    let c2 = (K2 * L) * (K2 * L);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - WIN {
        for x0 in 0..=width - WIN {
            let (mut ma, mut mb) = (0.0, 0.0);
            for wy in 0..WIN {
                for wx in 0..WIN {
                    let w = win[wy * WIN + wx];
                    ma += w * a[(y0 + wy) * width + x0 + wx];
                    mb += w * b[(y0 + wy) * width + x0 + wx];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..WIN {
                for wx in 0..WIN {
                    let w = win[wy * WIN + wx];
                    let da = a[(y0 + wy) * width + x0 + wx] - ma;
                    let db = b[(y0 + wy) * width + x0 + wx] - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            ssim_sum += lum * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (ssim_sum / count as f64, cs_sum / count as f64)
}

fn downsample(x: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (width / 2, height / 2);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for xx in 0..nw {
            out.push(
                (x[2 * y * width + 2 * xx]
                    + x[2 * y * width + 2 * xx + 1]
                    + x[(2 * y + 1) * width + 2 * xx]
                    + x[(2 * y + 1) * width + 2 * xx + 1])
                    / 4.0,
            );
        }
    }
    (out, nw, nh)
}

fn plane_f64(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&v| f64::from(v)).collect()
}

fn powf(base: f64, e: f64) -> f64 {
    detmath::exp(e * detmath::ln(base.max(1e-12)))
}

/// Multi-scale SSIM over planar 8-bit channels, averaged across
/// channels. Frames with min(width, height) < MSSSIM_MIN_DIM fall back
/// to single-scale SSIM (a warning is emitted on stderr).
pub fn ms_ssim(
    a: &[u8],
    b: &[u8],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<f64> {
    let n = width * height * channels;
    if a.len() != n || b.len() != n || channels == 0 {
        return Err(GvcError::dim(format!(
            "ms_ssim buffers {}/{} vs {channels}x{height}x{width}",
            a.len(),
            b.len()
        )));
    }
    let single = width.min(height) < MSSSIM_MIN_DIM;
    if single {
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| {
            eprintln!(
                "warning: frame {width}x{height} below {MSSSIM_MIN_DIM}px, \
                 falling back to single-scale SSIM"
            );
        });
    }
    let mut total = 0.0;
    for ch in 0..channels {
        let plane = ch * width * height;
        let mut pa = plane_f64(&a[plane..plane + width * height]);
        let mut pb = plane_f64(&b[plane..plane + width * height]);
        if single {
            let (s, _) = ssim_plane(&pa, &pb, width, height);
            total += s;
            continue;
        }
        let (mut w, mut h) = (width, height);
        let mut score = 1.0;
        for (scale, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let (s, cs) = ssim_plane(&pa, &pb, w, h);
            if scale + 1 == MSSSIM_WEIGHTS.len() {
                score *= powf(s, weight);
            } else {
                score *= powf(cs, weight);
                let (na, nw, nh) = downsample(&pa, w, h);
                let (nb, _, _) = downsample(&pb, w, h);
                pa = na;
                pb = nb;
                w = nw;
                h = nh;
            }
        }
        total += score;
    }
    Ok(total / channels as f64)
}
