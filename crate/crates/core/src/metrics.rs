//! Image quality metrics and per-frame / per-group reports.
//!
//! Report CSV header:
//! `variant,frame,split,regime,d_y,psnr,ssim,lpips,identical`; group summaries use
//! `variant,group,frames,psnr,ssim,lpips`. `lpips` is always `n/a`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{ensure_parent, Image};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are equal; `db` is then [`PSNR_CAP`].
    pub identical: bool,
}

fn check_pair(pred: &Image, reference: &Image) -> Result<()> {
    if !pred.same_shape(reference) {
        return Err(Error::Metric(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.width, pred.height, pred.channels, reference.width, reference.height, reference.channels
        )));
    }
    if pred.data.is_empty() {
        return Err(Error::Metric("empty images".into()));
    }
    Ok(())
}

/// `10 log10(1 / mse)` over all pixels and channels, capped at 99 dB.
pub fn psnr(pred: &Image, reference: &Image) -> Result<Psnr> {
    check_pair(pred, reference)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sum / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP,
            identical: true,
        });
    }
    Ok(Psnr {
        db: (10.0 * (1.0 / mse).log10()).min(PSNR_CAP),
        identical: false,
    })
}

fn gray(img: &Image) -> Vec<f64> {
    let c = img.channels as usize;
    img.data
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Single-scale SSIM of the channel-mean gray images, averaged over every
/// window position that lies fully inside the image.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    check_pair(pred, reference)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Metric(format!("images of {w}x{h} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let x = gray(pred);
    let y = gray(reference);
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let g = win[j * SSIM_WINDOW + i];
                    let k = (oy + j) * w + ox + i;
                    mx += g * x[k];
                    my += g * y[k];
                    xx += g * x[k] * x[k];
                    yy += g * y[k] * y[k];
                    xy += g * x[k] * y[k];
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetric {
    pub variant: String,
    pub frame: String,
    pub split: String,
    pub regime: String,
    pub d_y: f64,
    pub psnr: f64,
    pub identical: bool,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetric {
    pub variant: String,
    pub group: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
    pub rows: Vec<FrameMetric>,
}

impl MetricReport {
    /// Arithmetic means of per-frame values, grouped by variant and by both
    /// split tag and regime.
    pub fn aggregates(&self) -> Vec<GroupMetric> {
        let mut groups: BTreeMap<(String, String), (usize, f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            for g in [&r.split, &r.regime] {
                let e = groups.entry((r.variant.clone(), g.clone())).or_default();
                e.0 += 1;
                e.1 += r.psnr;
                e.2 += r.ssim;
            }
        }
        groups
            .into_iter()
            .map(|((variant, group), (n, p, s))| GroupMetric {
                variant,
                group,
                frames: n,
                psnr: p / n as f64,
                ssim: s / n as f64,
            })
            .collect()
    }

    pub fn mean_psnr(&self, variant: &str, group: &str) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|g| g.variant == variant && g.group == group)
            .map(|g| g.psnr)
    }

    pub fn write_csv(&self, frames_path: &Path, summary_path: &Path) -> Result<()> {
        let io = |p: &Path| {
            let p = p.to_owned();
            move |e| Error::io(format!("writing {}", p.display()), e)
        };
        let mut out = Vec::new();
        writeln!(out, "# config_hash={} seed={} checkpoint={}", self.config_hash, self.seed, self.checkpoint).map_err(io(frames_path))?;
        writeln!(out, "variant,frame,split,regime,d_y,psnr,ssim,lpips,identical").map_err(io(frames_path))?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},n/a,{}",
                r.variant, r.frame, r.split, r.regime, r.d_y, r.psnr, r.ssim, r.identical
            )
            .map_err(io(frames_path))?;
        }
        ensure_parent(frames_path)?;
        fs::write(frames_path, out).map_err(io(frames_path))?;

        let mut out = Vec::new();
        writeln!(out, "variant,group,frames,psnr,ssim,lpips").map_err(io(summary_path))?;
        for g in self.aggregates() {
            writeln!(out, "{},{},{},{:.6},{:.6},n/a", g.variant, g.group, g.frames, g.psnr, g.ssim).map_err(io(summary_path))?;
        }
        ensure_parent(summary_path)?;
        fs::write(summary_path, out).map_err(io(summary_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32, side: u32) -> Image {
        Image::from_data(side, side, 3, vec![v; (3 * side * side) as usize]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = constant(0.5, 4);
        let p = psnr(&a, &a).unwrap();
        assert!(p.identical && p.db == PSNR_CAP);
        let b = constant(0.6, 4);
        assert!((psnr(&a, &b).unwrap().db - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &constant(0.5, 5)).is_err());
    }

    #[test]
    fn ssim_identity_and_size() {
        let mut a = constant(0.0, 16);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&constant(0.1, 8), &constant(0.1, 8)).is_err());
    }

    #[test]
    fn ssim_constant_shift_is_luminance_only() {
        let (x, y) = (0.4f64, 0.5f64);
        let c1 = 1e-4;
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let s = ssim(&constant(x as f32, 12), &constant(y as f32, 12)).unwrap();
        assert!((s - expect).abs() < 1e-6, "{s} vs {expect}");
    }

    #[test]
    fn aggregates_are_means() {
        let row = |v: &str, split: &str, p: f64| FrameMetric {
            variant: v.into(),
            frame: "f".into(),
            split: split.into(),
            regime: "extrapolation".into(),
            d_y: 0.0,
            psnr: p,
            identical: false,
            ssim: 0.5,
        };
        let rep = MetricReport {
            rows: vec![row("a", "test-far", 20.0), row("a", "test-far", 30.0), row("a", "test-close", 10.0)],
            ..Default::default()
        };
        assert_eq!(rep.mean_psnr("a", "test-far"), Some(25.0));
        assert_eq!(rep.mean_psnr("a", "extrapolation"), Some(20.0));
        assert_eq!(rep.mean_psnr("b", "test-far"), None);
    }
}
