//! Image metrics and the line-oriented metric report.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `infinite` when the images are identical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub infinite: bool,
}

impl Psnr {
    fn from_mse(mse: f64, peak: f64) -> Self {
        if mse == 0.0 {
            Self { db: f64::INFINITY, infinite: true }
        } else {
            Self { db: 10.0 * (peak * peak / mse).log10(), infinite: false }
        }
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}×{}×{} vs {}×{}×{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    same_shape(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(Psnr::from_mse(mse, peak))
}

/// PSNR restricted to pixels where `mask` (single channel) is positive.
pub fn psnr_masked(a: &Image, b: &Image, mask: &Image, peak: f64) -> Result<Psnr> {
    same_shape(a, b)?;
    if mask.channels() != 1 || mask.pixels() != a.pixels() {
        return Err(Error::invalid("mask must be single-channel and match the images"));
    }
    let c = a.channels();
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, &m) in mask.data().iter().enumerate() {
        if m > 0.0 {
            for k in 0..c {
                let d = a.data()[p * c + k] - b.data()[p * c + k];
                sum += d * d;
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::invalid("empty mask"));
    }
    Ok(Psnr::from_mse(sum / count as f64, peak))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions of one channel.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM per channel, averaged over channels, for images in [0, 1].
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, w, h, &g));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Zeroes every pixel outside `mask`.
pub fn apply_mask(img: &Image, mask: &Image) -> Image {
    let c = img.channels();
    let mut out = img.clone();
    for (p, &m) in mask.data().iter().enumerate() {
        if m <= 0.0 {
            out.data_mut()[p * c..(p + 1) * c].fill(0.0);
        }
    }
    out
}

/// Union of two coverage masks.
pub fn union_mask(a: &Image, b: &Image) -> Image {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| if *x > 0.0 || *y > 0.0 { 1.0 } else { 0.0 }).collect();
    Image::new(a.width(), a.height(), 1, data).expect("masks share a shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    NovelView,
    NovelPose,
    Relight,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::NovelView => "novel_view",
            Task::NovelPose => "novel_pose",
            Task::Relight => "relight",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "novel_view" => Some(Task::NovelView),
            "novel_pose" => Some(Task::NovelPose),
            "relight" => Some(Task::Relight),
            _ => None,
        }
    }
}

pub const METRICS: [&str; 5] = ["psnr", "ssim", "psnr_n", "ssim_n", "perceptual_proxy"];

/// Per-view metric values keyed by `(task, metric, view)`, one line each:
/// `task.metric.view = value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    entries: BTreeMap<(Task, String, String), f64>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: Task, metric: &str, view: &str, value: f64) {
        self.entries.insert((task, metric.to_string(), view.to_string()), value);
    }

    pub fn get(&self, task: Task, metric: &str, view: &str) -> Option<f64> {
        self.entries.get(&(task, metric.to_string(), view.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self, task: Task, metric: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|((t, m, v), _)| *t == task && m == metric && v != "mean")
            .map(|(_, &x)| x)
            .collect()
    }

    /// Adds a `mean` entry for every task/metric pair present.
    pub fn add_means(&mut self) {
        let mut keys: Vec<(Task, String)> = self.entries.keys().map(|(t, m, _)| (*t, m.clone())).collect();
        keys.dedup();
        for (t, m) in keys {
            let v = self.values(t, &m);
            if !v.is_empty() {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                self.insert(t, &m, "mean", mean);
            }
        }
    }

    pub fn mean(&self, task: Task, metric: &str) -> Option<f64> {
        self.get(task, metric, "mean").or_else(|| {
            let v = self.values(task, metric);
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::invalid(format!("report line {}: {line:?}", no + 1));
            let (key, value) = line.split_once('=').ok_or_else(bad)?;
            let mut parts = key.trim().splitn(3, '.');
            let (Some(t), Some(m), Some(v)) = (parts.next(), parts.next(), parts.next()) else { return Err(bad()) };
            let task = Task::parse(t).ok_or_else(bad)?;
            let value = value.trim().parse::<f64>().map_err(|_| bad())?;
            r.insert(task, m, v, value);
        }
        Ok(r)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for ((t, m, v), x) in &self.entries {
            writeln!(f, "{}.{}.{} = {}", t.as_str(), m, v, x)?;
        }
        Ok(())
    }
}
