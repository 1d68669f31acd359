use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundingReport, RetrievalReport, SimilarityMatrix, TemporalReport};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::synthcorpus::VideoTensor;
use crate::trainer::MetricsRecord;

pub const SUMMARY_FILE: &str = "summary.json";

/// Everything known about a run. Absent parts are left out of the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retrieval: Option<RetrievalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temporal: Option<TemporalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grounding: Option<GroundingReport>,
}

impl Summary {
    pub fn with_metrics(mut self, metrics: &[MetricsRecord]) -> Self {
        if let Some(last) = metrics.last() {
            self.steps = Some(last.step + 1);
            self.final_loss_total = Some(last.loss_total);
            self.final_loss_t = last.loss_t;
            self.final_loss_g = last.loss_g;
            self.final_loss_c = Some(last.loss_c);
        }
        self
    }
}

pub fn write_summary(dir: &Path, s: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// 8-bit grayscale image.
pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::arg("pixel buffer does not match the image size"));
    }
    let w = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    enc.write_header()
        .map_err(io)?
        .write_image_data(pixels)
        .map_err(io)?;
    Ok(())
}

fn gray(x: f64, lo: f64, hi: f64) -> u8 {
    let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.5 };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Each matrix cell as a `scale`×`scale` block, black at `lo` and white
/// at `hi`. Returns `(width, height, pixels)`.
pub fn render_heatmap(m: &SimilarityMatrix, scale: usize, lo: f64, hi: f64) -> (usize, usize, Vec<u8>) {
    let (w, h) = (m.cols * scale, m.rows * scale);
    let mut px = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            px[y * w + x] = gray(m.get(y / scale, x / scale), lo, hi);
        }
    }
    (w, h, px)
}

/// Frames side by side in dimmed luminance with the pixels of `voxels`
/// brightened.
pub fn render_overlay(video: &VideoTensor, grid: &PatchGrid, voxels: &[usize]) -> (usize, usize, Vec<u8>) {
    let (t_n, h, w) = (video.frames, video.height, video.width);
    let mut selected = vec![false; grid.num_tokens()];
    for &v in voxels {
        selected[v] = true;
    }
    let width = t_n * w;
    let mut px = vec![0u8; width * h];
    for t in 0..t_n {
        let frame = video.frame(t);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 3;
                let luma = 0.299 * frame[i] + 0.587 * frame[i + 1] + 0.114 * frame[i + 2];
                let v = ((t / grid.patch.t) * grid.rows + y / grid.patch.h) * grid.cols + x / grid.patch.w;
                let base = 0.4 * f64::from(luma).clamp(0.0, 1.0);
                let lit = if selected[v] { base + 0.6 } else { base };
                px[y * width + t * w + x] = (lit * 255.0).round() as u8;
            }
        }
    }
    (width, h, px)
}

const CURVE_W: usize = 480;
const CURVE_H: usize = 240;
const MARGIN: usize = 8;

/// Loss curves on a black canvas: total in white, then temporal,
/// grounding and contrastive in successively darker grays.
pub fn loss_curve_png(metrics: &[MetricsRecord]) -> (usize, usize, Vec<u8>) {
    let mut px = vec![0u8; CURVE_W * CURVE_H];
    let series: [(u8, Vec<Option<f64>>); 4] = [
        (255, metrics.iter().map(|r| Some(r.loss_total)).collect()),
        (200, metrics.iter().map(|r| r.loss_t).collect()),
        (150, metrics.iter().map(|r| r.loss_g).collect()),
        (100, metrics.iter().map(|r| Some(r.loss_c)).collect()),
    ];
    let vals = series.iter().flat_map(|(_, s)| s.iter().flatten().copied());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    // axes
    for x in MARGIN..CURVE_W - MARGIN {
        px[(CURVE_H - MARGIN) * CURVE_W + x] = 60;
    }
    for y in MARGIN..=CURVE_H - MARGIN {
        px[y * CURVE_W + MARGIN] = 60;
    }
    if metrics.is_empty() || !lo.is_finite() {
        return (CURVE_W, CURVE_H, px);
    }
    let span_x = (CURVE_W - 2 * MARGIN - 1) as f64;
    let span_y = (CURVE_H - 2 * MARGIN - 1) as f64;
    let n = metrics.len().max(2) - 1;
    for (level, s) in series.iter().rev() {
        for (i, v) in s.iter().enumerate() {
            if let Some(v) = v {
                let x = MARGIN + 1 + (i as f64 / n as f64 * span_x).round() as usize;
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                let y = CURVE_H - MARGIN - 1 - (t * span_y).round() as usize;
                px[y * CURVE_W + x.min(CURVE_W - 1)] = *level;
            }
        }
    }
    (CURVE_W, CURVE_H, px)
}
