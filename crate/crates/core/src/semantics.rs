//! Diagnosis surrogate: a fixed classical segmenter, mIOU scoring and the
//! mask-to-CTU foreground/background reduction.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Frame, CTU_SIZE};

pub const DEFAULT_FG_THRESHOLD: f64 = 0.01;

const BLUR_RADIUS: usize = 2;
const BLUR_SIGMA: f64 = 1.0;
const OPENING_RADIUS: usize = 3;
const THRESHOLD_K: f64 = 1.5;
const MIN_COMPONENT: usize = 20;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("mask dimensions {0}x{1} do not match {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("fg_threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("mask buffer holds {actual} bytes, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl SemanticMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, SemanticsError> {
        if bits.len() != width * height {
            return Err(SemanticsError::BadLength {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// 1 bit per pixel, MSB first, rows concatenated without padding.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 0x80 >> (i % 8);
        }
        out
    }

    pub fn from_packed(width: usize, height: usize, data: &[u8]) -> Result<Self, SemanticsError> {
        let n = width * height;
        if data.len() != n.div_ceil(8) {
            return Err(SemanticsError::BadLength {
                expected: n.div_ceil(8),
                actual: data.len(),
            });
        }
        let bits = (0..n).map(|i| data[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Binary PGM (P5), foreground 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), SemanticsError> {
        let io = |source| SemanticsError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_pgm()).map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub encoding: String,
}

pub const MASK_ENCODING: &str = "1bpp-msb-first";

fn check_dims(
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(), SemanticsError> {
    if a != b {
        return Err(SemanticsError::DimMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

fn gaussian_kernel() -> [f64; 2 * BLUR_RADIUS + 1] {
    let mut k = [0.0; 2 * BLUR_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - BLUR_RADIUS as f64;
        *v = (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with replicated borders.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = BLUR_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Square min/max filter over the in-bounds part of the window.
fn rank_filter(src: &[f64], w: usize, h: usize, radius: usize, take_max: bool) -> Vec<f64> {
    let pick = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            let mut v = src[y * w + lo];
            for xx in lo + 1..=hi {
                v = pick(v, src[y * w + xx]);
            }
            tmp[y * w + x] = v;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            let mut v = tmp[lo * w + x];
            for yy in lo + 1..=hi {
                v = pick(v, tmp[yy * w + x]);
            }
            out[y * w + x] = v;
        }
    }
    out
}

fn remove_small_components(mask: &mut [bool], w: usize, h: usize, min_size: usize) {
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        component.clear();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if component.len() < min_size {
            for &i in &component {
                mask[i] = false;
            }
        }
    }
}

/// Blur, white top-hat, global `mean + 1.5 std` threshold and removal of
/// 4-connected components smaller than 20 pixels.
pub fn segment(frame: &Frame) -> SemanticMask {
    let (w, h) = (frame.width(), frame.height());
    let src: Vec<f64> = frame.samples().iter().map(|&v| v as f64).collect();
    let blurred = blur(&src, w, h);
    let eroded = rank_filter(&blurred, w, h, OPENING_RADIUS, false);
    let opened = rank_filter(&eroded, w, h, OPENING_RADIUS, true);
    let tophat: Vec<f64> = blurred.iter().zip(&opened).map(|(b, o)| b - o).collect();

    let n = tophat.len() as f64;
    let mean = tophat.iter().sum::<f64>() / n;
    let var = tophat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let threshold = mean + THRESHOLD_K * var.sqrt();

    let mut bits: Vec<bool> = tophat.iter().map(|&v| v > threshold).collect();
    remove_small_components(&mut bits, w, h, MIN_COMPONENT);
    SemanticMask {
        width: w,
        height: h,
        bits,
    }
}

/// Intersection over union of the foreground sets; 1.0 when both are empty.
pub fn miou(pred: &SemanticMask, truth: &SemanticMask) -> Result<f64, SemanticsError> {
    check_dims((pred.width, pred.height), (truth.width, truth.height))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&truth.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `1 - miou(segment(recon), segment(original))`.
pub fn task_distortion(recon: &Frame, original: &Frame) -> Result<f64, SemanticsError> {
    check_dims(
        (recon.width(), recon.height()),
        (original.width(), original.height()),
    )?;
    task_distortion_against(recon, &segment(original))
}

/// Same as [`task_distortion`] with the reference mask already computed.
pub fn task_distortion_against(
    recon: &Frame,
    original_mask: &SemanticMask,
) -> Result<f64, SemanticsError> {
    Ok(1.0 - miou(&segment(recon), original_mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CtuLabel {
    Foreground,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtuLabels {
    pub grid_w: usize,
    pub grid_h: usize,
    pub ctu_size: usize,
    pub labels: Vec<CtuLabel>,
    pub ratios: Vec<f64>,
}

impl CtuLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-CTU mask fraction and fg/bg label (`ratio >= fg_threshold`). Partial
/// CTUs at the right/bottom edge use their in-frame pixel count.
pub fn ctu_labels(
    mask: &SemanticMask,
    ctu_size: usize,
    fg_threshold: f64,
) -> Result<CtuLabels, SemanticsError> {
    if !(0.0..=1.0).contains(&fg_threshold) {
        return Err(SemanticsError::BadThreshold(fg_threshold));
    }
    let grid_w = mask.width.div_ceil(ctu_size);
    let grid_h = mask.height.div_ceil(ctu_size);
    let mut labels = Vec::with_capacity(grid_w * grid_h);
    let mut ratios = Vec::with_capacity(grid_w * grid_h);
    for cy in 0..grid_h {
        for cx in 0..grid_w {
            let x1 = ((cx + 1) * ctu_size).min(mask.width);
            let y1 = ((cy + 1) * ctu_size).min(mask.height);
            let mut count = 0usize;
            for y in cy * ctu_size..y1 {
                count += mask.bits[y * mask.width + cx * ctu_size..y * mask.width + x1]
                    .iter()
                    .filter(|&&b| b)
                    .count();
            }
            let area = (x1 - cx * ctu_size) * (y1 - cy * ctu_size);
            let ratio = count as f64 / area as f64;
            ratios.push(ratio);
            labels.push(if ratio >= fg_threshold {
                CtuLabel::Foreground
            } else {
                CtuLabel::Background
            });
        }
    }
    Ok(CtuLabels {
        grid_w,
        grid_h,
        ctu_size,
        labels,
        ratios,
    })
}

pub fn default_ctu_labels(mask: &SemanticMask) -> CtuLabels {
    ctu_labels(mask, CTU_SIZE, DEFAULT_FG_THRESHOLD).expect("default threshold is valid")
}

/// Writes masks as `<stem>.mask` (packed, concatenated per frame) plus
/// `<stem>.mask.json`.
pub fn write_masks(dir: &Path, stem: &str, masks: &[SemanticMask]) -> Result<(), SemanticsError> {
    let first = masks.first();
    let manifest = MaskManifest {
        width: first.map_or(0, |m| m.width),
        height: first.map_or(0, |m| m.height),
        frame_count: masks.len(),
        encoding: MASK_ENCODING.into(),
    };
    let data_path = dir.join(format!("{stem}.mask"));
    let json_path = dir.join(format!("{stem}.mask.json"));
    let mut data = Vec::new();
    for m in masks {
        data.extend(m.to_packed());
    }
    std::fs::write(&data_path, data).map_err(|source| SemanticsError::Io {
        path: data_path.display().to_string(),
        source,
    })?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| SemanticsError::Json {
        path: json_path.display().to_string(),
        source,
    })?;
    std::fs::write(&json_path, json).map_err(|source| SemanticsError::Io {
        path: json_path.display().to_string(),
        source,
    })
}

pub fn read_masks(dir: &Path, stem: &str) -> Result<Vec<SemanticMask>, SemanticsError> {
    let data_path = dir.join(format!("{stem}.mask"));
    let json_path = dir.join(format!("{stem}.mask.json"));
    let raw = std::fs::read(&json_path).map_err(|source| SemanticsError::Io {
        path: json_path.display().to_string(),
        source,
    })?;
    let manifest: MaskManifest =
        serde_json::from_slice(&raw).map_err(|source| SemanticsError::Json {
            path: json_path.display().to_string(),
            source,
        })?;
    let data = std::fs::read(&data_path).map_err(|source| SemanticsError::Io {
        path: data_path.display().to_string(),
        source,
    })?;
    let per = (manifest.width * manifest.height).div_ceil(8);
    if data.len() != per * manifest.frame_count {
        return Err(SemanticsError::BadLength {
            expected: per * manifest.frame_count,
            actual: data.len(),
        });
    }
    data.chunks(per.max(1))
        .take(manifest.frame_count)
        .map(|c| SemanticMask::from_packed(manifest.width, manifest.height, c))
        .collect()
}
