//! Synthetic phantom corpora and raw sequence I/O.
//!
//! Domain B is the vessel-phantom target domain: a dark textured background
//! crossed by thin bright curvilinear structures. Domain A (pretraining) uses
//! the same machinery with wide high-contrast blobs and a higher-frequency
//! texture, so the two domains are shifted by construction.
//!
//! Randomness comes from two sources: shape parameters are drawn from a
//! seeded ChaCha stream, and per-pixel noise/texture lattices from an integer
//! hash of (seed, frame, position). Neither depends on platform float quirks
//! at rasterization thresholds.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{check_dims, CodecError, Frame, Sequence, SequenceManifest};
use crate::semantics::{self, SemanticMask, SemanticsError};

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },
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
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: CodecError,
    },
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("no {domain} sequences under {path}")]
    NoSequences { domain: Domain, path: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DatasetError + '_ {
    move |source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::A => f.write_str("A"),
            Domain::B => f.write_str("B"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(format!("unknown domain {other:?} (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub domain: Domain,
    pub noise_sigma: f64,
    /// Vessels in domain B, blobs in domain A.
    pub n_vessels: usize,
    /// Vessel width (B) or blob diameter (A), pixels.
    pub vessel_width_range: (f64, f64),
    pub drift_px_per_frame: f64,
}

impl PhantomConfig {
    pub fn defaults(domain: Domain) -> Self {
        match domain {
            Domain::B => Self {
                seed: 0,
                width: 512,
                height: 512,
                n_frames: 33,
                domain,
                noise_sigma: 2.0,
                n_vessels: 3,
                vessel_width_range: (3.0, 5.0),
                drift_px_per_frame: 0.5,
            },
            Domain::A => Self {
                seed: 0,
                width: 512,
                height: 512,
                n_frames: 33,
                domain,
                noise_sigma: 3.0,
                n_vessels: 24,
                vessel_width_range: (5.0, 12.0),
                drift_px_per_frame: 0.5,
            },
        }
    }

    /// Small, slowly drifting sequences sized for single-core training runs.
    pub fn desk(domain: Domain) -> Self {
        let (side, count) = match domain {
            Domain::A => (128, 4),
            Domain::B => (192, 1),
        };
        Self {
            width: side,
            height: side,
            n_frames: 9,
            n_vessels: count,
            drift_px_per_frame: 0.1,
            ..Self::defaults(domain)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        check_dims(self.width, self.height)
            .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
        if self.n_frames == 0 {
            return Err(DatasetError::InvalidConfig("n_frames must be >= 1".into()));
        }
        let (lo, hi) = self.vessel_width_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(DatasetError::InvalidConfig(format!(
                "vessel_width_range ({lo}, {hi})"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DatasetError::InvalidConfig("noise_sigma".into()));
        }
        if !self.drift_px_per_frame.is_finite() {
            return Err(DatasetError::InvalidConfig("drift_px_per_frame".into()));
        }
        Ok(())
    }
}

struct DomainLook {
    background: f64,
    texture_amp: f64,
    /// Lattice spacings of the value-noise octaves, pixels.
    texture_cells: [f64; 2],
    contrast: (f64, f64),
}

fn look(domain: Domain) -> DomainLook {
    match domain {
        Domain::B => DomainLook {
            background: 40.0,
            texture_amp: 14.0,
            texture_cells: [96.0, 40.0],
            contrast: (60.0, 120.0),
        },
        Domain::A => DomainLook {
            background: 70.0,
            texture_amp: 24.0,
            texture_cells: [24.0, 9.0],
            contrast: (110.0, 170.0),
        },
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

/// Approximately standard normal: scaled sum of four 16-bit uniforms.
fn hashed_normal(h: u64) -> f64 {
    let mut s = 0u64;
    for k in 0..4 {
        s += (h >> (16 * k)) & 0xFFFF;
    }
    // sum of 4 U(0,1): mean 2, variance 1/3
    let u = s as f64 / 65536.0;
    (u - 2.0) * 3f64.sqrt()
}

fn lattice_value(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = hash3(seed ^ (octave << 56), ix as u64, iy as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Static value-noise texture in [-1, 1].
fn texture(seed: u64, w: usize, h: usize, cells: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut norm = 0.0;
    for (o, &cell) in cells.iter().enumerate() {
        let weight = 1.0 / (o + 1) as f64;
        norm += weight;
        for y in 0..h {
            let fy = y as f64 / cell;
            let iy = fy.floor() as i64;
            let ty = smoothstep(fy - iy as f64);
            for x in 0..w {
                let fx = x as f64 / cell;
                let ix = fx.floor() as i64;
                let tx = smoothstep(fx - ix as f64);
                let v00 = lattice_value(seed, o as u64, ix, iy);
                let v10 = lattice_value(seed, o as u64, ix + 1, iy);
                let v01 = lattice_value(seed, o as u64, ix, iy + 1);
                let v11 = lattice_value(seed, o as u64, ix + 1, iy + 1);
                let top = v00 + (v10 - v00) * tx;
                let bot = v01 + (v11 - v01) * tx;
                out[y * w + x] += weight * (2.0 * (top + (bot - top) * ty) - 1.0);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

#[derive(Debug, Clone)]
enum Structure {
    Vessel {
        /// Dense polyline through a Catmull-Rom spline.
        points: Vec<(f64, f64)>,
        half_width: f64,
        intensity: f64,
    },
    Blob {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        intensity: f64,
    },
}

fn catmull_rom(p: &[(f64, f64)], samples_per_span: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 1..p.len() - 2 {
        let (p0, p1, p2, p3) = (p[i - 1], p[i], p[i + 1], p[i + 2]);
        for s in 0..samples_per_span {
            let t = s as f64 / samples_per_span as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(p[p.len() - 2]);
    out
}

fn random_structures(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Structure> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let contrast = look(cfg.domain).contrast;
    let (wlo, whi) = cfg.vessel_width_range;
    let mut out = Vec::with_capacity(cfg.n_vessels);
    for _ in 0..cfg.n_vessels {
        let width = rng.gen_range(wlo..=whi);
        let intensity = rng.gen_range(contrast.0..=contrast.1);
        match cfg.domain {
            Domain::B => {
                let cx = rng.gen_range(0.25 * w..0.75 * w);
                let cy = rng.gen_range(0.25 * h..0.75 * h);
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let (dx, dy) = (theta.cos(), theta.sin());
                let reach = 0.7 * w.max(h);
                let wobble = 0.12 * w.min(h);
                let ctrl: Vec<(f64, f64)> = (0..7)
                    .map(|k| {
                        let s = (k as f64 - 3.0) / 3.0 * reach;
                        let j = rng.gen_range(-wobble..wobble);
                        (cx + s * dx - j * dy, cy + s * dy + j * dx)
                    })
                    .collect();
                out.push(Structure::Vessel {
                    points: catmull_rom(&ctrl, 48),
                    half_width: width / 2.0,
                    intensity,
                });
            }
            Domain::A => {
                let r = width / 2.0;
                out.push(Structure::Blob {
                    cx: rng.gen_range(0.05 * w..0.95 * w),
                    cy: rng.gen_range(0.05 * h..0.95 * h),
                    rx: r,
                    ry: r * rng.gen_range(0.6..1.0),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    intensity,
                });
            }
        }
    }
    out
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (px - a.0, py - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

/// Sub-sample coverage bitmask (4x4 per pixel) of one structure shifted by
/// `(ox, oy)`.
fn rasterize(s: &Structure, ox: f64, oy: f64, w: usize, h: usize, cover: &mut [u16]) {
    let sub = |i: usize| (i as f64 + 0.5) / SUPERSAMPLE as f64;
    match s {
        Structure::Vessel {
            points, half_width, ..
        } => {
            let r2 = half_width * half_width;
            for seg in points.windows(2) {
                let a = (seg[0].0 + ox, seg[0].1 + oy);
                let b = (seg[1].0 + ox, seg[1].1 + oy);
                let x0 = (a.0.min(b.0) - half_width - 1.0).floor().max(0.0) as usize;
                let y0 = (a.1.min(b.1) - half_width - 1.0).floor().max(0.0) as usize;
                let x1 = ((a.0.max(b.0) + half_width + 1.0).ceil().max(0.0) as usize).min(w);
                let y1 = ((a.1.max(b.1) + half_width + 1.0).ceil().max(0.0) as usize).min(h);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let mut bits = 0u16;
                        for sy in 0..SUPERSAMPLE {
                            for sx in 0..SUPERSAMPLE {
                                let d2 = seg_dist2(x as f64 + sub(sx), y as f64 + sub(sy), a, b);
                                if d2 <= r2 {
                                    bits |= 1 << (sy * SUPERSAMPLE + sx);
                                }
                            }
                        }
                        cover[y * w + x] |= bits;
                    }
                }
            }
        }
        Structure::Blob {
            cx,
            cy,
            rx,
            ry,
            angle,
            ..
        } => {
            let (cx, cy) = (cx + ox, cy + oy);
            let (c, sn) = (angle.cos(), angle.sin());
            let r = rx.max(*ry);
            let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
            let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(w);
            let y1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut bits = 0u16;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let dx = x as f64 + sub(sx) - cx;
                            let dy = y as f64 + sub(sy) - cy;
                            let u = (dx * c + dy * sn) / rx;
                            let v = (-dx * sn + dy * c) / ry;
                            if u * u + v * v <= 1.0 {
                                bits |= 1 << (sy * SUPERSAMPLE + sx);
                            }
                        }
                    }
                    cover[y * w + x] |= bits;
                }
            }
        }
    }
}

fn intensity(s: &Structure) -> f64 {
    match s {
        Structure::Vessel { intensity, .. } | Structure::Blob { intensity, .. } => *intensity,
    }
}

/// Generates a phantom sequence and its analytic ground-truth masks.
pub fn gen_phantom(cfg: &PhantomConfig) -> Result<(Sequence, Vec<SemanticMask>), DatasetError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let lk = look(cfg.domain);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let structures = random_structures(cfg, &mut rng);
    let drift_angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let (ddx, ddy) = (drift_angle.cos(), drift_angle.sin());
    let tex = texture(cfg.seed, w, h, &lk.texture_cells);
    let full = (SUPERSAMPLE * SUPERSAMPLE) as u32;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut masks = Vec::with_capacity(cfg.n_frames);
    let mut cover = vec![0u16; w * h];
    let mut bright = vec![0.0f64; w * h];
    for t in 0..cfg.n_frames {
        let shift = t as f64 * cfg.drift_px_per_frame;
        let (ox, oy) = (shift * ddx, shift * ddy);
        bright.iter_mut().for_each(|v| *v = 0.0);
        let mut union = vec![0u16; w * h];
        for s in &structures {
            cover.iter_mut().for_each(|c| *c = 0);
            rasterize(s, ox, oy, w, h, &mut cover);
            let amp = intensity(s);
            for i in 0..w * h {
                if cover[i] != 0 {
                    let v = amp * cover[i].count_ones() as f64 / full as f64;
                    bright[i] = bright[i].max(v);
                    union[i] |= cover[i];
                }
            }
        }
        let mut samples = Vec::with_capacity(w * h);
        for i in 0..w * h {
            let noise =
                cfg.noise_sigma * hashed_normal(hash3(cfg.seed ^ 0xA5A5, t as u64, i as u64));
            let v = lk.background + lk.texture_amp * tex[i] + bright[i] + noise;
            samples.push(v.round().clamp(0.0, 255.0) as u8);
        }
        // strict majority of the 16 sub-samples
        let bits = union.iter().map(|c| 2 * c.count_ones() > full).collect();
        frames.push(Frame::new(w, h, samples).map_err(|e| DatasetError::InvalidConfig(e.to_string()))?);
        masks.push(SemanticMask::new(w, h, bits)?);
    }
    let id = format!("{}{:06}", cfg.domain, cfg.seed);
    let seq = Sequence::new(id, frames).map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
    Ok((seq, masks))
}

/// Per-sequence JSON written next to the `.y8` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    #[serde(flatten)]
    pub manifest: SequenceManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub domain: Domain,
    pub id: String,
    /// Path of the sequence JSON relative to the corpus root.
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub entries: Vec<CorpusEntry>,
}

pub const CORPUS_MANIFEST: &str = "manifest.json";

/// Writes `<dir>/<id>.y8` and `<dir>/<id>.json`.
pub fn write_sequence(
    dir: &Path,
    seq: &Sequence,
    phantom: Option<&PhantomConfig>,
) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let y8 = dir.join(format!("{}.y8", seq.id()));
    let mut data = Vec::with_capacity(seq.width() * seq.height() * seq.len());
    for f in seq.frames() {
        data.extend_from_slice(f.samples());
    }
    std::fs::write(&y8, data).map_err(io_err(&y8))?;
    let json = dir.join(format!("{}.json", seq.id()));
    let file = SequenceFile {
        manifest: seq.manifest().clone(),
        phantom: phantom.cloned(),
    };
    let bytes = serde_json::to_vec_pretty(&file).map_err(json_err(&json))?;
    std::fs::write(&json, bytes).map_err(io_err(&json))?;
    Ok(json)
}

/// Loads a sequence from its JSON manifest (or the `.y8` next to it) and
/// its masks when a `.mask` file exists.
pub fn load_sequence(path: &Path) -> Result<(Sequence, Option<Vec<SemanticMask>>), DatasetError> {
    let json = path.with_extension("json");
    let y8 = path.with_extension("y8");
    let raw = std::fs::read(&json).map_err(io_err(&json))?;
    let file: SequenceFile = serde_json::from_slice(&raw).map_err(json_err(&json))?;
    let m = &file.manifest;
    check_dims(m.width, m.height).map_err(|source| DatasetError::Codec {
        path: json.display().to_string(),
        source,
    })?;
    if m.frame_count == 0 {
        return Err(DatasetError::Codec {
            path: json.display().to_string(),
            source: CodecError::EmptySequence,
        });
    }
    let data = std::fs::read(&y8).map_err(io_err(&y8))?;
    let frame_bytes = m.width * m.height;
    let expected = frame_bytes * m.frame_count;
    if data.len() != expected {
        return Err(DatasetError::SizeMismatch {
            path: y8.display().to_string(),
            expected,
            actual: data.len(),
        });
    }
    let codec = |source| DatasetError::Codec {
        path: y8.display().to_string(),
        source,
    };
    let frames = data
        .chunks(frame_bytes)
        .map(|c| Frame::new(m.width, m.height, c.to_vec()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(codec)?;
    let seq = Sequence::new(m.id.clone(), frames).map_err(codec)?;

    let dir = json.parent().unwrap_or(Path::new("."));
    let masks = if dir.join(format!("{}.mask", m.id)).exists() {
        let masks = semantics::read_masks(dir, &m.id)?;
        if masks.len() != m.frame_count
            || masks.iter().any(|k| k.width() != m.width || k.height() != m.height)
        {
            return Err(DatasetError::SizeMismatch {
                path: dir.join(format!("{}.mask", m.id)).display().to_string(),
                expected: m.frame_count,
                actual: masks.len(),
            });
        }
        Some(masks)
    } else {
        None
    };
    Ok((seq, masks))
}

/// Writes `n` phantoms with seeds `base_seed + i` under `<out>/<domain>/`
/// and merges them into `<out>/manifest.json`.
pub fn gen_corpus(
    n: usize,
    template: &PhantomConfig,
    base_seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyCorpus);
    }
    template.validate()?;
    let domain = template.domain;
    let sub = out_dir.join(domain.to_string());
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let cfg = template.clone().with_seed(base_seed + i as u64);
        let (seq, masks) = gen_phantom(&cfg)?;
        write_sequence(&sub, &seq, Some(&cfg))?;
        semantics::write_masks(&sub, seq.id(), &masks)?;
        entries.push(CorpusEntry {
            domain,
            id: seq.id().to_string(),
            path: format!("{}/{}.json", domain, seq.id()),
            seed: cfg.seed,
        });
    }

    let manifest_path = out_dir.join(CORPUS_MANIFEST);
    let mut manifest = if manifest_path.exists() {
        read_manifest(out_dir)?
    } else {
        CorpusManifest {
            version: 1,
            entries: Vec::new(),
        }
    };
    manifest.entries.retain(|e| e.domain != domain);
    manifest.entries.extend(entries);
    manifest
        .entries
        .sort_by(|a, b| (a.domain as u8, &a.id).cmp(&(b.domain as u8, &b.id)));
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(json_err(&manifest_path))?;
    std::fs::write(&manifest_path, bytes).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

pub fn read_manifest(corpus_dir: &Path) -> Result<CorpusManifest, DatasetError> {
    let path = corpus_dir.join(CORPUS_MANIFEST);
    let raw = std::fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&raw).map_err(json_err(&path))
}

/// Loads every sequence of `domain`, or of all domains when `None`, in
/// manifest order.
pub fn load_corpus(
    corpus_dir: &Path,
    domain: Option<Domain>,
) -> Result<Vec<(Sequence, Option<Vec<SemanticMask>>)>, DatasetError> {
    let manifest = read_manifest(corpus_dir)?;
    manifest
        .entries
        .iter()
        .filter(|e| domain.is_none_or(|d| e.domain == d))
        .map(|e| load_sequence(&corpus_dir.join(&e.path)))
        .collect()
}
