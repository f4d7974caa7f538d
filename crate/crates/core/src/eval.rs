//! Rate / task-quality curves, Bjøntegaard deltas, the constant-QP anchor
//! and the hand-crafted mask-ratio QP maps.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{clamp_qp, encode_sequence, CodecError, CtuOffsets, QpMap, QP_MAX, QP_MIN};
use crate::policy::Checkpoint;
use crate::semantics::{miou, segment, CtuLabels, SemanticsError};
use crate::training::{run_episode, Mode, PreparedSequence, RewardConfig, TrainError};

/// Points a cubic fit needs.
pub const BD_MIN_POINTS: usize = 4;
pub const DEFAULT_ANCHOR_QPS: [i32; 7] = [12, 17, 22, 27, 32, 37, 42];
pub const DEFAULT_QP_SPAN: f64 = 8.0;
pub const RD_CSV_HEADER: &str = "label,rate_bpp,quality_miou";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} distinct points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("curves do not overlap on the {0} axis")]
    EmptyOverlap(&'static str),
    #[error("no sequences to evaluate")]
    EmptySet,
    #[error("empty {0} list")]
    EmptyList(&'static str),
    #[error("duplicate {what}: {value}")]
    Duplicate { what: &'static str, value: String },
    #[error("unknown hand-crafted kind {0:?} (expected linear, exp, square, log, sqrt)")]
    UnknownKind(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    /// Bits per pixel.
    pub rate: f64,
    /// Mean mIOU against the originals' masks.
    pub quality: f64,
}

/// Points sorted by strictly increasing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate. Rates must be positive, finite and pairwise distinct.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::EmptyList("point"));
        }
        for p in &points {
            if !(p.rate > 0.0 && p.rate.is_finite() && p.quality.is_finite()) {
                return Err(EvalError::Invalid(format!(
                    "point {:?}: rate {} quality {}",
                    p.label, p.rate, p.quality
                )));
            }
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if let Some(w) = points.windows(2).find(|w| w[0].rate == w[1].rate) {
            return Err(EvalError::Duplicate {
                what: "rate",
                value: format!("{} ({} and {})", w[0].rate, w[0].label, w[1].label),
            });
        }
        Ok(Self { points })
    }

    /// Like [`RdCurve::new`], but points with an equal rate collapse onto
    /// the first one in input order.
    pub fn merged(points: Vec<RdPoint>) -> Result<Self, EvalError> {
        let mut kept: Vec<RdPoint> = Vec::with_capacity(points.len());
        for p in points {
            if !kept.iter().any(|k| k.rate == p.rate) {
                kept.push(p);
            }
        }
        Self::new(kept)
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether the curve has enough points for [`bd_metric`].
    pub fn usable_for_bd(&self) -> bool {
        self.points.len() >= BD_MIN_POINTS
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "{RD_CSV_HEADER}")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.label, p.rate, p.quality)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii")
    }

    /// gnuplot-friendly `rate quality` columns.
    pub fn to_dat(&self) -> String {
        let mut s = String::from("# rate_bpp quality_miou label\n");
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p.rate, p.quality, p.label));
        }
        s
    }
}

/// Reads `label,rate_bpp,quality_miou` rows. With `prefix`, only rows whose
/// label starts with it are kept.
pub fn read_curve_csv(r: impl BufRead, prefix: Option<&str>) -> Result<RdCurve, EvalError> {
    let mut points = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if i == 0 {
            if line != RD_CSV_HEADER {
                return Err(EvalError::Parse {
                    line: 1,
                    msg: format!("expected header {RD_CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let parse_err = |msg: String| EvalError::Parse { line: i + 1, msg };
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, got {}", cols.len())));
        }
        if prefix.is_some_and(|p| !cols[0].starts_with(p)) {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}")));
        points.push(RdPoint {
            label: cols[0].to_string(),
            rate: num(cols[1])?,
            quality: num(cols[2])?,
        });
    }
    RdCurve::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    /// Percent rate change at equal quality; negative means savings.
    pub bd_rate: f64,
    /// Mean quality change at equal rate.
    pub bd_quality: f64,
}

/// Least-squares cubic `y ~ c0 + c1 x + c2 x^2 + c3 x^3`.
fn cubic_fit(x: &[f64], y: &[f64]) -> Result<[f64; 4], EvalError> {
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < BD_MIN_POINTS {
        return Err(EvalError::InsufficientPoints {
            needed: BD_MIN_POINTS,
            got: distinct.len(),
        });
    }
    let v = DMatrix::from_fn(x.len(), 4, |r, c| x[r].powi(c as i32));
    let rhs = DVector::from_column_slice(y);
    let sol = v
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| EvalError::Invalid(format!("cubic fit: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

/// Integral of the cubic over `[lo, hi]`.
fn cubic_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn overlap(a: &[f64], b: &[f64], axis: &'static str) -> Result<(f64, f64), EvalError> {
    let range = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    if !(hi > lo) {
        return Err(EvalError::EmptyOverlap(axis));
    }
    Ok((lo, hi))
}

/// Mean of `fit_test - fit_anchor` over the shared `x` range.
fn mean_gap(xa: &[f64], ya: &[f64], xt: &[f64], yt: &[f64], axis: &'static str) -> Result<f64, EvalError> {
    let (lo, hi) = overlap(xa, xt, axis)?;
    let ca = cubic_fit(xa, ya)?;
    let ct = cubic_fit(xt, yt)?;
    Ok((cubic_integral(&ct, lo, hi) - cubic_integral(&ca, lo, hi)) / (hi - lo))
}

/// Bjøntegaard deltas of `test` relative to `anchor`: log10-rate fitted as a
/// cubic in quality (BD-rate) and quality as a cubic in log10-rate
/// (BD-quality), each averaged over the overlapping interval.
pub fn bd_metric(anchor: &RdCurve, test: &RdCurve) -> Result<BdResult, EvalError> {
    for c in [anchor, test] {
        if !c.usable_for_bd() {
            return Err(EvalError::InsufficientPoints {
                needed: BD_MIN_POINTS,
                got: c.len(),
            });
        }
    }
    let q = |c: &RdCurve| c.points.iter().map(|p| p.quality).collect::<Vec<_>>();
    let lr = |c: &RdCurve| c.points.iter().map(|p| p.rate.log10()).collect::<Vec<_>>();
    let (qa, qt, ra, rt) = (q(anchor), q(test), lr(anchor), lr(test));
    let avg_log_gap = mean_gap(&qa, &ra, &qt, &rt, "quality")?;
    let bd_quality = mean_gap(&ra, &qa, &rt, &qt, "rate")?;
    Ok(BdResult {
        bd_rate: 100.0 * (10f64.powf(avg_log_gap) - 1.0),
        bd_quality,
    })
}

/// Mean bpp and mean per-frame mIOU of one encoding configuration over a
/// sequence set. `offsets_for(seq, t)` gives frame `t`'s CTU offsets.
fn encode_set(
    seqs: &[PreparedSequence],
    frame_qp: i32,
    mut offsets_for: impl FnMut(&PreparedSequence, usize) -> CtuOffsets,
) -> Result<(f64, f64), EvalError> {
    let (mut rate, mut quality) = (0.0, 0.0);
    for p in seqs {
        let n = p.seq.len();
        let offsets: Vec<CtuOffsets> = (0..n).map(|t| offsets_for(p, t)).collect();
        let (_, recons, stats) = encode_sequence(&p.seq, &vec![frame_qp; n], &offsets)?;
        rate += stats.bpp;
        let mut q = 0.0;
        for (r, m) in recons.iter().zip(&p.masks) {
            q += miou(&segment(r), m)?;
        }
        quality += q / n as f64;
    }
    let k = seqs.len() as f64;
    Ok((rate / k, quality / k))
}

fn check_qps(qps: &[i32]) -> Result<(), EvalError> {
    if qps.is_empty() {
        return Err(EvalError::EmptyList("QP"));
    }
    let mut seen = HashSet::new();
    for &q in qps {
        if !(QP_MIN..=QP_MAX).contains(&q) {
            return Err(CodecError::QpOutOfRange(q).into());
        }
        if !seen.insert(q) {
            return Err(EvalError::Duplicate {
                what: "QP",
                value: q.to_string(),
            });
        }
    }
    Ok(())
}

/// Constant QP on every frame and CTU.
pub fn anchor_sweep(seqs: &[PreparedSequence], qps: &[i32]) -> Result<RdCurve, EvalError> {
    check_qps(qps)?;
    if seqs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut points = Vec::with_capacity(qps.len());
    for &qp in qps {
        let (rate, quality) = encode_set(seqs, qp, |p, _| {
            let (gw, gh) = p.seq.frames()[0].grid_dims();
            CtuOffsets::zeros(gw, gh)
        })?;
        points.push(RdPoint {
            label: format!("qp{qp}"),
            rate,
            quality,
        });
    }
    RdCurve::new(points)
}

/// Greedy episodes of the checkpoint's agents, one point per λ. Identical
/// operating points reached from different λ collapse onto one.
pub fn policy_sweep(ck: &Checkpoint, seqs: &[PreparedSequence], lambdas: &[f64]) -> Result<RdCurve, EvalError> {
    if lambdas.is_empty() {
        return Err(EvalError::EmptyList("lambda"));
    }
    for (i, l) in lambdas.iter().enumerate() {
        if lambdas[..i].contains(l) {
            return Err(EvalError::Duplicate {
                what: "lambda",
                value: l.to_string(),
            });
        }
    }
    if seqs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let rc = RewardConfig {
            lambda,
            bpp_norm: ck.bpp_norm,
        };
        let (mut rate, mut quality) = (0.0, 0.0);
        for p in seqs {
            let ep = run_episode(p, &ck.frame, &ck.ctu, &rc, Mode::Greedy, &mut rng)?;
            rate += ep.stats.bpp;
            quality += ep.quality();
        }
        let k = seqs.len() as f64;
        points.push(RdPoint {
            label: format!("lambda{lambda}"),
            rate: rate / k,
            quality: quality / k,
        });
    }
    RdCurve::merged(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandcraftedKind {
    Linear,
    Exp,
    Square,
    Log,
    Sqrt,
}

impl HandcraftedKind {
    pub const ALL: [HandcraftedKind; 5] = [
        HandcraftedKind::Linear,
        HandcraftedKind::Exp,
        HandcraftedKind::Square,
        HandcraftedKind::Log,
        HandcraftedKind::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HandcraftedKind::Linear => "linear",
            HandcraftedKind::Exp => "exp",
            HandcraftedKind::Square => "square",
            HandcraftedKind::Log => "log",
            HandcraftedKind::Sqrt => "sqrt",
        }
    }

    /// Monotone map of [0, 1] onto [0, 1] with `f(0) = 0`, `f(1) = 1`.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            HandcraftedKind::Linear => x,
            HandcraftedKind::Exp => (x.exp() - 1.0) / (1f64.exp() - 1.0),
            HandcraftedKind::Square => x * x,
            HandcraftedKind::Log => (1.0 + x).ln() / 2f64.ln(),
            HandcraftedKind::Sqrt => x.sqrt(),
        }
    }
}

impl fmt::Display for HandcraftedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HandcraftedKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EvalError::UnknownKind(s.to_string()))
    }
}

fn check_span(span: f64) -> Result<(), EvalError> {
    if !(span >= 0.0 && span.is_finite()) {
        return Err(EvalError::Invalid(format!("qp_span must be >= 0, got {span}")));
    }
    Ok(())
}

/// `clamp(frame_qp + round(span * f(1 - ratio)))` per CTU: the less of a CTU
/// the mask covers, the coarser it is quantized.
pub fn handcrafted_qp_map(
    labels: &CtuLabels,
    frame_qp: i32,
    kind: HandcraftedKind,
    qp_span: f64,
) -> Result<QpMap, EvalError> {
    check_span(qp_span)?;
    if !(QP_MIN..=QP_MAX).contains(&frame_qp) {
        return Err(CodecError::QpOutOfRange(frame_qp).into());
    }
    let qp = labels
        .ratios
        .iter()
        .map(|&r| clamp_qp(frame_qp + (qp_span * kind.apply(1.0 - r.clamp(0.0, 1.0))).round() as i32))
        .collect();
    Ok(QpMap::new(labels.grid_w, labels.grid_h, qp)?)
}

/// One curve per kind; each point encodes every frame at a constant frame QP
/// with the kind's per-CTU map.
pub fn baseline_sweep(
    seqs: &[PreparedSequence],
    kinds: &[HandcraftedKind],
    frame_qps: &[i32],
    qp_span: f64,
) -> Result<Vec<(HandcraftedKind, RdCurve)>, EvalError> {
    check_qps(frame_qps)?;
    check_span(qp_span)?;
    if kinds.is_empty() {
        return Err(EvalError::EmptyList("kind"));
    }
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(EvalError::Duplicate {
                what: "kind",
                value: k.to_string(),
            });
        }
    }
    if seqs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut points = Vec::with_capacity(frame_qps.len());
        for &qp in frame_qps {
            let mut err = None;
            let (rate, quality) = encode_set(seqs, qp, |p, t| {
                let l = &p.labels[t];
                match handcrafted_qp_map(l, qp, kind, qp_span) {
                    Ok(map) => CtuOffsets {
                        grid_w: l.grid_w,
                        grid_h: l.grid_h,
                        offsets: map.qps().iter().map(|q| q - qp).collect(),
                    },
                    Err(e) => {
                        err.get_or_insert(e);
                        CtuOffsets::zeros(l.grid_w, l.grid_h)
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            points.push(RdPoint {
                label: format!("{kind}@qp{qp}"),
                rate,
                quality,
            });
        }
        out.push((kind, RdCurve::new(points)?));
    }
    Ok(out)
}
