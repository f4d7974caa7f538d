//! Minimal block-transform video codec with per-CTU QP control.
//!
//! Each 64x64 CTU is split into 8x8 blocks coded in raster order. A block is
//! predicted (intra: DC of the reconstructed top row and left column; inter:
//! co-located block of the reference), the residual is DCT-transformed,
//! dead-zone quantized with the CTU's step size and the zigzag-ordered levels
//! are written as `ue(last + 1)` followed by `se(level)` for every position
//! up to the last non-zero one. Bit counts are exact, and the decoder
//! reproduces the encoder reconstruction sample for sample.

mod bitio;
mod schedule;
pub mod transform;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bitio::{se_len, ue_len, BitReader, BitWriter};
pub use schedule::{delta_for, frame_qp_schedule, gop_pattern, GOP_LEN, QP_I_MAX, QP_I_MIN};

use transform::{BLOCK, BLOCK_AREA};

pub const CTU_SIZE: usize = 64;
pub const QP_MIN: i32 = 0;
pub const QP_MAX: i32 = 51;
pub const MAGIC: &[u8; 4] = b"SMC1";
/// Fixed header bytes before the per-CTU offsets.
pub const HEADER_FIXED_BYTES: usize = 4 + 2 + 2 + 1 + 1 + 2 + 2;

const BLOCKS_PER_CTU_SIDE: usize = CTU_SIZE / BLOCK;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("qp {0} outside [0, 51]")]
    QpOutOfRange(i32),
    #[error("intra qp {0} outside [14, 37]")]
    QpIOutOfRange(i32),
    #[error("frame dimensions {width}x{height} are not positive multiples of {CTU_SIZE}")]
    BadDimensions { width: usize, height: usize },
    #[error("sample buffer holds {actual} values, expected {expected}")]
    SampleCount { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inter frames need a reference and intra frames must not have one")]
    ReferenceMismatch,
    #[error("sequence has no frames")]
    EmptySequence,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("bitstream truncated at byte {byte_offset}")]
    Truncated { byte_offset: usize },
    #[error("corrupt bitstream at byte {byte_offset}: {reason}")]
    Corrupt { byte_offset: usize, reason: String },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{extra} unexpected trailing bytes starting at byte {byte_offset}")]
    TrailingData { byte_offset: usize, extra: usize },
    #[error("reference frame missing, unexpected or mismatched")]
    ReferenceMismatch,
}

/// Quantizer step size, doubling every 6 QP.
pub fn qstep(qp: i32) -> Result<f64, CodecError> {
    if !(QP_MIN..=QP_MAX).contains(&qp) {
        return Err(CodecError::QpOutOfRange(qp));
    }
    Ok(qstep_unchecked(qp))
}

fn qstep_unchecked(qp: i32) -> f64 {
    2f64.powf((qp - 4) as f64 / 6.0)
}

pub fn clamp_qp(qp: i32) -> i32 {
    qp.clamp(QP_MIN, QP_MAX)
}

/// 8-bit luma picture whose sides are multiples of [`CTU_SIZE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self, CodecError> {
        check_dims(width, height)?;
        if samples.len() != width * height {
            return Err(CodecError::SampleCount {
                expected: width * height,
                actual: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, CodecError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.samples[y * self.width + x]
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.width / CTU_SIZE, self.height / CTU_SIZE)
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub fn check_dims(width: usize, height: usize) -> Result<(), CodecError> {
    if width == 0
        || height == 0
        || width % CTU_SIZE != 0
        || height % CTU_SIZE != 0
        || width > u16::MAX as usize
        || height > u16::MAX as usize
    {
        return Err(CodecError::BadDimensions { width, height });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub id: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    frames: Vec<Frame>,
    manifest: SequenceManifest,
}

impl Sequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self, CodecError> {
        let first = frames.first().ok_or(CodecError::EmptySequence)?;
        let (width, height) = (first.width, first.height);
        if let Some(bad) = frames.iter().find(|f| !f.same_dims(first)) {
            return Err(CodecError::DimensionMismatch(format!(
                "frame {}x{} in a {}x{} sequence",
                bad.width, bad.height, width, height
            )));
        }
        Ok(Self {
            manifest: SequenceManifest {
                id: id.into(),
                frame_count: frames.len(),
                width,
                height,
            },
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn manifest(&self) -> &SequenceManifest {
        &self.manifest
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.manifest.width
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }
}

/// Absolute QP per CTU, raster order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpMap {
    grid_w: usize,
    grid_h: usize,
    qp: Vec<i32>,
}

impl QpMap {
    pub fn new(grid_w: usize, grid_h: usize, qp: Vec<i32>) -> Result<Self, CodecError> {
        if qp.len() != grid_w * grid_h || grid_w == 0 || grid_h == 0 {
            return Err(CodecError::DimensionMismatch(format!(
                "{} QPs for a {}x{} grid",
                qp.len(),
                grid_w,
                grid_h
            )));
        }
        if let Some(&bad) = qp.iter().find(|q| !(QP_MIN..=QP_MAX).contains(*q)) {
            return Err(CodecError::QpOutOfRange(bad));
        }
        Ok(Self { grid_w, grid_h, qp })
    }

    pub fn uniform(grid_w: usize, grid_h: usize, qp: i32) -> Result<Self, CodecError> {
        Self::new(grid_w, grid_h, vec![qp; grid_w * grid_h])
    }

    pub fn for_frame(frame: &Frame, qp: i32) -> Result<Self, CodecError> {
        let (w, h) = frame.grid_dims();
        Self::uniform(w, h, qp)
    }

    /// `clamp(base + offset)` per CTU.
    pub fn from_offsets(base: i32, offsets: &CtuOffsets) -> Self {
        Self {
            grid_w: offsets.grid_w,
            grid_h: offsets.grid_h,
            qp: offsets.offsets.iter().map(|&o| clamp_qp(base + o)).collect(),
        }
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn qps(&self) -> &[i32] {
        &self.qp
    }

    pub fn get(&self, cx: usize, cy: usize) -> i32 {
        self.qp[cy * self.grid_w + cx]
    }

    pub fn set(&mut self, cx: usize, cy: usize, qp: i32) -> Result<(), CodecError> {
        if !(QP_MIN..=QP_MAX).contains(&qp) {
            return Err(CodecError::QpOutOfRange(qp));
        }
        self.qp[cy * self.grid_w + cx] = qp;
        Ok(())
    }
}

/// Signed per-CTU QP offsets relative to a frame QP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtuOffsets {
    pub grid_w: usize,
    pub grid_h: usize,
    pub offsets: Vec<i32>,
}

impl CtuOffsets {
    pub fn zeros(grid_w: usize, grid_h: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            offsets: vec![0; grid_w * grid_h],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameType {
    Intra,
    Inter,
    /// Intra coding against a flat 128 predictor, so CTUs are coded
    /// independently. Test mode.
    IntraUnpredicted,
}

impl FrameType {
    fn code(self) -> u8 {
        match self {
            FrameType::Intra => 0,
            FrameType::Inter => 1,
            FrameType::IntraUnpredicted => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameType::Intra),
            1 => Some(FrameType::Inter),
            2 => Some(FrameType::IntraUnpredicted),
            _ => None,
        }
    }

    pub fn is_inter(self) -> bool {
        self == FrameType::Inter
    }

    fn rounding(self) -> f64 {
        if self.is_inter() {
            transform::INTER_ROUNDING
        } else {
            transform::INTRA_ROUNDING
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub width: u16,
    pub height: u16,
    pub frame_type: FrameType,
    pub base_qp: u8,
    pub grid_w: u16,
    pub grid_h: u16,
    pub qp_offsets: Vec<i8>,
}

impl BitstreamHeader {
    pub fn byte_len(&self) -> usize {
        HEADER_FIXED_BYTES + self.qp_offsets.len()
    }

    pub fn bits(&self) -> u64 {
        8 * self.byte_len() as u64
    }

    fn ctu_qps(&self) -> Result<Vec<i32>, DecodeError> {
        self.qp_offsets
            .iter()
            .map(|&o| {
                let qp = self.base_qp as i32 + o as i32;
                if (QP_MIN..=QP_MAX).contains(&qp) {
                    Ok(qp)
                } else {
                    Err(DecodeError::InvalidHeader(format!("ctu qp {qp} out of range")))
                }
            })
            .collect()
    }
}

/// One coded frame: header plus bit-packed payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.byte_len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.frame_type.code());
        out.push(h.base_qp);
        out.extend_from_slice(&h.grid_w.to_le_bytes());
        out.extend_from_slice(&h.grid_h.to_le_bytes());
        out.extend(h.qp_offsets.iter().map(|&o| o as u8));
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, DecodeError> {
        if data.len() < HEADER_FIXED_BYTES {
            if data.len() >= 4 && &data[..4] != MAGIC {
                return Err(DecodeError::BadMagic);
            }
            return Err(DecodeError::Truncated {
                byte_offset: data.len(),
            });
        }
        if &data[..4] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let u16_at = |i: usize| u16::from_le_bytes([data[i], data[i + 1]]);
        let width = u16_at(4);
        let height = u16_at(6);
        let frame_type = FrameType::from_code(data[8])
            .ok_or_else(|| DecodeError::InvalidHeader(format!("frame type {}", data[8])))?;
        let base_qp = data[9];
        let grid_w = u16_at(10);
        let grid_h = u16_at(12);
        let n = grid_w as usize * grid_h as usize;
        let end = HEADER_FIXED_BYTES + n;
        if data.len() < end {
            return Err(DecodeError::Truncated {
                byte_offset: data.len(),
            });
        }
        let qp_offsets = data[HEADER_FIXED_BYTES..end].iter().map(|&b| b as i8).collect();
        Ok(Self {
            header: BitstreamHeader {
                width,
                height,
                frame_type,
                base_qp,
                grid_w,
                grid_h,
                qp_offsets,
            },
            payload: data[end..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub width: usize,
    pub height: usize,
    pub header_bits: u64,
    pub per_ctu_bits: Vec<u64>,
    pub total_bits: u64,
    pub bpp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub frames: Vec<EncodeStats>,
    pub total_bits: u64,
    pub bpp: f64,
}

struct CodedFrame {
    payload: Vec<u8>,
    recon: Frame,
    per_ctu_bits: Vec<u64>,
}

fn predict_block(
    frame_type: FrameType,
    recon: &[u8],
    reference: Option<&Frame>,
    width: usize,
    x0: usize,
    y0: usize,
) -> [i32; BLOCK_AREA] {
    let mut pred = [0i32; BLOCK_AREA];
    match frame_type {
        FrameType::Inter => {
            let r = reference.expect("inter frame without reference");
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    pred[y * BLOCK + x] = r.samples[(y0 + y) * width + x0 + x] as i32;
                }
            }
        }
        FrameType::IntraUnpredicted => pred.fill(128),
        FrameType::Intra => {
            let mut sum = 0i32;
            let mut count = 0i32;
            if y0 > 0 {
                let row = (y0 - 1) * width;
                sum += recon[row + x0..row + x0 + BLOCK]
                    .iter()
                    .map(|&v| v as i32)
                    .sum::<i32>();
                count += BLOCK as i32;
            }
            if x0 > 0 {
                for y in 0..BLOCK {
                    sum += recon[(y0 + y) * width + x0 - 1] as i32;
                }
                count += BLOCK as i32;
            }
            let dc = if count == 0 {
                128
            } else {
                (sum + count / 2) / count
            };
            pred.fill(dc);
        }
    }
    pred
}

/// Writes `pred + dequantized residual` into `recon`; shared by both ends.
fn reconstruct_block(
    recon: &mut [u8],
    width: usize,
    x0: usize,
    y0: usize,
    pred: &[i32; BLOCK_AREA],
    levels: &[i32; BLOCK_AREA],
    step: f64,
) {
    let zz = transform::zigzag();
    let any = levels.iter().any(|&l| l != 0);
    let residual = if any {
        let mut coeffs = [0.0; BLOCK_AREA];
        for (i, &l) in levels.iter().enumerate() {
            coeffs[zz[i]] = transform::dequantize(l, step);
        }
        Some(transform::inverse_dct(&coeffs))
    } else {
        None
    };
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            let i = y * BLOCK + x;
            let v = match &residual {
                Some(r) => (pred[i] as f64 + r[i]).round().clamp(0.0, 255.0) as u8,
                None => pred[i] as u8,
            };
            recon[(y0 + y) * width + x0 + x] = v;
        }
    }
}

fn code_frame(
    frame: &Frame,
    reference: Option<&Frame>,
    ctu_qps: &[i32],
    frame_type: FrameType,
) -> CodedFrame {
    let width = frame.width;
    let (grid_w, grid_h) = frame.grid_dims();
    let mut recon = vec![0u8; frame.samples.len()];
    let mut writer = BitWriter::new();
    let mut per_ctu_bits = Vec::with_capacity(grid_w * grid_h);
    let zz = transform::zigzag();
    let rounding = frame_type.rounding();

    for cy in 0..grid_h {
        for cx in 0..grid_w {
            let start = writer.bits_written();
            let step = qstep_unchecked(ctu_qps[cy * grid_w + cx]);
            for by in 0..BLOCKS_PER_CTU_SIDE {
                for bx in 0..BLOCKS_PER_CTU_SIDE {
                    let x0 = cx * CTU_SIZE + bx * BLOCK;
                    let y0 = cy * CTU_SIZE + by * BLOCK;
                    let pred = predict_block(frame_type, &recon, reference, width, x0, y0);
                    let mut residual = [0.0; BLOCK_AREA];
                    for y in 0..BLOCK {
                        for x in 0..BLOCK {
                            let i = y * BLOCK + x;
                            residual[i] =
                                (frame.samples[(y0 + y) * width + x0 + x] as i32 - pred[i]) as f64;
                        }
                    }
                    let coeffs = transform::forward_dct(&residual);
                    let mut levels = [0i32; BLOCK_AREA];
                    let mut last = None;
                    for (i, &raster) in zz.iter().enumerate() {
                        let l = transform::quantize(coeffs[raster], step, rounding);
                        levels[i] = l;
                        if l != 0 {
                            last = Some(i);
                        }
                    }
                    match last {
                        None => writer.write_ue(0),
                        Some(last) => {
                            writer.write_ue(last as u32 + 1);
                            for &l in &levels[..=last] {
                                writer.write_se(l);
                            }
                        }
                    }
                    reconstruct_block(&mut recon, width, x0, y0, &pred, &levels, step);
                }
            }
            per_ctu_bits.push(writer.bits_written() - start);
        }
    }

    CodedFrame {
        payload: writer.finish(),
        recon: Frame {
            width,
            height: frame.height,
            samples: recon,
        },
        per_ctu_bits,
    }
}

fn check_reference(
    width: usize,
    height: usize,
    reference: Option<&Frame>,
    frame_type: FrameType,
) -> Result<(), CodecError> {
    match (frame_type.is_inter(), reference) {
        (true, Some(r)) if r.width == width && r.height == height => Ok(()),
        (true, Some(r)) => Err(CodecError::DimensionMismatch(format!(
            "reference {}x{} vs frame {}x{}",
            r.width, r.height, width, height
        ))),
        (false, None) => Ok(()),
        _ => Err(CodecError::ReferenceMismatch),
    }
}

/// Encodes one frame. Returns the bitstream, the decoder-identical
/// reconstruction and exact bit accounting.
pub fn encode_frame(
    frame: &Frame,
    reference: Option<&Frame>,
    qp_map: &QpMap,
    frame_type: FrameType,
) -> Result<(Bitstream, Frame, EncodeStats), CodecError> {
    check_reference(frame.width, frame.height, reference, frame_type)?;
    let (grid_w, grid_h) = frame.grid_dims();
    if qp_map.grid_w != grid_w || qp_map.grid_h != grid_h {
        return Err(CodecError::DimensionMismatch(format!(
            "qp map {}x{} vs ctu grid {}x{}",
            qp_map.grid_w, qp_map.grid_h, grid_w, grid_h
        )));
    }
    if let Some(&bad) = qp_map.qp.iter().find(|q| !(QP_MIN..=QP_MAX).contains(*q)) {
        return Err(CodecError::QpOutOfRange(bad));
    }

    let coded = code_frame(frame, reference, &qp_map.qp, frame_type);
    let base = *qp_map.qp.iter().min().expect("non-empty grid");
    let header = BitstreamHeader {
        width: frame.width as u16,
        height: frame.height as u16,
        frame_type,
        base_qp: base as u8,
        grid_w: grid_w as u16,
        grid_h: grid_h as u16,
        qp_offsets: qp_map.qp.iter().map(|&q| (q - base) as i8).collect(),
    };
    let header_bits = header.bits();
    let total_bits = header_bits + coded.per_ctu_bits.iter().sum::<u64>();
    let stats = EncodeStats {
        width: frame.width,
        height: frame.height,
        header_bits,
        per_ctu_bits: coded.per_ctu_bits,
        total_bits,
        bpp: total_bits as f64 / (frame.width * frame.height) as f64,
    };
    Ok((
        Bitstream {
            header,
            payload: coded.payload,
        },
        coded.recon,
        stats,
    ))
}

pub fn decode_frame(bitstream: &Bitstream, reference: Option<&Frame>) -> Result<Frame, DecodeError> {
    let h = &bitstream.header;
    let (width, height) = (h.width as usize, h.height as usize);
    if check_dims(width, height).is_err() {
        return Err(DecodeError::InvalidHeader(format!(
            "dimensions {width}x{height}"
        )));
    }
    if h.grid_w as usize * CTU_SIZE != width || h.grid_h as usize * CTU_SIZE != height {
        return Err(DecodeError::InvalidHeader(format!(
            "ctu grid {}x{} does not cover {width}x{height}",
            h.grid_w, h.grid_h
        )));
    }
    if h.qp_offsets.len() != h.grid_w as usize * h.grid_h as usize {
        return Err(DecodeError::InvalidHeader("qp offset count".into()));
    }
    if check_reference(width, height, reference, h.frame_type).is_err() {
        return Err(DecodeError::ReferenceMismatch);
    }
    let ctu_qps = h.ctu_qps()?;
    let header_len = h.byte_len();
    let mut reader = BitReader::new(&bitstream.payload, header_len);
    let mut recon = vec![0u8; width * height];
    let grid_w = h.grid_w as usize;

    for cy in 0..h.grid_h as usize {
        for cx in 0..grid_w {
            let step = qstep_unchecked(ctu_qps[cy * grid_w + cx]);
            for by in 0..BLOCKS_PER_CTU_SIDE {
                for bx in 0..BLOCKS_PER_CTU_SIDE {
                    let x0 = cx * CTU_SIZE + bx * BLOCK;
                    let y0 = cy * CTU_SIZE + by * BLOCK;
                    let block_start = reader.byte_offset();
                    let count = reader.read_ue()? as usize;
                    if count > BLOCK_AREA {
                        return Err(DecodeError::Corrupt {
                            byte_offset: block_start,
                            reason: format!("coefficient count {count}"),
                        });
                    }
                    let mut levels = [0i32; BLOCK_AREA];
                    for l in levels.iter_mut().take(count) {
                        *l = reader.read_se()?;
                    }
                    if count > 0 && levels[count - 1] == 0 {
                        return Err(DecodeError::Corrupt {
                            byte_offset: block_start,
                            reason: "last coefficient is zero".into(),
                        });
                    }
                    let pred = predict_block(h.frame_type, &recon, reference, width, x0, y0);
                    reconstruct_block(&mut recon, width, x0, y0, &pred, &levels, step);
                }
            }
        }
    }

    let used = reader.bytes_consumed();
    if used != bitstream.payload.len() {
        return Err(DecodeError::TrailingData {
            byte_offset: header_len + used,
            extra: bitstream.payload.len() - used,
        });
    }
    Ok(Frame {
        width,
        height,
        samples: recon,
    })
}

/// Parses and decodes a serialized frame.
pub fn decode_bytes(data: &[u8], reference: Option<&Frame>) -> Result<Frame, DecodeError> {
    decode_frame(&Bitstream::from_bytes(data)?, reference)
}

/// Low-delay P encode: frame 0 intra, every later frame inter-predicted from
/// the previous reconstruction. The CTU QP is `clamp(frame_qp + offset)`.
pub fn encode_sequence(
    seq: &Sequence,
    frame_qps: &[i32],
    ctu_offsets: &[CtuOffsets],
) -> Result<(Vec<Bitstream>, Vec<Frame>, SequenceStats), CodecError> {
    let n = seq.len();
    if frame_qps.len() != n || ctu_offsets.len() != n {
        return Err(CodecError::DimensionMismatch(format!(
            "{} frame qps and {} offset maps for {} frames",
            frame_qps.len(),
            ctu_offsets.len(),
            n
        )));
    }
    let mut streams = Vec::with_capacity(n);
    let mut recons: Vec<Frame> = Vec::with_capacity(n);
    let mut frames_stats = Vec::with_capacity(n);
    for (t, frame) in seq.frames().iter().enumerate() {
        let map = QpMap::from_offsets(frame_qps[t], &ctu_offsets[t]);
        let (ftype, reference) = if t == 0 {
            (FrameType::Intra, None)
        } else {
            (FrameType::Inter, recons.last())
        };
        let (bs, recon, stats) = encode_frame(frame, reference, &map, ftype)?;
        streams.push(bs);
        recons.push(recon);
        frames_stats.push(stats);
    }
    let total_bits = frames_stats.iter().map(|s| s.total_bits).sum::<u64>();
    let pixels = (seq.width() * seq.height() * n) as f64;
    Ok((
        streams,
        recons,
        SequenceStats {
            frames: frames_stats,
            total_bits,
            bpp: total_bits as f64 / pixels,
        },
    ))
}
