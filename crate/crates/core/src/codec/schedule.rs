//! Low-delay P GOP-8 frame QP schedule.

use super::CodecError;

pub const QP_I_MIN: i32 = 14;
pub const QP_I_MAX: i32 = 37;
pub const GOP_LEN: usize = 8;

/// P-frame QP offset for a given intra QP: 6, 7 or 8 for the three QP_I bins.
pub fn delta_for(qp_i: i32) -> Result<i32, CodecError> {
    match qp_i {
        14..=21 => Ok(6),
        22..=29 => Ok(7),
        30..=37 => Ok(8),
        _ => Err(CodecError::QpIOutOfRange(qp_i)),
    }
}

/// The repeating 8-entry loop following the intra frame. The last entry is
/// `qp_i + 2` (absolute), the others are `qp_i + delta` / `qp_i + delta - 1`.
pub fn gop_pattern(qp_i: i32) -> Result<[i32; GOP_LEN], CodecError> {
    let d = delta_for(qp_i)?;
    let hi = qp_i + d;
    let lo = qp_i + d - 1;
    Ok([hi, lo, hi, lo, hi, lo, hi, qp_i + 2])
}

pub fn frame_qp_schedule(qp_i: i32, n_frames: usize) -> Result<Vec<i32>, CodecError> {
    if n_frames == 0 {
        return Err(CodecError::EmptySequence);
    }
    let pattern = gop_pattern(qp_i)?;
    let mut out = Vec::with_capacity(n_frames);
    out.push(qp_i);
    out.extend((1..n_frames).map(|t| pattern[(t - 1) % GOP_LEN]));
    Ok(out)
}
