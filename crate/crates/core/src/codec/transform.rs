//! 8x8 orthonormal DCT-II, dead-zone scalar quantizer and zigzag scan.

use std::sync::OnceLock;

pub const BLOCK: usize = 8;
pub const BLOCK_AREA: usize = BLOCK * BLOCK;

/// Rounding offsets of the dead-zone quantizer (scaled by 0.5 at use).
pub const INTRA_ROUNDING: f64 = 1.0 / 3.0;
pub const INTER_ROUNDING: f64 = 1.0 / 6.0;

fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; BLOCK]; BLOCK];
        for (k, row) in c.iter_mut().enumerate() {
            let alpha = if k == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (((2 * n + 1) * k) as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
            }
        }
        c
    })
}

/// Forward transform `Y = C X C^T`, row-major in and out.
pub fn forward_dct(block: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
    let c = basis();
    let mut tmp = [0.0; BLOCK_AREA];
    // rows: tmp[y][k] = sum_n x[y][n] c[k][n]
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            let mut s = 0.0;
            for n in 0..BLOCK {
                s += block[y * BLOCK + n] * c[k][n];
            }
            tmp[y * BLOCK + k] = s;
        }
    }
    let mut out = [0.0; BLOCK_AREA];
    for k in 0..BLOCK {
        for x in 0..BLOCK {
            let mut s = 0.0;
            for n in 0..BLOCK {
                s += c[k][n] * tmp[n * BLOCK + x];
            }
            out[k * BLOCK + x] = s;
        }
    }
    out
}

/// Inverse transform `X = C^T Y C`.
pub fn inverse_dct(coeffs: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
    let c = basis();
    let mut tmp = [0.0; BLOCK_AREA];
    for y in 0..BLOCK {
        for n in 0..BLOCK {
            let mut s = 0.0;
            for k in 0..BLOCK {
                s += coeffs[y * BLOCK + k] * c[k][n];
            }
            tmp[y * BLOCK + n] = s;
        }
    }
    let mut out = [0.0; BLOCK_AREA];
    for n in 0..BLOCK {
        for x in 0..BLOCK {
            let mut s = 0.0;
            for k in 0..BLOCK {
                s += c[k][n] * tmp[k * BLOCK + x];
            }
            out[n * BLOCK + x] = s;
        }
    }
    out
}

pub fn quantize(coeff: f64, qstep: f64, rounding: f64) -> i32 {
    let level = (coeff.abs() / qstep + 0.5 * rounding).floor() as i32;
    if coeff < 0.0 {
        -level
    } else {
        level
    }
}

pub fn dequantize(level: i32, qstep: f64) -> f64 {
    level as f64 * qstep
}

/// Raster index of the i-th coefficient in zigzag order.
pub fn zigzag() -> &'static [usize; BLOCK_AREA] {
    static ZZ: OnceLock<[usize; BLOCK_AREA]> = OnceLock::new();
    ZZ.get_or_init(|| {
        let mut order = [0usize; BLOCK_AREA];
        let mut i = 0;
        for s in 0..(2 * BLOCK - 1) {
            let range: Vec<usize> = (0..BLOCK).filter(|&y| s >= y && s - y < BLOCK).collect();
            // even diagonals run bottom-left to top-right
            let ys: Vec<usize> = if s % 2 == 0 {
                range.into_iter().rev().collect()
            } else {
                range
            };
            for y in ys {
                order[i] = y * BLOCK + (s - y);
                i += 1;
            }
        }
        order
    })
}
