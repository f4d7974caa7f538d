//! Agent observations. Every channel lies in [0, 1].

use serde::{Deserialize, Serialize};

use crate::codec::{Frame, QP_MAX};
use crate::semantics::{CtuLabel, SemanticMask};

/// Planar input (`channels x side x side`) plus scalars appended after the
/// feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub planes: Vec<f64>,
    pub scalars: Vec<f64>,
}

impl State {
    pub fn zeros(channels: usize, side: usize, n_scalars: usize) -> Self {
        Self {
            planes: vec![0.0; channels * side * side],
            scalars: vec![0.0; n_scalars],
        }
    }
}

const LAMBDA_SCALE: f64 = 1e-3;

/// Maps λ in [0, 100] onto [0, 1] on a log scale resolving λ down to ~1e-3.
pub fn lambda_feature(lambda: f64) -> f64 {
    let f = |l: f64| (1.0 + l / LAMBDA_SCALE).ln();
    (f(lambda.max(0.0)) / f(100.0)).min(1.0)
}

/// Luma and mask box-averaged to `side x side`; λ is added per query.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStateBase {
    side: usize,
    planes: Vec<f64>,
}

impl FrameStateBase {
    pub fn new(frame: &Frame, mask: &SemanticMask, side: usize) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let (fx, fy) = (w / side, h / side);
        let norm = 1.0 / (fx * fy) as f64;
        let mut planes = vec![0.0; 2 * side * side];
        let (luma, m) = planes.split_at_mut(side * side);
        for y in 0..side {
            for x in 0..side {
                let (mut sl, mut sm) = (0u32, 0u32);
                for yy in y * fy..(y + 1) * fy {
                    for xx in x * fx..(x + 1) * fx {
                        sl += u32::from(frame.at(xx, yy));
                        sm += u32::from(mask.get(xx, yy));
                    }
                }
                luma[y * side + x] = f64::from(sl) * norm / 255.0;
                m[y * side + x] = f64::from(sm) * norm;
            }
        }
        Self { side, planes }
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

/// Frame-level observation: downsampled luma, mask, and a constant λ plane.
pub fn frame_state(base: &FrameStateBase, lambda: f64) -> State {
    let n = base.side * base.side;
    let mut planes = Vec::with_capacity(3 * n);
    planes.extend_from_slice(&base.planes);
    planes.resize(3 * n, lambda_feature(lambda));
    State {
        planes,
        scalars: Vec::new(),
    }
}

/// CTU-level observation: the CTU's luma and mask crop plus
/// `[frame_qp / 51, label, ratio]`.
pub fn ctu_state(
    frame: &Frame,
    mask: &SemanticMask,
    ctu_x: usize,
    ctu_y: usize,
    ctu_size: usize,
    frame_qp: i32,
    label: CtuLabel,
    ratio: f64,
) -> State {
    let n = ctu_size * ctu_size;
    let mut planes = vec![0.0; 2 * n];
    let (x0, y0) = (ctu_x * ctu_size, ctu_y * ctu_size);
    for y in 0..ctu_size {
        for x in 0..ctu_size {
            planes[y * ctu_size + x] = f64::from(frame.at(x0 + x, y0 + y)) / 255.0;
            planes[n + y * ctu_size + x] = f64::from(u8::from(mask.get(x0 + x, y0 + y)));
        }
    }
    let fg = f64::from(u8::from(label == CtuLabel::Foreground));
    State {
        planes,
        scalars: vec![
            (f64::from(frame_qp) / f64::from(QP_MAX)).clamp(0.0, 1.0),
            fg,
            ratio.clamp(0.0, 1.0),
        ],
    }
}
