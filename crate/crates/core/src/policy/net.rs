//! Layers of the policy network and their exact backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentLevel, Group, PolicyError, State};

/// Network shape. The frame and CTU agents differ only in input channels,
/// appended scalars and action count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub level: AgentLevel,
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub hidden: usize,
    pub n_scalars: usize,
    pub n_actions: usize,
    pub adapter_v1_width: usize,
    pub adapter_head_width: usize,
}

impl ArchConfig {
    pub fn frame_default() -> Self {
        Self {
            level: AgentLevel::Frame,
            input_size: 64,
            in_channels: 3,
            conv_channels: [8, 16, 32],
            hidden: 128,
            n_scalars: 0,
            n_actions: super::FRAME_ACTIONS,
            adapter_v1_width: 16,
            adapter_head_width: 8,
        }
    }

    pub fn ctu_default() -> Self {
        Self {
            level: AgentLevel::Ctu,
            in_channels: 2,
            n_scalars: 3,
            n_actions: super::CTU_ACTIONS,
            ..Self::frame_default()
        }
    }

    /// Spatial side after each stride-2 convolution.
    pub fn conv_sides(&self) -> [usize; 3] {
        let s1 = (self.input_size - 1) / 2 + 1;
        let s2 = (s1 - 1) / 2 + 1;
        let s3 = (s2 - 1) / 2 + 1;
        [s1, s2, s3]
    }

    pub fn flat_len(&self) -> usize {
        let s3 = self.conv_sides()[2];
        self.conv_channels[2] * s3 * s3 + self.n_scalars
    }

    pub fn plane_len(&self) -> usize {
        self.in_channels * self.input_size * self.input_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Weights uniform in `±scale * sqrt(6 / fan_in)`, zero bias.
    pub fn he_uniform(n_in: usize, n_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale * (6.0 / n_in as f64).sqrt();
        let mut l = Self::zeros(n_in, n_out);
        for w in &mut l.w {
            *w = rng.gen_range(-bound..=bound);
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        (0..self.n_out)
            .map(|o| {
                let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
                self.b[o] + dot(row, x)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `g`; returns `dL/dx` on request.
    pub fn backward(&self, x: &[f64], dy: &[f64], g: &mut Linear, want_dx: bool) -> Option<Vec<f64>> {
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.b[o] += d;
            let grow = &mut g.w[o * self.n_in..(o + 1) * self.n_in];
            for (gw, &v) in grow.iter_mut().zip(x) {
                *gw += d * v;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0; self.n_in];
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
                for (dxi, &w) in dx.iter_mut().zip(row) {
                    *dxi += d * w;
                }
            }
            dx
        })
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// 3x3 convolution, stride 2, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out x c_in x 3 x 3`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            w: vec![0.0; c_out * c_in * 9],
            b: vec![0.0; c_out],
        }
    }

    pub fn he_uniform(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        let mut c = Self::zeros(c_in, c_out);
        for w in &mut c.w {
            *w = rng.gen_range(-bound..=bound);
        }
        c
    }

    pub fn forward(&self, x: &[f64], side: usize) -> Vec<f64> {
        let so = (side - 1) / 2 + 1;
        let n = so * so;
        let patches = im2col(x, self.c_in, side);
        let k = self.c_in * 9;
        let mut out = vec![0.0; self.c_out * n];
        for (o, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.fill(self.b[o]);
            for (&w, row) in self.w[o * k..(o + 1) * k].iter().zip(patches.chunks_exact(n)) {
                axpy(plane, w, row);
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f64],
        side: usize,
        dy: &[f64],
        g: &mut Conv,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let so = (side - 1) / 2 + 1;
        let n = so * so;
        let k = self.c_in * 9;
        let patches = im2col(x, self.c_in, side);
        for (o, dplane) in dy.chunks_exact(n).enumerate() {
            g.b[o] += dplane.iter().sum::<f64>();
            for (gw, row) in g.w[o * k..(o + 1) * k].iter_mut().zip(patches.chunks_exact(n)) {
                *gw += dot(dplane, row);
            }
        }
        if !want_dx {
            return None;
        }
        let mut dpatches = vec![0.0; k * n];
        for (j, drow) in dpatches.chunks_exact_mut(n).enumerate() {
            for (o, dplane) in dy.chunks_exact(n).enumerate() {
                axpy(drow, self.w[o * k + j], dplane);
            }
        }
        Some(col2im(&dpatches, self.c_in, side))
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Residual bottleneck `x + up(relu(down(x)))`. The up-projection starts at
/// zero, so a fresh adapter is an exact identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

struct AdapterTrace {
    mid: Vec<f64>,
}

impl Adapter {
    pub fn new(dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            down: Linear::he_uniform(dim, width, 1.0, rng),
            up: Linear::zeros(width, dim),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            down: Linear::zeros(self.down.n_in, self.down.n_out),
            up: Linear::zeros(self.up.n_in, self.up.n_out),
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, AdapterTrace) {
        let mut mid = self.down.forward(x);
        relu(&mut mid);
        let up = self.up.forward(&mid);
        let y = x.iter().zip(&up).map(|(a, b)| a + b).collect();
        (y, AdapterTrace { mid })
    }

    fn backward(&self, x: &[f64], tr: &AdapterTrace, dy: &[f64], g: &mut Adapter) -> Vec<f64> {
        let mut dmid = self.up.backward(&tr.mid, dy, &mut g.up, true).unwrap();
        relu_grad(&mut dmid, &tr.mid);
        let dx_inner = self.down.backward(x, &dmid, &mut g.down, true).unwrap();
        dy.iter().zip(&dx_inner).map(|(a, b)| a + b).collect()
    }

    pub fn param_count(&self) -> usize {
        self.down.param_count() + self.up.param_count()
    }
}

/// Dot product with eight independent partial sums so the loop pipelines.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Patch matrix with one row per (input channel, ky, kx) tap and one
/// column per output pixel; padding taps are zero.
fn im2col(x: &[f64], c_in: usize, side: usize) -> Vec<f64> {
    let so = (side - 1) / 2 + 1;
    let n = so * so;
    let mut p = vec![0.0; c_in * 9 * n];
    for (j, row) in p.chunks_exact_mut(n).enumerate() {
        let (i, ky, kx) = (j / 9, (j / 3) % 3, j % 3);
        let plane = &x[i * side * side..(i + 1) * side * side];
        for oy in 0..so {
            let Some(iy) = input_row(oy, ky, side) else { continue };
            let src = &plane[iy * side..(iy + 1) * side];
            for (ox, v) in row[oy * so..(oy + 1) * so].iter_mut().enumerate() {
                if let Some(ix) = (2 * ox + kx).checked_sub(1).filter(|&ix| ix < side) {
                    *v = src[ix];
                }
            }
        }
    }
    p
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im(p: &[f64], c_in: usize, side: usize) -> Vec<f64> {
    let so = (side - 1) / 2 + 1;
    let n = so * so;
    let mut x = vec![0.0; c_in * side * side];
    for (j, row) in p.chunks_exact(n).enumerate() {
        let (i, ky, kx) = (j / 9, (j / 3) % 3, j % 3);
        let plane = &mut x[i * side * side..(i + 1) * side * side];
        for oy in 0..so {
            let Some(iy) = input_row(oy, ky, side) else { continue };
            let dst = &mut plane[iy * side..(iy + 1) * side];
            for (ox, &v) in row[oy * so..(oy + 1) * so].iter().enumerate() {
                if let Some(ix) = (2 * ox + kx).checked_sub(1).filter(|&ix| ix < side) {
                    dst[ix] += v;
                }
            }
        }
    }
    x
}

/// Input row feeding output row `oy` through kernel row `ky`, if in bounds.
fn input_row(oy: usize, ky: usize, side: usize) -> Option<usize> {
    (2 * oy + ky).checked_sub(1).filter(|&iy| iy < side)
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `d` wherever the post-activation output is not positive.
fn relu_grad(d: &mut [f64], out: &[f64]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Feature extractor + trunk + actor/critic heads with optional adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub arch: ArchConfig,
    pub conv: [Conv; 3],
    pub fc: Linear,
    pub actor: Linear,
    pub critic: Linear,
    pub adapter_v1: Option<Adapter>,
    pub adapter_actor: Option<Adapter>,
    pub adapter_critic: Option<Adapter>,
}

/// Borrowed view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub group: Group,
    pub data: &'a mut Vec<f64>,
}

pub(crate) struct Trace {
    input: Vec<f64>,
    acts: [Vec<f64>; 3],
    flat: Vec<f64>,
    h: Vec<f64>,
    v1: Option<AdapterTrace>,
    h1: Vec<f64>,
    aa: Option<AdapterTrace>,
    ha: Vec<f64>,
    ac: Option<AdapterTrace>,
    hc: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) value: f64,
}

/// How deep backpropagation has to go for a given trainable mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Depth {
    Heads,
    AdapterV1,
    Trunk,
    Extractor,
}

impl PolicyNet {
    /// He-uniform convolutions and trunk, small head weights, zero biases.
    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = arch.conv_channels;
        let conv = [
            Conv::he_uniform(arch.in_channels, c1, rng),
            Conv::he_uniform(c1, c2, rng),
            Conv::he_uniform(c2, c3, rng),
        ];
        let fc = Linear::he_uniform(arch.flat_len(), arch.hidden, 1.0, rng);
        let actor = Linear::he_uniform(arch.hidden, arch.n_actions, 0.01, rng);
        let critic = Linear::he_uniform(arch.hidden, 1, 0.01, rng);
        Self {
            arch,
            conv,
            fc,
            actor,
            critic,
            adapter_v1: None,
            adapter_actor: None,
            adapter_critic: None,
        }
    }

    /// All-zero parameters with the requested adapters present.
    pub fn empty(arch: ArchConfig, adapter_v1: bool, adapter_actor: bool, adapter_critic: bool) -> Self {
        let [c1, c2, c3] = arch.conv_channels;
        let adapter = |on: bool, width: usize| {
            on.then(|| Adapter {
                down: Linear::zeros(arch.hidden, width),
                up: Linear::zeros(width, arch.hidden),
            })
        };
        Self {
            conv: [
                Conv::zeros(arch.in_channels, c1),
                Conv::zeros(c1, c2),
                Conv::zeros(c2, c3),
            ],
            fc: Linear::zeros(arch.flat_len(), arch.hidden),
            actor: Linear::zeros(arch.hidden, arch.n_actions),
            critic: Linear::zeros(arch.hidden, 1),
            adapter_v1: adapter(adapter_v1, arch.adapter_v1_width),
            adapter_actor: adapter(adapter_actor, arch.adapter_head_width),
            adapter_critic: adapter(adapter_critic, arch.adapter_head_width),
            arch,
        }
    }

    pub fn zero_heads(&mut self) {
        for l in [&mut self.actor, &mut self.critic] {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn insert_adapter_v1(&mut self, rng: &mut impl Rng) {
        if self.adapter_v1.is_none() {
            self.adapter_v1 = Some(Adapter::new(self.arch.hidden, self.arch.adapter_v1_width, rng));
        }
    }

    pub fn insert_adapter_actor(&mut self, rng: &mut impl Rng) {
        if self.adapter_actor.is_none() {
            self.adapter_actor =
                Some(Adapter::new(self.arch.hidden, self.arch.adapter_head_width, rng));
        }
    }

    pub fn insert_adapter_critic(&mut self, rng: &mut impl Rng) {
        if self.adapter_critic.is_none() {
            self.adapter_critic =
                Some(Adapter::new(self.arch.hidden, self.arch.adapter_head_width, rng));
        }
    }

    /// Same structure, every parameter zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            conv: [
                Conv::zeros(self.conv[0].c_in, self.conv[0].c_out),
                Conv::zeros(self.conv[1].c_in, self.conv[1].c_out),
                Conv::zeros(self.conv[2].c_in, self.conv[2].c_out),
            ],
            fc: Linear::zeros(self.fc.n_in, self.fc.n_out),
            actor: Linear::zeros(self.actor.n_in, self.actor.n_out),
            critic: Linear::zeros(self.critic.n_in, self.critic.n_out),
            adapter_v1: self.adapter_v1.as_ref().map(Adapter::zeros_like),
            adapter_actor: self.adapter_actor.as_ref().map(Adapter::zeros_like),
            adapter_critic: self.adapter_critic.as_ref().map(Adapter::zeros_like),
        }
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(18);
        let names = [
            ("fe.conv1.weight", "fe.conv1.bias"),
            ("fe.conv2.weight", "fe.conv2.bias"),
            ("fe.conv3.weight", "fe.conv3.bias"),
        ];
        for (c, (wn, bn)) in self.conv.iter().zip(names) {
            out.push(TensorRef {
                name: wn,
                group: Group::Fe,
                shape: vec![c.c_out, c.c_in, 3, 3],
                data: &c.w,
            });
            out.push(TensorRef {
                name: bn,
                group: Group::Fe,
                shape: vec![c.c_out],
                data: &c.b,
            });
        }
        fn lin<'a>(out: &mut Vec<TensorRef<'a>>, name_w: &'static str, name_b: &'static str, group: Group, l: &'a Linear) {
            out.push(TensorRef {
                name: name_w,
                group,
                shape: vec![l.n_out, l.n_in],
                data: &l.w,
            });
            out.push(TensorRef {
                name: name_b,
                group,
                shape: vec![l.n_out],
                data: &l.b,
            });
        }
        let fc = &self.fc;
        lin(&mut out, "fc.weight", "fc.bias", Group::Fc, fc);
        lin(&mut out, "actor.weight", "actor.bias", Group::Actor, &self.actor);
        lin(&mut out, "critic.weight", "critic.bias", Group::Critic, &self.critic);
        if let Some(a) = &self.adapter_v1 {
            lin(&mut out, "adapter_v1.down.weight", "adapter_v1.down.bias", Group::AdapterV1, &a.down);
            lin(&mut out, "adapter_v1.up.weight", "adapter_v1.up.bias", Group::AdapterV1, &a.up);
        }
        if let Some(a) = &self.adapter_actor {
            lin(&mut out, "adapter_actor.down.weight", "adapter_actor.down.bias", Group::AdapterA, &a.down);
            lin(&mut out, "adapter_actor.up.weight", "adapter_actor.up.bias", Group::AdapterA, &a.up);
        }
        if let Some(a) = &self.adapter_critic {
            lin(&mut out, "adapter_critic.down.weight", "adapter_critic.down.bias", Group::AdapterC, &a.down);
            lin(&mut out, "adapter_critic.up.weight", "adapter_critic.up.bias", Group::AdapterC, &a.up);
        }
        out
    }

    /// Mutable view in the same order as [`PolicyNet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::with_capacity(18);
        let [c1, c2, c3] = &mut self.conv;
        for (c, (wn, bn)) in [c1, c2, c3].into_iter().zip([
            ("fe.conv1.weight", "fe.conv1.bias"),
            ("fe.conv2.weight", "fe.conv2.bias"),
            ("fe.conv3.weight", "fe.conv3.bias"),
        ]) {
            out.push(TensorMut { name: wn, group: Group::Fe, data: &mut c.w });
            out.push(TensorMut { name: bn, group: Group::Fe, data: &mut c.b });
        }
        fn lin<'a>(out: &mut Vec<TensorMut<'a>>, names: (&'static str, &'static str), group: Group, l: &'a mut Linear) {
            out.push(TensorMut { name: names.0, group, data: &mut l.w });
            out.push(TensorMut { name: names.1, group, data: &mut l.b });
        }
        lin(&mut out, ("fc.weight", "fc.bias"), Group::Fc, &mut self.fc);
        lin(&mut out, ("actor.weight", "actor.bias"), Group::Actor, &mut self.actor);
        lin(&mut out, ("critic.weight", "critic.bias"), Group::Critic, &mut self.critic);
        if let Some(a) = &mut self.adapter_v1 {
            lin(&mut out, ("adapter_v1.down.weight", "adapter_v1.down.bias"), Group::AdapterV1, &mut a.down);
            lin(&mut out, ("adapter_v1.up.weight", "adapter_v1.up.bias"), Group::AdapterV1, &mut a.up);
        }
        if let Some(a) = &mut self.adapter_actor {
            lin(&mut out, ("adapter_actor.down.weight", "adapter_actor.down.bias"), Group::AdapterA, &mut a.down);
            lin(&mut out, ("adapter_actor.up.weight", "adapter_actor.up.bias"), Group::AdapterA, &mut a.up);
        }
        if let Some(a) = &mut self.adapter_critic {
            lin(&mut out, ("adapter_critic.down.weight", "adapter_critic.down.bias"), Group::AdapterC, &mut a.down);
            lin(&mut out, ("adapter_critic.up.weight", "adapter_critic.up.bias"), Group::AdapterC, &mut a.up);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn check_state(&self, state: &State) -> Result<(), PolicyError> {
        if state.planes.len() != self.arch.plane_len() || state.scalars.len() != self.arch.n_scalars {
            return Err(PolicyError::ShapeMismatch {
                expected: (self.arch.plane_len(), self.arch.n_scalars),
                actual: (state.planes.len(), state.scalars.len()),
            });
        }
        Ok(())
    }

    /// On/off state of every ReLU for `state`. Finite-difference checks use it
    /// to skip perturbations that cross a kink.
    pub fn activation_pattern(&self, state: &State) -> Result<Vec<bool>, PolicyError> {
        self.check_state(state)?;
        let tr = self.forward_trace(state);
        let adapters = [&tr.v1, &tr.aa, &tr.ac];
        Ok(tr
            .acts
            .iter()
            .flatten()
            .chain(&tr.h)
            .chain(adapters.into_iter().flatten().flat_map(|t| &t.mid))
            .map(|&v| v > 0.0)
            .collect())
    }

    /// Unmasked forward pass keeping every intermediate for backward.
    pub(crate) fn forward_trace(&self, state: &State) -> Trace {
        let sides = self.arch.conv_sides();
        let mut side = self.arch.input_size;
        let mut x = state.planes.clone();
        let mut acts: [Vec<f64>; 3] = Default::default();
        for (k, conv) in self.conv.iter().enumerate() {
            let mut y = conv.forward(&x, side);
            relu(&mut y);
            acts[k] = y.clone();
            x = y;
            side = sides[k];
        }
        let mut flat = x;
        flat.extend_from_slice(&state.scalars);
        let mut h = self.fc.forward(&flat);
        relu(&mut h);
        let (h1, v1) = match &self.adapter_v1 {
            Some(a) => {
                let (y, t) = a.forward(&h);
                (y, Some(t))
            }
            None => (h.clone(), None),
        };
        let (ha, aa) = match &self.adapter_actor {
            Some(a) => {
                let (y, t) = a.forward(&h1);
                (y, Some(t))
            }
            None => (h1.clone(), None),
        };
        let (hc, ac) = match &self.adapter_critic {
            Some(a) => {
                let (y, t) = a.forward(&h1);
                (y, Some(t))
            }
            None => (h1.clone(), None),
        };
        let logits = self.actor.forward(&ha);
        let value = self.critic.forward(&hc)[0];
        Trace {
            input: state.planes.clone(),
            acts,
            flat,
            h,
            v1,
            h1,
            aa,
            ha,
            ac,
            hc,
            logits,
            value,
        }
    }

    /// Backpropagates `dlogits`/`dvalue` into `g`, stopping at `depth`.
    pub(crate) fn backward(&self, tr: &Trace, dlogits: &[f64], dvalue: f64, g: &mut PolicyNet, depth: Depth) {
        let dha = self.actor.backward(&tr.ha, dlogits, &mut g.actor, true).unwrap();
        let dhc = self.critic.backward(&tr.hc, &[dvalue], &mut g.critic, true).unwrap();
        let dh1_a = match (&self.adapter_actor, &tr.aa) {
            (Some(a), Some(t)) => a.backward(&tr.h1, t, &dha, g.adapter_actor.as_mut().unwrap()),
            _ => dha,
        };
        let dh1_c = match (&self.adapter_critic, &tr.ac) {
            (Some(a), Some(t)) => a.backward(&tr.h1, t, &dhc, g.adapter_critic.as_mut().unwrap()),
            _ => dhc,
        };
        if depth == Depth::Heads {
            return;
        }
        let dh1: Vec<f64> = dh1_a.iter().zip(&dh1_c).map(|(a, b)| a + b).collect();
        let mut dh = match (&self.adapter_v1, &tr.v1) {
            (Some(a), Some(t)) => a.backward(&tr.h, t, &dh1, g.adapter_v1.as_mut().unwrap()),
            _ => dh1,
        };
        if depth == Depth::AdapterV1 {
            return;
        }
        relu_grad(&mut dh, &tr.h);
        let want_fe = depth == Depth::Extractor;
        let dflat = self.fc.backward(&tr.flat, &dh, &mut g.fc, want_fe);
        let Some(dflat) = dflat else { return };

        let sides = self.arch.conv_sides();
        let n_conv_out = dflat.len() - self.arch.n_scalars;
        let mut d = dflat[..n_conv_out].to_vec();
        for k in (0..3).rev() {
            relu_grad(&mut d, &tr.acts[k]);
            let (x, side) = if k == 0 {
                (&tr.input, self.arch.input_size)
            } else {
                (&tr.acts[k - 1], sides[k - 1])
            };
            let [g0, g1, g2] = &mut g.conv;
            let gk = [g0, g1, g2].into_iter().nth(k).unwrap();
            match self.conv[k].backward(x, side, &d, gk, k > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}
