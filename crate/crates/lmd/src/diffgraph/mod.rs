//! Minimal reverse-mode gradient engine over the fixed op set the attack and
//! mask-training pipelines need: STFT, mask product, iSTFT, filterbank
//! features, log, normalization, convolution/affine layers, nonlinearities,
//! and cosine similarity.
//!
//! Tapes are eager and single-use: forward values are computed when an op is
//! recorded, `backward` walks the nodes in reverse accumulating gradients
//! additively at fan-out.

mod basis;
mod check;

pub use basis::StftBasis;
pub use check::grad_check;

use std::sync::Arc;

use thiserror::Error;

use crate::dsp::DspError;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced by op {index} ({kind})")]
    NonFinite { index: usize, kind: &'static str },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward seed must be scalar, output has {0} elements")]
    NonScalarOutput(usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Constant matrix applied by `matmul_const` (e.g. the fixed mel filterbank).
#[derive(Debug, Clone)]
pub struct ConstMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ConstMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        ConstMatrix { rows, cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Abs(VarId),
    Relu(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Log(VarId),
    Sum(VarId),
    Dot(VarId, VarId),
    MatMulConst { m: Arc<ConstMatrix>, x: VarId, t_cols: usize },
    Stft { x: VarId, basis: Arc<StftBasis>, source_length: usize },
    Istft { x: VarId, basis: Arc<StftBasis>, t_frames: usize },
    PowerSpec(VarId),
    /// Mask of shape [F,T] (broadcast over both planes) or [2,F,T].
    MaskApply { spec: VarId, mask: VarId, broadcast: bool },
    Cmvn { x: VarId, eps: f64 },
    Conv1d { x: VarId, w: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, b: VarId },
    MeanLast(VarId),
    Affine { x: VarId, w: VarId, b: VarId },
    L2Normalize(VarId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::MatMulConst { .. } => "matmul_const",
            Op::Stft { .. } => "stft",
            Op::Istft { .. } => "istft",
            Op::PowerSpec(..) => "power_spec",
            Op::MaskApply { .. } => "mask_apply",
            Op::Cmvn { .. } => "cmvn",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanLast(..) => "mean_last",
            Op::Affine { .. } => "affine",
            Op::L2Normalize(..) => "l2_normalize",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by `VarId`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a variable; zero tensor shape if never reached.
    pub fn wrt(&self, v: VarId) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const CMVN_VAR_FLOOR: f64 = 1e-8;
const L2_NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<VarId, DiffError> {
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { index: self.nodes.len(), kind: op.kind() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<VarId, DiffError> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<VarId, DiffError> {
        self.push(value, Op::Constant, false)
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<(), DiffError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(DiffError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| c * x).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| x + c).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| x.abs()).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Sigmoid(a), rg)
    }

    /// Natural log; inputs must already be floored above zero.
    pub fn log(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let data = self.value(a).data.iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let s = self.value(a).data.iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, DiffError> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Dot(a, b), rg)
    }

    /// y = M · x for a fixed matrix and x of shape [cols] or [cols, T].
    pub fn matmul_const(&mut self, m: Arc<ConstMatrix>, x: VarId) -> Result<VarId, DiffError> {
        let xv = self.value(x);
        let (n, t_cols) = match xv.shape.len() {
            1 => (xv.shape[0], 1),
            2 => (xv.shape[0], xv.shape[1]),
            _ => {
                return Err(DiffError::Shape {
                    op: "matmul_const",
                    detail: format!("rank {} input", xv.shape.len()),
                })
            }
        };
        if n != m.cols {
            return Err(DiffError::Shape {
                op: "matmul_const",
                detail: format!("matrix cols {} vs input rows {n}", m.cols),
            });
        }
        let mut out = vec![0.0; m.rows * t_cols];
        for r in 0..m.rows {
            let mrow = &m.data[r * m.cols..(r + 1) * m.cols];
            for c in 0..n {
                let a = mrow[c];
                if a == 0.0 {
                    continue;
                }
                let xrow = &xv.data[c * t_cols..(c + 1) * t_cols];
                let orow = &mut out[r * t_cols..(r + 1) * t_cols];
                for t in 0..t_cols {
                    orow[t] += a * xrow[t];
                }
            }
        }
        let shape = if xv.shape.len() == 1 { vec![m.rows] } else { vec![m.rows, t_cols] };
        let rg = self.needs(x);
        self.push(Tensor::new(shape, out), Op::MatMulConst { m, x, t_cols }, rg)
    }

    /// Waveform [L] → complex spectrogram [2, F, T].
    pub fn stft(&mut self, x: VarId, basis: Arc<StftBasis>) -> Result<VarId, DiffError> {
        let xv = self.value(x);
        if xv.shape.len() != 1 {
            return Err(DiffError::Shape { op: "stft", detail: format!("rank {}", xv.shape.len()) });
        }
        let source_length = xv.shape[0];
        let (re, im) = basis.forward_stft(&xv.data)?;
        let f = basis.n_bins();
        let t = basis.n_frames(source_length);
        let mut data = re;
        data.extend(im);
        let rg = self.needs(x);
        self.push(
            Tensor::new(vec![2, f, t], data),
            Op::Stft { x, basis, source_length },
            rg,
        )
    }

    /// Complex spectrogram [2, F, T] → waveform [target_len].
    pub fn istft(
        &mut self,
        x: VarId,
        basis: Arc<StftBasis>,
        target_len: usize,
    ) -> Result<VarId, DiffError> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || xv.shape[0] != 2 || xv.shape[1] != basis.n_bins() {
            return Err(DiffError::Shape {
                op: "istft",
                detail: format!("shape {:?}", xv.shape),
            });
        }
        let t_frames = xv.shape[2];
        let plane = xv.shape[1] * t_frames;
        let out = basis.forward_istft(&xv.data[..plane], &xv.data[plane..], t_frames, target_len)?;
        let rg = self.needs(x);
        self.push(Tensor::vector(out), Op::Istft { x, basis, t_frames }, rg)
    }

    /// [2, F, T] → per-bin power re² + im², shape [F, T].
    pub fn power_spec(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let av = self.value(a);
        if av.shape.len() != 3 || av.shape[0] != 2 {
            return Err(DiffError::Shape {
                op: "power_spec",
                detail: format!("shape {:?}", av.shape),
            });
        }
        let plane = av.shape[1] * av.shape[2];
        let data = (0..plane)
            .map(|i| av.data[i] * av.data[i] + av.data[plane + i] * av.data[plane + i])
            .collect();
        let shape = vec![av.shape[1], av.shape[2]];
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::PowerSpec(a), rg)
    }

    /// Elementwise mask product: spec [2, F, T] with mask [F, T] (both planes)
    /// or [2, F, T] (plane-wise).
    pub fn mask_apply(&mut self, spec: VarId, mask: VarId) -> Result<VarId, DiffError> {
        let sv = self.value(spec);
        let mv = self.value(mask);
        if sv.shape.len() != 3 || sv.shape[0] != 2 {
            return Err(DiffError::Shape {
                op: "mask_apply",
                detail: format!("spec shape {:?}", sv.shape),
            });
        }
        let broadcast = match mv.shape.len() {
            2 if mv.shape == sv.shape[1..] => true,
            3 if mv.shape == sv.shape => false,
            _ => {
                return Err(DiffError::Shape {
                    op: "mask_apply",
                    detail: format!("mask {:?} vs spec {:?}", mv.shape, sv.shape),
                })
            }
        };
        let plane = sv.shape[1] * sv.shape[2];
        let mut data = Vec::with_capacity(2 * plane);
        for p in 0..2 {
            for i in 0..plane {
                let m = if broadcast { mv.data[i] } else { mv.data[p * plane + i] };
                data.push(m * sv.data[p * plane + i]);
            }
        }
        let shape = sv.shape.clone();
        let rg = self.needs(spec) || self.needs(mask);
        self.push(Tensor::new(shape, data), Op::MaskApply { spec, mask, broadcast }, rg)
    }

    /// Per-row mean/variance normalization of an [C, T] matrix, differentiated
    /// exactly (the mean and variance depend on the input).
    pub fn cmvn(&mut self, x: VarId) -> Result<VarId, DiffError> {
        let xv = self.value(x);
        if xv.shape.len() != 2 {
            return Err(DiffError::Shape { op: "cmvn", detail: format!("shape {:?}", xv.shape) });
        }
        let (c, t) = (xv.shape[0], xv.shape[1]);
        let mut data = vec![0.0; c * t];
        for r in 0..c {
            let row = &xv.data[r * t..(r + 1) * t];
            let mean = row.iter().sum::<f64>() / t as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
            let s = (var + CMVN_VAR_FLOOR).sqrt();
            for i in 0..t {
                data[r * t + i] = (row[i] - mean) / s;
            }
        }
        let rg = self.needs(x);
        self.push(Tensor::new(vec![c, t], data), Op::Cmvn { x, eps: CMVN_VAR_FLOOR }, rg)
    }

    /// Same-padded 1-D convolution over the time axis.
    /// x: [Cin, T], w: [Cout, Cin, K] (K odd), b: [Cout] → [Cout, T].
    pub fn conv1d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (xs, ws, bs) =
            (self.value(x).shape.clone(), self.value(w).shape.clone(), self.value(b).shape.clone());
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0]
            || ws[2] % 2 == 0
        {
            return Err(DiffError::Shape {
                op: "conv1d",
                detail: format!("x {xs:?} w {ws:?} b {bs:?}"),
            });
        }
        let (cin, t) = (xs[0], xs[1]);
        let (cout, k) = (ws[0], ws[2]);
        let half = k / 2;
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; cout * t];
        for co in 0..cout {
            let orow = &mut out[co * t..(co + 1) * t];
            orow.fill(bd[co]);
            for ci in 0..cin {
                let xrow = &xd[ci * t..(ci + 1) * t];
                for kk in 0..k {
                    let wv = wd[(co * cin + ci) * k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let off = kk as isize - half as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (t as isize - off).min(t as isize) as usize;
                    for i in lo..hi {
                        orow[i] += wv * xrow[(i as isize + off) as usize];
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![cout, t], out), Op::Conv1d { x, w, b }, rg)
    }

    /// Same-padded 2-D convolution over the (F, T) grid.
    /// x: [Cin, F, T], w: [Cout, Cin, KH, KW] (odd kernel), b: [Cout].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (xs, ws, bs) =
            (self.value(x).shape.clone(), self.value(w).shape.clone(), self.value(b).shape.clone());
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0]
            || ws[2] % 2 == 0 || ws[3] % 2 == 0
        {
            return Err(DiffError::Shape {
                op: "conv2d",
                detail: format!("x {xs:?} w {ws:?} b {bs:?}"),
            });
        }
        let (cin, h, t) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (hh, hw) = (kh as isize / 2, kw as isize / 2);
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; cout * h * t];
        for co in 0..cout {
            let oplane = &mut out[co * h * t..(co + 1) * h * t];
            oplane.fill(bd[co]);
            for ci in 0..cin {
                let xplane = &xd[ci * h * t..(ci + 1) * h * t];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - hh;
                        let dx = kx as isize - hw;
                        let y_lo = (-dy).max(0) as usize;
                        let y_hi = (h as isize - dy).min(h as isize) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (t as isize - dx).min(t as isize) as usize;
                        for y in y_lo..y_hi {
                            let src = ((y as isize + dy) as usize) * t;
                            let dst = y * t;
                            for xx in x_lo..x_hi {
                                oplane[dst + xx] += wv * xplane[src + (xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![cout, h, t], out), Op::Conv2d { x, w, b }, rg)
    }

    /// Temporal average pooling: [C, T] → [C].
    pub fn mean_last(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let av = self.value(a);
        if av.shape.len() != 2 {
            return Err(DiffError::Shape {
                op: "mean_last",
                detail: format!("shape {:?}", av.shape),
            });
        }
        let (c, t) = (av.shape[0], av.shape[1]);
        let data = (0..c)
            .map(|r| av.data[r * t..(r + 1) * t].iter().sum::<f64>() / t as f64)
            .collect();
        let rg = self.needs(a);
        self.push(Tensor::new(vec![c], data), Op::MeanLast(a), rg)
    }

    /// y = W·x + b with x [n], W [m, n], b [m].
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, DiffError> {
        let (xs, ws, bs) =
            (self.value(x).shape.clone(), self.value(w).shape.clone(), self.value(b).shape.clone());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(DiffError::Shape {
                op: "affine",
                detail: format!("x {xs:?} w {ws:?} b {bs:?}"),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let data = (0..m)
            .map(|r| {
                bd[r] + wd[r * n..(r + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![m], data), Op::Affine { x, w, b }, rg)
    }

    /// x / max(‖x‖₂, floor).
    pub fn l2_normalize(&mut self, a: VarId) -> Result<VarId, DiffError> {
        let av = self.value(a);
        let norm = av.data.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
        let data = av.data.iter().map(|v| v / norm).collect();
        let shape = av.shape.clone();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, data), Op::L2Normalize(a), rg)
    }

    /// Reverse pass from a scalar output with seed gradient `seed`.
    pub fn backward_with_seed(&self, output: VarId, seed: f64) -> Result<Gradients, DiffError> {
        if self.value(output).len() != 1 {
            return Err(DiffError::NonScalarOutput(self.value(output).len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![seed]);
        for idx in (0..=output.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn backward(&self, output: VarId) -> Result<Gradients, DiffError> {
        self.backward_with_seed(output, 1.0)
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], v: VarId, contrib: impl Fn(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += c * g[i];
                    }
                });
            }
            Op::AddScalar(a) => {
                self.add_grad(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Abs(a) => {
                let av = &self.nodes[a.0].value.data;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        // Subgradient 0 at the kink.
                        ga[i] += g[i] * if av[i] > 0.0 { 1.0 } else if av[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value.data;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &node.value.data;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value.data;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value.data;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.add_grad(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Dot(a, b) => {
                let s = g[0];
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += s * bv[i];
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += s * av[i];
                    }
                });
            }
            Op::MatMulConst { m, x, t_cols } => {
                let t_cols = *t_cols;
                self.add_grad(grads, *x, |gx| {
                    for r in 0..m.rows {
                        let mrow = &m.data[r * m.cols..(r + 1) * m.cols];
                        let grow = &g[r * t_cols..(r + 1) * t_cols];
                        for c in 0..m.cols {
                            let a = mrow[c];
                            if a == 0.0 {
                                continue;
                            }
                            let gxrow = &mut gx[c * t_cols..(c + 1) * t_cols];
                            for t in 0..t_cols {
                                gxrow[t] += a * grow[t];
                            }
                        }
                    }
                });
            }
            Op::Stft { x, basis, source_length } => {
                let plane = node.value.len() / 2;
                let gx = basis.adjoint_stft(&g[..plane], &g[plane..], *source_length);
                self.add_grad(grads, *x, |gv| {
                    for i in 0..gv.len() {
                        gv[i] += gx[i];
                    }
                });
            }
            Op::Istft { x, basis, t_frames } => {
                let (gr, gi) = basis.adjoint_istft(g, *t_frames);
                self.add_grad(grads, *x, |gv| {
                    let plane = gv.len() / 2;
                    for i in 0..plane {
                        gv[i] += gr[i];
                        gv[plane + i] += gi[i];
                    }
                });
            }
            Op::PowerSpec(a) => {
                let av = &self.nodes[a.0].value.data;
                let plane = av.len() / 2;
                self.add_grad(grads, *a, |ga| {
                    for i in 0..plane {
                        ga[i] += 2.0 * av[i] * g[i];
                        ga[plane + i] += 2.0 * av[plane + i] * g[i];
                    }
                });
            }
            Op::MaskApply { spec, mask, broadcast } => {
                let sv = &self.nodes[spec.0].value.data;
                let mv = &self.nodes[mask.0].value.data;
                let plane = sv.len() / 2;
                let broadcast = *broadcast;
                self.add_grad(grads, *spec, |gs| {
                    for p in 0..2 {
                        for i in 0..plane {
                            let m = if broadcast { mv[i] } else { mv[p * plane + i] };
                            gs[p * plane + i] += m * g[p * plane + i];
                        }
                    }
                });
                self.add_grad(grads, *mask, |gm| {
                    if broadcast {
                        for i in 0..plane {
                            gm[i] += sv[i] * g[i] + sv[plane + i] * g[plane + i];
                        }
                    } else {
                        for i in 0..2 * plane {
                            gm[i] += sv[i] * g[i];
                        }
                    }
                });
            }
            Op::Cmvn { x, eps } => {
                let xv = &self.nodes[x.0].value.data;
                let yv = &node.value.data;
                let t = node.value.shape[1];
                let c = node.value.shape[0];
                let eps = *eps;
                self.add_grad(grads, *x, |gx| {
                    for r in 0..c {
                        let row = &xv[r * t..(r + 1) * t];
                        let yrow = &yv[r * t..(r + 1) * t];
                        let grow = &g[r * t..(r + 1) * t];
                        let mean = row.iter().sum::<f64>() / t as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
                        let s = (var + eps).sqrt();
                        let gm = grow.iter().sum::<f64>() / t as f64;
                        let gy: f64 =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / t as f64;
                        for i in 0..t {
                            gx[r * t + i] += (grow[i] - gm - yrow[i] * gy) / s;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let ws = &self.nodes[w.0].value.shape;
                let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                let t = self.nodes[x.0].value.shape[1];
                let half = k / 2;
                self.add_grad(grads, *x, |gx| {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let gxrow = &mut gx[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let w0 = wv[(co * cin + ci) * k + kk];
                                if w0 == 0.0 {
                                    continue;
                                }
                                let off = kk as isize - half as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (t as isize - off).min(t as isize) as usize;
                                for i in lo..hi {
                                    gxrow[(i as isize + off) as usize] += w0 * grow[i];
                                }
                            }
                        }
                    }
                });
                self.add_grad(grads, *w, |gw| {
                    for co in 0..cout {
                        let grow = &g[co * t..(co + 1) * t];
                        for ci in 0..cin {
                            let xrow = &xv[ci * t..(ci + 1) * t];
                            for kk in 0..k {
                                let off = kk as isize - half as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = (t as isize - off).min(t as isize) as usize;
                                let mut acc = 0.0;
                                for i in lo..hi {
                                    acc += grow[i] * xrow[(i as isize + off) as usize];
                                }
                                gw[(co * cin + ci) * k + kk] += acc;
                            }
                        }
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for co in 0..cout {
                        gb[co] += g[co * t..(co + 1) * t].iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let ws = &self.nodes[w.0].value.shape;
                let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let h = self.nodes[x.0].value.shape[1];
                let t = self.nodes[x.0].value.shape[2];
                let (hh, hw) = (kh as isize / 2, kw as isize / 2);
                self.add_grad(grads, *x, |gx| {
                    for co in 0..cout {
                        let gplane = &g[co * h * t..(co + 1) * h * t];
                        for ci in 0..cin {
                            let gxplane = &mut gx[ci * h * t..(ci + 1) * h * t];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let w0 = wv[((co * cin + ci) * kh + ky) * kw + kx];
                                    if w0 == 0.0 {
                                        continue;
                                    }
                                    let dy = ky as isize - hh;
                                    let dx = kx as isize - hw;
                                    let y_lo = (-dy).max(0) as usize;
                                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                                    let x_lo = (-dx).max(0) as usize;
                                    let x_hi = (t as isize - dx).min(t as isize) as usize;
                                    for y in y_lo..y_hi {
                                        let src = ((y as isize + dy) as usize) * t;
                                        let dst = y * t;
                                        for xx in x_lo..x_hi {
                                            gxplane[src + (xx as isize + dx) as usize] +=
                                                w0 * gplane[dst + xx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.add_grad(grads, *w, |gw| {
                    for co in 0..cout {
                        let gplane = &g[co * h * t..(co + 1) * h * t];
                        for ci in 0..cin {
                            let xplane = &xv[ci * h * t..(ci + 1) * h * t];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let dy = ky as isize - hh;
                                    let dx = kx as isize - hw;
                                    let y_lo = (-dy).max(0) as usize;
                                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                                    let x_lo = (-dx).max(0) as usize;
                                    let x_hi = (t as isize - dx).min(t as isize) as usize;
                                    let mut acc = 0.0;
                                    for y in y_lo..y_hi {
                                        let src = ((y as isize + dy) as usize) * t;
                                        let dst = y * t;
                                        for xx in x_lo..x_hi {
                                            acc += gplane[dst + xx]
                                                * xplane[src + (xx as isize + dx) as usize];
                                        }
                                    }
                                    gw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                                }
                            }
                        }
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for co in 0..cout {
                        gb[co] += g[co * h * t..(co + 1) * h * t].iter().sum::<f64>();
                    }
                });
            }
            Op::MeanLast(a) => {
                let t = self.nodes[a.0].value.shape[1];
                let inv = 1.0 / t as f64;
                self.add_grad(grads, *a, |ga| {
                    for (r, &gr) in g.iter().enumerate() {
                        for i in 0..t {
                            ga[r * t + i] += gr * inv;
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[x.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let n = xv.len();
                self.add_grad(grads, *x, |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let wrow = &wv[r * n..(r + 1) * n];
                        for i in 0..n {
                            gx[i] += gr * wrow[i];
                        }
                    }
                });
                self.add_grad(grads, *w, |gw| {
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let gwrow = &mut gw[r * n..(r + 1) * n];
                        for i in 0..n {
                            gwrow[i] += gr * xv[i];
                        }
                    }
                });
                self.add_grad(grads, *b, |gb| {
                    for (r, &gr) in g.iter().enumerate() {
                        gb[r] += gr;
                    }
                });
            }
            Op::L2Normalize(a) => {
                let xv = &self.nodes[a.0].value.data;
                let yv = &node.value.data;
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
                let ydotg: f64 = yv.iter().zip(g).map(|(a, b)| a * b).sum();
                self.add_grad(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += (g[i] - yv[i] * ydotg) / norm;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
