//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op is a method on [`Tape`]; executing it records a
//! node holding whatever the backward pass needs. [`Tape::backward`] visits
//! nodes in exact reverse execution order and accumulates gradients
//! additively at fan-out.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensorcore::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMethod {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Live-bytes counter for training-memory measurement. Tracks every tensor
/// and gradient buffer a tape allocates; `peak` is the high-water mark.
#[derive(Debug, Default, Clone)]
pub struct MemCounter {
    pub current_bytes: usize,
    pub peak_bytes: usize,
}

impl MemCounter {
    fn add(&mut self, elems: usize) {
        self.current_bytes += elems * 8;
        if self.current_bytes > self.peak_bytes {
            self.peak_bytes = self.current_bytes;
        }
    }

    fn release(&mut self, elems: usize) {
        self.current_bytes = self.current_bytes.saturating_sub(elems * 8);
    }
}

pub type SharedMemCounter = Rc<RefCell<MemCounter>>;

enum Op {
    Leaf {
        trainable: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Reshape(Var),
    SliceLast {
        x: Var,
        from: usize,
        to: usize,
    },
    ConcatLast(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    PixelShuffle {
        x: Var,
        s: usize,
    },
    PixelUnshuffle {
        x: Var,
        s: usize,
    },
    Pool2d {
        x: Var,
        ku: usize,
        kv: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Interp {
        x: Var,
        taps_y: Vec<Vec<(usize, f64)>>,
        taps_x: Vec<Vec<(usize, f64)>>,
    },
    FocalLoss {
        logits: Var,
        target: Tensor,
        gamma: f64,
        alpha: f64,
    },
    LiftSplat {
        feat: Var,
        logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        weights: Vec<f64>,
    },
}

struct Node {
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    mem: Option<SharedMemCounter>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Grads {
    /// Gradient buffer for `var`; zeros if nothing flowed into it (including
    /// frozen leaves).
    pub fn of(&self, var: Var) -> Vec<f64> {
        match &self.g[var.0] {
            Some(v) => v.clone(),
            None => vec![0.0; self.lens[var.0]],
        }
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(mem) = &self.mem {
            let total: usize = self.vals.iter().map(Tensor::len).sum();
            mem.borrow_mut().release(total);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), vals: Vec::new(), mem: None }
    }

    pub fn with_tracker(mem: SharedMemCounter) -> Self {
        Tape { nodes: Vec::new(), vals: Vec::new(), mem: Some(mem) }
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        if let Some(mem) = &self.mem {
            mem.borrow_mut().add(value.len());
        }
        self.nodes.push(Node { op });
        self.vals.push(value);
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter leaf.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(Op::Leaf { trainable }, value)
    }

    /// Non-trainable leaf (model inputs, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape("mul: shape mismatch".into()));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.vals[a.0].data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data).unwrap();
        self.push(Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.vals[a.0].data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data).unwrap();
        self.push(Op::Relu(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.vals[a.0].data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.vals[a.0].reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.vals[a.0].dims2()?;
        let (k2, n) = self.vals[b.0].dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: ({m},{k}) x ({k2},{n})")));
        }
        let av = self.vals[a.0].data();
        let bv = self.vals[b.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let br = &bv[p * n..(p + 1) * n];
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += x * br[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].dims2()?;
        let av = self.vals[a.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), t))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.vals[a.0].dims2()?;
        let av = self.vals[a.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::SoftmaxRows(a), t))
    }

    /// Slice along the last dimension: keeps indices `from..to`.
    pub fn slice_last(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.vals[a.0].shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::Shape("slice on rank-0".into()))?;
        if from >= to || to > c {
            return Err(Error::Shape(format!("slice_last {from}..{to} of {c}")));
        }
        let rows = self.vals[a.0].len() / c;
        let width = to - from;
        let av = self.vals[a.0].data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&av[r * c + from..r * c + to]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = width;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(Op::SliceLast { x: a, from, to }, t))
    }

    /// Concatenate along the last dimension; leading dimensions must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.vals[a.0].shape().to_vec();
        let sb = self.vals[b.0].shape().to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat_last: {sa:?} vs {sb:?}")));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows = self.vals[a.0].len() / ca;
        let av = self.vals[a.0].data();
        let bv = self.vals[b.0].data();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut new_shape = sa;
        *new_shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(Op::ConcatLast(a, b), t))
    }

    /// Cross-correlation with weight layout (kh, kw, c_in, c_out).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, wid, cin) = self.vals[x.0].dims3()?;
        let ws = self.vals[w.0].shape();
        if ws.len() != 4 || ws[2] != cin {
            return Err(Error::Shape(format!(
                "conv2d: weights {ws:?} vs input channels {cin}"
            )));
        }
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wid}+{pad}"
            )));
        }
        if let Some(bv) = b {
            if self.vals[bv.0].shape() != [cout] {
                return Err(Error::Shape("conv2d: bias shape".into()));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let xv = self.vals[x.0].data();
        let wv = self.vals[w.0].data();
        let mut out = match b {
            Some(bv) => {
                let bd = self.vals[bv.0].data().to_vec();
                let mut o = vec![0.0; ho * wo * cout];
                for p in 0..ho * wo {
                    o[p * cout..(p + 1) * cout].copy_from_slice(&bd);
                }
                o
            }
            None => vec![0.0; ho * wo * cout],
        };
        for yo in 0..ho {
            for xo in 0..wo {
                let orow = (yo * wo + xo) * cout;
                for dy in 0..kh {
                    let yi = yo * stride + dy;
                    if yi < pad || yi - pad >= h {
                        continue;
                    }
                    let yi = yi - pad;
                    for dx in 0..kw {
                        let xi = xo * stride + dx;
                        if xi < pad || xi - pad >= wid {
                            continue;
                        }
                        let xi = xi - pad;
                        let xrow = (yi * wid + xi) * cin;
                        let wrow = ((dy * kw + dx) * cin) * cout;
                        for ci in 0..cin {
                            let xval = xv[xrow + ci];
                            if xval == 0.0 {
                                continue;
                            }
                            let wr = &wv[wrow + ci * cout..wrow + (ci + 1) * cout];
                            let or = &mut out[orow..orow + cout];
                            for co in 0..cout {
                                or[co] += xval * wr[co];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, t))
    }

    /// Transposed convolution (gradient-of-conv semantics), weight layout
    /// (kh, kw, c_in, c_out). Output dims: (H-1)*stride + kh.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (h, wid, cin) = self.vals[x.0].dims3()?;
        let ws = self.vals[w.0].shape();
        if ws.len() != 4 || ws[2] != cin {
            return Err(Error::Shape(format!(
                "conv_transpose2d: weights {ws:?} vs input channels {cin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv_transpose2d: stride must be >= 1".into()));
        }
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (wid - 1) * stride + kw;
        let xv = self.vals[x.0].data();
        let wv = self.vals[w.0].data();
        let mut out = vec![0.0; ho * wo * cout];
        for yi in 0..h {
            for xi in 0..wid {
                let xrow = (yi * wid + xi) * cin;
                for dy in 0..kh {
                    let yo = yi * stride + dy;
                    for dx in 0..kw {
                        let xo = xi * stride + dx;
                        let orow = (yo * wo + xo) * cout;
                        let wrow = ((dy * kw + dx) * cin) * cout;
                        for ci in 0..cin {
                            let xval = xv[xrow + ci];
                            if xval == 0.0 {
                                continue;
                            }
                            let wr = &wv[wrow + ci * cout..wrow + (ci + 1) * cout];
                            let or = &mut out[orow..orow + cout];
                            for co in 0..cout {
                                or[co] += xval * wr[co];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(Op::ConvT2d { x, w, stride }, t))
    }

    /// Sub-pixel rearrangement (h, w, s^2*C) -> (s*h, s*w, C) with
    /// out[y, x, c] = in[y/s, x/s, c*s^2 + (y%s)*s + (x%s)].
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let (h, w, c) = self.vals[x.0].dims3()?;
        if s == 0 || c % (s * s) != 0 {
            return Err(Error::Shape(format!(
                "pixel_shuffle: channels {c} not divisible by s^2 = {}",
                s * s
            )));
        }
        let cout = c / (s * s);
        let xv = self.vals[x.0].data();
        let mut out = vec![0.0; h * s * w * s * cout];
        let (ho, wo) = (h * s, w * s);
        for y in 0..ho {
            for xx in 0..wo {
                let (yi, dy) = (y / s, y % s);
                let (xi, dx) = (xx / s, xx % s);
                let irow = (yi * w + xi) * c;
                let orow = (y * wo + xx) * cout;
                for co in 0..cout {
                    out[orow + co] = xv[irow + co * s * s + dy * s + dx];
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(Op::PixelShuffle { x, s }, t))
    }

    /// Exact inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let (h, w, c) = self.vals[x.0].dims3()?;
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "pixel_unshuffle: dims {h}x{w} not divisible by {s}"
            )));
        }
        let (ho, wo, cout) = (h / s, w / s, c * s * s);
        let xv = self.vals[x.0].data();
        let mut out = vec![0.0; ho * wo * cout];
        for y in 0..h {
            for xx in 0..w {
                let (yo, dy) = (y / s, y % s);
                let (xo, dx) = (xx / s, xx % s);
                let irow = (y * w + xx) * c;
                let orow = (yo * wo + xo) * cout;
                for ci in 0..c {
                    out[orow + ci * s * s + dy * s + dx] = xv[irow + ci];
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, cout], out)?;
        Ok(self.push(Op::PixelUnshuffle { x, s }, t))
    }

    /// Non-overlapping pooling with stride = kernel size.
    pub fn pool2d(&mut self, x: Var, ku: usize, kv: usize, mode: PoolMode) -> Result<Var> {
        let (h, w, c) = self.vals[x.0].dims3()?;
        if ku == 0 || kv == 0 || h % kv != 0 || w % ku != 0 {
            return Err(Error::Shape(format!(
                "pool2d: dims {h}x{w} not divisible by kernel {ku}x{kv}"
            )));
        }
        let (ho, wo) = (h / kv, w / ku);
        let xv = self.vals[x.0].data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0usize; ho * wo * c];
        }
        for yo in 0..ho {
            for xo in 0..wo {
                for ch in 0..c {
                    let oi = (yo * wo + xo) * c + ch;
                    match mode {
                        PoolMode::Average => {
                            let mut acc = 0.0;
                            for dy in 0..kv {
                                for dx in 0..ku {
                                    acc += xv[((yo * kv + dy) * w + xo * ku + dx) * c + ch];
                                }
                            }
                            out[oi] = acc / (ku * kv) as f64;
                        }
                        PoolMode::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0usize;
                            for dy in 0..kv {
                                for dx in 0..ku {
                                    let ii = ((yo * kv + dy) * w + xo * ku + dx) * c + ch;
                                    if xv[ii] > best {
                                        best = xv[ii];
                                        best_i = ii;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_i;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.push(Op::Pool2d { x, ku, kv, mode, argmax }, t))
    }

    /// Fixed (non-learnable) upsampling by integer factor `s`, differentiable
    /// in `x`. Align-corners=false: source coordinate (dst + 0.5)/s - 0.5,
    /// Keys a = -0.75 bicubic, clamped edges.
    pub fn interp_upsample(&mut self, x: Var, s: usize, method: InterpMethod) -> Result<Var> {
        let (h, w, c) = self.vals[x.0].dims3()?;
        if s == 0 {
            return Err(Error::Shape("interp_upsample: s must be >= 1".into()));
        }
        let taps_y = interp_taps(h, s, method);
        let taps_x = interp_taps(w, s, method);
        let (ho, wo) = (h * s, w * s);
        let xv = self.vals[x.0].data();
        let mut out = vec![0.0; ho * wo * c];
        for yd in 0..ho {
            for xd in 0..wo {
                let orow = (yd * wo + xd) * c;
                for &(iy, wy) in &taps_y[yd] {
                    for &(ix, wx) in &taps_x[xd] {
                        let irow = (iy * w + ix) * c;
                        let weight = wy * wx;
                        for ch in 0..c {
                            out[orow + ch] += weight * xv[irow + ch];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.push(Op::Interp { x, taps_y, taps_x }, t))
    }

    /// Mean sigmoid focal loss against a binary target tensor.
    pub fn sigmoid_focal_loss(
        &mut self,
        logits: Var,
        target: &Tensor,
        gamma: f64,
        alpha: f64,
    ) -> Result<Var> {
        if self.vals[logits.0].shape() != target.shape() {
            return Err(Error::Shape(format!(
                "focal loss: logits {:?} vs target {:?}",
                self.vals[logits.0].shape(),
                target.shape()
            )));
        }
        let lv = self.vals[logits.0].data();
        let tv = target.data();
        let n = lv.len() as f64;
        let mut total = 0.0;
        for (&l, &t) in lv.iter().zip(tv) {
            let p = sigmoid(l);
            let (log_p, log_1mp) = (-softplus(-l), -softplus(l));
            let elem = if t >= 0.5 {
                -alpha * (1.0 - p).powf(gamma) * log_p
            } else {
                -(1.0 - alpha) * p.powf(gamma) * log_1mp
            };
            total += elem;
        }
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Numeric("focal loss is not finite".into()));
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            Op::FocalLoss { logits, target: target.clone(), gamma, alpha },
            t,
        ))
    }

    /// Depth-weighted scatter of image-plane features into a BEV grid.
    ///
    /// `feat` is (Hf, Wf, C), `depth_logits` is (Hf, Wf, B). For each image
    /// cell the depth logits are softmaxed and each bin's weighted feature is
    /// sum-accumulated into the BEV cell given by `targets[pixel * B + bin]`
    /// (None = dropped, outside the scope).
    pub fn lift_splat(
        &mut self,
        feat: Var,
        depth_logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        out_grid: (usize, usize),
    ) -> Result<Var> {
        let (hf, wf, c) = self.vals[feat.0].dims3()?;
        let (h2, w2, bins) = self.vals[depth_logits.0].dims3()?;
        if hf != h2 || wf != w2 {
            return Err(Error::Shape(format!(
                "lift_splat: feature grid {hf}x{wf} vs depth grid {h2}x{w2}"
            )));
        }
        if targets.len() != hf * wf * bins {
            return Err(Error::Shape("lift_splat: target table size".into()));
        }
        let (d, w) = out_grid;
        let n_cells = d * w;
        let fv = self.vals[feat.0].data();
        let lv = self.vals[depth_logits.0].data();
        let mut weights = vec![0.0; hf * wf * bins];
        let mut out = vec![0.0; n_cells * c];
        for p in 0..hf * wf {
            let row = &lv[p * bins..(p + 1) * bins];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for b in 0..bins {
                let e = (row[b] - mx).exp();
                weights[p * bins + b] = e;
                z += e;
            }
            for b in 0..bins {
                weights[p * bins + b] /= z;
            }
            for b in 0..bins {
                if let Some(cell) = targets[p * bins + b] {
                    let wgt = weights[p * bins + b];
                    let frow = &fv[p * c..(p + 1) * c];
                    let orow = &mut out[cell * c..(cell + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wgt * frow[ch];
                    }
                }
            }
        }
        let t = Tensor::new(vec![d, w, c], out)?;
        Ok(self.push(Op::LiftSplat { feat, logits: depth_logits, targets, weights }, t))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Usage("backward: loss must be a scalar on this tape".into()));
        }
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        let lens: Vec<usize> = self.vals.iter().map(Tensor::len).collect();
        g[loss.0] = Some(vec![1.0]);
        if let Some(mem) = &self.mem {
            mem.borrow_mut().add(1);
        }
        for i in (0..=loss.0).rev() {
            let gout = match g[i].take() {
                Some(v) => v,
                None => continue,
            };
            self.backward_node(i, &gout, &mut g)?;
            g[i] = Some(gout);
        }
        Ok(Grads { g, lens })
    }

    fn acc(&self, g: &mut [Option<Vec<f64>>], var: Var, contrib: &[f64]) {
        // Frozen leaves receive no gradient at all.
        if let Op::Leaf { trainable: false } = self.nodes[var.0].op {
            return;
        }
        match &mut g[var.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => {
                if let Some(mem) = &self.mem {
                    mem.borrow_mut().add(contrib.len());
                }
                g[var.0] = Some(contrib.to_vec());
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(g, *a, gout);
                self.acc(g, *b, gout);
            }
            Op::Mul(a, b) => {
                let av = self.vals[a.0].data();
                let bv = self.vals[b.0].data();
                let da: Vec<f64> = gout.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = gout.iter().zip(av).map(|(x, y)| x * y).collect();
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gout.iter().map(|x| x * c).collect();
                self.acc(g, *a, &da);
            }
            Op::Relu(a) => {
                let av = self.vals[a.0].data();
                let da: Vec<f64> = gout
                    .iter()
                    .zip(av)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(g, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![gout[0]; self.vals[a.0].len()];
                self.acc(g, *a, &da);
            }
            Op::Reshape(a) => {
                self.acc(g, *a, gout);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.vals[a.0].dims2()?;
                let (_, n) = self.vals[b.0].dims2()?;
                let av = self.vals[a.0].data();
                let bv = self.vals[b.0].data();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        let br = &bv[p * n..(p + 1) * n];
                        let gr = &gout[i2 * n..(i2 + 1) * n];
                        for j in 0..n {
                            acc += gr[j] * br[j];
                        }
                        da[i2 * k + p] = acc;
                        let x = av[i2 * k + p];
                        if x != 0.0 {
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbr[j] += x * gr[j];
                            }
                        }
                    }
                }
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = self.vals[a.0].dims2()?;
                let mut da = vec![0.0; m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        da[i2 * n + j] = gout[j * m + i2];
                    }
                }
                self.acc(g, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.vals[i].dims2()?;
                let sv = self.vals[i].data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let srow = &sv[r * n..(r + 1) * n];
                    let grow = &gout[r * n..(r + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gg)| s * gg).sum();
                    for j in 0..n {
                        da[r * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.acc(g, *a, &da);
            }
            Op::SliceLast { x, from, to } => {
                let shape = self.vals[x.0].shape();
                let c = *shape.last().unwrap();
                let rows = self.vals[x.0].len() / c;
                let width = to - from;
                let mut da = vec![0.0; self.vals[x.0].len()];
                for r in 0..rows {
                    da[r * c + from..r * c + to]
                        .copy_from_slice(&gout[r * width..(r + 1) * width]);
                }
                self.acc(g, *x, &da);
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.vals[a.0].shape().last().unwrap();
                let cb = *self.vals[b.0].shape().last().unwrap();
                let rows = self.vals[a.0].len() / ca;
                let mut da = vec![0.0; rows * ca];
                let mut db = vec![0.0; rows * cb];
                let ct = ca + cb;
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&gout[r * ct..r * ct + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&gout[r * ct + ca..(r + 1) * ct]);
                }
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (h, wid, cin) = self.vals[x.0].dims3()?;
                let ws = self.vals[w.0].shape();
                let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo, _) = self.vals[i].dims3()?;
                let xv = self.vals[x.0].data();
                let wv = self.vals[w.0].data();
                let mut dx = vec![0.0; h * wid * cin];
                let mut dw = vec![0.0; kh * kw * cin * cout];
                for yo in 0..ho {
                    for xo in 0..wo {
                        let grow = &gout[(yo * wo + xo) * cout..(yo * wo + xo + 1) * cout];
                        for dy in 0..kh {
                            let yi = yo * stride + dy;
                            if yi < *pad || yi - pad >= h {
                                continue;
                            }
                            let yi = yi - pad;
                            for dxk in 0..kw {
                                let xi = xo * stride + dxk;
                                if xi < *pad || xi - pad >= wid {
                                    continue;
                                }
                                let xi = xi - pad;
                                let xrow = (yi * wid + xi) * cin;
                                let wrow = ((dy * kw + dxk) * cin) * cout;
                                for ci in 0..cin {
                                    let wr = &wv[wrow + ci * cout..wrow + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += grow[co] * wr[co];
                                    }
                                    dx[xrow + ci] += acc;
                                    let xval = xv[xrow + ci];
                                    if xval != 0.0 {
                                        let dwr =
                                            &mut dw[wrow + ci * cout..wrow + (ci + 1) * cout];
                                        for co in 0..cout {
                                            dwr[co] += xval * grow[co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(g, *x, &dx);
                self.acc(g, *w, &dw);
                if let Some(bv) = b {
                    let mut db = vec![0.0; cout];
                    for p in 0..ho * wo {
                        for co in 0..cout {
                            db[co] += gout[p * cout + co];
                        }
                    }
                    self.acc(g, *bv, &db);
                }
            }
            Op::ConvT2d { x, w, stride } => {
                let (h, wid, cin) = self.vals[x.0].dims3()?;
                let ws = self.vals[w.0].shape();
                let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
                let (_, wo, _) = self.vals[i].dims3()?;
                let xv = self.vals[x.0].data();
                let wv = self.vals[w.0].data();
                let mut dx = vec![0.0; h * wid * cin];
                let mut dw = vec![0.0; kh * kw * cin * cout];
                for yi in 0..h {
                    for xi in 0..wid {
                        let xrow = (yi * wid + xi) * cin;
                        for dy in 0..kh {
                            let yo = yi * stride + dy;
                            for dxk in 0..kw {
                                let xo = xi * stride + dxk;
                                let grow = &gout[(yo * wo + xo) * cout..(yo * wo + xo + 1) * cout];
                                let wrow = ((dy * kw + dxk) * cin) * cout;
                                for ci in 0..cin {
                                    let wr = &wv[wrow + ci * cout..wrow + (ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += grow[co] * wr[co];
                                    }
                                    dx[xrow + ci] += acc;
                                    let xval = xv[xrow + ci];
                                    if xval != 0.0 {
                                        let dwr =
                                            &mut dw[wrow + ci * cout..wrow + (ci + 1) * cout];
                                        for co in 0..cout {
                                            dwr[co] += xval * grow[co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(g, *x, &dx);
                self.acc(g, *w, &dw);
            }
            Op::PixelShuffle { x, s } => {
                let (h, w, c) = self.vals[x.0].dims3()?;
                let cout = c / (s * s);
                let wo = w * s;
                let mut dx = vec![0.0; h * w * c];
                for y in 0..h * s {
                    for xx in 0..wo {
                        let (yi, dy) = (y / s, y % s);
                        let (xi, dxk) = (xx / s, xx % s);
                        let irow = (yi * w + xi) * c;
                        let orow = (y * wo + xx) * cout;
                        for co in 0..cout {
                            dx[irow + co * s * s + dy * s + dxk] = gout[orow + co];
                        }
                    }
                }
                self.acc(g, *x, &dx);
            }
            Op::PixelUnshuffle { x, s } => {
                let (h, w, c) = self.vals[x.0].dims3()?;
                let wo = w / s;
                let cout = c * s * s;
                let mut dx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let (yo, dy) = (y / s, y % s);
                        let (xo, dxk) = (xx / s, xx % s);
                        let irow = (y * w + xx) * c;
                        let orow = (yo * wo + xo) * cout;
                        for ci in 0..c {
                            dx[irow + ci] = gout[orow + ci * s * s + dy * s + dxk];
                        }
                    }
                }
                self.acc(g, *x, &dx);
            }
            Op::Pool2d { x, ku, kv, mode, argmax } => {
                let (h, w, c) = self.vals[x.0].dims3()?;
                let (ho, wo) = (h / kv, w / ku);
                let mut dx = vec![0.0; h * w * c];
                match mode {
                    PoolMode::Max => {
                        for (oi, &ii) in argmax.iter().enumerate() {
                            dx[ii] += gout[oi];
                        }
                    }
                    PoolMode::Average => {
                        let inv = 1.0 / (ku * kv) as f64;
                        for yo in 0..ho {
                            for xo in 0..wo {
                                for ch in 0..c {
                                    let gv = gout[(yo * wo + xo) * c + ch] * inv;
                                    for dy in 0..*kv {
                                        for dxk in 0..*ku {
                                            dx[((yo * kv + dy) * w + xo * ku + dxk) * c + ch] +=
                                                gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(g, *x, &dx);
            }
            Op::Interp { x, taps_y, taps_x } => {
                let (h, w, c) = self.vals[x.0].dims3()?;
                let wo = taps_x.len();
                let mut dx = vec![0.0; h * w * c];
                for (yd, ty) in taps_y.iter().enumerate() {
                    for (xd, tx) in taps_x.iter().enumerate() {
                        let orow = (yd * wo + xd) * c;
                        for &(iy, wy) in ty {
                            for &(ix, wx) in tx {
                                let irow = (iy * w + ix) * c;
                                let weight = wy * wx;
                                for ch in 0..c {
                                    dx[irow + ch] += weight * gout[orow + ch];
                                }
                            }
                        }
                    }
                }
                self.acc(g, *x, &dx);
            }
            Op::FocalLoss { logits, target, gamma, alpha } => {
                let lv = self.vals[logits.0].data();
                let tv = target.data();
                let n = lv.len() as f64;
                let scale = gout[0] / n;
                let mut dl = vec![0.0; lv.len()];
                for (idx, (&l, &t)) in lv.iter().zip(tv).enumerate() {
                    let p = sigmoid(l);
                    let (log_p, log_1mp) = (-softplus(-l), -softplus(l));
                    dl[idx] = if t >= 0.5 {
                        alpha * (1.0 - p).powf(*gamma) * (gamma * p * log_p - (1.0 - p))
                    } else {
                        -(1.0 - alpha) * p.powf(*gamma) * (gamma * (1.0 - p) * log_1mp - p)
                    } * scale;
                }
                self.acc(g, *logits, &dl);
            }
            Op::LiftSplat { feat, logits, targets, weights } => {
                let (hf, wf, c) = self.vals[feat.0].dims3()?;
                let (_, _, bins) = self.vals[logits.0].dims3()?;
                let fv = self.vals[feat.0].data();
                let mut dfeat = vec![0.0; hf * wf * c];
                let mut dlog = vec![0.0; hf * wf * bins];
                for p in 0..hf * wf {
                    // a_b = <feat, gout[target cell]>; dropped bins contribute 0.
                    let mut a = vec![0.0; bins];
                    for b in 0..bins {
                        if let Some(cell) = targets[p * bins + b] {
                            let grow = &gout[cell * c..(cell + 1) * c];
                            let wgt = weights[p * bins + b];
                            let frow = &fv[p * c..(p + 1) * c];
                            let drow = &mut dfeat[p * c..(p + 1) * c];
                            let mut dot = 0.0;
                            for ch in 0..c {
                                drow[ch] += wgt * grow[ch];
                                dot += frow[ch] * grow[ch];
                            }
                            a[b] = dot;
                        }
                    }
                    let mean: f64 =
                        (0..bins).map(|b| weights[p * bins + b] * a[b]).sum();
                    for b in 0..bins {
                        dlog[p * bins + b] = weights[p * bins + b] * (a[b] - mean);
                    }
                }
                self.acc(g, *feat, &dfeat);
                self.acc(g, *logits, &dlog);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Keys cubic kernel with a = -0.75.
fn keys_cubic(d: f64) -> f64 {
    const A: f64 = -0.75;
    let d = d.abs();
    if d <= 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}

fn interp_taps(n: usize, s: usize, method: InterpMethod) -> Vec<Vec<(usize, f64)>> {
    let clamp = |i: i64| -> usize { i.clamp(0, n as i64 - 1) as usize };
    (0..n * s)
        .map(|dst| {
            match method {
                // Integer-factor nearest is exact block replication.
                InterpMethod::Nearest => vec![(dst / s, 1.0)],
                InterpMethod::Bilinear => {
                    let src = (dst as f64 + 0.5) / s as f64 - 0.5;
                    let i0 = src.floor();
                    let f = src - i0;
                    let i0 = i0 as i64;
                    vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
                }
                InterpMethod::Bicubic => {
                    let src = (dst as f64 + 0.5) / s as f64 - 0.5;
                    let i0 = src.floor() as i64;
                    (-1..3)
                        .map(|k| {
                            let idx = i0 + k;
                            (clamp(idx), keys_cubic(src - idx as f64))
                        })
                        .collect()
                }
            }
        })
        .collect()
}
