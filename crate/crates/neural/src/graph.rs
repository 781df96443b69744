//! Reverse-mode automatic differentiation over rank-3 feature maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::kernels::{self, sigmoid, ConvGeom};
use crate::params::{ParamId, ParameterStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    Subband { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize, band: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cin: usize },
    Norm { x: Var, gamma: Var, beta: Var, inv_std: Vec<T>, normed: Vec<T> },
    Swish { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, indices: Vec<usize>, width: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Crop { x: Var },
    Pad { x: Var },
    Mixing { e: Var, x: Var, channels: usize, mics: usize },
    L1 { a: Var, b: Var, modulus: bool },
    Dot { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    label: String,
}

/// Forward tape; every op records what its backward pass needs.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
    scope: String,
    check_finite: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

pub const NORM_EPS: f64 = 1e-5;

fn shape_err(msg: String) -> NnError {
    NnError::Format(msg)
}

impl<T: Real> Graph<T> {
    /// `train` enables dropout, drawing masks from `rng`.
    pub fn new(train: bool, rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            rng,
            scope: String::new(),
            check_finite: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Prefix for the labels of subsequently created nodes.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    /// Disables the per-op finiteness check.
    pub fn unchecked(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Conv { x, w, b, .. } | Op::Subband { x, w, b, .. } | Op::ConvT { x, w, b, .. } => {
                self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b))
            }
            Op::Norm { x, gamma, beta, .. } => self.needs(*x) || self.needs(*gamma) || self.needs(*beta),
            Op::Swish { x } | Op::Dropout { x, .. } | Op::Crop { x } | Op::Pad { x } => self.needs(*x),
            Op::Embedding { table, .. } => self.needs(*table),
            Op::Mul { a, b } | Op::Add { a, b } | Op::L1 { a, b, .. } | Op::Dot { a, b } => self.needs(*a) || self.needs(*b),
            Op::Concat { parts } => parts.iter().any(|p| self.needs(*p)),
            Op::Mixing { e, x, .. } => self.needs(*e) || self.needs(*x),
        };
        let label = if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.scope)
        };
        if self.check_finite && !matches!(op, Op::Input | Op::Param(_)) && !value.is_finite() {
            return Err(NnError::NonFinite { layer: label });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
            label: "input".into(),
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted (for gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let v = self.input(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
            label: store.name(id).to_string(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 3 {
            return Err(shape_err(format!("{what} must be [channels, height, width], got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn check_bias(&self, b: Option<Var>, want: &[usize]) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != want {
                return Err(shape_err(format!("bias {:?}, expected {want:?}", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Dense 2-D convolution. `w` is `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (c, h, wd) = self.dims3(x, "conv input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c {
            return Err(shape_err(format!("conv weight {ws:?} for {c} input channels")));
        }
        let cout = ws[0];
        self.check_bias(b, &[cout])?;
        let geom = ConvGeom::new(c, h, wd, [ws[2], ws[3]], stride, pad)
            .ok_or_else(|| shape_err(format!("kernel {ws:?} larger than padded input {h}×{wd}")))?;
        let y = kernels::conv_forward(
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
            cout,
        );
        let value = Tensor::from_vec(&[cout, geom.ho, geom.wo], y)?;
        self.push(value, Op::Conv { x, w, b, geom, cout }, "conv")
    }

    /// Stride-1, same-padded convolution with separate weights per band of
    /// `band` rows. `w` is `[bands, cout, cin, kh, kw]`, `b` is `[bands, cout]`.
    pub fn subband_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, band: usize) -> Result<Var> {
        let (c, h, wd) = self.dims3(x, "sub-band conv input")?;
        let ws = self.shape(w).to_vec();
        if band == 0 || h % band != 0 {
            return Err(shape_err(format!("height {h} is not a multiple of the sub-band size {band}")));
        }
        if ws.len() != 5 || ws[0] != h / band || ws[2] != c || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
            return Err(shape_err(format!(
                "sub-band weight {ws:?} for {} bands of {c} channels",
                h / band
            )));
        }
        let cout = ws[1];
        self.check_bias(b, &[ws[0], cout])?;
        let geom = ConvGeom::new(c, h, wd, [ws[3], ws[4]], [1, 1], [ws[3] / 2, ws[4] / 2])
            .ok_or_else(|| shape_err("sub-band kernel larger than input".into()))?;
        let y = kernels::subband_forward(
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
            cout,
            band,
        );
        let value = Tensor::from_vec(&[cout, h, wd], y)?;
        self.push(value, Op::Subband { x, w, b, geom, cout, band }, "subband_conv")
    }

    /// Transposed convolution. `w` is `[cin, cout, kh, kw]`; the output has
    /// size `(in − 1)·stride − 2·pad + k + out_pad` per axis.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 2],
        pad: [usize; 2],
        out_pad: [usize; 2],
    ) -> Result<Var> {
        let (cin, h, wd) = self.dims3(x, "transposed conv input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != cin {
            return Err(shape_err(format!("transposed conv weight {ws:?} for {cin} input channels")));
        }
        if out_pad[0] >= stride[0] || out_pad[1] >= stride[1] {
            return Err(shape_err("output padding must be smaller than the stride".into()));
        }
        let cout = ws[1];
        self.check_bias(b, &[cout])?;
        let ho = ((h - 1) * stride[0] + ws[2] + out_pad[0])
            .checked_sub(2 * pad[0])
            .ok_or_else(|| shape_err("padding exceeds output".into()))?;
        let wo = ((wd - 1) * stride[1] + ws[3] + out_pad[1])
            .checked_sub(2 * pad[1])
            .ok_or_else(|| shape_err("padding exceeds output".into()))?;
        let geom = ConvGeom::new(cout, ho, wo, [ws[2], ws[3]], stride, pad)
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| shape_err("inconsistent transposed conv geometry".into()))?;
        let y = kernels::conv_t_forward(
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
            cin,
        );
        let value = Tensor::from_vec(&[cout, ho, wo], y)?;
        self.push(value, Op::ConvT { x, w, b, geom, cin }, "conv_transpose")
    }

    /// Per-channel normalization over the spatial axes with affine `gamma`, `beta`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "normalization input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("normalization parameters for {c} channels")));
        }
        let plane = h * w;
        let xs = &self.value(x).data;
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut normed = vec![T::zero(); c * plane];
        let mut inv_std = vec![T::zero(); c];
        let mut y = vec![T::zero(); c * plane];
        let n = plane as f64;
        for ch in 0..c {
            let s = &xs[ch * plane..(ch + 1) * plane];
            let mean = s.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = s.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = T::of(inv);
            let (m, iv) = (T::of(mean), T::of(inv));
            for i in 0..plane {
                let nv = (s[i] - m) * iv;
                normed[ch * plane + i] = nv;
                y[ch * plane + i] = g[ch] * nv + bt[ch];
            }
        }
        let value = Tensor::from_vec(&[c, h, w], y)?;
        self.push(value, Op::Norm { x, gamma, beta, inv_std, normed }, "channel_norm")
    }

    /// `x·σ(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish { x }, "swish")
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_vec(&xv.shape.clone(), data)?;
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Looks up one row of `table` (`[vocab, height]`) per index and repeats
    /// it `width` times: `[indices, height, width]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], width: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err(format!("embedding table must be [vocab, height], got {ts:?}")));
        }
        let (vocab, h) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(NnError::Input(format!("embedding index {bad} outside 0..{vocab}")));
        }
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(indices.len() * h * width);
        for &i in indices {
            for r in 0..h {
                let v = tv[i * h + r];
                data.extend(std::iter::repeat(v).take(width));
            }
        }
        let value = Tensor::from_vec(&[indices.len(), h, width], data)?;
        self.push(
            value,
            Op::Embedding { table, indices: indices.to_vec(), width },
            "embedding",
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise product")?;
        let av = self.value(a);
        let data = av.data.iter().zip(&self.value(b).data).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(&av.shape.clone(), data)?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sum")?;
        let av = self.value(a);
        let data = av.data.iter().zip(&self.value(b).data).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(&av.shape.clone(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("nothing to concatenate".into()))?;
        let (_, h, w) = self.dims3(*first, "concat input")?;
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pc, ph, pw) = self.dims3(*p, "concat input")?;
            if (ph, pw) != (h, w) {
                return Err(shape_err(format!("concat of {h}×{w} with {ph}×{pw}")));
            }
            c += pc;
            data.extend_from_slice(&self.value(*p).data);
        }
        let value = Tensor::from_vec(&[c, h, w], data)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, "concat")
    }

    /// Keeps the leading `h×w` corner.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, xh, xw) = self.dims3(x, "crop input")?;
        if h > xh || w > xw {
            return Err(shape_err(format!("cannot crop {xh}×{xw} to {h}×{w}")));
        }
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                let s = (ch * xh + r) * xw;
                data.extend_from_slice(&xv[s..s + w]);
            }
        }
        let value = Tensor::from_vec(&[c, h, w], data)?;
        self.push(value, Op::Crop { x }, "crop")
    }

    /// Zero-pads at the trailing edges up to `h×w`.
    pub fn pad(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, xh, xw) = self.dims3(x, "pad input")?;
        if h < xh || w < xw {
            return Err(shape_err(format!("cannot pad {xh}×{xw} to {h}×{w}")));
        }
        let xv = &self.value(x).data;
        let mut data = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for r in 0..xh {
                let s = (ch * xh + r) * xw;
                let d = (ch * h + r) * w;
                data[d..d + xw].copy_from_slice(&xv[s..s + xw]);
            }
        }
        let value = Tensor::from_vec(&[c, h, w], data)?;
        self.push(value, Op::Pad { x }, "pad")
    }

    /// Per-tile complex matrix product `b̂ = E·x`.
    ///
    /// `x` is `[2Q, F, T]` with real parts in channels `0..Q` and imaginary
    /// parts in `Q..2Q`; `e` is `[2CQ, F, T]` with the real part of entry
    /// `(c, q)` at channel `c·Q + q` and its imaginary part at `CQ + c·Q + q`.
    /// The result is `[2C, F, T]`, real parts first.
    pub fn apply_mixing(&mut self, e: Var, x: Var, channels: usize) -> Result<Var> {
        let (xc, f, t) = self.dims3(x, "mixing input")?;
        let (ec, ef, et) = self.dims3(e, "mixing matrix")?;
        if xc % 2 != 0 || (ef, et) != (f, t) || ec != channels * xc {
            return Err(shape_err(format!(
                "mixing matrix [{ec}, {ef}, {et}] does not fit input [{xc}, {f}, {t}] and {channels} outputs"
            )));
        }
        let q = xc / 2;
        let plane = f * t;
        let ev = &self.value(e).data;
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); 2 * channels * plane];
        let cq = channels * q;
        for c in 0..channels {
            let (re_out, im_out) = out.split_at_mut(channels * plane);
            let br = &mut re_out[c * plane..(c + 1) * plane];
            let bi = &mut im_out[c * plane..(c + 1) * plane];
            for m in 0..q {
                let er = &ev[(c * q + m) * plane..(c * q + m + 1) * plane];
                let ei = &ev[(cq + c * q + m) * plane..(cq + c * q + m + 1) * plane];
                let xr = &xv[m * plane..(m + 1) * plane];
                let xi = &xv[(q + m) * plane..(q + m + 1) * plane];
                for i in 0..plane {
                    br[i] += er[i] * xr[i] - ei[i] * xi[i];
                    bi[i] += er[i] * xi[i] + ei[i] * xr[i];
                }
            }
        }
        let value = Tensor::from_vec(&[2 * channels, f, t], out)?;
        self.push(value, Op::Mixing { e, x, channels, mics: q }, "apply_mixing")
    }

    /// Mean over complex entries of `|Re(a−b)| + |Im(a−b)|`, or of the
    /// complex modulus `|a−b|` when `modulus` is set. Inputs use the
    /// real-first channel layout of [`Graph::apply_mixing`].
    pub fn complex_l1(&mut self, a: Var, b: Var, modulus: bool) -> Result<Var> {
        self.same_shape(a, b, "loss operands")?;
        let (c2, f, t) = self.dims3(a, "loss operand")?;
        if c2 % 2 != 0 {
            return Err(shape_err(format!("{c2} channels do not split into real and imaginary parts")));
        }
        let half = c2 / 2 * f * t;
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut acc = 0.0f64;
        for i in 0..half {
            let dr = (av[i] - bv[i]).f64();
            let di = (av[half + i] - bv[half + i]).f64();
            acc += if modulus { dr.hypot(di) } else { dr.abs() + di.abs() };
        }
        let loss = if half == 0 { 0.0 } else { acc / half as f64 };
        self.push(Tensor::from_vec(&[1], vec![T::of(loss)])?, Op::L1 { a, b, modulus }, "complex_l1")
    }

    /// `Σ a·b` as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot product")?;
        let s: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x.f64() * y.f64())
            .sum();
        self.push(Tensor::from_vec(&[1], vec![T::of(s)])?, Op::Dot { a, b }, "dot")
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("loss must be a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let dy = match &node.op {
                Op::Input | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &dy, &mut grads);
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn zeros_for(&self, v: Var) -> Option<Tensor<T>> {
        self.needs(v).then(|| Tensor::zeros(self.shape(v)))
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geom, cout } => {
                let mut dx = self.zeros_for(*x);
                let mut dw = self.zeros_for(*w);
                let mut db = b.and_then(|b| self.zeros_for(b));
                kernels::conv_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    geom,
                    *cout,
                    &dy.data,
                    dx.as_mut().map(|t| t.data.as_mut_slice()),
                    dw.as_mut().map(|t| t.data.as_mut_slice()),
                    db.as_mut().map(|t| t.data.as_mut_slice()),
                );
                self.scatter(grads, &[(Some(*x), dx), (Some(*w), dw), (*b, db)]);
            }
            Op::Subband { x, w, b, geom, cout, band } => {
                let mut dx = self.zeros_for(*x);
                let mut dw = self.zeros_for(*w);
                let mut db = b.and_then(|b| self.zeros_for(b));
                kernels::subband_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    geom,
                    *cout,
                    *band,
                    &dy.data,
                    dx.as_mut().map(|t| t.data.as_mut_slice()),
                    dw.as_mut().map(|t| t.data.as_mut_slice()),
                    db.as_mut().map(|t| t.data.as_mut_slice()),
                );
                self.scatter(grads, &[(Some(*x), dx), (Some(*w), dw), (*b, db)]);
            }
            Op::ConvT { x, w, b, geom, cin } => {
                let mut dx = self.zeros_for(*x);
                let mut dw = self.zeros_for(*w);
                let mut db = b.and_then(|b| self.zeros_for(b));
                kernels::conv_t_backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    geom,
                    *cin,
                    &dy.data,
                    dx.as_mut().map(|t| t.data.as_mut_slice()),
                    dw.as_mut().map(|t| t.data.as_mut_slice()),
                    db.as_mut().map(|t| t.data.as_mut_slice()),
                );
                self.scatter(grads, &[(Some(*x), dx), (Some(*w), dw), (*b, db)]);
            }
            Op::Norm { x, gamma, beta, inv_std, normed } => {
                let (c, h, w) = self.value(*x).dims3();
                let plane = h * w;
                let g = &self.value(*gamma).data;
                let mut dx = self.zeros_for(*x);
                let mut dg = self.zeros_for(*gamma);
                let mut db = self.zeros_for(*beta);
                let n = T::of(plane as f64);
                for ch in 0..c {
                    let d = &dy.data[ch * plane..(ch + 1) * plane];
                    let xh = &normed[ch * plane..(ch + 1) * plane];
                    let sum_d: T = d.iter().copied().sum();
                    let sum_dx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    if let Some(dg) = &mut dg {
                        dg.data[ch] += sum_dx;
                    }
                    if let Some(db) = &mut db {
                        db.data[ch] += sum_d;
                    }
                    if let Some(dx) = &mut dx {
                        let k = g[ch] * inv_std[ch] / n;
                        let out = &mut dx.data[ch * plane..(ch + 1) * plane];
                        for i in 0..plane {
                            out[i] = k * (n * d[i] - sum_d - xh[i] * sum_dx);
                        }
                    }
                }
                self.scatter(grads, &[(Some(*x), dx), (Some(*gamma), dg), (Some(*beta), db)]);
            }
            Op::Swish { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &d)| {
                        let s = sigmoid(v);
                        d * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Dropout { x, mask } => {
                let data = dy.data.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, Tensor { shape: dy.shape.clone(), data });
            }
            Op::Embedding { table, indices, width } => {
                let ts = self.shape(*table).to_vec();
                let h = ts[1];
                let mut dt = Tensor::zeros(&ts);
                for (k, &i) in indices.iter().enumerate() {
                    for r in 0..h {
                        let s = (k * h + r) * width;
                        dt.data[i * h + r] += dy.data[s..s + width].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let data = dy.data.iter().zip(&bv.data).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, *a, Tensor { shape: av.shape.clone(), data });
                }
                if self.needs(*b) {
                    let data = dy.data.iter().zip(&av.data).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, *b, Tensor { shape: bv.shape.clone(), data });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        let t = Tensor {
                            shape: self.shape(*p).to_vec(),
                            data: dy.data[off..off + n].to_vec(),
                        };
                        self.accumulate(grads, *p, t);
                    }
                    off += n;
                }
            }
            Op::Crop { x } => {
                let (c, xh, xw) = self.value(*x).dims3();
                let (_, h, w) = dy.dims3();
                let mut dx = Tensor::zeros(&[c, xh, xw]);
                for ch in 0..c {
                    for r in 0..h {
                        let s = (ch * h + r) * w;
                        let d = (ch * xh + r) * xw;
                        dx.data[d..d + w].copy_from_slice(&dy.data[s..s + w]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Pad { x } => {
                let (c, xh, xw) = self.value(*x).dims3();
                let (_, h, w) = dy.dims3();
                let mut dx = Tensor::zeros(&[c, xh, xw]);
                for ch in 0..c {
                    for r in 0..xh {
                        let s = (ch * h + r) * w;
                        let d = (ch * xh + r) * xw;
                        dx.data[d..d + xw].copy_from_slice(&dy.data[s..s + xw]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mixing { e, x, channels, mics } => {
                let (c, q) = (*channels, *mics);
                let ev = self.value(*e);
                let xv = self.value(*x);
                let (_, f, t) = xv.dims3();
                let plane = f * t;
                let cq = c * q;
                let mut de = self.zeros_for(*e);
                let mut dx = self.zeros_for(*x);
                for ci in 0..c {
                    let dbr = &dy.data[ci * plane..(ci + 1) * plane];
                    let dbi = &dy.data[(c + ci) * plane..(c + ci + 1) * plane];
                    for m in 0..q {
                        let (re_i, im_i) = (ci * q + m, cq + ci * q + m);
                        let xr = &xv.data[m * plane..(m + 1) * plane];
                        let xi = &xv.data[(q + m) * plane..(q + m + 1) * plane];
                        if let Some(de) = &mut de {
                            for i in 0..plane {
                                de.data[re_i * plane + i] += dbr[i] * xr[i] + dbi[i] * xi[i];
                                de.data[im_i * plane + i] += dbi[i] * xr[i] - dbr[i] * xi[i];
                            }
                        }
                        if let Some(dx) = &mut dx {
                            let er = &ev.data[re_i * plane..(re_i + 1) * plane];
                            let ei = &ev.data[im_i * plane..(im_i + 1) * plane];
                            for i in 0..plane {
                                dx.data[m * plane + i] += dbr[i] * er[i] + dbi[i] * ei[i];
                                dx.data[(q + m) * plane + i] += dbi[i] * er[i] - dbr[i] * ei[i];
                            }
                        }
                    }
                }
                self.scatter(grads, &[(Some(*e), de), (Some(*x), dx)]);
            }
            Op::Dot { a, b } => {
                let d = dy.data[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let t = Tensor { shape: av.shape.clone(), data: bv.data.iter().map(|&y| d * y).collect() };
                    self.accumulate(grads, *a, t);
                }
                if self.needs(*b) {
                    let t = Tensor { shape: bv.shape.clone(), data: av.data.iter().map(|&x| d * x).collect() };
                    self.accumulate(grads, *b, t);
                }
            }
            Op::L1 { a, b, modulus } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let half = av.len() / 2;
                let scale = dy.data[0] / T::of(half.max(1) as f64);
                let mut ga = vec![T::zero(); av.len()];
                let sign = |v: T| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                for i in 0..half {
                    let dr = av.data[i] - bv.data[i];
                    let di = av.data[half + i] - bv.data[half + i];
                    if *modulus {
                        let m = dr.hypot(di);
                        if m > T::zero() {
                            ga[i] = scale * dr / m;
                            ga[half + i] = scale * di / m;
                        }
                    } else {
                        ga[i] = scale * sign(dr);
                        ga[half + i] = scale * sign(di);
                    }
                }
                if self.needs(*b) {
                    let gb = ga.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor { shape: bv.shape.clone(), data: gb });
                }
                self.accumulate(grads, *a, Tensor { shape: av.shape.clone(), data: ga });
            }
        }
    }

    fn scatter(&self, grads: &mut [Option<Tensor<T>>], items: &[(Option<Var>, Option<Tensor<T>>)]) {
        for (v, g) in items {
            if let (Some(v), Some(g)) = (v, g) {
                self.accumulate(grads, *v, g.clone());
            }
        }
    }

    /// Gradients of every parameter leaf, summed per parameter.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParameterStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.by_node[i].as_ref()) {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
