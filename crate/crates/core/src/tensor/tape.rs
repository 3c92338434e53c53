use super::{check_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for a zero-padded 3×3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// "Same" padding: output is `ceil(H / stride) × ceil(W / stride)`.
    pub fn new(
        batch: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let out_height = height.div_ceil(stride);
        let out_width = width.div_ceil(stride);
        let pad_h = ((out_height - 1) * stride + 3).saturating_sub(height);
        let pad_w = ((out_width - 1) * stride + 3).saturating_sub(width);
        ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            stride,
            out_height,
            out_width,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * 9
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Columns between consecutive output rows in the patch matrix.
    ///
    /// Stride 1 works on a grid padded to `W + 2` columns, so every patch row
    /// of a sample is one contiguous copy out of a padded input plane. The
    /// two extra columns per row are computed and thrown away.
    fn pitch(&self) -> usize {
        if self.stride == 1 {
            self.width + 2
        } else {
            self.out_width
        }
    }

    /// Patch-matrix columns per sample.
    fn sample_columns(&self) -> usize {
        self.out_height * self.pitch()
    }

    fn padded_plane(&self) -> usize {
        (self.height + 2) * (self.width + 2)
    }

    /// Scratch length for [`Self::im2col`] and [`Self::col2im`] on `samples` samples.
    fn scratch_len(&self, samples: usize) -> usize {
        if self.stride == 1 {
            samples * self.in_channels * self.padded_plane() + 2
        } else {
            0
        }
    }

    /// Samples per chunk so a chunk's patch matrix stays cache-sized.
    fn chunk_samples(&self) -> usize {
        const TARGET_COLUMNS: usize = 1024;
        (TARGET_COLUMNS / self.sample_columns()).clamp(1, self.batch)
    }

    /// Fills the `[C·9, S·sample_columns]` patch matrix of samples `first..first+S`.
    ///
    /// `padded` is scratch of [`Self::scratch_len`] elements whose border
    /// must be zero; only interiors are written here.
    fn im2col<T: Real>(&self, input: &[T], first: usize, samples: usize, cols: &mut [T], padded: &mut [T]) {
        let (c_in, h, w) = (self.in_channels, self.height, self.width);
        let n = samples * self.sample_columns();
        if self.stride == 1 {
            let (pw, plane) = (w + 2, self.padded_plane());
            let run = h * pw;
            for (dst, src) in padded
                .chunks_exact_mut(plane)
                .zip(input[first * c_in * h * w..][..samples * c_in * h * w].chunks_exact(h * w))
            {
                for (y, line) in src.chunks_exact(w).enumerate() {
                    dst[(y + 1) * pw + 1..][..w].copy_from_slice(line);
                }
            }
            for c in 0..c_in {
                for tap in 0..9 {
                    let offset = (tap / 3) * pw + tap % 3;
                    let row = &mut cols[(c * 9 + tap) * n..][..n];
                    for (s, dst) in row.chunks_exact_mut(run).enumerate() {
                        dst.copy_from_slice(&padded[(s * c_in + c) * plane + offset..][..run]);
                    }
                }
            }
            return;
        }
        let p = self.sample_columns();
        for s in 0..samples {
            let b = first + s;
            for c in 0..c_in {
                let plane = &input[(b * c_in + c) * h * w..][..h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let dst = &mut cols[(c * 9 + ky * 3 + kx) * n + s * p..][..p];
                        for oy in 0..self.out_height {
                            let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                            let line = &mut dst[oy * self.out_width..][..self.out_width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                                *v = if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    plane[iy as usize * w + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[C·9, S·sample_columns]` patch gradient onto samples
    /// `first..first+S`. Columns outside the output grid must hold zeros.
    fn col2im<T: Real>(&self, cols: &[T], first: usize, samples: usize, input_grad: &mut [T], padded: &mut [T]) {
        let (c_in, h, w) = (self.in_channels, self.height, self.width);
        let n = samples * self.sample_columns();
        if self.stride == 1 {
            let (pw, plane) = (w + 2, self.padded_plane());
            let run = h * pw;
            padded.fill(T::zero());
            for c in 0..c_in {
                for tap in 0..9 {
                    let offset = (tap / 3) * pw + tap % 3;
                    let row = &cols[(c * 9 + tap) * n..][..n];
                    for (s, src) in row.chunks_exact(run).enumerate() {
                        accumulate(&mut padded[(s * c_in + c) * plane + offset..][..run], src);
                    }
                }
            }
            for (src, dst) in padded
                .chunks_exact(plane)
                .zip(input_grad[first * c_in * h * w..][..samples * c_in * h * w].chunks_exact_mut(h * w))
            {
                for (y, line) in dst.chunks_exact_mut(w).enumerate() {
                    accumulate(line, &src[(y + 1) * pw + 1..][..w]);
                }
            }
            return;
        }
        let p = self.sample_columns();
        for s in 0..samples {
            let b = first + s;
            for c in 0..c_in {
                let plane = &mut input_grad[(b * c_in + c) * h * w..][..h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let src = &cols[(c * 9 + ky * 3 + kx) * n + s * p..][..p];
                        for oy in 0..self.out_height {
                            let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for (ox, &g) in src[oy * self.out_width..][..self.out_width].iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy as usize * w + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Copies `[f, S·sample_columns]` into `[B, F, OH, OW]` rows of samples
    /// `first..`, adding `bias`.
    fn scatter_output<T: Real>(&self, src: &[T], first: usize, samples: usize, bias: Option<&[T]>, out: &mut [T]) {
        let (f, ow, pitch) = (self.out_channels, self.out_width, self.pitch());
        let (p, q) = (self.out_height * ow, self.sample_columns());
        let n = samples * q;
        for s in 0..samples {
            for ch in 0..f {
                let add = bias.map_or(T::zero(), |b| b[ch]);
                let from = &src[ch * n + s * q..][..q];
                let to = &mut out[((first + s) * f + ch) * p..][..p];
                for (dst, line) in to.chunks_exact_mut(ow).zip(from.chunks(pitch)) {
                    for (d, &v) in dst.iter_mut().zip(line) {
                        *d = v + add;
                    }
                }
            }
        }
    }

    /// Inverse layout change of [`Self::scatter_output`] for the output
    /// gradient; padding columns are zeroed.
    fn gather_grad<T: Real>(&self, g: &[T], first: usize, samples: usize, dst: &mut [T]) {
        let (f, ow, pitch) = (self.out_channels, self.out_width, self.pitch());
        let (p, q) = (self.out_height * ow, self.sample_columns());
        let n = samples * q;
        for s in 0..samples {
            for ch in 0..f {
                let from = &g[((first + s) * f + ch) * p..][..p];
                let to = &mut dst[ch * n + s * q..][..q];
                for (line, src) in to.chunks_exact_mut(pitch).zip(from.chunks_exact(ow)) {
                    line[..ow].copy_from_slice(src);
                    line[ow..].fill(T::zero());
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    AvgPool2 {
        x: Var,
        planes: usize,
        height: usize,
        width: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        classes: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    LogClamped(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::BiasAdd { .. } => "bias_add",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogClamped(_) => "log",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records primitive operations in execution order and replays them backwards.
///
/// One tape is built per training step. Gradients are only tracked for values
/// that depend on a leaf created with `requires_grad`; an inference tape
/// tracks nothing and keeps no backward caches.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    last_order: Vec<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            last_order: Vec::new(),
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.recording,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records `tensor` as a leaf; gradients flow to it if it requires them.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Same value as `v`, cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone(), false).expect("tape nodes are well-shaped")
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Smallest `|x|` over all recorded ReLU inputs, or `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.iter().fold(T::infinity(), |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(T::min)
    }

    /// Node indices visited by the last [`Tape::backward`], in visiting order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::size(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Zero-padded 3×3 cross-correlation of `[B,C,H,W]` with `[F,C,3,3]`, plus
    /// an optional per-output-channel bias of shape `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::size(format!("conv2d of {si:?} with kernel {sk:?}")));
        }
        if sk[2] != 3 || sk[3] != 3 {
            return Err(Error::contract(format!("conv2d kernel must be 3×3, got {sk:?}")));
        }
        if sk[1] != si[1] {
            return Err(Error::size(format!(
                "conv2d kernel expects {} input channels, input has {}",
                sk[1], si[1]
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::contract(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [sk[0]] {
                return Err(Error::size(format!(
                    "conv2d bias {:?} for {} filters",
                    self.shape(bv),
                    sk[0]
                )));
            }
        }
        let geom = ConvGeometry::new(si[0], si[1], si[2], si[3], sk[0], stride);
        let (rows, f) = (geom.patch_rows(), geom.out_channels);
        let chunk = geom.chunk_samples();
        let mut cols = vec![T::zero(); rows * chunk * geom.sample_columns()];
        let mut out_fp = vec![T::zero(); f * chunk * geom.sample_columns()];
        let mut padded = vec![T::zero(); geom.scratch_len(chunk)];
        let mut out = vec![T::zero(); geom.batch * f * geom.positions()];
        let (x, k) = (self.value(input), self.value(kernel));
        let bias_vals = bias.map(|bv| self.value(bv));
        for first in (0..geom.batch).step_by(chunk) {
            let samples = chunk.min(geom.batch - first);
            let n = samples * geom.sample_columns();
            geom.im2col(x, first, samples, &mut cols, &mut padded);
            T::gemm(f, rows, n, T::one(), k, rows as isize, 1, &cols, n as isize, 1, T::zero(), &mut out_fp, n as isize, 1);
            geom.scatter_output(&out_fp, first, samples, bias_vals, &mut out);
        }

        let rg = self.requires_grad(input)
            || self.requires_grad(kernel)
            || bias.is_some_and(|bv| self.requires_grad(bv));
        let shape = vec![geom.batch, f, geom.out_height, geom.out_width];
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, rg, Op::Relu(x))
    }

    /// 2×2 average pooling with stride 2 over the two trailing axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(Error::size(format!("avg_pool2 needs even trailing dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for rows in self.value(x).chunks_exact(2 * w) {
            let (top, bottom) = rows.split_at(w);
            out.extend(
                top.chunks_exact(2)
                    .zip(bottom.chunks_exact(2))
                    .map(|(t, b)| quarter * (t[0] + t[1] + b[0] + b[1])),
            );
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::AvgPool2 { x, planes, height: h, width: w }))
    }

    /// Adds `bias` (shape `[n]`) along the trailing axis of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::size(format!(
                "bias {:?} does not match trailing axis of {s:?}",
                self.shape(bias)
            )));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(s, out, rg, Op::BiasAdd { x, bias }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape, self.value(x).len())?;
        let (value, rg) = (self.value(x).to_vec(), self.requires_grad(x));
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[b, rest.max(1)])
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let classes = *s.last().unwrap();
        if classes < 2 {
            return Err(Error::contract(format!("softmax needs at least 2 classes, got {s:?}")));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (row, dst) in xv.chunks(classes).zip(out.chunks_mut(classes)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(s, out, rg, Op::Softmax { x, classes }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::size(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = compensated_sum(self.value(x));
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let total = compensated_sum(self.value(x));
        let n = T::from_f64(self.value(x).len() as f64);
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![total / n], rg, Op::Mean(x))
    }

    /// `ln(max(x, 1e-12))` elementwise.
    pub fn log_clamped(&mut self, x: Var) -> Var {
        let floor = T::from_f64(LOG_FLOOR);
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, rg, Op::LogClamped(x))
    }

    /// Reverse-mode sweep from the scalar `root`.
    ///
    /// Afterwards every grad-enabled leaf has a gradient, zero if `root` does
    /// not depend on it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if self.node(root).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.node(root).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        self.last_order.clear();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.last_order.push(idx);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the leaf gradient of `v` into `tensor`'s grad slot.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => tensor.set_grad(vec![T::zero(); tensor.len()]),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = slot(grads, *a, m * k);
                    // dA = G · Bᵀ
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), da, k as isize, 1);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = slot(grads, *b, k * n);
                    // dB = Aᵀ · G
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                // Patches are rebuilt chunk by chunk instead of kept from the
                // forward pass.
                let (rows, f) = (geom.patch_rows(), geom.out_channels);
                let chunk = geom.chunk_samples();
                let x = &nodes[input.0].value;
                let kv = &nodes[kernel.0].value;
                let mut g_fp = vec![T::zero(); f * chunk * geom.sample_columns()];
                let mut cols = vec![T::zero(); rows * chunk * geom.sample_columns()];
                let mut padded = vec![T::zero(); geom.scratch_len(chunk)];
                let mut padded_grad = vec![T::zero(); geom.scratch_len(chunk)];
                let mut db = bias.filter(|bv| wants(*bv)).map(|_| vec![T::zero(); f]);
                let mut dk = wants(*kernel).then(|| vec![T::zero(); f * rows]);
                let mut dx = wants(*input).then(|| slot(grads, *input, x.len()));
                for first in (0..geom.batch).step_by(chunk) {
                    let samples = chunk.min(geom.batch - first);
                    let n = samples * geom.sample_columns();
                    geom.gather_grad(g, first, samples, &mut g_fp);
                    if let Some(db) = db.as_mut() {
                        for (ch, d) in db.iter_mut().enumerate() {
                            *d += g_fp[ch * n..][..n].iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        geom.im2col(x, first, samples, &mut cols, &mut padded);
                        // dK += G · colsᵀ
                        T::gemm(f, n, rows, T::one(), &g_fp, n as isize, 1, &cols, 1, n as isize, T::one(), dk, rows as isize, 1);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        // dcols = Kᵀ · G
                        T::gemm(rows, f, n, T::one(), kv, 1, rows as isize, &g_fp, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
                        geom.col2im(&cols, first, samples, dx, &mut padded_grad);
                    }
                }
                if let (Some(bv), Some(db)) = (*bias, db) {
                    accumulate(slot(grads, bv, f), &db);
                }
                if let Some(dk) = dk {
                    accumulate(slot(grads, *kernel, f * rows), &dk);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                let pass = |gi: T, v: T| if v > T::zero() { gi } else { T::zero() };
                match &mut grads[x.0] {
                    Some(dx) => {
                        for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                            *d += pass(gi, v);
                        }
                    }
                    empty => *empty = Some(g.iter().zip(xv).map(|(&gi, &v)| pass(gi, v)).collect()),
                }
            }
            Op::AvgPool2 {
                x,
                planes,
                height,
                width,
            } => {
                let (h, w) = (*height, *width);
                let ow = w / 2;
                let quarter = T::from_f64(0.25);
                let dx = slot(grads, *x, planes * h * w);
                for (rows, src) in dx.chunks_exact_mut(2 * w).zip(g.chunks_exact(ow)) {
                    let (top, bottom) = rows.split_at_mut(w);
                    for ((t, b), &gi) in top.chunks_exact_mut(2).zip(bottom.chunks_exact_mut(2)).zip(src) {
                        let v = quarter * gi;
                        t[0] += v;
                        t[1] += v;
                        b[0] += v;
                        b[1] += v;
                    }
                }
            }
            Op::BiasAdd { x, bias } => {
                if wants(*x) {
                    accumulate(slot(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.len();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        accumulate(db, row);
                    }
                }
            }
            Op::Reshape(x) => accumulate(slot(grads, *x, g.len()), g),
            Op::Softmax { x, classes } => {
                let y = &nodes[idx].value;
                let dx = slot(grads, *x, y.len());
                for ((gr, yr), dr) in g.chunks(*classes).zip(y.chunks(*classes)).zip(dx.chunks_mut(*classes)) {
                    let mut dot = T::zero();
                    for (&gi, &yi) in gr.iter().zip(yr) {
                        dot += gi * yi;
                    }
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    accumulate(slot(grads, *b, g.len()), g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &v) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * v;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = slot(grads, *b, g.len());
                    for ((d, &gi), &v) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * v;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let dx = slot(grads, *x, g.len());
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *factor;
                }
            }
            Op::Sum(x) => {
                let len = nodes[x.0].value.len();
                for d in slot(grads, *x, len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let len = nodes[x.0].value.len();
                let share = g[0] / T::from_f64(len as f64);
                for d in slot(grads, *x, len).iter_mut() {
                    *d += share;
                }
            }
            Op::LogClamped(x) => {
                let floor = T::from_f64(LOG_FLOOR);
                let xv = &nodes[x.0].value;
                let dx = slot(grads, *x, xv.len());
                for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > floor {
                        *d += gi / v;
                    }
                }
            }
        }
    }
}

/// Left-to-right Kahan summation.
fn compensated_sum<T: Real>(values: &[T]) -> T {
    let mut total = T::zero();
    let mut carry = T::zero();
    for &v in values {
        let y = v - carry;
        let t = total + y;
        carry = (t - total) - y;
        total = t;
    }
    total
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
