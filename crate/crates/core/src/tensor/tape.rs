use super::kernels::{conv_backward, conv_forward, ConvGeom};
use super::{Real, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Input gradients of a custom op, given the input values and the output
/// adjoint. One entry per input; `None` means "no gradient".
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

const DEMOD_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-8;

enum Op<T: Real> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gain: T,
    },
    ModConv {
        x: Var,
        w: Var,
        style: Var,
        geom: ConvGeom,
        gain: T,
        demod: bool,
        // per-sample effective kernel and demodulation coefficients
        kernels: Vec<Vec<T>>,
        dcoef: Vec<Vec<T>>,
    },
    Upsample2x {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        gain: T,
    },
    AddNoise {
        x: Var,
        noise: Var,
        gain: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Norm2 {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        c: Tensor<T>,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumPerSample {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Replicate {
        x: Var,
    },
    SelectSlot {
        x: Var,
        slot: usize,
    },
    MaterialRange {
        x: Var,
        r_min: T,
    },
    ToneGamma {
        x: Var,
        lo: T,
        inv_gamma: T,
    },
    SqDist {
        x: Var,
        target: Tensor<T>,
        mean: bool,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Execution record for one forward pass. Backward may run once.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: Shape) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<(), TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    let dims = ["batch", "channel", "height", "width"];
    for i in 0..4 {
        if sa[i] != sb[i] {
            return Err(TensorError::mismatch(op, dims[i], sa[i], sb[i]));
        }
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
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
            consumed: false,
        }
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are only tracked through leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Cross-correlation of `x` `[N,Cin,H,W]` with `w` `[Cout,Cin,k,k]`,
    /// scaled by `gain`, plus an optional `[1,Cout,1,1]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gain: T,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, kh, kw] = self.shape(w);
        if wcin != cin {
            return Err(TensorError::mismatch(OP, "input channels", wcin, cin));
        }
        if kh != kw {
            return Err(TensorError::mismatch(OP, "kernel width", kh, kw));
        }
        if kh % 2 == 0 {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("kernel size must be odd, got {kh}"),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(TensorError::Invalid {
                op: OP,
                msg: "kernel does not fit the padded input".into(),
            });
        }
        if let Some(b) = b {
            let bs = self.value(b).numel();
            if bs != cout {
                return Err(TensorError::mismatch(OP, "bias length", cout, bs));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut scratch = Vec::new();
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let olen = cout * oh * ow;
            for s in 0..n {
                conv_forward(
                    &geom,
                    xv.sample(s),
                    wv,
                    bv,
                    gain,
                    &mut scratch,
                    &mut out.data_mut()[s * olen..(s + 1) * olen],
                );
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom, gain }, &inputs))
    }

    /// Style-modulated convolution with "same" padding. The kernel is scaled
    /// per input channel by `style` `[N,Cin,..]` (and by `gain`), then, when
    /// `demod` is set, every output filter is renormalized to unit norm.
    pub fn modulated_conv2d(
        &mut self,
        x: Var,
        w: Var,
        style: Var,
        demod: bool,
        gain: T,
    ) -> Result<Var, TensorError> {
        const OP: &str = "modulated_conv2d";
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, kw] = self.shape(w);
        if wcin != cin {
            return Err(TensorError::mismatch(OP, "input channels", wcin, cin));
        }
        if k != kw || k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: OP,
                msg: format!("kernel must be square and odd, got {k}x{kw}"),
            });
        }
        let ss = self.shape(style);
        if ss[0] != n {
            return Err(TensorError::mismatch(OP, "style batch", n, ss[0]));
        }
        let slen = ss[1] * ss[2] * ss[3];
        if slen != cin {
            return Err(TensorError::mismatch(OP, "style length", cin, slen));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride: 1,
            pad: k / 2,
        };
        let kk = cin * k * k;
        let mut kernels = Vec::with_capacity(n);
        let mut dcoef = Vec::with_capacity(n);
        let mut out = Tensor::zeros([n, cout, h, wd]);
        let mut scratch = Vec::new();
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let sv = self.value(style);
            let olen = cout * h * wd;
            for s in 0..n {
                let st = sv.sample(s);
                let mut kern = vec![T::zero(); cout * kk];
                let mut d = vec![T::one(); cout];
                for o in 0..cout {
                    let row = &mut kern[o * kk..(o + 1) * kk];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = gain * wv[o * kk + j] * st[j / (k * k)];
                    }
                    if demod {
                        let ssum: T = row.iter().map(|&v| v * v).sum();
                        d[o] = T::one() / (ssum + T::from_f64(DEMOD_EPS)).sqrt();
                        for r in row.iter_mut() {
                            *r *= d[o];
                        }
                    }
                }
                conv_forward(
                    &geom,
                    xv.sample(s),
                    &kern,
                    None,
                    T::one(),
                    &mut scratch,
                    &mut out.data_mut()[s * olen..(s + 1) * olen],
                );
                kernels.push(kern);
                dcoef.push(d);
            }
        }
        Ok(self.push(
            out,
            Op::ModConv {
                x,
                w,
                style,
                geom,
                gain,
                demod,
                kernels,
                dcoef,
            },
            &[x, w, style],
        ))
    }

    /// Nearest-neighbour 2x upsampling in both spatial dimensions.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x { x }, &[x])
    }

    /// Box-filter downsampling by an integer factor.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool",
                msg: format!("{h}x{w} is not divisible by {k}"),
            });
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let inv = T::one() / T::from_f64((k * k) as f64);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        dst[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx] * inv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool { x, k }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Local derivative of `leaky_relu` at the current value of `x`.
    pub fn leaky_relu_mask(&self, x: Var, slope: T) -> Tensor<T> {
        self.value(x)
            .map(|v| if v > T::zero() { T::one() } else { slope })
    }

    /// Fully connected layer on the flattened per-sample features of `x`.
    /// `w` is `[out,in,1,1]`, `b` is `[1,out,1,1]`. Output is `[N,out,1,1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, gain: T) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let xs = self.shape(x);
        let n = xs[0];
        let fin = xs[1] * xs[2] * xs[3];
        let ws = self.shape(w);
        let (fout, win) = (ws[0], ws[1] * ws[2] * ws[3]);
        if win != fin {
            return Err(TensorError::mismatch(OP, "input features", win, fin));
        }
        if let Some(b) = b {
            let bl = self.value(b).numel();
            if bl != fout {
                return Err(TensorError::mismatch(OP, "bias length", fout, bl));
            }
        }
        let mut out = Tensor::zeros([n, fout, 1, 1]);
        T::gemm(
            n,
            fin,
            fout,
            gain,
            self.value(x).data(),
            fin,
            1,
            self.value(w).data(),
            1,
            fin,
            T::zero(),
            out.data_mut(),
            fout,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                for (o, bo) in row.iter_mut().zip(&bv) {
                    *o += *bo;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b, gain }, &inputs))
    }

    /// `x + gain * noise`, with the single-channel `noise` broadcast over
    /// channels (and over the batch when it has batch size 1).
    pub fn add_noise(&mut self, x: Var, noise: Var, gain: Var) -> Result<Var, TensorError> {
        const OP: &str = "add_noise";
        let [n, c, h, w] = self.shape(x);
        let ns = self.shape(noise);
        if ns[1] != 1 {
            return Err(TensorError::mismatch(OP, "noise channels", 1, ns[1]));
        }
        if ns[2] != h || ns[3] != w {
            return Err(TensorError::mismatch(OP, "noise height", h, ns[2]));
        }
        if ns[0] != n && ns[0] != 1 {
            return Err(TensorError::mismatch(OP, "noise batch", n, ns[0]));
        }
        if self.value(gain).numel() != 1 {
            return Err(TensorError::mismatch(OP, "gain length", 1, self.value(gain).numel()));
        }
        let g = self.value(gain).data()[0];
        let mut out = self.value(x).clone();
        {
            let nv = self.value(noise).data();
            let hw = h * w;
            let dst = out.data_mut();
            for s in 0..n {
                let nz = &nv[if ns[0] == 1 { 0 } else { s * hw }..][..hw];
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for (d, &z) in dst[base..base + hw].iter_mut().zip(nz) {
                        *d += g * z;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AddNoise { x, noise, gain }, &[x, noise, gain]))
    }

    /// Adds a per-channel bias `[1,C,1,1]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let [_, c, h, w] = self.shape(x);
        let bl = self.value(b).numel();
        if bl != c {
            return Err(TensorError::mismatch("add_bias", "bias length", c, bl));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / (h * w)) % c];
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// Divides each sample by the root mean square of its entries.
    pub fn normalize_2nd_moment(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let len = xv.sample_len();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(len) {
            let ms = chunk.iter().map(|&v| v * v).sum::<T>() / T::from_f64(len as f64);
            let r = T::one() / (ms + T::from_f64(NORM_EPS)).sqrt();
            for v in chunk {
                *v *= r;
            }
        }
        self.push(out, Op::Norm2 { x }, &[x])
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Element-wise product with a constant (no gradient to `c`).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var, TensorError> {
        same_shape("mul_const", self.value(x), &c)?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.push(out, Op::MulConst { x, c }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Sums every sample to one value: `[N,..] -> [N,1,1,1]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let data = (0..n).map(|s| v.sample(s).iter().copied().sum()).collect();
        let out = Tensor::from_vec([n, 1, 1, 1], data).expect("shape");
        self.push(out, Op::SumPerSample { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Tiles a per-sample vector of length `L` into `[N,slots,L,1]`.
    pub fn replicate(&mut self, x: Var, slots: usize) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let l = v.sample_len();
        let mut data = Vec::with_capacity(n * slots * l);
        for s in 0..n {
            for _ in 0..slots {
                data.extend_from_slice(v.sample(s));
            }
        }
        let out = Tensor::from_vec([n, slots, l, 1], data).expect("shape");
        self.push(out, Op::Replicate { x }, &[x])
    }

    /// Column `slot` of a `[N,S,L,1]` style matrix, as `[N,L,1,1]`.
    pub fn select_slot(&mut self, x: Var, slot: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        let [n, s, l, one] = v.shape();
        if one != 1 {
            return Err(TensorError::mismatch("select_slot", "width", 1, one));
        }
        if slot >= s {
            return Err(TensorError::Invalid {
                op: "select_slot",
                msg: format!("slot {slot} out of range for {s} slots"),
            });
        }
        let mut data = Vec::with_capacity(n * l);
        for b in 0..n {
            data.extend_from_slice(&v.sample(b)[slot * l..(slot + 1) * l]);
        }
        let out = Tensor::from_vec([n, l, 1, 1], data)?;
        Ok(self.push(out, Op::SelectSlot { x, slot }, &[x]))
    }

    /// Maps 9 unconstrained channels to valid material parameters:
    /// sigmoid for albedo (0..3) and specular (6..9), tanh plus unit-disk
    /// projection for the normal (3..5), and a sigmoid rescaled to
    /// `[r_min, 1]` for roughness (5).
    pub fn material_range(&mut self, x: Var, r_min: T) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.shape(x);
        if c != 9 {
            return Err(TensorError::mismatch("material_range", "channels", 9, c));
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        {
            let d = out.data_mut();
            for s in 0..n {
                let base = s * 9 * hw;
                for ch in [0, 1, 2, 6, 7, 8] {
                    for v in &mut d[base + ch * hw..base + (ch + 1) * hw] {
                        *v = sigmoid(*v);
                    }
                }
                for v in &mut d[base + 5 * hw..base + 6 * hw] {
                    *v = r_min + (T::one() - r_min) * sigmoid(*v);
                }
                for p in 0..hw {
                    let tx = d[base + 3 * hw + p].tanh();
                    let ty = d[base + 4 * hw + p].tanh();
                    let rho = (tx * tx + ty * ty).sqrt();
                    let sc = if rho > T::one() { T::one() / rho } else { T::one() };
                    d[base + 3 * hw + p] = tx * sc;
                    d[base + 4 * hw + p] = ty * sc;
                }
            }
        }
        Ok(self.push(out, Op::MaterialRange { x, r_min }, &[x]))
    }

    /// `clamp(x, lo, 1)^inv_gamma`, the display-space comparison transform.
    pub fn tone_gamma(&mut self, x: Var, lo: T, inv_gamma: T) -> Var {
        let out = self
            .value(x)
            .map(|v| v.max(lo).min(T::one()).powf(inv_gamma));
        self.push(out, Op::ToneGamma { x, lo, inv_gamma }, &[x])
    }

    /// Squared distance to a constant target: the sum (or mean when `mean`)
    /// of `(x - target)^2`.
    pub fn sq_dist(&mut self, x: Var, target: Tensor<T>, mean: bool) -> Result<Var, TensorError> {
        same_shape("sq_dist", self.value(x), &target)?;
        let mut s: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        if mean {
            s /= T::from_f64(target.numel() as f64);
        }
        Ok(self.push(Tensor::scalar(s), Op::SqDist { x, target, mean }, &[x]))
    }

    /// Records an externally computed op together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar `loss`. The tape is single-shot: a second
    /// call fails with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(ls));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, gain } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b
                    .filter(|b| self.needs(*b))
                    .map(|b| Tensor::zeros(self.shape(b)));
                let xlen = xv.sample_len();
                let mut scratch = Vec::new();
                for s in 0..n {
                    conv_backward(
                        geom,
                        xv.sample(s),
                        wv.data(),
                        *gain,
                        g.sample(s),
                        dx.as_mut().map(|d| &mut d.data_mut()[s * xlen..(s + 1) * xlen]),
                        dw.as_mut().map(|d| d.data_mut()),
                        db.as_mut().map(|d| d.data_mut()),
                        &mut scratch,
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ModConv {
                x,
                w,
                style,
                geom,
                gain,
                demod,
                kernels,
                dcoef,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let sv = self.value(*style);
                let n = xv.shape()[0];
                let kk2 = geom.k * geom.k;
                let kk = geom.cin * kk2;
                let xlen = xv.sample_len();
                let need_x = self.needs(*x);
                let need_ker = self.needs(*w) || self.needs(*style);
                let mut dx = need_x.then(|| Tensor::zeros(xv.shape()));
                let mut dw = self.needs(*w).then(|| Tensor::zeros(self.shape(*w)));
                let mut ds = self.needs(*style).then(|| Tensor::zeros(sv.shape()));
                let mut scratch = Vec::new();
                let mut dker = vec![T::zero(); geom.cout * kk];
                for s in 0..n {
                    dker.fill(T::zero());
                    conv_backward(
                        geom,
                        xv.sample(s),
                        &kernels[s],
                        T::one(),
                        g.sample(s),
                        dx.as_mut().map(|d| &mut d.data_mut()[s * xlen..(s + 1) * xlen]),
                        need_ker.then_some(&mut dker[..]),
                        None,
                        &mut scratch,
                    );
                    if !need_ker {
                        continue;
                    }
                    let st = sv.sample(s);
                    for o in 0..geom.cout {
                        let d = dcoef[s][o];
                        let kern = &kernels[s][o * kk..(o + 1) * kk];
                        let dk = &mut dker[o * kk..(o + 1) * kk];
                        if *demod {
                            // kernel = d * w', d = (sum w'^2 + eps)^-1/2
                            let dot: T = dk.iter().zip(kern).map(|(&a, &b)| a * b).sum::<T>() / d;
                            for (dv, &kv) in dk.iter_mut().zip(kern) {
                                *dv = d * *dv - d * d * dot * kv;
                            }
                        }
                        for j in 0..kk {
                            let i = j / kk2;
                            if let Some(dw) = dw.as_mut() {
                                dw.data_mut()[o * kk + j] += *gain * st[i] * dk[j];
                            }
                            if let Some(ds) = ds.as_mut() {
                                ds.data_mut()[s * geom.cin + i] += *gain * wv[o * kk + j] * dk[j];
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(ds) = ds {
                    self.accumulate(grads, *style, ds);
                }
            }
            Op::Upsample2x { x } => {
                let [n, c, h, w] = self.shape(*x);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let src = g.data();
                let dst = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(p * h + y / 2) * w + xx / 2] += src[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::from_f64((k * k) as f64);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let src = g.data();
                let dst = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(p * h + y) * w + xx] = src[(p * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let mask = self.leaky_relu_mask(*x, *slope);
                let data = g.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Linear { x, w, b, gain } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let fin = xv.sample_len();
                let fout = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(n, fout, fin, *gain, g.data(), fout, 1, wv.data(), fin, 1, T::zero(), dx.data_mut(), fin, 1);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(fout, n, fin, *gain, g.data(), 1, fout, xv.data(), fin, 1, T::zero(), dw.data_mut(), fin, 1);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(self.shape(b));
                    for row in g.data().chunks(fout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::AddNoise { x, noise, gain } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let nv = self.value(*noise);
                let ns = nv.shape();
                let gv = self.value(*gain).data()[0];
                if self.needs(*noise) || self.needs(*gain) {
                    let mut dn = Tensor::zeros(ns);
                    let mut dgain = T::zero();
                    for s in 0..n {
                        let off = if ns[0] == 1 { 0 } else { s * hw };
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                let gg = g.data()[base + p];
                                dn.data_mut()[off + p] += gv * gg;
                                dgain += gg * nv.data()[off + p];
                            }
                        }
                    }
                    self.accumulate(grads, *noise, dn);
                    self.accumulate(grads, *gain, Tensor::scalar(dgain));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::AddBias { x, b } => {
                let [_, c, h, w] = self.shape(*x);
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    for (i, &v) in g.data().iter().enumerate() {
                        db.data_mut()[(i / (h * w)) % c] += v;
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Norm2 { x } => {
                let xv = self.value(*x);
                let len = xv.sample_len();
                let lf = T::from_f64(len as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for ((xs, gs), ds) in xv
                    .data()
                    .chunks(len)
                    .zip(g.data().chunks(len))
                    .zip(dx.data_mut().chunks_mut(len))
                {
                    let ms = xs.iter().map(|&v| v * v).sum::<T>() / lf;
                    let r = T::one() / (ms + T::from_f64(NORM_EPS)).sqrt();
                    let dot: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((d, &xv), &gv) in ds.iter_mut().zip(xs).zip(gs) {
                        *d = r * gv - r * r * r * dot / lf * xv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), d)?);
                }
            }
            Op::MulConst { x, c } => {
                let d = g.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::Sigmoid { x } => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &s)| a * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &t)| a * (T::one() - t * t))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&a, &v)| a * sigmoid(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean { x } => {
                let s = self.shape(*x);
                let nn: usize = s.iter().product();
                let gv = g.data()[0] / T::from_f64(nn as f64);
                self.accumulate(grads, *x, Tensor::full(s, gv));
            }
            Op::SumPerSample { x } => {
                let s = self.shape(*x);
                let len = s[1] * s[2] * s[3];
                let mut dx = Tensor::zeros(s);
                for (chunk, &gv) in dx.data_mut().chunks_mut(len).zip(g.data()) {
                    chunk.fill(gv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, g.clone().reshape(s)?);
            }
            Op::Replicate { x } => {
                let s = self.shape(*x);
                let [n, slots, l, _] = g.shape();
                let mut dx = Tensor::zeros(s);
                for b in 0..n {
                    for k in 0..slots {
                        let src = &g.data()[(b * slots + k) * l..(b * slots + k + 1) * l];
                        for (d, &v) in dx.data_mut()[b * l..(b + 1) * l].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectSlot { x, slot } => {
                let s = self.shape(*x);
                let [n, slots, l, _] = s;
                let mut dx = Tensor::zeros(s);
                for b in 0..n {
                    let off = (b * slots + slot) * l;
                    dx.data_mut()[off..off + l].copy_from_slice(&g.data()[b * l..(b + 1) * l]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaterialRange { x, r_min } => {
                let xv = self.value(*x);
                let y = &node.value;
                let [n, _, h, w] = xv.shape();
                let hw = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                let (xd, yd, gd) = (xv.data(), y.data(), g.data());
                let dd = dx.data_mut();
                for s in 0..n {
                    let base = s * 9 * hw;
                    for ch in [0, 1, 2, 6, 7, 8] {
                        for p in base + ch * hw..base + (ch + 1) * hw {
                            dd[p] = gd[p] * yd[p] * (T::one() - yd[p]);
                        }
                    }
                    for p in base + 5 * hw..base + 6 * hw {
                        let sg = (yd[p] - *r_min) / (T::one() - *r_min);
                        dd[p] = gd[p] * (T::one() - *r_min) * sg * (T::one() - sg);
                    }
                    for p in 0..hw {
                        let (ix, iy) = (base + 3 * hw + p, base + 4 * hw + p);
                        let tx = xd[ix].tanh();
                        let ty = xd[iy].tanh();
                        let rho = (tx * tx + ty * ty).sqrt();
                        // adjoint w.r.t. (tx, ty)
                        let (gtx, gty) = if rho > T::one() {
                            let (gx, gy) = (gd[ix], gd[iy]);
                            let (ux, uy) = (tx / rho, ty / rho);
                            let dot = gx * ux + gy * uy;
                            ((gx - dot * ux) / rho, (gy - dot * uy) / rho)
                        } else {
                            (gd[ix], gd[iy])
                        };
                        dd[ix] = gtx * (T::one() - tx * tx);
                        dd[iy] = gty * (T::one() - ty * ty);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ToneGamma { x, lo, inv_gamma } => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&a, &v)| {
                        if v > *lo && v < T::one() {
                            a * *inv_gamma * v.powf(*inv_gamma - T::one())
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::SqDist { x, target, mean } => {
                let xv = self.value(*x);
                let mut k = T::from_f64(2.0) * g.data()[0];
                if *mean {
                    k /= T::from_f64(target.numel() as f64);
                }
                let d = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d)?);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let dins = backward(&vals, g);
                for (&v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        same_shape("custom backward", self.value(v), &d)?;
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}
