//! Recording tape and reverse sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::mem;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
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
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        alpha: f64,
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
    Scale {
        x: Var,
        c: f64,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    AddConst {
        x: Var,
    },
    Square {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    AvgPool {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by parameter id; `None` for parameters the loss does not reach.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.0.get(id).and_then(|g| g.as_deref())
    }
}

/// Append-only record of primitive applications in topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A trainable input whose gradient is reported under `id`.
    pub fn param(&mut self, t: Tensor, id: usize) -> Var {
        self.push(t, Op::Param(id), &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn conv_dims(&self, x: Var, w: Var, op: &'static str) -> Result<([usize; 4], [usize; 4]), AutodiffError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch(op, xs, ws));
        }
        Ok(([xs[0], xs[1], xs[2], xs[3]], [ws[0], ws[1], ws[2], ws[3]]))
    }

    fn check_bias(&self, b: Option<Var>, n: usize, op: &'static str) -> Result<(), AutodiffError> {
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(mismatch(op, self.shape(b), &[n]));
            }
        }
        Ok(())
    }

    /// `[N, Cin, H, W] * [Cout, Cin, kh, kw] -> [N, Cout, H', W']`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let ([n, c, h, wd], [co, ci, kh, kw]) = self.conv_dims(x, w, "conv2d")?;
        if ci != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        self.check_bias(b, co, "conv2d")?;
        let g = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, hw) = (g.rows(), g.cols());
        let mut out = vec![0.0; n * co * hw];
        let mut cols = vec![0.0; k * hw];
        let xd = self.data(x);
        let wdat = self.data(w);
        for s in 0..n {
            im2col(&xd[s * c * h * wd..(s + 1) * c * h * wd], &g, &mut cols);
            gemm(
                co,
                hw,
                k,
                wdat,
                false,
                &cols,
                false,
                &mut out[s * co * hw..(s + 1) * co * hw],
                false,
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), co, hw);
        }
        let value = Tensor::new(&[n, co, g.out_h, g.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] for the same
    /// kernel: `[N, Cin, H, W] * [Cin, Cout, kh, kw] -> [N, Cout, H', W']` with
    /// `H' = (H - 1) stride - 2 pad + kh + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: [usize; 2],
    ) -> Result<Var, AutodiffError> {
        let ([n, ci, h, wd], [wci, co, kh, kw]) = self.conv_dims(x, w, "conv_transpose2d")?;
        if h == 0 || wd == 0 {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        let out_h = ((h - 1) * stride + kh + output_padding[0]).checked_sub(2 * pad);
        let out_w = ((wd - 1) * stride + kw + output_padding[1]).checked_sub(2 * pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        };
        if wci != ci || stride == 0 || output_padding[0] >= stride || output_padding[1] >= stride {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        self.check_bias(b, co, "conv_transpose2d")?;
        let g = ConvGeom {
            channels: co,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let (k, hw) = (g.rows(), g.cols());
        let plane = out_h * out_w;
        let mut out = vec![0.0; n * co * plane];
        let mut cols = vec![0.0; k * hw];
        let xd = self.data(x);
        let wdat = self.data(w);
        for s in 0..n {
            gemm(
                k,
                hw,
                ci,
                wdat,
                true,
                &xd[s * ci * hw..(s + 1) * ci * hw],
                false,
                &mut cols,
                false,
            );
            col2im(&cols, &g, &mut out[s * co * plane..(s + 1) * co * plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), co, plane);
        }
        let value = Tensor::new(&[n, co, out_h, out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT2d { x, w, b, stride, pad }, &inputs))
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(mismatch("group_norm", &xs, &[groups]));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm", &xs, self.shape(gamma)));
        }
        let n = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let per_group = c / groups * spatial;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * groups + gi) * per_group;
                let (mean, r) = moments(&xd[start..start + per_group]);
                rstd[s * groups + gi] = r;
                for i in start..start + per_group {
                    let ch = (i / spatial) % c;
                    let v = (xd[i] - mean) * r;
                    xhat[i] = v;
                    out[i] = v * gd[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| mismatch("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &xs, self.shape(gamma)));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let (mean, rs) = moments(&xd[r * d..(r + 1) * d]);
            rstd[r] = rs;
            for j in 0..d {
                let v = (xd[r * d + j] - mean) * rs;
                xhat[r * d + j] = v;
                out[r * d + j] = v * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(&xs, out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[..., K] x [K, O] (+ [O]) -> [..., O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (k, o) = (ws[0], ws[1]);
        self.check_bias(b, o, "linear")?;
        let rows = self.value(x).len() / k;
        let mut out = vec![0.0; rows * o];
        gemm(rows, o, k, self.data(x), false, self.data(w), false, &mut out, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let value = Tensor::new(&shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched `op(A) op(B)` over `[B, ., .]` operands; `ta`/`tb` transpose the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutodiffError> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asz.len() != 3 || bsz.len() != 3 || asz[0] != bsz[0] {
            return Err(mismatch("bmm", &asz, &bsz));
        }
        let (m, k) = if ta { (asz[2], asz[1]) } else { (asz[1], asz[2]) };
        let (kb, n) = if tb { (bsz[2], bsz[1]) } else { (bsz[1], bsz[2]) };
        if k != kb {
            return Err(mismatch("bmm", &asz, &bsz));
        }
        let batch = asz[0];
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                n,
                k,
                &ad[i * m * k..],
                ta,
                &bd[i * k * n..],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out);
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| mismatch("softmax", &xs, &[]))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(&xs, out);
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(&t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { alpha * v }, Op::LeakyRelu { x, alpha })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| c * v, Op::Scale { x, c })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square { x })
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var, AutodiffError> {
        if self.shape(x) != c.shape.as_slice() {
            return Err(mismatch("mul_const", self.shape(x), &c.shape));
        }
        let data = self.data(x).iter().zip(&c.data).map(|(a, b)| a * b).collect();
        let value = Tensor::new(&c.shape, data);
        Ok(self.push(value, Op::MulConst { x, c: c.data.clone() }, &[x]))
    }

    /// Elementwise sum with a constant of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var, AutodiffError> {
        if self.shape(x) != c.shape.as_slice() {
            return Err(mismatch("add_const", self.shape(x), &c.shape));
        }
        let data = self.data(x).iter().zip(&c.data).map(|(a, b)| a + b).collect();
        let value = Tensor::new(&c.shape, data);
        Ok(self.push(value, Op::AddConst { x }, &[x]))
    }

    /// Sum of every element, shape `[]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x);
        let Some(&n) = xs.first() else {
            return Err(mismatch("sum_rows", xs, &[]));
        };
        let d = self.value(x).len() / n.max(1);
        let data = self.data(x).chunks(d.max(1)).map(|c| c.iter().sum()).collect();
        Ok(self.push(Tensor::new(&[n], data), Op::SumRows { x }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = Tensor::new(shape, self.data(x).to_vec());
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", &xs, axes));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let out = permute_data(self.data(x), &xs, axes);
        Ok(self.push(Tensor::new(&shape, out), Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("adaptive_avg_pool", &xs, &[]));
        }
        let plane = xs[2] * xs[3];
        let data = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Tensor::new(&[xs[0], xs[1]], data), Op::AvgPool { x }, &[x]))
    }

    /// 2x2 max pooling with stride 2, trailing odd row/column dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(mismatch("max_pool2", &xs, &[2, 2]));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let planes = xs[0] * xs[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(AutodiffError::NotScalar(root.value.shape.clone()));
        }
        if !root.needs_grad {
            return Err(AutodiffError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params: Vec<Option<Vec<f64>>> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if params.len() <= *id {
                        params.resize(*id + 1, None);
                    }
                    match &mut params[*id] {
                        Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += g),
                        slot => *slot = Some(gy),
                    }
                }
                op => self.backprop(op, &node.value, &gy, &mut grads),
            }
        }
        Ok(Gradients(params))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, op: &Op, y: &Tensor, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let ([n, c, h, wd], [co, _, kh, kw]) = self.conv_dims(*x, *w, "").unwrap();
                let g = ConvGeom {
                    channels: c,
                    height: h,
                    width: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: y.shape[2],
                    out_w: y.shape[3],
                };
                let (k, hw) = (g.rows(), g.cols());
                let mut cols = vec![0.0; k * hw];
                let xd = self.data(*x);
                let wdat = self.data(*w);
                let img = c * h * wd;
                for s in 0..n {
                    let gys = &gy[s * co * hw..(s + 1) * co * hw];
                    if self.wants(*w) {
                        im2col(&xd[s * img..(s + 1) * img], &g, &mut cols);
                        gemm(co, k, hw, gys, false, &cols, true, acc(grads, *w, wdat.len()), true);
                    }
                    if self.wants(*x) {
                        gemm(k, hw, co, wdat, true, gys, false, &mut cols, false);
                        col2im(&cols, &g, &mut acc(grads, *x, xd.len())[s * img..(s + 1) * img]);
                    }
                }
                if let Some(b) = b {
                    bias_grad(gy, co, hw, acc(grads, *b, co));
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let ([n, ci, h, wd], [_, co, kh, kw]) = self.conv_dims(*x, *w, "").unwrap();
                let (out_h, out_w) = (y.shape[2], y.shape[3]);
                let g = ConvGeom {
                    channels: co,
                    height: out_h,
                    width: out_w,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: h,
                    out_w: wd,
                };
                let (k, hw) = (g.rows(), g.cols());
                let plane = out_h * out_w;
                let mut gcols = vec![0.0; k * hw];
                let xd = self.data(*x);
                let wdat = self.data(*w);
                for s in 0..n {
                    im2col(&gy[s * co * plane..(s + 1) * co * plane], &g, &mut gcols);
                    if self.wants(*x) {
                        let dx = &mut acc(grads, *x, xd.len())[s * ci * hw..(s + 1) * ci * hw];
                        gemm(ci, hw, k, wdat, false, &gcols, false, dx, true);
                    }
                    if self.wants(*w) {
                        let xs = &xd[s * ci * hw..(s + 1) * ci * hw];
                        gemm(ci, k, hw, xs, false, &gcols, true, acc(grads, *w, wdat.len()), true);
                    }
                }
                if let Some(b) = b {
                    bias_grad(gy, co, plane, acc(grads, *b, co));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = y.shape[1];
                let spatial: usize = y.shape[2..].iter().product();
                let per_group = c / groups * spatial;
                let gd = self.data(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (i, (&g, &xh)) in gy.iter().zip(xhat).enumerate() {
                        let ch = (i / spatial) % c;
                        dg[ch] += g * xh;
                        db[ch] += g;
                    }
                    add_into(grads, *gamma, &dg, self.wants(*gamma));
                    add_into(grads, *beta, &db, self.wants(*beta));
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, gy.len());
                    for (blk, &r) in rstd.iter().enumerate() {
                        let start = blk * per_group;
                        norm_backward(
                            &gy[start..start + per_group],
                            &xhat[start..start + per_group],
                            |i| gd[((start + i) / spatial) % c],
                            r,
                            &mut dx[start..start + per_group],
                        );
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *y.shape.last().unwrap();
                let gd = self.data(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (i, (&g, &xh)) in gy.iter().zip(xhat).enumerate() {
                        dg[i % d] += g * xh;
                        db[i % d] += g;
                    }
                    add_into(grads, *gamma, &dg, self.wants(*gamma));
                    add_into(grads, *beta, &db, self.wants(*beta));
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, gy.len());
                    for (row, &r) in rstd.iter().enumerate() {
                        let s = row * d;
                        norm_backward(&gy[s..s + d], &xhat[s..s + d], |i| gd[i], r, &mut dx[s..s + d]);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, o) = (ws[0], ws[1]);
                let rows = gy.len() / o;
                if self.wants(*x) {
                    gemm(
                        rows,
                        k,
                        o,
                        gy,
                        false,
                        self.data(*w),
                        true,
                        acc(grads, *x, rows * k),
                        true,
                    );
                }
                if self.wants(*w) {
                    gemm(k, o, rows, self.data(*x), true, gy, false, acc(grads, *w, k * o), true);
                }
                if let Some(b) = b {
                    let db = acc(grads, *b, o);
                    for row in gy.chunks(o) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (asz, bsz) = (self.shape(*a), self.shape(*b));
                let (m, k) = if ta { (asz[2], asz[1]) } else { (asz[1], asz[2]) };
                let n = if tb { bsz[1] } else { bsz[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                for i in 0..asz[0] {
                    let gc = &gy[i * m * n..(i + 1) * m * n];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    if self.wants(*a) {
                        let da = &mut acc(grads, *a, ad.len())[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, m, n, bi, tb, gc, true, da, true);
                        } else {
                            gemm(m, k, n, gc, false, bi, !tb, da, true);
                        }
                    }
                    if self.wants(*b) {
                        let db = &mut acc(grads, *b, bd.len())[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, k, m, gc, true, ai, ta, db, true);
                        } else {
                            gemm(k, n, m, ai, !ta, gc, false, db, true);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let d = *y.shape.last().unwrap();
                let dx = acc(grads, *x, gy.len());
                for ((yr, gr), dr) in y.data.chunks(d).zip(gy.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, gy.len());
                for i in 0..gy.len() {
                    if xd[i] > 0.0 {
                        dx[i] += gy[i];
                    }
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, gy.len());
                for i in 0..gy.len() {
                    dx[i] += if xd[i] > 0.0 { gy[i] } else { alpha * gy[i] };
                }
            }
            Op::Add { a, b } => {
                add_into(grads, *a, gy, self.wants(*a));
                add_into(grads, *b, gy, self.wants(*b));
            }
            Op::Sub { a, b } => {
                add_into(grads, *a, gy, self.wants(*a));
                if self.wants(*b) {
                    let db = acc(grads, *b, gy.len());
                    for (d, g) in db.iter_mut().zip(gy) {
                        *d -= g;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (me, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(me) {
                        let od = self.data(other);
                        let d = acc(grads, me, gy.len());
                        for i in 0..gy.len() {
                            d[i] += gy[i] * od[i];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = acc(grads, *x, gy.len());
                for (d, g) in dx.iter_mut().zip(gy) {
                    *d += c * g;
                }
            }
            Op::MulConst { x, c } => {
                let dx = acc(grads, *x, gy.len());
                for i in 0..gy.len() {
                    dx[i] += gy[i] * c[i];
                }
            }
            Op::AddConst { x } | Op::Reshape { x } => add_into(grads, *x, gy, true),
            Op::Square { x } => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, gy.len());
                for i in 0..gy.len() {
                    dx[i] += 2.0 * xd[i] * gy[i];
                }
            }
            Op::SumAll { x } => {
                let len = self.value(*x).len();
                for d in acc(grads, *x, len).iter_mut() {
                    *d += gy[0];
                }
            }
            Op::SumRows { x } => {
                let len = self.value(*x).len();
                let per = len / gy.len().max(1);
                for (i, d) in acc(grads, *x, len).iter_mut().enumerate() {
                    *d += gy[i / per.max(1)];
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &y.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let size = self.value(v).len();
                        let d = acc(grads, v, size);
                        for o in 0..outer {
                            let src = &gy[o * total + offset..o * total + offset + len];
                            for (a, g) in d[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *a += g;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gy, &y.shape, &inverse);
                add_into(grads, *x, &back, true);
            }
            Op::AvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let len = self.value(*x).len();
                for (i, d) in acc(grads, *x, len).iter_mut().enumerate() {
                    *d += gy[i / plane] / plane as f64;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let len = self.value(*x).len();
                let dx = acc(grads, *x, len);
                for (g, &i) in gy.iter().zip(argmax) {
                    dx[i] += g;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64], wanted: bool) {
    if !wanted {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot => *slot = Some(delta.to_vec()),
    }
}

/// Mean and `1 / sqrt(var + eps)` with the biased variance.
fn moments(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn norm_backward(gy: &[f64], xhat: &[f64], gamma: impl Fn(usize) -> f64, rstd: f64, dx: &mut [f64]) {
    let m = gy.len() as f64;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..gy.len() {
        let d = gy[i] * gamma(i);
        s1 += d;
        s2 += d * xhat[i];
    }
    for i in 0..gy.len() {
        let d = gy[i] * gamma(i);
        dx[i] += rstd * (d - s1 / m - xhat[i] * s2 / m);
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], channels: usize, plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(gy: &[f64], channels: usize, plane: usize, db: &mut [f64]) {
    for (i, chunk) in gy.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
