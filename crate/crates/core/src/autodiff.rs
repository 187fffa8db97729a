//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! Every forward call appends one node; [`Tape::backward`] walks the nodes in
//! reverse recording order, accumulating gradients additively into inputs.

use crate::error::{Error, Result};
use crate::kernels::{self, same_shape, sigmoid_scalar};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    SteGate(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ChannelScale {
        x: Var,
        scale: Var,
    },
    PixelShuffle {
        x: Var,
        factor: usize,
    },
    Sum(Var),
    Mean(Var),
    L1Loss {
        pred: Var,
        target: Var,
    },
    NarrowCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    ConstPlusLinear(Vec<(Var, T)>),
    BlockSums {
        x: Var,
        block: usize,
    },
    RowQuadratic {
        x: Var,
        form: QuadraticForm<T>,
    },
}

/// `q(a) = c + sum_k l_k a_k + sum_p w_p a_{i_p} a_{j_p}` over one row `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm<T> {
    pub constant: T,
    pub linear: Vec<T>,
    pub pairs: Vec<(usize, usize, T)>,
}

impl<T: Scalar> QuadraticForm<T> {
    pub fn new(width: usize) -> Self {
        QuadraticForm {
            constant: T::zero(),
            linear: vec![T::zero(); width],
            pairs: Vec::new(),
        }
    }

    pub fn eval(&self, a: &[T]) -> T {
        let lin: T = self.linear.iter().zip(a).map(|(&l, &v)| l * v).sum();
        let quad: T = self.pairs.iter().map(|&(i, j, w)| w * a[i] * a[j]).sum();
        self.constant + lin + quad
    }

    fn grad(&self, a: &[T], g: T, out: &mut [T]) {
        for (o, &l) in out.iter_mut().zip(&self.linear) {
            *o = *o + g * l;
        }
        for &(i, j, w) in &self.pairs {
            out[i] = out[i] + g * w * a[j];
            out[j] = out[j] + g * w * a[i];
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of forward operations.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        Ok(self.push(value, op, tracked))
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.record(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &ins,
            "conv2d",
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.record(y, Op::Linear { input, weight, bias }, &ins, "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x));
        self.record(y, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid_scalar);
        self.record(y, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Binary gate: forward `1[z > 0]`, backward uses the sigmoid derivative.
    pub fn ste_gate(&mut self, z: Var) -> Result<Var> {
        let y = self.value(z).map(|v| if v > T::zero() { T::one() } else { T::zero() });
        self.record(y, Op::SteGate(z), &[z], "ste_gate")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.abs());
        self.record(y, Op::Abs(x), &[x], "abs")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        self.record(y, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        self.record(y, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        self.record(y, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        self.record(y, Op::Scale(x, c), &[x], "scale")
    }

    /// Broadcast multiply of `scale: [n, c]` (or `[n, c, 1, 1]`) over `x: [n, c, h, w]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let y = kernels::channel_scale(self.value(x), self.value(scale))?;
        self.record(y, Op::ChannelScale { x, scale }, &[x, scale], "channel_scale")
    }

    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::pixel_shuffle(self.value(x), factor)?;
        self.record(y, Op::PixelShuffle { x, factor }, &[x], "pixel_shuffle")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(y, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let y = Tensor::scalar(v.sum() / T::from_f64_lossy(v.numel() as f64));
        self.record(y, Op::Mean(x), &[x], "mean")
    }

    /// Mean absolute error; subgradient `sign(pred - target) / numel` with `sign(0) = 0`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape(p, t, "l1_loss")?;
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let y = Tensor::scalar(total / T::from_f64_lossy(p.numel() as f64));
        self.record(y, Op::L1Loss { pred, target }, &[pred, target], "l1_loss")
    }

    /// Columns `[start, start + len)` of a rank-2 value.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!("column slice {start}+{len} of {cols}")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let y = Tensor::new([rows, len], data)?;
        self.record(y, Op::NarrowCols { x, start }, &[x], "narrow_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        self.record(y, Op::Reshape(x), &[x], "reshape")
    }

    /// `c + sum_i w_i * x_i` over scalar values.
    pub fn affine_scalars(&mut self, c: T, terms: Vec<(Var, T)>) -> Result<Var> {
        let mut acc = c;
        for &(v, w) in &terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::dim(format!("affine_scalars on shape {:?}", t.shape())));
            }
            acc = acc + w * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.record(
            Tensor::scalar(acc),
            Op::ConstPlusLinear(terms),
            &inputs,
            "affine_scalars",
        )
    }

    /// Sums of consecutive column blocks: `[rows, k * block] -> [rows, k]`.
    pub fn block_sums(&mut self, x: Var, block: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.dims2()?;
        if block == 0 || cols % block != 0 {
            return Err(Error::dim(format!("{cols} columns in blocks of {block}")));
        }
        let data = v.data().chunks(block).map(|c| c.iter().copied().sum()).collect();
        let y = Tensor::new([rows, cols / block], data)?;
        self.record(y, Op::BlockSums { x, block }, &[x], "block_sums")
    }

    /// Sum over rows of a quadratic form evaluated on each row of `x: [rows, k]`.
    pub fn row_quadratic(&mut self, x: Var, form: QuadraticForm<T>) -> Result<Var> {
        let v = self.value(x);
        let (_, k) = v.dims2()?;
        if form.linear.len() != k || form.pairs.iter().any(|&(i, j, _)| i >= k || j >= k) {
            return Err(Error::dim(format!("quadratic form does not fit rows of width {k}")));
        }
        let total: T = v.data().chunks(k).map(|row| form.eval(row)).sum();
        self.record(
            Tensor::scalar(total),
            Op::RowQuadratic { x, form },
            &[x],
            "row_quadratic",
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.tracked(input),
                    self.tracked(weight),
                    bias.is_some_and(|b| self.tracked(b)),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, input, dx);
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Linear { input, weight, bias } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (n, din) = x.dims2()?;
                let dout = w.shape()[0];
                if self.tracked(input) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g.data(),
                        false,
                        w.data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, input, Tensor::new([n, din], dx)?);
                }
                if self.tracked(weight) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g.data(),
                        true,
                        x.data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, weight, Tensor::new([dout, din], dw)?);
                }
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    self.accumulate(grads, b, Tensor::new([dout], db)?);
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let d = zip_map(g, xv, |gv, v| if v > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = zip_map(g, &node.value, |gv, s| gv * s * (T::one() - s));
                self.accumulate(grads, x, d);
            }
            &Op::SteGate(z) => {
                let d = zip_map(g, self.value(z), |gv, v| {
                    let s = sigmoid_scalar(v);
                    gv * s * (T::one() - s)
                });
                self.accumulate(grads, z, d);
            }
            &Op::Abs(x) => {
                let d = zip_map(g, self.value(x), |gv, v| gv * sign(v));
                self.accumulate(grads, x, d);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate(grads, a, zip_map(g, vb, |gv, y| gv * y));
                self.accumulate(grads, b, zip_map(g, va, |gv, x| gv * x));
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, g.map(|v| v * c));
            }
            &Op::ChannelScale { x, scale } => {
                let xv = self.value(x);
                let sv = self.value(scale);
                if self.tracked(x) {
                    self.accumulate(grads, x, kernels::channel_scale(g, sv)?);
                }
                if self.tracked(scale) {
                    let (_, _, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let ds: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, scale, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            &Op::PixelShuffle { x, factor } => {
                self.accumulate(grads, x, kernels::pixel_unshuffle(g, factor)?);
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.value(x).shape().to_vec(), gv));
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let gv = g.data()[0] / T::from_f64_lossy(xv.numel() as f64);
                self.accumulate(grads, x, Tensor::full(xv.shape().to_vec(), gv));
            }
            &Op::L1Loss { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let k = g.data()[0] / T::from_f64_lossy(p.numel() as f64);
                let d = zip_map(p, t, |a, b| k * sign(a - b));
                if self.tracked(target) {
                    self.accumulate(grads, target, d.map(|v| -v));
                }
                self.accumulate(grads, pred, d);
            }
            &Op::NarrowCols { x, start } => {
                let (rows, cols) = self.value(x).dims2()?;
                let len = g.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, x, Tensor::new([rows, cols], d)?);
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshape(shape)?);
            }
            Op::ConstPlusLinear(terms) => {
                let gv = g.data()[0];
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gv * w));
                }
            }
            &Op::BlockSums { x, block } => {
                let shape = self.value(x).shape().to_vec();
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, block)).collect();
                self.accumulate(grads, x, Tensor::new(shape, d)?);
            }
            Op::RowQuadratic { x, form } => {
                let xv = self.value(*x);
                let k = form.linear.len();
                let gv = g.data()[0];
                let mut d = vec![T::zero(); xv.numel()];
                for (row, out) in xv.data().chunks(k).zip(d.chunks_mut(k)) {
                    form.grad(row, gv, out);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ste_gate_forward_and_local_derivative() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::new([3], vec![0.5, 0.0, -1.0]).unwrap());
        let g = tape.ste_gate(z).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 0.0, 0.0]);
        let s = tape.sum(g).unwrap();
        let grads = tape.backward(s).unwrap();
        let dz = grads.get(z).unwrap();
        assert_eq!(dz.data()[1], 0.25);
    }

    #[test]
    fn l1_loss_value_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new([2], vec![1.0, 3.0]).unwrap());
        let t = tape.constant(Tensor::new([2], vec![2.0, 1.0]).unwrap());
        let l = tape.l1_loss(p, t).unwrap();
        assert_eq!(tape.scalar_value(l), 1.5);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[-0.5, 0.5]);

        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new([2], vec![2.0, 2.0]).unwrap());
        let t = tape.constant(Tensor::new([2], vec![2.0, 2.0]).unwrap());
        let l = tape.l1_loss(p, t).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let c = tape.mul(a, b).unwrap();
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros([2]));
        let b = tape.param(Tensor::zeros([3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(tape.l1_loss(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_forward_is_numeric_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::scalar(f32::MAX));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gated_channels_are_exactly_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn([1, 3, 2, 2], |i| i as f32 + 0.5));
        let z = tape.param(Tensor::new([1, 3], vec![1.0, -2.0, 0.0]).unwrap());
        let g = tape.ste_gate(z).unwrap();
        let y = tape.channel_scale(x, g).unwrap();
        let v = tape.value(y).data();
        assert!(v[4..12].iter().all(|&e| e == 0.0));
        assert_eq!(&v[..4], &tape.value(x).data()[..4]);
    }
}
