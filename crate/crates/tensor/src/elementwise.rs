//! Pointwise maps, binary arithmetic, reductions and channel concatenation.

use crate::element::{c, Element};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

/// Sums `g` down to `len` elements: identity when sizes match, total when
/// the operand was a broadcast scalar.
fn reduce_to<T: Element>(g: Vec<T>, len: usize) -> Vec<T> {
    if g.len() == len {
        g
    } else {
        vec![g.into_iter().sum()]
    }
}

fn binary<T: Element>(lhs: &Tensor<T>, rhs: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let (ln, rn) = (lhs.numel(), rhs.numel());
    let shape = if lhs.shape() == rhs.shape() || rn == 1 {
        lhs.shape().to_vec()
    } else if ln == 1 {
        rhs.shape().to_vec()
    } else {
        return shape_err(op.name(), format!("{:?} vs {:?}", lhs.shape(), rhs.shape()));
    };
    let n: usize = shape.iter().product();
    let li = move |i: usize| if ln == 1 { 0 } else { i };
    let ri = move |i: usize| if rn == 1 { 0 } else { i };

    let out: Vec<T> = {
        let (a, b) = (lhs.data(), rhs.data());
        (0..n)
            .map(|i| {
                let (x, y) = (a[li(i)], b[ri(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect()
    };

    let (l, r) = (lhs.clone(), rhs.clone());
    Ok(Tensor::from_op(op.name(), shape, out, vec![lhs.clone(), rhs.clone()], move |g, needs| {
        let a = l.data();
        let b = r.data();
        let gl = needs[0].then(|| {
            let full: Vec<T> = match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[ri(i)]).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / b[ri(i)]).collect(),
            };
            reduce_to(full, ln)
        });
        let gr = needs[1].then(|| {
            let full: Vec<T> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|&gi| -gi).collect(),
                BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[li(i)]).collect(),
                BinOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let y = b[ri(i)];
                        -gi * a[li(i)] / (y * y)
                    })
                    .collect(),
            };
            reduce_to(full, rn)
        });
        vec![gl, gr]
    }))
}

/// Pointwise map with a derivative expressed in terms of input `x` and
/// output `y`.
fn unary<T: Element>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let saved_out = out.clone();
    let input = x.clone();
    Tensor::from_op(name, x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
        let xs = input.data();
        let grad = g.iter().zip(xs.iter().zip(&saved_out)).map(|(&gi, (&xi, &yi))| gi * df(xi, yi)).collect();
        vec![Some(grad)]
    })
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        binary(self, other, BinOp::Div)
    }

    /// `scale·x + offset`.
    pub fn affine(&self, scale: f64, offset: f64) -> Self {
        let (s, o) = (c::<T>(scale), c::<T>(offset));
        unary(self, "affine", move |v| s * v + o, move |_, _| s)
    }

    pub fn add_scalar(&self, v: f64) -> Self {
        self.affine(1.0, v)
    }

    pub fn mul_scalar(&self, v: f64) -> Self {
        self.affine(v, 0.0)
    }

    pub fn abs(&self) -> Self {
        unary(
            self,
            "abs",
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Self {
        unary(self, "square", |v| v * v, |x, _| x + x)
    }

    pub fn relu(&self) -> Self {
        unary(
            self,
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let s = c::<T>(slope);
        unary(
            self,
            "leaky_relu",
            move |v| if v >= T::zero() { v } else { s * v },
            move |x, _| if x >= T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Self {
        unary(self, "sigmoid", |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn sum(&self) -> Self {
        let n = self.numel();
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Self {
        let n = self.numel();
        let inv = T::one() / c::<T>(n as f64);
        let total: T = self.data().iter().copied().sum();
        Tensor::from_op("mean", vec![1], vec![total * inv], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }
}

/// Concatenates `[B, C_i, H, W]` tensors along the channel axis, in order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return shape_err("concat_channels", "no inputs");
    };
    if first.shape().len() != 4 {
        return shape_err("concat_channels", format!("expected 4-d, got {:?}", first.shape()));
    }
    let (b, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
            return shape_err("concat_channels", format!("{:?} incompatible with {:?}", s, first.shape()));
        }
    }
    let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total_c: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total_c * plane);
    for bi in 0..b {
        for (p, &ci) in parts.iter().zip(&chans) {
            let d = p.data();
            out.extend_from_slice(&d[bi * ci * plane..(bi + 1) * ci * plane]);
        }
    }
    let inputs: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op("concat_channels", vec![b, total_c, h, w], out, inputs, move |g, needs| {
        let mut grads: Vec<Option<Vec<T>>> =
            chans.iter().zip(needs).map(|(&ci, &need)| need.then(|| Vec::with_capacity(b * ci * plane))).collect();
        for bi in 0..b {
            let mut off = bi * total_c * plane;
            for (slot, &ci) in grads.iter_mut().zip(&chans) {
                let len = ci * plane;
                if let Some(v) = slot {
                    v.extend_from_slice(&g[off..off + len]);
                }
                off += len;
            }
        }
        grads
    }))
}
