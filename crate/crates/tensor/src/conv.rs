//! 2-D convolution via im2col and GEMM.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output is `ceil(in / stride)`; zero padding split as evenly as
    /// possible with the odd pixel at the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn same_axis(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    (out, total / 2)
}

/// Output spatial size and leading padding for one axis.
pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(same_axis(size, k, stride).0),
        Padding::Valid => (size >= k).then(|| (size - k) / stride + 1),
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[B, Cin, H, W]` with a `[Cout, Cin, k, k]` kernel.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let is = input.shape().to_vec();
    let ks = kernel.shape().to_vec();
    if is.len() != 4 || ks.len() != 4 {
        return shape_err("conv2d", format!("expected 4-d input and kernel, got {is:?} and {ks:?}"));
    }
    let (b, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, kcin, k) = (ks[0], ks[1], ks[2]);
    if ks[3] != k {
        return shape_err("conv2d", format!("kernel must be square, got {ks:?}"));
    }
    if kcin != cin {
        return shape_err("conv2d", format!("input has {cin} channels but kernel {ks:?} expects {kcin}"));
    }
    if stride == 0 {
        return arg_err("conv2d", "stride must be positive");
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return shape_err("conv2d", format!("bias shape {:?} does not match {cout} output channels", bias.shape()));
        }
    }
    let geom = match padding {
        Padding::Same => {
            if h % stride != 0 || w % stride != 0 {
                return shape_err("conv2d", format!("same padding needs {h}x{w} divisible by stride {stride}"));
            }
            let (out_h, pad_top) = same_axis(h, k, stride);
            let (out_w, pad_left) = same_axis(w, k, stride);
            Geometry { cin, h, w, k, stride, out_h, out_w, pad_top, pad_left }
        }
        Padding::Valid => {
            if h < k || w < k {
                return shape_err("conv2d", format!("{h}x{w} input smaller than {k}x{k} kernel"));
            }
            let out_h = (h - k) / stride + 1;
            let out_w = (w - k) / stride + 1;
            Geometry { cin, h, w, k, stride, out_h, out_w, pad_top: 0, pad_left: 0 }
        }
    };

    let (rows, ncols) = (geom.rows(), geom.cols());
    let in_plane = cin * h * w;
    let out_plane = cout * ncols;
    let mut out = vec![T::zero(); b * out_plane];
    let mut cols = vec![T::zero(); rows * ncols];
    {
        let x = input.data();
        let kd = kernel.data();
        let bd = bias.map(|t| t.data());
        for bi in 0..b {
            im2col(&x[bi * in_plane..(bi + 1) * in_plane], &geom, &mut cols);
            let o = &mut out[bi * out_plane..(bi + 1) * out_plane];
            T::gemm(cout, rows, ncols, &kd, false, &cols, false, o, false);
            if let Some(bd) = &bd {
                for (co, chunk) in o.chunks_mut(ncols).enumerate() {
                    for v in chunk {
                        *v = *v + bd[co];
                    }
                }
            }
        }
    }

    let (xin, kern) = (input.clone(), kernel.clone());
    let mut inputs = vec![input.clone(), kernel.clone()];
    if let Some(bias) = bias {
        inputs.push(bias.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op("conv2d", vec![b, cout, geom.out_h, geom.out_w], out, inputs, move |g, needs| {
        let x = xin.data();
        let kd = kern.data();
        let mut dx = needs[0].then(|| vec![T::zero(); b * in_plane]);
        let mut dk = needs[1].then(|| vec![T::zero(); cout * rows]);
        let mut db = (has_bias && needs[2]).then(|| vec![T::zero(); cout]);
        let mut cols = vec![T::zero(); rows * ncols];
        for bi in 0..b {
            let go = &g[bi * out_plane..(bi + 1) * out_plane];
            if let Some(dk) = dk.as_mut() {
                im2col(&x[bi * in_plane..(bi + 1) * in_plane], &geom, &mut cols);
                T::gemm(cout, ncols, rows, go, false, &cols, true, dk, true);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(rows, cout, ncols, &kd, true, go, false, &mut cols, false);
                col2im(&cols, &geom, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
            }
            if let Some(db) = db.as_mut() {
                for (co, chunk) in go.chunks(ncols).enumerate() {
                    db[co] = db[co] + chunk.iter().copied().sum::<T>();
                }
            }
        }
        let mut grads = vec![dx, dk];
        if has_bias {
            grads.push(db);
        }
        grads
    }))
}
