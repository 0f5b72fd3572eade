//! Spatial resampling: nearest-neighbour upsampling and 2×2 max pooling.

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

fn dims4<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, ch, h, w] => Ok((b, ch, h, w)),
        ref s => shape_err(op, format!("expected 4-d input, got {s:?}")),
    }
}

/// Replicates each pixel into a `factor×factor` block.
pub fn upsample_nn<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, ch, h, w) = dims4("upsample_nn", input)?;
    if factor == 0 {
        return arg_err("upsample_nn", "factor must be at least 1");
    }
    let (oh, ow) = (h * factor, w * factor);
    let planes = b * ch;
    let mut out = vec![T::zero(); planes * oh * ow];
    {
        let x = input.data();
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / factor];
                }
            }
        }
    }
    Ok(Tensor::from_op("upsample_nn", vec![b, ch, oh, ow], out, vec![input.clone()], move |g, _| {
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = (oy / factor) * w + ox / factor;
                    dst[i] = dst[i] + src[oy * ow + ox];
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Non-overlapping 2×2 max pooling; ties go to the first pixel in raster
/// order.
pub fn max_pool2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, ch, h, w) = dims4("max_pool2", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("max_pool2", format!("{h}x{w} is not divisible by 2"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let planes = b * ch;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut argmax = vec![0usize; planes * oh * ow];
    {
        let x = input.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
    }
    let n_in = planes * h * w;
    Ok(Tensor::from_op("max_pool2", vec![b, ch, oh, ow], out, vec![input.clone()], move |g, _| {
        let mut dx = vec![T::zero(); n_in];
        for (&i, &gi) in argmax.iter().zip(g) {
            dx[i] = dx[i] + gi;
        }
        vec![Some(dx)]
    }))
}
