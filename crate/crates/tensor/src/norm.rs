use crate::element::{c, Element};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Per-sample, per-channel spatial standardization with learned `gain` and
/// `shift` (population variance).
pub fn instance_norm<T: Element>(
    input: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 {
        return shape_err("instance_norm", format!("expected 4-d input, got {s:?}"));
    }
    let (b, ch, plane) = (s[0], s[1], s[2] * s[3]);
    if plane < 2 {
        return arg_err("instance_norm", format!("a {}x{} plane has no spatial variance", s[2], s[3]));
    }
    if gain.shape() != [ch] || shift.shape() != [ch] {
        return shape_err(
            "instance_norm",
            format!("gain {:?} / shift {:?} must be [{ch}]", gain.shape(), shift.shape()),
        );
    }
    let n = c::<T>(plane as f64);
    let eps = c::<T>(epsilon);
    let mut xhat = vec![T::zero(); b * ch * plane];
    let mut inv_std = vec![T::zero(); b * ch];
    let mut out = vec![T::zero(); b * ch * plane];
    {
        let x = input.data();
        let (gd, sd) = (gain.data(), shift.data());
        for p in 0..b * ch {
            let xs = &x[p * plane..(p + 1) * plane];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[p] = inv;
            let (gc, sc) = (gd[p % ch], sd[p % ch]);
            for i in 0..plane {
                let xh = (xs[i] - mean) * inv;
                xhat[p * plane + i] = xh;
                out[p * plane + i] = gc * xh + sc;
            }
        }
    }

    let g_t = gain.clone();
    Ok(Tensor::from_op(
        "instance_norm",
        s.to_vec(),
        out,
        vec![input.clone(), gain.clone(), shift.clone()],
        move |g, needs| {
            let gd = g_t.data();
            let mut dx = needs[0].then(|| vec![T::zero(); b * ch * plane]);
            let mut dgain = needs[1].then(|| vec![T::zero(); ch]);
            let mut dshift = needs[2].then(|| vec![T::zero(); ch]);
            for p in 0..b * ch {
                let cidx = p % ch;
                let gs = &g[p * plane..(p + 1) * plane];
                let xh = &xhat[p * plane..(p + 1) * plane];
                let sum_g: T = gs.iter().copied().sum();
                let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                if let Some(dg) = dgain.as_mut() {
                    dg[cidx] = dg[cidx] + sum_gx;
                }
                if let Some(ds) = dshift.as_mut() {
                    ds[cidx] = ds[cidx] + sum_g;
                }
                if let Some(dx) = dx.as_mut() {
                    // dx = gain·inv/n · (n·g − Σg − x̂·Σ(g·x̂))
                    let scale = gd[cidx] * inv_std[p] / n;
                    for i in 0..plane {
                        dx[p * plane + i] = scale * (n * gs[i] - sum_g - xh[i] * sum_gx);
                    }
                }
            }
            vec![dx, dgain, dshift]
        },
    ))
}
