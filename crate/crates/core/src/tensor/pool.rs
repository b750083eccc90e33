use super::conv::ConvGeometry;
use super::Tensor;
use crate::error::{Error, Result};

/// Max-pool output together with the flat input index that won each window.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Per-window maximum over `kernel × kernel` windows.
///
/// In ceil mode the trailing partial window is clipped to the input, which
/// is what yields 75→38, 38→19 and 19→10. Ties go to the first element in
/// row-major window order.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, ceil_mode: bool) -> Result<Pooled> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "kernel and stride must be ≥ 1"));
    }
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("max_pool2d", "empty spatial extent"));
    }
    let geo = ConvGeometry {
        stride,
        padding: 0,
        ceil_mode,
    };
    let (oh, ow) = match (geo.output_size(h, kernel), geo.output_size(w, kernel)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("max_pool2d", format!("window {kernel} exceeds {h}×{w}"))),
    };
    let mut output = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0; n * c * oh * ow];
    let out = output.data_mut();
    let src = x.data();
    if kernel == 2 && stride == 2 {
        pool_2x2(src, h, w, oh, ow, out, &mut argmax);
        return Ok(Pooled { output, argmax });
    }
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            let y0 = y * stride;
            let y1 = (y0 + kernel).min(h);
            for xx in 0..ow {
                let x0 = xx * stride;
                let x1 = (x0 + kernel).min(w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out[o] = src[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    Ok(Pooled { output, argmax })
}

/// Fast path for the ubiquitous 2×2 stride-2 window; same tie rule.
fn pool_2x2(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64], argmax: &mut [usize]) {
    let planes = out.len() / (oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for y in 0..oh {
            let r0 = base + 2 * y * w;
            let r1 = if 2 * y + 1 < h { Some(r0 + w) } else { None };
            let o = (plane * oh + y) * ow;
            for (xx, (dst, am)) in out[o..o + ow].iter_mut().zip(&mut argmax[o..o + ow]).enumerate() {
                let x0 = 2 * xx;
                let second = x0 + 1 < w;
                let mut best = r0 + x0;
                if second && src[r0 + x0 + 1] > src[best] {
                    best = r0 + x0 + 1;
                }
                if let Some(r1) = r1 {
                    if src[r1 + x0] > src[best] {
                        best = r1 + x0;
                    }
                    if second && src[r1 + x0 + 1] > src[best] {
                        best = r1 + x0 + 1;
                    }
                }
                *dst = src[best];
                *am = best;
            }
        }
    }
}

pub fn max_pool2d_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}
