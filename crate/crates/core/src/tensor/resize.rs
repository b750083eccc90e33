use super::Tensor;
use crate::error::{Error, Result};

/// Two source taps and their weights along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre sampling positions, clamped to the valid range.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// `a + (b − a)·t`; exact whenever `a == b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn check(x: &Tensor, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be ≥ 1"));
    }
    if x.height() == 0 || x.width() == 0 {
        return Err(Error::shape("bilinear_resize", "empty input"));
    }
    Ok(())
}

/// Bilinear interpolation to `out_h × out_w` using half-pixel centres.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    check(x, out_h, out_w)?;
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return Tensor::from_vec(x.shape(), x.data().to_vec());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let dst = out.data_mut();
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let plane = &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let top = &src[ry.lo * w..(ry.lo + 1) * w];
            let bot = &src[ry.hi * w..(ry.hi + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let t = lerp(top[rx.lo], top[rx.hi], rx.frac);
                let b = lerp(bot[rx.lo], bot[rx.hi], rx.frac);
                plane[oy * out_w + ox] = lerp(t, b, ry.frac);
            }
        }
    }
    Ok(out)
}

/// Scatters `grad_out` back through the same four interpolation weights.
pub fn bilinear_resize_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    let [gn, gc, out_h, out_w] = grad_out.shape();
    if (gn, gc) != (n, c) {
        return Err(Error::shape("bilinear_resize_backward", "batch/channel mismatch"));
    }
    if (h, w) == (out_h, out_w) {
        return Tensor::from_vec(input_shape, grad_out.data().to_vec());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let dst = dx.data_mut();
    for p in 0..n * c {
        let g = &grad_out.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let top = v * (1.0 - ry.frac);
                let bot = v * ry.frac;
                plane[ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                plane[ry.lo * w + rx.hi] += top * rx.frac;
                plane[ry.hi * w + rx.lo] += bot * (1.0 - rx.frac);
                plane[ry.hi * w + rx.hi] += bot * rx.frac;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pointwise evaluation of the half-pixel formula, independent of the
    /// tap tables above.
    fn scalar_sample(src: &[[f64; 2]; 2], in_size: usize, out_size: usize, oy: usize, ox: usize) -> f64 {
        let coord = |d: usize| {
            let s = (d as f64 + 0.5) * in_size as f64 / out_size as f64 - 0.5;
            s.max(0.0).min(in_size as f64 - 1.0)
        };
        let (sy, sx) = (coord(oy), coord(ox));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(in_size - 1), (x0 + 1).min(in_size - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        src[y0][x0] * (1.0 - fy) * (1.0 - fx)
            + src[y0][x1] * (1.0 - fy) * fx
            + src[y1][x0] * fy * (1.0 - fx)
            + src[y1][x1] * fy * fx
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let e = scalar_sample(&src, 2, 4, oy, ox);
                assert!((y.at(0, 0, oy, ox) - e).abs() < 1e-15);
            }
        }
        // Corners clamp; first interior sample sits a quarter of the way in.
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
        assert_eq!(y.at(0, 0, 3, 3), 3.0);
        assert!((y.at(0, 0, 0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_size_is_exact() {
        let x = Tensor::from_vec([1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap(), x);
    }

    #[test]
    fn constants_preserved() {
        let x = Tensor::full([2, 2, 5, 3], -0.75);
        for (h, w) in [(1, 1), (7, 9), (38, 38), (2, 11)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == -0.75));
        }
    }

    #[test]
    fn rejects_zero_output() {
        assert!(bilinear_resize(&Tensor::zeros([1, 1, 2, 2]), 0, 3).is_err());
    }
}
