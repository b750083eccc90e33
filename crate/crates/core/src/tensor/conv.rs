//! 2-D cross-correlation via im2col + GEMM.

use rand::Rng;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Stride/padding/rounding shared by convolution and pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub ceil_mode: bool,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            ceil_mode: false,
        }
    }

    /// Output extent for an input extent and kernel size, or `None` if no
    /// window fits.
    ///
    /// In ceil mode a trailing partial window is kept as long as it starts
    /// inside the input or the leading padding.
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || kernel == 0 {
            return None;
        }
        let span = (input + 2 * self.padding).checked_sub(kernel)?;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        if self.ceil_mode && out > 1 && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        Some(out)
    }
}

/// Weights `(out, in, kh, kw)`, one bias per output channel, and window geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub geometry: ConvGeometry,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>, geometry: ConvGeometry) -> Result<Self> {
        if bias.len() != weights.shape()[0] {
            return Err(Error::shape(
                "ConvParams::new",
                format!("{} biases for {} filters", bias.len(), weights.shape()[0]),
            ));
        }
        Ok(ConvParams {
            weights,
            bias,
            geometry,
        })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        ConvParams {
            weights: Tensor::xavier_uniform([out_channels, in_channels, kernel, kernel], rng),
            bias: vec![0.0; out_channels],
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weights, &self.bias, self.geometry)
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Arithmetic used inside convolution GEMMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemmPrecision {
    /// Exact `f64` throughout; required by gradient checks.
    #[default]
    F64,
    /// Operands rounded to `f32` for the matrix product, results widened
    /// back to `f64`. Roughly twice as fast.
    F32,
}

thread_local! {
    static PRECISION: std::cell::Cell<GemmPrecision> = const { std::cell::Cell::new(GemmPrecision::F64) };
}

pub fn gemm_precision() -> GemmPrecision {
    PRECISION.with(|p| p.get())
}

/// Sets the convolution precision of the current thread; returns the old one.
pub fn set_gemm_precision(p: GemmPrecision) -> GemmPrecision {
    PRECISION.with(|c| c.replace(p))
}

trait Scalar: Copy + Default + std::ops::AddAssign + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// # Safety
    /// Every index implied by the dimensions and strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        assert!(k > 0 || beta.to_f64() == 0.0 || beta.to_f64() == 1.0);
        if k == 0 && beta.to_f64() == 0.0 {
            c[..m * n].fill(T::default());
        }
        return;
    }
    let a_extent = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let b_extent = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!((a_extent as usize) < a.len() && (b_extent as usize) < b.len());
    // SAFETY: the asserts above bound every index the kernel can touch in
    // `a`, `b` and `c`; `c` is uniquely borrowed.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

struct Plan {
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    geo: ConvGeometry,
}

impl Plan {
    fn new(x: Shape, w: Shape, geo: ConvGeometry) -> Result<Self> {
        if geo.stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weights expect {}", x[1], w[1]),
            ));
        }
        let out_h = geo
            .output_size(x[2], w[2])
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} exceeds height {}", w[2], x[2])))?;
        let out_w = geo
            .output_size(x[3], w[3])
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} exceeds width {}", w[3], x[3])))?;
        Ok(Plan {
            n: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            kh: w[2],
            kw: w[3],
            out_h,
            out_w,
            geo,
        })
    }

    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }

    fn im2col<T: Scalar>(&self, image: &[f64], cols: &mut [T]) {
        if self.is_pointwise() {
            for (d, &s) in cols.iter_mut().zip(image) {
                *d = T::from_f64(s);
            }
            return;
        }
        let (s, pad) = (self.geo.stride as isize, self.geo.padding as isize);
        let p = self.p();
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s + ki as isize - pad;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.in_h as isize {
                            line.fill(T::default());
                            continue;
                        }
                        let src = &plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - pad;
                            *v = if iw < 0 || iw >= self.in_w as isize {
                                T::default()
                            } else {
                                T::from_f64(src[iw as usize])
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [f64]) {
        if self.is_pointwise() {
            for (d, &s) in image.iter_mut().zip(cols) {
                *d += s.to_f64();
            }
            return;
        }
        let (s, pad) = (self.geo.stride as isize, self.geo.padding as isize);
        let p = self.p();
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s + ki as isize - pad;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for ow in 0..self.out_w {
                            let iw = ow as isize * s + kj as isize - pad;
                            if iw >= 0 && iw < self.in_w as isize {
                                dst[iw as usize] += src[oh * self.out_w + ow].to_f64();
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &Tensor, weights: &Tensor, bias: &[f64]) -> Tensor {
        let (k, p) = (self.k(), self.p());
        let w: Vec<T> = weights.data().iter().map(|&v| T::from_f64(v)).collect();
        let mut cols = vec![T::default(); k * p];
        let mut acc = vec![T::default(); self.out_c * p];
        let mut out = Tensor::zeros([self.n, self.out_c, self.out_h, self.out_w]);
        let out_chw = self.out_c * p;
        for n in 0..self.n {
            self.im2col(x.image(n), &mut cols);
            gemm(self.out_c, k, p, &w, (k as isize, 1), &cols, (p as isize, 1), T::default(), &mut acc);
            let dst = &mut out.data_mut()[n * out_chw..(n + 1) * out_chw];
            for ((d, a), o) in dst.chunks_mut(p).zip(acc.chunks(p)).zip(bias) {
                for (d, &a) in d.iter_mut().zip(a) {
                    *d = o + a.to_f64();
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(
        &self,
        x: &Tensor,
        weights: &Tensor,
        grad_out: &Tensor,
        need_input: bool,
    ) -> (Option<Tensor>, Tensor, Vec<f64>) {
        let (k, p) = (self.k(), self.p());
        let w: Vec<T> = weights.data().iter().map(|&v| T::from_f64(v)).collect();
        let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
        let mut dw = vec![T::default(); self.out_c * k];
        let mut db = vec![0.0; self.out_c];
        let mut cols = vec![T::default(); k * p];
        let mut gy = vec![T::default(); self.out_c * p];
        let mut dcols = if need_input { vec![T::default(); k * p] } else { Vec::new() };
        let in_chw = self.in_c * self.in_h * self.in_w;
        for n in 0..self.n {
            let g = grad_out.image(n);
            for (o, chunk) in g.chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
            for (d, &s) in gy.iter_mut().zip(g) {
                *d = T::from_f64(s);
            }
            self.im2col(x.image(n), &mut cols);
            // dW (out×k) += gy (out×p) · colsᵀ (p×k)
            let one = T::from_f64(1.0);
            gemm(self.out_c, p, k, &gy, (p as isize, 1), &cols, (1, p as isize), one, &mut dw);
            if let Some(dx) = dx.as_mut() {
                // dcols (k×p) = Wᵀ (k×out) · gy (out×p)
                gemm(k, self.out_c, p, &w, (1, k as isize), &gy, (p as isize, 1), T::default(), &mut dcols);
                self.col2im(&dcols, &mut dx.data_mut()[n * in_chw..(n + 1) * in_chw]);
            }
        }
        let dw = Tensor::from_vec(weights.shape(), dw.into_iter().map(T::to_f64).collect()).expect("weight shape");
        (dx, dw, db)
    }
}

/// Cross-correlation of `x` with `weights`, plus bias.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: &[f64], geo: ConvGeometry) -> Result<Tensor> {
    let plan = Plan::new(x.shape(), weights.shape(), geo)?;
    if bias.len() != plan.out_c {
        return Err(Error::shape("conv2d", "bias length differs from filter count"));
    }
    Ok(match gemm_precision() {
        GemmPrecision::F64 => plan.forward::<f64>(x, weights, bias),
        GemmPrecision::F32 => plan.forward::<f32>(x, weights, bias),
    })
}

/// Gradients of `conv2d` with respect to input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weights: &Tensor,
    geo: ConvGeometry,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (input, weights, bias) = conv2d_backward_parts(x, weights, geo, grad_out, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weights,
        bias,
    })
}

/// As [`conv2d_backward`], skipping the input gradient unless `need_input`.
pub(crate) fn conv2d_backward_parts(
    x: &Tensor,
    weights: &Tensor,
    geo: ConvGeometry,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f64>)> {
    let plan = Plan::new(x.shape(), weights.shape(), geo)?;
    let expected = [plan.n, plan.out_c, plan.out_h, plan.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?}, expected {:?}", grad_out.shape(), expected),
        ));
    }
    Ok(match gemm_precision() {
        GemmPrecision::F64 => plan.backward::<f64>(x, weights, grad_out, need_input),
        GemmPrecision::F32 => plan.backward::<f32>(x, weights, grad_out, need_input),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Literal seven-loop cross-correlation.
    fn direct(x: &Tensor, w: &Tensor, b: &[f64], geo: ConvGeometry) -> Tensor {
        let [n, c, h, wd] = x.shape();
        let [o, _, kh, kw] = w.shape();
        let oh = geo.output_size(h, kh).unwrap();
        let ow = geo.output_size(wd, kw).unwrap();
        let mut out = Tensor::zeros([n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * geo.stride + ki) as isize - geo.padding as isize;
                                    let ix = (xx * geo.stride + kj) as isize - geo.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(ni, ci, iy as usize, ix as usize) * w.at(oi, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        let idx = out.index(ni, oi, y, xx);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &[0.0], ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::zeros([1, 3, 6, 6]);
        let w = Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, &[0.0; 4], ConvGeometry::new(1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_summation_3x3_pad1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = [0.3, -0.2];
        let geo = ConvGeometry::new(1, 1);
        let fast = conv2d(&x, &w, &b, geo).unwrap();
        let slow = direct(&x, &w, &b, geo);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn output_sizes() {
        let pool = ConvGeometry {
            stride: 2,
            padding: 0,
            ceil_mode: true,
        };
        assert_eq!(pool.output_size(75, 2), Some(38));
        assert_eq!(pool.output_size(38, 2), Some(19));
        assert_eq!(pool.output_size(19, 2), Some(10));
        let floor = ConvGeometry::new(2, 0);
        assert_eq!(floor.output_size(75, 2), Some(37));
        assert_eq!(floor.output_size(19, 2), Some(9));
        let down = ConvGeometry::new(2, 1);
        assert_eq!(down.output_size(38, 3), Some(19));
        assert_eq!(down.output_size(19, 3), Some(10));
        assert_eq!(down.output_size(5, 3), Some(3));
        assert_eq!(ConvGeometry::new(1, 0).output_size(3, 3), Some(1));
        assert_eq!(ConvGeometry::new(1, 0).output_size(2, 3), None);
    }

    #[test]
    fn rejects_channel_mismatch_and_zero_stride() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &w, &[0.0], ConvGeometry::new(1, 0)), Err(Error::Shape { .. })));
        let w = Tensor::zeros([1, 2, 1, 1]);
        assert!(matches!(
            conv2d(&x, &w, &[0.0], ConvGeometry::new(0, 0)),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn f32_gemm_is_close_and_restorable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform([2, 3, 7, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let geo = ConvGeometry::new(2, 1);
        let exact = conv2d(&x, &w, &[0.1, 0.2, 0.3, 0.4], geo).unwrap();
        let gy = Tensor::uniform(exact.shape(), -1.0, 1.0, &mut rng);
        let g64 = conv2d_backward(&x, &w, geo, &gy).unwrap();
        let old = set_gemm_precision(GemmPrecision::F32);
        let fast = conv2d(&x, &w, &[0.1, 0.2, 0.3, 0.4], geo).unwrap();
        let g32 = conv2d_backward(&x, &w, geo, &gy).unwrap();
        set_gemm_precision(old);
        assert_eq!(gemm_precision(), GemmPrecision::F64);
        assert!(exact.max_abs_diff(&fast) < 1e-5);
        assert!(g64.input.max_abs_diff(&g32.input) < 1e-5);
        assert!(g64.weights.max_abs_diff(&g32.weights) < 1e-5);
        assert_ne!(exact, fast);
    }
}
