use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward: same shape")
}

/// Stacks inputs along the channel axis, preserving order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.shape();
    for x in xs {
        let [xn, _, xh, xw] = x.shape();
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
    }
    let total: usize = xs.iter().map(|x| x.channels()).sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for x in xs {
            data.extend_from_slice(x.image(b));
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("[{start}, {}) outside {c} channels", start + len),
        ));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let img = x.image(b);
        data.extend_from_slice(&img[start * hw..(start + len) * hw]);
    }
    Tensor::from_vec([n, len, h, w], data)
}

pub fn elementwise_add(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("elementwise_add", "no inputs"))?;
    let mut out = Tensor::zeros(first.shape());
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::shape(
                "elementwise_add",
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
    }
    Ok(out)
}
