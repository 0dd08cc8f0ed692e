use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its *output*.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if out.shape() != grad.shape() {
        return Err(Error::dim("relu_backward", format!("{:?} vs {:?}", out.shape(), grad.shape())));
    }
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(out.shape().to_vec(), data)
}

/// Argmax positions recorded by [`maxpool2d`].
#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

/// Non-overlapping `size x size` max pooling of `[B, C, H, W]`; trailing rows
/// and columns that do not fill a window are dropped.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, PoolCache)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::dim("maxpool2d", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if size == 0 || h < size || w < size {
        return Err(Error::dim("maxpool2d", format!("window {size} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        PoolCache {
            argmax,
            in_shape: x.shape().to_vec(),
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(grad: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    if grad.len() != cache.argmax.len() {
        return Err(Error::dim("maxpool2d_backward", "upstream does not match pooled output"));
    }
    let mut gx = Tensor::zeros(&cache.in_shape);
    let gd = gx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(grad.data()) {
        gd[i] += g;
    }
    Ok(gx)
}
