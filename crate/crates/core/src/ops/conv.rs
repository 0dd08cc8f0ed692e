//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Static geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if self.kernel == 0
            || self.kernel > self.in_h + 2 * self.pad
            || self.kernel > self.in_w + 2 * self.pad
        {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {} does not fit a {}x{} input with padding {}",
                    self.kernel, self.in_h, self.in_w, self.pad
                ),
            ));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_area(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_area(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Unrolls a batch into `cols [patch_len x (B * out_area)]`.
    fn im2col<T: Scalar>(&self, input: &[T], batch: usize) -> Vec<T> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let area = oh * ow;
        let width = batch * area;
        let mut cols = vec![T::zero(); self.patch_len() * width];
        for b in 0..batch {
            let img = &input[b * self.in_channels * self.in_area()..];
            for c in 0..self.in_channels {
                let plane = &img[c * self.in_area()..(c + 1) * self.in_area()];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let dst = &mut cols[row * width + b * area..row * width + (b + 1) * area];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.in_w as isize {
                                    dst[oy * ow + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`]: scatters column gradients back onto the input.
    fn col2im<T: Scalar>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let area = oh * ow;
        let width = batch * area;
        let per_img = self.in_channels * self.in_area();
        let mut out = vec![T::zero(); batch * per_img];
        for b in 0..batch {
            for c in 0..self.in_channels {
                let plane = &mut out[b * per_img + c * self.in_area()..][..self.in_area()];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let src = &cols[row * width + b * area..row * width + (b + 1) * area];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.in_w as isize {
                                    plane[iy as usize * self.in_w + ix as usize] += src[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Splits `[C,H,W]` or `[B,C,H,W]` into `(batch, had_batch_axis)` after
/// checking it against the kernel bank.
fn check_input<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, geom: &ConvGeom) -> Result<(usize, bool)> {
    let (batch, c, h, w, batched) = match input.shape() {
        &[c, h, w] => (1, c, h, w, false),
        &[b, c, h, w] => (b, c, h, w, true),
        s => return Err(Error::dim("conv2d", format!("input must be [C,H,W] or [B,C,H,W], got {s:?}"))),
    };
    if kernels.shape() != [geom.out_channels, geom.in_channels, geom.kernel, geom.kernel]
        || c != geom.in_channels
        || h != geom.in_h
        || w != geom.in_w
    {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} incompatible with kernels {:?}", input.shape(), kernels.shape()),
        ));
    }
    Ok((batch, batched))
}

fn geom_for<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let ks = kernels.shape();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::dim("conv2d", format!("kernels must be [Co,Ci,k,k], got {ks:?}")));
    }
    let s = input.shape();
    if s.len() < 3 {
        return Err(Error::dim("conv2d", format!("input must be [C,H,W] or [B,C,H,W], got {s:?}")));
    }
    let n = s.len();
    let geom = ConvGeom {
        in_channels: s[n - 3],
        out_channels: ks[0],
        kernel: ks[2],
        stride,
        pad,
        in_h: s[n - 2],
        in_w: s[n - 1],
    };
    geom.validate()?;
    Ok(geom)
}

/// Cross-correlation of `input` with `kernels [C_out x C_in x k x k]`.
///
/// Accepts a single image `[C,H,W]` or a batch `[B,C,H,W]`; the output keeps
/// the input's rank.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = geom_for(input, kernels, stride, pad)?;
    let (batch, batched) = check_input(input, kernels, &geom)?;
    if let Some(b) = bias {
        if b.len() != geom.out_channels {
            return Err(Error::dim("conv2d", format!("bias length {} for {} channels", b.len(), geom.out_channels)));
        }
    }
    let out = conv2d_raw(&geom, input.data(), kernels.data(), bias.map(|b| b.data()), batch);
    let shape = if batched {
        vec![batch, geom.out_channels, geom.out_h(), geom.out_w()]
    } else {
        vec![geom.out_channels, geom.out_h(), geom.out_w()]
    };
    Tensor::new(shape, out)?.finite("conv2d")
}

/// Unchecked batched forward; `input` is `[B, C_in, H, W]` flattened.
pub(crate) fn conv2d_raw<T: Scalar>(
    geom: &ConvGeom,
    input: &[T],
    kernels: &[T],
    bias: Option<&[T]>,
    batch: usize,
) -> Vec<T> {
    let area = geom.out_area();
    let width = batch * area;
    let cols = geom.im2col(input, batch);
    let mut flat = vec![T::zero(); geom.out_channels * width];
    gemm(
        MatRef::rm(kernels, geom.out_channels, geom.patch_len()),
        MatRef::rm(&cols, geom.patch_len(), width),
        T::zero(),
        &mut flat,
    );
    // [Co, B*area] -> [B, Co, area]
    let mut out = vec![T::zero(); batch * geom.out_channels * area];
    for co in 0..geom.out_channels {
        let bias_v = bias.map_or(T::zero(), |b| b[co]);
        for b in 0..batch {
            let src = &flat[co * width + b * area..co * width + (b + 1) * area];
            let dst = &mut out[(b * geom.out_channels + co) * area..][..area];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias_v;
            }
        }
    }
    out
}

/// Unchecked batched backward. Returns `(grad_input, grad_kernels, grad_bias)`.
pub(crate) fn conv2d_backward_raw<T: Scalar>(
    geom: &ConvGeom,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    batch: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let area = geom.out_area();
    let width = batch * area;
    // [B, Co, area] -> [Co, B*area]
    let mut g = vec![T::zero(); geom.out_channels * width];
    let mut gbias = vec![T::zero(); geom.out_channels];
    for b in 0..batch {
        for co in 0..geom.out_channels {
            let src = &grad_out[(b * geom.out_channels + co) * area..][..area];
            g[co * width + b * area..co * width + (b + 1) * area].copy_from_slice(src);
        }
    }
    for co in 0..geom.out_channels {
        gbias[co] = g[co * width..(co + 1) * width].iter().copied().sum();
    }
    let cols = geom.im2col(input, batch);
    let gmat = MatRef::rm(&g, geom.out_channels, width);
    let mut gk = vec![T::zero(); geom.out_channels * geom.patch_len()];
    gemm(gmat, MatRef::rm(&cols, geom.patch_len(), width).t(), T::zero(), &mut gk);
    let mut gcols = vec![T::zero(); geom.patch_len() * width];
    gemm(
        MatRef::rm(kernels, geom.out_channels, geom.patch_len()).t(),
        gmat,
        T::zero(),
        &mut gcols,
    );
    (geom.col2im(&gcols, batch), gk, gbias)
}

/// Gradients of [`conv2d`]: `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let geom = geom_for(input, kernels, stride, pad)?;
    let (batch, _) = check_input(input, kernels, &geom)?;
    if grad_out.len() != batch * geom.out_channels * geom.out_area() {
        return Err(Error::dim(
            "conv2d_backward",
            format!("upstream {:?} does not match output geometry", grad_out.shape()),
        ));
    }
    let (gi, gk, gb) = conv2d_backward_raw(&geom, input.data(), kernels.data(), grad_out.data(), batch);
    Ok((
        Tensor::new(input.shape().to_vec(), gi)?.finite("conv2d_backward")?,
        Tensor::new(kernels.shape().to_vec(), gk)?.finite("conv2d_backward")?,
        Tensor::new(vec![geom.out_channels], gb)?.finite("conv2d_backward")?,
    ))
}
