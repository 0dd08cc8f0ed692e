use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Matrix product of `a [M x K]` and `b [K x N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::rm(a.data(), m, k), MatRef::rm(b.data(), k, n), T::zero(), &mut out);
    Tensor::new(vec![m, n], out)?.finite("matmul")
}

/// Gradients of `matmul(a, b)` given the upstream gradient `grad [M x N]`:
/// `(grad * b^T, a^T * grad)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.dims2("matmul_backward")?;
    let (k2, n) = b.dims2("matmul_backward")?;
    if k != k2 || grad.shape() != [m, n] {
        return Err(Error::dim(
            "matmul_backward",
            format!(
                "shapes {:?} x {:?} with upstream {:?}",
                a.shape(),
                b.shape(),
                grad.shape()
            ),
        ));
    }
    let g = MatRef::rm(grad.data(), m, n);
    let mut ga = vec![T::zero(); m * k];
    gemm(g, MatRef::rm(b.data(), k, n).t(), T::zero(), &mut ga);
    let mut gb = vec![T::zero(); k * n];
    gemm(MatRef::rm(a.data(), m, k).t(), g, T::zero(), &mut gb);
    Ok((
        Tensor::new(vec![m, k], ga)?.finite("matmul_backward")?,
        Tensor::new(vec![k, n], gb)?.finite("matmul_backward")?,
    ))
}
