use super::{Real, Tensor4};
use crate::error::{Error, Result};

fn check_hyper(lr: f64, momentum: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(
            "lr",
            format!("learning rate must be finite and non-negative, got {lr}"),
        ));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(
            "momentum",
            format!("momentum must be in [0, 1), got {momentum}"),
        ));
    }
    Ok(())
}

/// Momentum SGD on flat slices: `v ← momentum·v + g; p ← p − lr·v`.
pub fn sgd_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    buffer: &mut [T],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_hyper(lr, momentum)?;
    if param.len() != grad.len() || param.len() != buffer.len() {
        return Err(Error::shape(
            "sgd_update",
            (param.len(), grad.len()),
            buffer.len(),
        ));
    }
    let (lr, mom) = (T::lit(lr), T::lit(momentum));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(buffer.iter_mut()) {
        *v = mom * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn sgd_step<T: Real>(
    params: &mut [Tensor4<T>],
    grads: &[Tensor4<T>],
    lr: f64,
    momentum: f64,
    buffers: &mut [Tensor4<T>],
) -> Result<()> {
    check_hyper(lr, momentum)?;
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(Error::shape(
            "sgd_step",
            (params.len(), grads.len()),
            buffers.len(),
        ));
    }
    for ((p, g), b) in params.iter().zip(grads).zip(buffers.iter()) {
        if p.dims() != g.dims() || p.dims() != b.dims() {
            return Err(Error::shape("sgd_step", (p.dims(), g.dims()), b.dims()));
        }
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
        sgd_update(p.data_mut(), g.data(), b.data_mut(), lr, momentum)?;
    }
    Ok(())
}
