//! Non-convolutional network operations with their backward passes.
//!
//! Activations are channel-last `(N, X, Y, Z, C)`; dense layers see `(N, F)`.

use crate::error::{shape_err, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::tensor::{Scalar, Tensor};

pub const ELU_ALPHA: f64 = 1.0;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn elu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let alpha = T::of(ELU_ALPHA);
    x.map(|v| if v > T::zero() { v } else { alpha * v.exp_m1() })
}

pub fn elu_backward<T: Scalar>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let alpha = T::of(ELU_ALPHA);
    x.zip_map(grad_y, |v, g| if v > T::zero() { g } else { g * alpha * v.exp() })
}

/// Output extent of a 2-wide, stride-2 pooling window with partial windows
/// kept at the upper edge.
pub fn pool_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// Flat input offset of the maximum of every output cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2x2x2 max pooling, stride 2. Windows clipped at the upper boundary; ties
/// go to the first voxel in row-major window order.
pub fn maxpool3d_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(shape_err!("max pooling expects (N, X, Y, Z, C), got {:?}", s));
    }
    let (n, nx, ny, nz, c) = (s[0], s[1], s[2], s[3], s[4]);
    let (ox, oy, oz) = (pool_extent(nx), pool_extent(ny), pool_extent(nz));
    let mut out = Vec::with_capacity(n * ox * oy * oz * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for b in 0..n {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_at = usize::MAX;
                        for xi in 2 * i..(2 * i + 2).min(nx) {
                            for yi in 2 * j..(2 * j + 2).min(ny) {
                                for zi in 2 * k..(2 * k + 2).min(nz) {
                                    let at = (((b * nx + xi) * ny + yi) * nz + zi) * c + ch;
                                    if best_at == usize::MAX || data[at] > best {
                                        best = data[at];
                                        best_at = at;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_at);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[n, ox, oy, oz, c], out)?, PoolIndices { input_shape: s.to_vec(), argmax }))
}

pub fn maxpool3d_backward<T: Scalar>(indices: &PoolIndices, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_y.len() != indices.argmax.len() {
        return Err(shape_err!(
            "pooling gradient has {} elements, forward produced {}",
            grad_y.len(),
            indices.argmax.len()
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&at, &v) in indices.argmax.iter().zip(grad_y.data()) {
        g[at] += v;
    }
    Ok(grad)
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalize each channel over all other axes. Train mode uses batch
/// statistics (biased variance) and folds them into the running estimates;
/// eval mode uses the running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = x.channels();
    if c != state.channels() {
        return Err(shape_err!("input has {} channels, batch norm has {}", c, state.channels()));
    }
    let count = x.len() / c;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for voxel in x.data().chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(voxel) {
                    *s += v.to_f64_lossy();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for voxel in x.data().chunks_exact(c) {
                for ((s, &v), m) in sq.iter_mut().zip(voxel).zip(&mean) {
                    let d = v.to_f64_lossy() - m;
                    *s += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let mom = state.momentum;
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = T::of(mom * rm.to_f64_lossy() + (1.0 - mom) * mean[ch]);
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = T::of(mom * rv.to_f64_lossy() + (1.0 - mom) * var[ch]);
            }
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.data().iter().map(|v| v.to_f64_lossy()).collect(),
            state.running_var.data().iter().map(|v| v.to_f64_lossy()).collect(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + state.epsilon).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (hv, yv) in xhat.data_mut().chunks_exact_mut(c).zip(y.data_mut().chunks_exact_mut(c)) {
        for ch in 0..c {
            let h = (hv[ch] - mean[ch]) * inv_std[ch];
            hv[ch] = h;
            yv[ch] = state.gamma.data()[ch] * h + state.beta.data()[ch];
        }
    }
    Ok((y, BnCache { xhat, inv_std, mode }))
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
    grad_y: &Tensor<T>,
) -> Result<BnGrads<T>> {
    grad_y.expect_shape(cache.xhat.shape())?;
    let c = state.channels();
    let count = T::from_usize(grad_y.len() / c).expect("count fits");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g, h) in grad_y.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * h[ch];
        }
    }
    let gamma = state.gamma.data();
    let mut dx = grad_y.clone();
    for (d, h) in dx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch];
            d[ch] = match cache.mode {
                Mode::Train => scale * (d[ch] - (dbeta[ch] + h[ch] * dgamma[ch]) / count),
                Mode::Eval => scale * d[ch],
            };
        }
    }
    Ok(BnGrads { input: dx, gamma: Tensor::new(&[c], dgamma)?, beta: Tensor::new(&[c], dbeta)? })
}

/// Fully connected layer: weights `(fan_in, fan_out)`, bias `(fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(shape_err!("dense weights must be (fan_in, fan_out), got {:?}", weights.shape()));
        }
        bias.expect_shape(&[weights.shape()[1]])?;
        Ok(DenseLayer { weights, bias })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, layer: &DenseLayer<T>) -> Result<Tensor<T>> {
    let (n, fan_in, fan_out) = dense_dims(x, layer)?;
    let mut y = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        y.extend_from_slice(layer.bias.data());
    }
    gemm(
        MatRef::row_major(x.data(), n, fan_in),
        MatRef::row_major(layer.weights.data(), fan_in, fan_out),
        MatMut::row_major(&mut y, n, fan_out),
        true,
    );
    Tensor::new(&[n, fan_out], y)
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, layer: &DenseLayer<T>, grad_y: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, fan_in, fan_out) = dense_dims(x, layer)?;
    grad_y.expect_shape(&[n, fan_out])?;
    let g = MatRef::row_major(grad_y.data(), n, fan_out);
    let mut dx = vec![T::zero(); n * fan_in];
    gemm(g, MatRef::row_major(layer.weights.data(), fan_in, fan_out).t(), MatMut::row_major(&mut dx, n, fan_in), false);
    let mut dw = vec![T::zero(); fan_in * fan_out];
    gemm(MatRef::row_major(x.data(), n, fan_in).t(), g, MatMut::row_major(&mut dw, fan_in, fan_out), false);
    let mut db = vec![T::zero(); fan_out];
    for row in grad_y.data().chunks_exact(fan_out) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(&[n, fan_in], dx)?,
        weights: Tensor::new(&[fan_in, fan_out], dw)?,
        bias: Tensor::new(&[fan_out], db)?,
    })
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, layer: &DenseLayer<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || x.shape()[1] != layer.fan_in() {
        return Err(shape_err!("dense layer expects (N, {}), got {:?}", layer.fan_in(), x.shape()));
    }
    Ok((x.shape()[0], layer.fan_in(), layer.fan_out()))
}

/// `(N, ...)` to `(N, prod(...))`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    x.clone().reshape(&[n, x.len() / n])
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(pred.zip_map(target, |p, t| (p - t) * (p - t))?.mean())
}

pub fn mae<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(pred.zip_map(target, |p, t| (p - t).abs())?.mean())
}

/// Gradient of [`mse`] with respect to `pred`: `2 (pred - target) / count`.
pub fn mse_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let scale = T::of(2.0 / pred.len() as f64);
    pred.zip_map(target, |p, t| scale * (p - t))
}
