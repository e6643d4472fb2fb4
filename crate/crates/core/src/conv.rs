//! 3D convolution, stride 1, "same" zero padding, lowered to one GEMM.
//!
//! With input `(N, X, Y, Z, C)` and filter `(C, l, l, l, M)` the product is
//! `W (M x C*l^3) * cols (C*l^3 x N*X*Y*Z)`, where `cols` is the im2col
//! matrix: column `j` is the zero-padded patch around output voxel `j`
//! (row-major over `n, x, y, z`), rows ordered `(c, dx, dy, dz)`. The filter
//! tensor read as a matrix is already `W` with row stride 1 and column stride
//! `M`, and the channel-last output is `W * cols` stored the same way, so no
//! transposes are materialized.
//!
//! The im2col buffer holds `C * l^3 * N*X*Y*Z` elements. When that exceeds
//! [`ConvWorkspace::budget`] the batch is processed a slice of samples at a
//! time.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::gemm::{gemm_with, Blocking, GemmWorkspace, MatMut, MatRef};
use crate::tensor::{Scalar, Tensor};

/// Filter bank of shape `(C, l, l, l, M)` plus a bias per output filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvFilter<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s[1] != s[2] || s[2] != s[3] {
            return Err(shape_err!("filter must have shape (C, l, l, l, M), got {:?}", s));
        }
        if s[1].is_multiple_of(2) {
            return Err(arg_err!("kernel side must be odd, got {}", s[1]));
        }
        bias.expect_shape(&[s[4]])?;
        Ok(ConvFilter { weights, bias })
    }

    pub fn zeros(in_channels: usize, side: usize, filters: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[in_channels, side, side, side, filters]), Tensor::zeros(&[filters]))
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[4]
    }

    /// `C * l^3`, the reduction length of the lowered product.
    pub fn patch_len(&self) -> usize {
        self.in_channels() * self.side().pow(3)
    }

    fn weight_matrix(&self) -> MatRef<'_, T> {
        MatRef::new(self.weights.data(), self.filters(), self.patch_len(), 1, self.filters())
    }
}

/// Operand shapes of the lowered product: `(m x k) * (k x n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmShape {
    /// Shape for input `(N, X, Y, Z, C)` and filter `(C, l, l, l, M)`.
    pub fn for_conv(input_shape: &[usize], filter_shape: &[usize]) -> Result<Self> {
        if input_shape.len() != 5 || filter_shape.len() != 5 {
            return Err(shape_err!("expected rank-5 input and filter shapes"));
        }
        if input_shape[4] != filter_shape[0] {
            return Err(shape_err!(
                "input has {} channels, filter expects {}",
                input_shape[4],
                filter_shape[0]
            ));
        }
        let side = filter_shape[1];
        Ok(GemmShape {
            m: filter_shape[4],
            k: filter_shape[0] * side * side * side,
            n: input_shape[..4].iter().product(),
        })
    }

    /// Multiply-accumulate count `m * k * n`.
    pub fn macs(&self) -> u128 {
        self.m as u128 * self.k as u128 * self.n as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Gemm,
    Naive,
}

/// Scratch buffers and tuning knobs for the GEMM path.
#[derive(Debug, Clone)]
pub struct ConvWorkspace<T> {
    cols: Vec<T>,
    planar: Vec<T>,
    gemm: Vec<GemmWorkspace<T>>,
    /// Maximum im2col buffer size in elements.
    pub budget: usize,
    pub blocking: Blocking,
    /// Worker threads for the matrix product (1 = run on the caller's thread).
    pub threads: usize,
}

/// Default im2col budget: 64 Mi elements (256 MiB of `f32`).
pub const DEFAULT_COLS_BUDGET: usize = 64 << 20;

impl<T: Scalar> Default for ConvWorkspace<T> {
    fn default() -> Self {
        ConvWorkspace {
            cols: Vec::new(),
            planar: Vec::new(),
            gemm: Vec::new(),
            budget: DEFAULT_COLS_BUDGET,
            blocking: Blocking::default(),
            threads: 1,
        }
    }
}

impl<T: Scalar> ConvWorkspace<T> {
    pub fn with_threads(threads: usize) -> Self {
        ConvWorkspace { threads: threads.max(1), ..Default::default() }
    }

    fn samples_per_chunk(&self, patch_len: usize, voxels: usize, batch: usize) -> usize {
        (self.budget / (patch_len * voxels).max(1)).clamp(1, batch)
    }

    fn reserve(&mut self, cols_len: usize) {
        if self.cols.len() < cols_len {
            self.cols.resize(cols_len, T::zero());
        }
        if self.gemm.len() < self.threads {
            self.gemm.resize_with(self.threads, GemmWorkspace::new);
        }
    }
}

struct Geometry {
    batch: usize,
    dims: [usize; 3],
    channels: usize,
    side: usize,
}

impl Geometry {
    fn of(input_shape: &[usize], side: usize) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(shape_err!("expected (N, X, Y, Z, C) input, got {:?}", input_shape));
        }
        if side.is_multiple_of(2) {
            return Err(arg_err!("kernel side must be odd, got {}", side));
        }
        Ok(Geometry {
            batch: input_shape[0],
            dims: [input_shape[1], input_shape[2], input_shape[3]],
            channels: input_shape[4],
            side,
        })
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.channels * self.side.pow(3)
    }
}

/// The `(C*l^3, N*X*Y*Z)` patch matrix of a `(N, X, Y, Z, C)` input.
pub fn im2col<T: Scalar>(input: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let g = Geometry::of(input.shape(), side)?;
    let cols_n = g.batch * g.voxels();
    let mut out = vec![T::zero(); g.patch_len() * cols_n];
    im2col_into(input.data(), &g, 0, g.batch, &mut Vec::new(), &mut out);
    Tensor::new(&[g.patch_len(), cols_n], out)
}

/// Fill `out` (row-major, `patch_len x (samples*voxels)`) for samples
/// `first..first+samples`. Multi-channel inputs are first transposed to
/// channel-planar order in `planar` so every patch row is assembled from
/// contiguous runs along `z`.
fn im2col_into<T: Scalar>(input: &[T], g: &Geometry, first: usize, samples: usize, planar: &mut Vec<T>, out: &mut [T]) {
    let voxels = g.voxels();
    let width = samples * voxels;
    let src = &input[first * voxels * g.channels..(first + samples) * voxels * g.channels];
    let planes: &[T] = if g.channels == 1 {
        src
    } else {
        planar.resize(src.len(), T::zero());
        for (v, voxel) in src.chunks_exact(g.channels).enumerate() {
            for (c, &x) in voxel.iter().enumerate() {
                planar[c * width + v] = x;
            }
        }
        planar
    };
    let mut rows = out.chunks_exact_mut(width);
    for plane in planes.chunks_exact(width) {
        for_each_tap(g, |dst_src| {
            let dst = rows.next().expect("row count");
            for_each_run(g, samples, dst_src, |j, s, len, valid| {
                if valid {
                    dst[j..j + len].copy_from_slice(&plane[s..s + len]);
                } else {
                    dst[j..j + len].fill(T::zero());
                }
            });
        });
    }
}

/// Scatter-add a patch-matrix gradient back onto the input gradient for
/// samples `first..first+samples`.
fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, first: usize, samples: usize, planar: &mut Vec<T>, grad_input: &mut [T]) {
    let voxels = g.voxels();
    let width = samples * voxels;
    planar.clear();
    planar.resize(width * g.channels, T::zero());
    let mut rows = cols.chunks_exact(width);
    for plane in planar.chunks_exact_mut(width) {
        for_each_tap(g, |offsets| {
            let src = rows.next().expect("row count");
            for_each_run(g, samples, offsets, |j, s, len, valid| {
                if valid {
                    for (d, &v) in plane[s..s + len].iter_mut().zip(&src[j..j + len]) {
                        *d += v;
                    }
                }
            });
        });
    }
    let dst = &mut grad_input[first * voxels * g.channels..(first + samples) * voxels * g.channels];
    for (v, voxel) in dst.chunks_exact_mut(g.channels).enumerate() {
        for (c, d) in voxel.iter_mut().enumerate() {
            *d += planar[c * width + v];
        }
    }
}

/// Calls `f` with the `(dx, dy, dz)` offsets of every tap, in row order.
fn for_each_tap(g: &Geometry, mut f: impl FnMut([isize; 3])) {
    let half = (g.side / 2) as isize;
    for dx in 0..g.side as isize {
        for dy in 0..g.side as isize {
            for dz in 0..g.side as isize {
                f([dx - half, dy - half, dz - half]);
            }
        }
    }
}

/// Walk one patch row as runs along `z`: `f(dst_col, src_offset, len, in_bounds)`.
/// Out-of-bounds runs carry a meaningless `src_offset`.
fn for_each_run(g: &Geometry, samples: usize, [ox, oy, oz]: [isize; 3], mut f: impl FnMut(usize, usize, usize, bool)) {
    let [nx, ny, nz] = g.dims;
    let z_lo = (-oz).max(0) as usize;
    let z_hi = (nz as isize - oz).clamp(0, nz as isize) as usize;
    let mut j = 0;
    for n in 0..samples {
        for x in 0..nx {
            let xs = x as isize + ox;
            for y in 0..ny {
                let ys = y as isize + oy;
                if xs < 0 || xs >= nx as isize || ys < 0 || ys >= ny as isize || z_lo >= z_hi {
                    f(j, 0, nz, false);
                } else {
                    let base = ((n * nx + xs as usize) * ny + ys as usize) * nz;
                    if z_lo > 0 {
                        f(j, 0, z_lo, false);
                    }
                    f(j + z_lo, base + (z_lo as isize + oz) as usize, z_hi - z_lo, true);
                    if z_hi < nz {
                        f(j + z_hi, 0, nz - z_hi, false);
                    }
                }
                j += nz;
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(input: &Tensor<T>, filter: &ConvFilter<T>, mode: ConvMode) -> Result<Tensor<T>> {
    match mode {
        ConvMode::Gemm => conv3d_forward_with(input, filter, &mut ConvWorkspace::default()),
        ConvMode::Naive => conv3d_naive(input, filter),
    }
}

/// GEMM-path forward pass reusing `ws`.
pub fn conv3d_forward_with<T: Scalar>(
    input: &Tensor<T>,
    filter: &ConvFilter<T>,
    ws: &mut ConvWorkspace<T>,
) -> Result<Tensor<T>> {
    let g = check_conv(input.shape(), filter)?;
    let m = filter.filters();
    let voxels = g.voxels();
    let mut out = vec![T::zero(); g.batch * voxels * m];
    let chunk = ws.samples_per_chunk(g.patch_len(), voxels, g.batch);
    ws.reserve(g.patch_len() * chunk * voxels);
    let w = filter.weight_matrix();

    for first in (0..g.batch).step_by(chunk) {
        let samples = chunk.min(g.batch - first);
        let width = samples * voxels;
        im2col_into(input.data(), &g, first, samples, &mut ws.planar, &mut ws.cols[..g.patch_len() * width]);
        let cols = MatRef::row_major(&ws.cols[..g.patch_len() * width], g.patch_len(), width);
        let dst = &mut out[first * voxels * m..(first + samples) * voxels * m];
        product_split_columns(w, cols, dst, m, ws.threads, ws.blocking, &mut ws.gemm);
    }

    let bias = filter.bias.data();
    for voxel in out.chunks_exact_mut(m) {
        for (v, &b) in voxel.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Tensor::new(&[g.batch, g.dims[0], g.dims[1], g.dims[2], m], out)
}

/// `dst (channel-last, width x m) = w * cols`, with the columns split evenly
/// across `threads` workers.
fn product_split_columns<T: Scalar>(
    w: MatRef<T>,
    cols: MatRef<T>,
    dst: &mut [T],
    m: usize,
    threads: usize,
    blocking: Blocking,
    gemm_ws: &mut [GemmWorkspace<T>],
) {
    let width = cols.cols();
    let threads = threads.clamp(1, width);
    if threads == 1 {
        let c = MatMut::new(dst, m, width, 1, m);
        gemm_with(w, cols, c, false, blocking, &mut gemm_ws[0]);
        return;
    }
    let per = width.div_ceil(threads);
    std::thread::scope(|scope| {
        for ((t, part), ws) in dst.chunks_mut(per * m).enumerate().zip(gemm_ws.iter_mut()) {
            let start = t * per;
            let count = part.len() / m;
            scope.spawn(move || {
                let c = MatMut::new(part, m, count, 1, m);
                gemm_with(w, cols.cols_range(start, count), c, false, blocking, ws);
            });
        }
    });
}

/// Direct six-loop reference convolution, accumulated in f64.
pub fn conv3d_naive<T: Scalar>(input: &Tensor<T>, filter: &ConvFilter<T>) -> Result<Tensor<T>> {
    let g = check_conv(input.shape(), filter)?;
    let [nx, ny, nz] = g.dims;
    let (c_total, m_total, side) = (g.channels, filter.filters(), g.side);
    let half = (side / 2) as isize;
    let x_in = input.data();
    let w = filter.weights.data();
    let mut out = Tensor::zeros(&[g.batch, nx, ny, nz, m_total]);
    let o = out.data_mut();
    for n in 0..g.batch {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let at = (((n * nx + x) * ny + y) * nz + z) * m_total;
                    for m in 0..m_total {
                        let mut acc = filter.bias.data()[m].to_f64_lossy();
                        for c in 0..c_total {
                            for dx in 0..side {
                                let xs = x as isize + dx as isize - half;
                                if xs < 0 || xs >= nx as isize {
                                    continue;
                                }
                                for dy in 0..side {
                                    let ys = y as isize + dy as isize - half;
                                    if ys < 0 || ys >= ny as isize {
                                        continue;
                                    }
                                    for dz in 0..side {
                                        let zs = z as isize + dz as isize - half;
                                        if zs < 0 || zs >= nz as isize {
                                            continue;
                                        }
                                        let src = (((n * nx + xs as usize) * ny + ys as usize) * nz + zs as usize)
                                            * c_total
                                            + c;
                                        let wi = (((c * side + dx) * side + dy) * side + dz) * m_total + m;
                                        acc += x_in[src].to_f64_lossy() * w[wi].to_f64_lossy();
                                    }
                                }
                            }
                        }
                        o[at + m] = T::of(acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for it (first layer of a network).
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `<grad_out, conv(input, filter)>` with respect to input,
/// weights and bias.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    filter: &ConvFilter<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv3d_backward_with(input, filter, grad_out, true, &mut ConvWorkspace::default())?;
    Ok((g.input.expect("requested"), g.weights, g.bias))
}

pub fn conv3d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    filter: &ConvFilter<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
    ws: &mut ConvWorkspace<T>,
) -> Result<ConvGrads<T>> {
    let g = check_conv(input.shape(), filter)?;
    let m = filter.filters();
    let expected = [g.batch, g.dims[0], g.dims[1], g.dims[2], m];
    grad_out.expect_shape(&expected)?;
    let voxels = g.voxels();
    let k = g.patch_len();
    let chunk = ws.samples_per_chunk(k, voxels, g.batch);
    ws.reserve(k * chunk * voxels);
    // One extra buffer for the patch-matrix gradient.
    let mut grad_cols = if need_input_grad { vec![T::zero(); k * chunk * voxels] } else { Vec::new() };

    let mut grad_w = vec![T::zero(); k * m];
    let mut grad_in = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    let go = grad_out.data();
    let w = filter.weight_matrix();

    for first in (0..g.batch).step_by(chunk) {
        let samples = chunk.min(g.batch - first);
        let width = samples * voxels;
        im2col_into(input.data(), &g, first, samples, &mut ws.planar, &mut ws.cols[..k * width]);
        let cols = MatRef::row_major(&ws.cols[..k * width], k, width);
        let g_mat = MatRef::new(&go[first * voxels * m..(first + samples) * voxels * m], m, width, 1, m);

        // dW (m x k) += G (m x width) * cols^T (width x k)
        let dw = MatMut::new(&mut grad_w, m, k, 1, m);
        gemm_with(g_mat, cols.t(), dw, first > 0, ws.blocking, &mut ws.gemm[0]);

        if need_input_grad {
            // dcols (k x width) = W^T (k x m) * G (m x width)
            let dc = MatMut::row_major(&mut grad_cols[..k * width], k, width);
            gemm_with(w.t(), g_mat, dc, false, ws.blocking, &mut ws.gemm[0]);
            col2im_add(&grad_cols[..k * width], &g, first, samples, &mut ws.planar, &mut grad_in);
        }
    }

    let mut grad_b = vec![T::zero(); m];
    for voxel in go.chunks_exact(m) {
        for (b, &v) in grad_b.iter_mut().zip(voxel) {
            *b += v;
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad { Some(Tensor::new(input.shape(), grad_in)?) } else { None },
        weights: Tensor::new(filter.weights.shape(), grad_w)?,
        bias: Tensor::new(&[m], grad_b)?,
    })
}

fn check_conv<T: Scalar>(input_shape: &[usize], filter: &ConvFilter<T>) -> Result<Geometry> {
    let g = Geometry::of(input_shape, filter.side())?;
    if g.channels != filter.in_channels() {
        return Err(shape_err!(
            "input has {} channels, filter expects {}",
            g.channels,
            filter.in_channels()
        ));
    }
    Ok(g)
}
