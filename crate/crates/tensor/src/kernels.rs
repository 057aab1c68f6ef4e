//! Forward/backward numeric kernels on flat `f64` buffers.
//!
//! Everything here works on `f64` regardless of the tensor element type, so
//! convolution and normalization sums always accumulate at 64-bit.

use crate::error::{Result, TensorError};

/// Strided read-only view of a row/column-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn row_major_t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c ← alpha·a·b + beta·c`, with `c` addressed by `(rsc, csc)` strides.
pub(crate) fn gemm(
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(k == 0 || b.max_index() < b.data.len(), "gemm rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by the kernel is bounded by the asserts above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Stride and padding of a 3D convolution, ordered (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Plain 2D geometry lifted to a depth-1 volume.
    pub fn planar(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }
}

/// `floor((len + 2·pad − kernel)/stride) + 1`, or `None` if the kernel does
/// not fit the padded input.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

/// Output shape `[N, O, Do, Ho, Wo]` of a 3D convolution.
pub fn conv3d_output_shape(
    input: &[usize],
    weight: &[usize],
    geom: ConvGeometry,
) -> Result<[usize; 5]> {
    if input.len() != 5 || weight.len() != 5 {
        return Err(TensorError::dim(
            "conv3d",
            format!("expected 5-d input and weight, got {input:?} and {weight:?}"),
        ));
    }
    if input[1] != weight[1] {
        return Err(TensorError::dim(
            "conv3d",
            format!(
                "input has {} channels but kernel expects {}",
                input[1], weight[1]
            ),
        ));
    }
    let mut out = [input[0], weight[0], 0, 0, 0];
    for axis in 0..3 {
        out[axis + 2] = conv_output_len(
            input[axis + 2],
            weight[axis + 2],
            geom.stride[axis],
            geom.padding[axis],
        )
        .ok_or_else(|| {
            TensorError::dim(
                "conv3d",
                format!(
                    "kernel {:?} does not fit input {:?} with geometry {:?}",
                    weight, input, geom
                ),
            )
        })?;
    }
    Ok(out)
}

struct ConvPlan {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    o: usize,
    k: [usize; 3],
    out: [usize; 3],
    geom: ConvGeometry,
}

impl ConvPlan {
    fn new(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<Self> {
        let shape = conv3d_output_shape(input, weight, geom)?;
        Ok(ConvPlan {
            n: input[0],
            c: input[1],
            d: input[2],
            h: input[3],
            w: input[4],
            o: weight[0],
            k: [weight[2], weight[3], weight[4]],
            out: [shape[2], shape[3], shape[4]],
            geom,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k[0] * self.k[1] * self.k[2]
    }

    fn out_rows(&self) -> usize {
        self.out[0] * self.out[1]
    }

    fn positions(&self) -> usize {
        self.out_rows() * self.out[2]
    }

    fn volume(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    /// Output rows (depth × height) per im2col chunk, keeping the column
    /// buffer under `max_buffer` values.
    fn chunk_rows(&self, max_buffer: usize) -> usize {
        (max_buffer / (self.patch() * self.out[2]).max(1)).clamp(1, self.out_rows())
    }

    /// Calls `f(column, source)` for every in-bounds input element feeding
    /// patch row `r` over output rows `[q0, q1)`; `column` is relative to `q0`.
    #[inline]
    fn for_each_source(&self, r: usize, q0: usize, q1: usize, mut f: impl FnMut(usize, usize)) {
        let [kd, kh, kw] = self.k;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let e = r % kw;
        let b = (r / kw) % kh;
        let a = (r / (kw * kh)) % kd;
        let ch = r / (kw * kh * kd);
        let wo = self.out[2];
        // Output columns whose input column lies inside [0, w).
        let ow_lo = pw.saturating_sub(e).div_ceil(sw);
        let ow_hi = if self.w + pw > e { ((self.w + pw - e - 1) / sw + 1).min(wo) } else { 0 };
        for q in q0..q1 {
            let (od, oh) = (q / self.out[1], q % self.out[1]);
            let Some(id) = (od * sd + a).checked_sub(pd).filter(|&v| v < self.d) else {
                continue;
            };
            let Some(ih) = (oh * sh + b).checked_sub(ph).filter(|&v| v < self.h) else {
                continue;
            };
            let base = ((ch * self.d + id) * self.h + ih) * self.w;
            let col = (q - q0) * wo;
            for ow in ow_lo..ow_hi {
                f(col + ow, base + ow * sw + e - pw);
            }
        }
    }

    fn im2col(&self, x: &[f64], q0: usize, q1: usize, cols: &mut Vec<f64>) {
        let ncols = (q1 - q0) * self.out[2];
        cols.clear();
        cols.resize(self.patch() * ncols, 0.0);
        for r in 0..self.patch() {
            let row = &mut cols[r * ncols..(r + 1) * ncols];
            self.for_each_source(r, q0, q1, |c, src| row[c] = x[src]);
        }
    }

    fn col2im(&self, cols: &[f64], q0: usize, q1: usize, gx: &mut [f64]) {
        let ncols = (q1 - q0) * self.out[2];
        for r in 0..self.patch() {
            let row = &cols[r * ncols..(r + 1) * ncols];
            self.for_each_source(r, q0, q1, |c, src| gx[src] += row[c]);
        }
    }
}

const IM2COL_BUFFER: usize = 1 << 22;

/// 3D cross-correlation. `x` is `[N,C,D,H,W]`, `w` is `[O,C,kd,kh,kw]`.
pub fn conv3d_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    bias: Option<&[f64]>,
    geom: ConvGeometry,
) -> Result<(Vec<f64>, [usize; 5])> {
    conv3d_forward_chunked(x, x_shape, w, w_shape, bias, geom, IM2COL_BUFFER)
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward_chunked(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    bias: Option<&[f64]>,
    geom: ConvGeometry,
    max_buffer: usize,
) -> Result<(Vec<f64>, [usize; 5])> {
    let plan = ConvPlan::new(x_shape, w_shape, geom)?;
    let (p, patch, vol) = (plan.positions(), plan.patch(), plan.volume());
    let mut out = vec![0.0; plan.n * plan.o * p];
    let wmat = MatRef::row_major(w, plan.o, patch);
    let step = plan.chunk_rows(max_buffer);
    let mut cols = Vec::new();
    for n in 0..plan.n {
        let xn = &x[n * vol..(n + 1) * vol];
        let on = &mut out[n * plan.o * p..(n + 1) * plan.o * p];
        let mut q0 = 0;
        while q0 < plan.out_rows() {
            let q1 = (q0 + step).min(plan.out_rows());
            let ncols = (q1 - q0) * plan.out[2];
            plan.im2col(xn, q0, q1, &mut cols);
            let offset = q0 * plan.out[2];
            gemm(
                1.0,
                wmat,
                MatRef::row_major(&cols, patch, ncols),
                0.0,
                &mut on[offset..],
                p,
                1,
            );
            q0 = q1;
        }
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                on[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    let shape = [plan.n, plan.o, plan.out[0], plan.out[1], plan.out[2]];
    Ok((out, shape))
}

/// Gradients of [`conv3d_forward`] w.r.t. input, weights and bias; each is
/// computed only if requested.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv3d_backward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    geom: ConvGeometry,
    grad_out: &[f64],
    want: [bool; 3],
) -> Result<ConvGrads> {
    let plan = ConvPlan::new(x_shape, w_shape, geom)?;
    let (p, patch, vol) = (plan.positions(), plan.patch(), plan.volume());
    let [want_x, want_w, want_b] = want;
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let gb = want_b.then(|| {
        let mut gb = vec![0.0; plan.o];
        for n in 0..plan.n {
            for (o, g) in gb.iter_mut().enumerate() {
                let base = (n * plan.o + o) * p;
                *g += grad_out[base..base + p].iter().sum::<f64>();
            }
        }
        gb
    });
    if want_x || want_w {
        let step = plan.chunk_rows(IM2COL_BUFFER);
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for n in 0..plan.n {
            let xn = &x[n * vol..(n + 1) * vol];
            let gon = &grad_out[n * plan.o * p..(n + 1) * plan.o * p];
            let mut q0 = 0;
            while q0 < plan.out_rows() {
                let q1 = (q0 + step).min(plan.out_rows());
                let ncols = (q1 - q0) * plan.out[2];
                let offset = q0 * plan.out[2];
                let g_view = MatRef {
                    data: &gon[offset..],
                    rows: plan.o,
                    cols: ncols,
                    rs: p,
                    cs: 1,
                };
                if let Some(gw) = gw.as_mut() {
                    plan.im2col(xn, q0, q1, &mut cols);
                    gemm(
                        1.0,
                        g_view,
                        MatRef::row_major_t(&cols, patch, ncols),
                        1.0,
                        gw,
                        patch,
                        1,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.clear();
                    gcols.resize(patch * ncols, 0.0);
                    gemm(
                        1.0,
                        MatRef::row_major_t(w, plan.o, patch),
                        g_view,
                        0.0,
                        &mut gcols,
                        ncols,
                        1,
                    );
                    plan.col2im(&gcols, q0, q1, &mut gx[n * vol..(n + 1) * vol]);
                }
                q0 = q1;
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Per-channel statistics produced by a training-mode batch norm pass.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Channel axis is 1; statistics reduce over every other axis.
pub fn batch_norm_train(x: &[f64], shape: &[usize], eps: f64) -> Result<BatchStats> {
    let (n, c, inner) = bn_dims(shape)?;
    if n < 2 {
        return Err(TensorError::BatchTooSmall(n));
    }
    let m = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            mean[ch] += x[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            var[ch] += x[base..base + inner]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    Ok(BatchStats {
        mean,
        var,
        inv_std,
        xhat,
    })
}

pub(crate) fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::dim(
            "batch_norm",
            format!("need at least [N, C], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Gradient of normalized output w.r.t. input, given `dxhat = dy·gamma`.
pub fn batch_norm_train_backward(
    dxhat: &[f64],
    stats: &BatchStats,
    shape: &[usize],
) -> Vec<f64> {
    let (n, c, inner) = bn_dims(shape).expect("shape validated on forward");
    let m = (n * inner) as f64;
    let mut sum_d = vec![0.0; c];
    let mut sum_dx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                sum_d[ch] += dxhat[i];
                sum_dx[ch] += dxhat[i] * stats.xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dxhat.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let k = stats.inv_std[ch] / m;
            for i in base..base + inner {
                dx[i] = k * (m * dxhat[i] - sum_d[ch] - stats.xhat[i] * sum_dx[ch]);
            }
        }
    }
    dx
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    log_softmax_row(values).into_iter().map(f64::exp).collect()
}
