//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order.
//! Since a node can only reference earlier nodes, walking the tape backwards
//! is a valid reverse topological order.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, BatchStats, ConvGeometry, MatRef};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Batch-norm ε.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Running mean/variance tracked by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    /// Normalize with previously accumulated statistics.
    Eval(&'a RunningStats),
}

/// Where the additive angular margin is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MarginPlacement {
    /// Margin on the target-class angle only.
    #[default]
    Target,
    /// Margin inside every class exponent.
    AllClasses,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        x5: [usize; 5],
        w5: [usize; 5],
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    MaxPoolDepth {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Window {
        x: Var,
        top: usize,
        left: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    WeightedSum {
        parts: Vec<Var>,
        weights: Var,
    },
    ElementwiseMax {
        parts: Vec<Var>,
        winner: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ArcMargin {
        cos: Var,
        labels: Vec<usize>,
        scale: f64,
        margin: f64,
        placement: MarginPlacement,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// A recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn f64s<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

fn margin_fn(c: f64, margin: f64) -> (f64, f64) {
    // cos(acos(c) + m) and its derivative w.r.t. c.
    let c = c.clamp(-1.0, 1.0);
    let sin = (1.0 - c * c).max(1e-12).sqrt();
    let value = c * margin.cos() - sin * margin.sin();
    let deriv = margin.cos() + c * margin.sin() / sin;
    (value, deriv)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node; `requires_grad` decides whether gradients flow into it.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Frozen parameters do not require grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_f64(node.value.shape().to_vec(), g).expect("grad shape"))
    }

    /// Gradients of every parameter leaf, summed per parameter.
    pub fn param_gradients(&self) -> Gradients<T> {
        let mut out = Gradients::default();
        for node in &self.nodes {
            let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) else {
                continue;
            };
            let t = Tensor::from_f64(node.value.shape().to_vec(), g).expect("grad shape");
            out.map
                .entry(id)
                .and_modify(|acc: &mut Tensor<T>| acc.add_assign(&t))
                .or_insert(t);
        }
        out
    }

    // ---- convolution -------------------------------------------------

    /// 2D cross-correlation. `x` is `[N,C,H,W]` or `[C,H,W]`, `w` is `[O,C,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (x5, unbatched) = match xs.as_slice() {
            &[c, h, wd] => ([1, c, 1, h, wd], true),
            &[n, c, h, wd] => ([n, c, 1, h, wd], false),
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("expected [C,H,W] or [N,C,H,W] input, got {xs:?}"),
                ))
            }
        };
        let w5 = match ws.as_slice() {
            &[o, c, kh, kw] => [o, c, 1, kh, kw],
            _ => {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("expected [O,C,kh,kw] kernel, got {ws:?}"),
                ))
            }
        };
        let geom = ConvGeometry::planar(stride, padding);
        let out = self.conv_impl(x, w, bias, x5, w5, geom)?;
        let s = self.shape(out).to_vec();
        let shape = if unbatched {
            vec![s[1], s[3], s[4]]
        } else {
            vec![s[0], s[1], s[3], s[4]]
        };
        self.reshape(out, shape)
    }

    /// 3D cross-correlation. `x` is `[N,C,D,H,W]`, `w` is `[O,C,kd,kh,kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let to5 = |s: &[usize], what: &str| -> Result<[usize; 5]> {
            s.try_into().map_err(|_| {
                TensorError::dim("conv3d", format!("expected 5-d {what}, got {s:?}"))
            })
        };
        let x5 = to5(self.shape(x), "input")?;
        let w5 = to5(self.shape(w), "kernel")?;
        self.conv_impl(x, w, bias, x5, w5, geom)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        x5: [usize; 5],
        w5: [usize; 5],
        geom: ConvGeometry,
    ) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [w5[0]] {
                return Err(TensorError::dim(
                    "conv",
                    format!("bias shape {:?} for {} output channels", self.shape(b), w5[0]),
                ));
            }
        }
        let bias_vals = bias.map(|b| f64s(self.value(b)));
        let (out, shape) = kernels::conv3d_forward(
            &f64s(self.value(x)),
            &x5,
            &f64s(self.value(w)),
            &w5,
            bias_vals.as_deref(),
            geom,
        )?;
        let value = Tensor::from_f64(shape.to_vec(), &out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b: bias,
                geom,
                x5,
                w5,
            },
            &parents,
        ))
    }

    // ---- normalization and activations -------------------------------

    /// Batch norm over axis 1 of `x` (`[N, C, ...]`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = kernels::bn_dims(&shape)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::dim(
                "batch_norm",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = f64s(self.value(x));
        let g = f64s(self.value(gamma));
        let b = f64s(self.value(beta));
        let affine = |xhat: &[f64]| -> Vec<f64> {
            let mut y = vec![0.0; xhat.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    for i in base..base + inner {
                        y[i] = g[ch] * xhat[i] + b[ch];
                    }
                }
            }
            y
        };
        match mode {
            BnMode::Train { running, momentum } => {
                if running.mean.len() != c {
                    return Err(TensorError::dim(
                        "batch_norm",
                        format!("running stats for {} channels, input has {c}", running.mean.len()),
                    ));
                }
                let stats = kernels::batch_norm_train(&xv, &shape, BN_EPS)?;
                let m = (n * inner) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * stats.mean[ch];
                    running.var[ch] =
                        (1.0 - momentum) * running.var[ch] + momentum * stats.var[ch] * unbias;
                }
                let value = Tensor::from_f64(shape, &affine(&stats.xhat))?;
                Ok(self.push(
                    value,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        stats,
                    },
                    &[x, gamma, beta],
                ))
            }
            BnMode::Eval(running) => {
                if running.mean.len() != c {
                    return Err(TensorError::dim(
                        "batch_norm",
                        format!("running stats for {} channels, input has {c}", running.mean.len()),
                    ));
                }
                let inv_std: Vec<f64> =
                    running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; xv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            xhat[i] = (xv[i] - running.mean[ch]) * inv_std[ch];
                        }
                    }
                }
                let value = Tensor::from_f64(shape, &affine(&xhat))?;
                Ok(self.push(
                    value,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean: running.mean.clone(),
                        inv_std,
                    },
                    &[x, gamma, beta],
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Max over the depth axis of `[N,C,D,H,W]`, keeping a depth of 1.
    /// Ties go to the lowest depth index.
    pub fn max_pool_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, d, h, w] = s.as_slice() else {
            return Err(TensorError::dim(
                "max_pool_depth",
                format!("expected [N,C,D,H,W], got {s:?}"),
            ));
        };
        if d == 0 {
            return Err(TensorError::dim("max_pool_depth", "depth must be at least 1"));
        }
        let data = self.value(x).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c * plane);
        let mut argmax = Vec::with_capacity(n * c * plane);
        for nc in 0..n * c {
            let base = nc * d * plane;
            for p in 0..plane {
                let mut best = base + p;
                for k in 1..d {
                    let idx = base + k * plane + p;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![n, c, 1, h, w], out)?;
        Ok(self.push(value, Op::MaxPoolDepth { x, argmax }, &[x]))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Zero-pads the bottom and right of `[N,C,H,W]` up to `height × width`.
    pub fn pad_bottom_right(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, h, w] = s.as_slice() else {
            return Err(TensorError::dim("pad", format!("expected [N,C,H,W], got {s:?}")));
        };
        if height < h || width < w {
            return Err(TensorError::dim(
                "pad",
                format!("cannot pad {h}×{w} down to {height}×{width}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * height * width];
        for nc in 0..n * c {
            for r in 0..h {
                let from = (nc * h + r) * w;
                let to = (nc * height + r) * width;
                out[to..to + w].copy_from_slice(&src[from..from + w]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        // Padding is the adjoint of cropping at the origin.
        Ok(self.push(value, Op::Window { x, top: 0, left: 0 }, &[x]))
    }

    /// The `height × width` window of `[N,C,H,W]` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, c, h, w] = s.as_slice() else {
            return Err(TensorError::dim("crop", format!("expected [N,C,H,W], got {s:?}")));
        };
        if top + height > h || left + width > w {
            return Err(TensorError::dim(
                "crop",
                format!("window {height}×{width} at ({top},{left}) exceeds {h}×{w}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for nc in 0..n * c {
            for r in top..top + height {
                let from = (nc * h + r) * w + left;
                out.extend_from_slice(&src[from..from + width]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(value, Op::Window { x, top, left }, &[x]))
    }

    // ---- dense layers ------------------------------------------------

    /// `x·wᵀ + b` with `x: [N,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, f], &[o, f2]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(TensorError::dim(
                "linear",
                format!("expected [N,F] and [O,F], got {xs:?} and {ws:?}"),
            ));
        };
        if f != f2 {
            return Err(TensorError::dim(
                "linear",
                format!("input has {f} features, weight expects {f2}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::dim(
                    "linear",
                    format!("bias shape {:?} for {o} outputs", self.shape(b)),
                ));
            }
        }
        let xv = f64s(self.value(x));
        let wv = f64s(self.value(w));
        let mut out = vec![0.0; n * o];
        kernels::gemm(
            1.0,
            MatRef::row_major(&xv, n, f),
            MatRef::row_major_t(&wv, o, f),
            0.0,
            &mut out,
            o,
            1,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bj) in row.iter_mut().zip(bv) {
                    *v += bj.as_f64();
                }
            }
        }
        let value = Tensor::from_f64(vec![n, o], &out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(value, Op::Linear { x, w, b: bias }, &parents))
    }

    /// Softmax of a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 1 {
            return Err(TensorError::dim(
                "softmax",
                format!("expected 1-d input, got {:?}", self.shape(x)),
            ));
        }
        let probs = kernels::softmax(&f64s(self.value(x)));
        let value = Tensor::from_f64(vec![probs.len()], &probs)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// `Σ_i weights[i] · parts[i]` over equally shaped parts.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        if parts.is_empty() || self.shape(weights) != [parts.len()] {
            return Err(TensorError::dim(
                "weighted_sum",
                format!("{} parts with weights {:?}", parts.len(), self.shape(weights)),
            ));
        }
        let shape = self.shape(parts[0]).to_vec();
        let wv = f64s(self.value(weights));
        let mut acc = vec![0.0; self.value(parts[0]).numel()];
        for (&p, &wi) in parts.iter().zip(&wv) {
            if self.shape(p) != shape.as_slice() {
                return Err(TensorError::dim(
                    "weighted_sum",
                    format!("part shape {:?} differs from {shape:?}", self.shape(p)),
                ));
            }
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += wi * v.as_f64();
            }
        }
        let value = Tensor::from_f64(shape, &acc)?;
        let mut parents = parts.to_vec();
        parents.push(weights);
        Ok(self.push(
            value,
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights,
            },
            &parents,
        ))
    }

    /// Elementwise maximum over equally shaped parts; ties go to the earliest part.
    pub fn elementwise_max(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::dim("elementwise_max", "no parts given"));
        };
        let shape = self.shape(first).to_vec();
        if parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(TensorError::dim("elementwise_max", "parts differ in shape"));
        }
        let numel = self.value(first).numel();
        let mut out = self.value(first).data().to_vec();
        let mut winner = vec![0; numel];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    winner[i] = k;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::ElementwiseMax {
                parts: parts.to_vec(),
                winner,
            },
            parts,
        ))
    }

    /// Scales each row of `[N,F]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[n, f] = s.as_slice() else {
            return Err(TensorError::dim("l2_normalize", format!("expected [N,F], got {s:?}")));
        };
        let xv = f64s(self.value(x));
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("l2_normalize input"));
        }
        let mut out = vec![0.0; n * f];
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv[r * f..(r + 1) * f];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..f {
                out[r * f + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::from_f64(s, &out)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Turns cosine similarities `[N,n]` into additive-angular-margin logits:
    /// `s·cos(θ + m)` where the margin applies, `s·cos θ` elsewhere.
    pub fn arc_margin_logits(
        &mut self,
        cos: Var,
        labels: &[usize],
        scale: f64,
        margin: f64,
        placement: MarginPlacement,
    ) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        let &[n, classes] = s.as_slice() else {
            return Err(TensorError::dim("arc_margin", format!("expected [N,n], got {s:?}")));
        };
        check_labels(labels, n, classes)?;
        let cv = f64s(self.value(cos));
        let mut out = vec![0.0; n * classes];
        for r in 0..n {
            for j in 0..classes {
                let c = cv[r * classes + j];
                let applies = placement == MarginPlacement::AllClasses || j == labels[r];
                let v = if applies { margin_fn(c, margin).0 } else { c };
                out[r * classes + j] = scale * v;
            }
        }
        let value = Tensor::from_f64(s, &out)?;
        Ok(self.push(
            value,
            Op::ArcMargin {
                cos,
                labels: labels.to_vec(),
                scale,
                margin,
                placement,
            },
            &[cos],
        ))
    }

    /// Mean softmax cross-entropy of logits `[N,n]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let &[n, classes] = s.as_slice() else {
            return Err(TensorError::dim(
                "softmax_cross_entropy",
                format!("expected [N,n], got {s:?}"),
            ));
        };
        check_labels(labels, n, classes)?;
        let lv = f64s(self.value(logits));
        let mut probs = Vec::with_capacity(n * classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let logp = kernels::log_softmax_row(&lv[r * classes..(r + 1) * classes]);
            loss -= logp[label];
            probs.extend(logp.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- arithmetic --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(bv)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum()));
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Sum of several scalars or equally shaped tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::dim("add_all", "no terms given"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a scalar `loss`, filling gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match self.nodes[v.0].grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    None => self.nodes[v.0].grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                x5,
                w5,
            } => {
                let want = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let grads = kernels::conv3d_backward(
                    &f64s(self.value(*x)),
                    x5,
                    &f64s(self.value(*w)),
                    w5,
                    *geom,
                    g,
                    want,
                )?;
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, gb));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            } => {
                let shape = self.shape(*x);
                let (n, c, inner) = kernels::bn_dims(shape)?;
                let gv = f64s(self.value(*gamma));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += g[k] * stats.xhat[k];
                            dbeta[ch] += g[k];
                            dxhat[k] = g[k] * gv[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    out.push((*x, kernels::batch_norm_train_backward(&dxhat, stats, shape)));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let (n, c, inner) = kernels::bn_dims(shape)?;
                let gv = f64s(self.value(*gamma));
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for k in base..base + inner {
                            let xhat = (xv[k].as_f64() - mean[ch]) * inv_std[ch];
                            dgamma[ch] += g[k] * xhat;
                            dbeta[ch] += g[k];
                            dx[k] = g[k] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::MaxPoolDepth { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Window { x, top, left } => {
                let (xs, ys) = (self.shape(*x), node.value.shape());
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (ys[2], ys[3]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                if oh <= h && ow <= w {
                    // crop: scatter the window back
                    for nc in 0..xs[0] * xs[1] {
                        for r in 0..oh {
                            let to = (nc * h + top + r) * w + left;
                            let from = (nc * oh + r) * ow;
                            dx[to..to + ow].copy_from_slice(&g[from..from + ow]);
                        }
                    }
                } else {
                    // pad: gather the original region
                    for nc in 0..xs[0] * xs[1] {
                        for r in 0..h {
                            let to = (nc * h + r) * w;
                            let from = (nc * oh + r) * ow;
                            dx[to..to + w].copy_from_slice(&g[from..from + w]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let gmat = MatRef::row_major(g, n, o);
                if self.wants(*x) {
                    let wv = f64s(self.value(*w));
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(1.0, gmat, MatRef::row_major(&wv, o, f), 0.0, &mut dx, f, 1);
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let xv = f64s(self.value(*x));
                    let mut dw = vec![0.0; o * f];
                    kernels::gemm(
                        1.0,
                        MatRef::row_major_t(g, n, o),
                        MatRef::row_major(&xv, n, f),
                        0.0,
                        &mut dw,
                        f,
                        1,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax { x } => {
                let y = f64s(&node.value);
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let dx = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
                out.push((*x, dx));
            }
            Op::WeightedSum { parts, weights } => {
                let wv = f64s(self.value(*weights));
                let mut dw = vec![0.0; parts.len()];
                for (k, &p) in parts.iter().enumerate() {
                    dw[k] = self
                        .value(p)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gi)| v.as_f64() * gi)
                        .sum();
                    if self.wants(p) {
                        out.push((p, g.iter().map(|gi| gi * wv[k]).collect()));
                    }
                }
                out.push((*weights, dw));
            }
            Op::ElementwiseMax { parts, winner } => {
                for (k, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        let dp = g
                            .iter()
                            .zip(winner)
                            .map(|(&gi, &w)| if w == k { gi } else { 0.0 })
                            .collect();
                        out.push((p, dp));
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = f64s(&node.value);
                let f = y.len() / norms.len();
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * f..(r + 1) * f;
                    let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for k in span {
                        dx[k] = (g[k] - y[k] * dot) / norm;
                    }
                }
                out.push((*x, dx));
            }
            Op::ArcMargin {
                cos,
                labels,
                scale,
                margin,
                placement,
            } => {
                let classes = self.shape(*cos)[1];
                let cv = f64s(self.value(*cos));
                let mut dc = vec![0.0; cv.len()];
                for (k, d) in dc.iter_mut().enumerate() {
                    let (r, j) = (k / classes, k % classes);
                    let applies = *placement == MarginPlacement::AllClasses || j == labels[r];
                    let deriv = if applies { margin_fn(cv[k], *margin).1 } else { 1.0 };
                    *d = g[k] * scale * deriv;
                }
                out.push((*cos, dc));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let mut dl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * classes + label] -= 1.0;
                }
                let k = g[0] / n as f64;
                dl.iter_mut().for_each(|v| *v *= k);
                out.push((*logits, dl));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                out.push((*a, g.iter().zip(bv).map(|(gi, v)| gi * v.as_f64()).collect()));
                out.push((*b, g.iter().zip(av).map(|(gi, v)| gi * v.as_f64()).collect()));
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).numel()])),
        }
        Ok(out)
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(TensorError::dim(
            "labels",
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    Ok(())
}
