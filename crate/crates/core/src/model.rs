//! The 3D convolutional palmprint network.
//!
//! Pipeline: frozen Gabor bank (2D, stride 1, same padding) → regroup the
//! `G·K` response maps as `G` channels of depth `K` → two 3D conv modules
//! (conv, batch norm, ReLU) → max over depth → zero-pad to a multiple of
//! the block grid → `grid²` equal blocks → fused block feature → linear
//! descriptor. Training adds a shared block classifier and a descriptor
//! classifier.

use std::path::Path;

use cpn_tensor::checkpoint::{self, NamedArray};
use cpn_tensor::gradcheck::{probe_indices, GradcheckReport, Probe};
use cpn_tensor::{
    conv3d_output_shape, conv_output_len, BnMode, ConvGeometry, Element, Graph, MarginPlacement,
    ParamId, ParamStore, RunningStats, Tensor, Var, BN_MOMENTUM,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::gabor::{BankConfig, GaborBank};
use crate::raster::Raster;

/// Classification loss used by both heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Softmax,
    #[default]
    ArcMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcMarginConfig {
    /// Logit scale.
    pub s: f64,
    /// Additive angular margin, radians.
    pub m: f64,
    /// Apply the margin inside every class exponent instead of the target only.
    #[serde(default)]
    pub all_classes: bool,
}

impl Default for ArcMarginConfig {
    fn default() -> Self {
        ArcMarginConfig {
            s: 16.0,
            m: 0.5,
            all_classes: false,
        }
    }
}

impl ArcMarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(invalid(format!("arc scale must be positive, got {}", self.s)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return Err(invalid(format!("arc margin {} outside [0, π/2)", self.m)));
        }
        Ok(())
    }

    pub fn placement(&self) -> MarginPlacement {
        if self.all_classes {
            MarginPlacement::AllClasses
        } else {
            MarginPlacement::Target
        }
    }
}

/// How block features are combined into one feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Softmax-normalized learnable weights.
    #[default]
    Dynamic,
    Average,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpnConfig {
    pub bank: BankConfig,
    pub input_size: usize,
    /// 3D kernel extent, `(depth, height, width)`.
    pub conv_kernel: [usize; 3],
    pub conv_padding: [usize; 3],
    pub stride1: [usize; 3],
    pub stride2: [usize; 3],
    /// 3D module channels as a multiple of the bank size.
    pub channel_multiplier: usize,
    pub block_grid: usize,
    pub descriptor_dim: usize,
    pub n_classes: usize,
    pub head: HeadKind,
    pub arc: ArcMarginConfig,
    /// Block-loss weight.
    pub mu: f64,
    pub block_loss: bool,
    pub fusion: FusionMode,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl CpnConfig {
    /// 216-kernel bank on 128×128 inputs with a 1024-d descriptor.
    pub fn paper(n_classes: usize) -> Self {
        CpnConfig {
            bank: BankConfig::paper(),
            input_size: 128,
            conv_kernel: [3, 3, 3],
            conv_padding: [1, 1, 1],
            stride1: [2, 3, 3],
            stride2: [1, 1, 1],
            channel_multiplier: 4,
            block_grid: 3,
            descriptor_dim: 1024,
            n_classes,
            head: HeadKind::ArcMargin,
            arc: ArcMarginConfig::default(),
            mu: 0.5,
            block_loss: true,
            fusion: FusionMode::Dynamic,
            init_std: 0.01,
        }
    }

    /// 8-kernel bank on 64×64 inputs with a 64-d descriptor.
    pub fn tiny(n_classes: usize) -> Self {
        CpnConfig {
            bank: BankConfig::tiny(),
            input_size: 64,
            descriptor_dim: 64,
            // Small layers give small activations; 0.01 leaves the descriptor
            // norm too low for the arc head to separate classes.
            init_std: 0.05,
            ..CpnConfig::paper(n_classes)
        }
    }

    /// Output channels of both 3D modules.
    pub fn channels(&self) -> usize {
        self.channel_multiplier * self.bank.kernel_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        self.arc.validate()?;
        if self.n_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.block_grid == 0 || self.descriptor_dim == 0 || self.channel_multiplier == 0 {
            return Err(invalid("block grid, descriptor size and channel multiplier must be positive"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("block-loss weight must be non-negative, got {}", self.mu)));
        }
        if !(self.init_std > 0.0) {
            return Err(invalid("initialization std must be positive"));
        }
        self.shape_trace(1).map(|_| ())
    }

    fn geometry(&self, stride: [usize; 3]) -> ConvGeometry {
        ConvGeometry::new(stride, self.conv_padding)
    }

    /// Shapes of every stage for a batch of `n`, computed with the same
    /// shape rules the operators use.
    pub fn shape_trace(&self, n: usize) -> Result<ShapeTrace> {
        let b = &self.bank;
        let (groups, k) = (b.groups(), b.directions);
        let size = self.input_size;
        let pad = b.size / 2;
        let hw = conv_output_len(size, b.size, 1, pad)
            .ok_or_else(|| invalid("Gabor kernel does not fit the input"))?;
        let c = self.channels();
        let [kd, kh, kw] = self.conv_kernel;
        let m1 = conv3d_output_shape(
            &[n, groups, k, hw, hw],
            &[c, groups, kd, kh, kw],
            self.geometry(self.stride1),
        )?;
        let m2 = conv3d_output_shape(&m1, &[c, c, kd, kh, kw], self.geometry(self.stride2))?;
        let (h2, w2) = (m2[3], m2[4]);
        let g = self.block_grid;
        if h2 < g || w2 < g {
            return Err(CoreError::ShapeMismatch(format!(
                "feature map {h2}×{w2} is smaller than the {g}×{g} block grid"
            )));
        }
        let (hp, wp) = (padded_extent(h2, g), padded_extent(w2, g));
        let (hb, wb) = (hp / g, wp / g);
        let stages = vec![
            ("input", vec![n, 1, size, size]),
            ("gabor", vec![n, groups * k, hw, hw]),
            ("regrouped", vec![n, groups, k, hw, hw]),
            ("module1", m1.to_vec()),
            ("module2", m2.to_vec()),
            ("depth_pool", vec![n, c, h2, w2]),
            ("padded", vec![n, c, hp, wp]),
            ("block", vec![n, c, hb, wb]),
            ("block_flat", vec![n, c * hb * wb]),
            ("descriptor", vec![n, self.descriptor_dim]),
        ];
        Ok(ShapeTrace {
            stages: stages.into_iter().map(|(s, v)| (s.to_string(), v)).collect(),
            blocks: g * g,
        })
    }
}

/// Smallest multiple of `grid` that is at least `len`.
pub fn padded_extent(len: usize, grid: usize) -> usize {
    len.div_ceil(grid) * grid
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stages: Vec<(String, Vec<usize>)>,
    pub blocks: usize,
}

impl ShapeTrace {
    pub fn get(&self, stage: &str) -> Option<&[usize]> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, v)| v.as_slice())
    }

    /// One `stage = d0xd1x...` line per stage, then `blocks = n`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (s, v) in &self.stages {
            let dims: Vec<String> = v.iter().map(ToString::to_string).collect();
            out.push_str(&format!("{s} = {}\n", dims.join("x")));
        }
        out.push_str(&format!("blocks = {}\n", self.blocks));
        out
    }
}

// ---- graph-level building blocks ----------------------------------------

/// Zero-padded feature map and its blocks in row-major order.
#[derive(Clone, Debug)]
pub struct BlockSet {
    pub padded: Var,
    pub blocks: Vec<Var>,
}

/// Pads `[N,C,H,W]` at the bottom and right to multiples of `grid` and cuts
/// it into `grid²` equal blocks.
pub fn split_blocks<T: Element>(g: &mut Graph<T>, f2: Var, grid: usize) -> Result<BlockSet> {
    let s = g.shape(f2).to_vec();
    let &[_, _, h, w] = s.as_slice() else {
        return Err(CoreError::ShapeMismatch(format!("expected [N,C,H,W], got {s:?}")));
    };
    if grid == 0 || h < grid || w < grid {
        return Err(CoreError::ShapeMismatch(format!("{h}×{w} map cannot form a {grid}×{grid} grid")));
    }
    let (hp, wp) = (padded_extent(h, grid), padded_extent(w, grid));
    let padded = if (hp, wp) == (h, w) {
        f2
    } else {
        g.pad_bottom_right(f2, hp, wp)?
    };
    let (hb, wb) = (hp / grid, wp / grid);
    let mut blocks = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            blocks.push(g.crop(padded, r * hb, c * wb, hb, wb)?);
        }
    }
    Ok(BlockSet { padded, blocks })
}

/// Reassembles row-major blocks `[N,C,hb,wb]` into `[N,C,grid·hb,grid·wb]`.
pub fn concat_blocks<T: Element>(blocks: &[Tensor<T>], grid: usize) -> Result<Tensor<T>> {
    if blocks.len() != grid * grid || blocks.is_empty() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} blocks for a {grid}×{grid} grid",
            blocks.len()
        )));
    }
    let s = blocks[0].shape().to_vec();
    let &[n, c, hb, wb] = s.as_slice() else {
        return Err(CoreError::ShapeMismatch(format!("expected [N,C,h,w] blocks, got {s:?}")));
    };
    let (h, w) = (hb * grid, wb * grid);
    let mut out = vec![T::zero(); n * c * h * w];
    for (i, b) in blocks.iter().enumerate() {
        if b.shape() != s.as_slice() {
            return Err(CoreError::ShapeMismatch("blocks differ in shape".into()));
        }
        let (br, bc) = (i / grid, i % grid);
        for nc in 0..n * c {
            for r in 0..hb {
                let src = (nc * hb + r) * wb;
                let dst = (nc * h + br * hb + r) * w + bc * wb;
                out[dst..dst + wb].copy_from_slice(&b.data()[src..src + wb]);
            }
        }
    }
    Ok(Tensor::new(vec![n, c, h, w], out)?)
}

fn flatten<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let rest: usize = s[1..].iter().product();
    Ok(g.reshape(x, vec![s[0], rest])?)
}

/// Combines equally shaped blocks. `weights` (raw, pre-softmax) is used by
/// [`FusionMode::Dynamic`] only.
pub fn fuse_blocks<T: Element>(
    g: &mut Graph<T>,
    blocks: &[Var],
    weights: Option<Var>,
    mode: FusionMode,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(invalid("no blocks to fuse"));
    }
    Ok(match mode {
        FusionMode::Dynamic => {
            let w = weights.ok_or_else(|| invalid("dynamic fusion needs weights"))?;
            let sw = g.softmax(w)?;
            g.weighted_sum(blocks, sw)?
        }
        FusionMode::Average => {
            let n = blocks.len();
            let w = g.constant(Tensor::full(vec![n], T::from_f64(1.0 / n as f64)));
            g.weighted_sum(blocks, w)?
        }
        FusionMode::Max => g.elementwise_max(blocks)?,
    })
}

/// Cross-entropy on `s·cos(θ + m)` logits, where `θ` is the angle between
/// each embedding row and each class weight row.
pub fn arc_margin_loss<T: Element>(
    g: &mut Graph<T>,
    embeddings: Var,
    class_weights: Var,
    labels: &[usize],
    cfg: &ArcMarginConfig,
) -> Result<Var> {
    let e = g.l2_normalize_rows(embeddings)?;
    let w = g.l2_normalize_rows(class_weights)?;
    let cos = g.linear(e, w, None)?;
    let logits = g.arc_margin_logits(cos, labels, cfg.s, cfg.m, cfg.placement())?;
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

/// A classification layer bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub weight: Var,
    pub bias: Option<Var>,
    pub kind: HeadKind,
}

impl Classifier {
    pub fn loss<T: Element>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        labels: &[usize],
        arc: &ArcMarginConfig,
    ) -> Result<Var> {
        match self.kind {
            HeadKind::Softmax => {
                let logits = g.linear(features, self.weight, self.bias)?;
                Ok(g.softmax_cross_entropy(logits, labels)?)
            }
            HeadKind::ArcMargin => arc_margin_loss(g, features, self.weight, labels, arc),
        }
    }
}

/// Sum of the per-block classification losses through one shared head.
pub fn block_loss<T: Element>(
    g: &mut Graph<T>,
    blocks: &[Var],
    head: &Classifier,
    labels: &[usize],
    arc: &ArcMarginConfig,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let flat = flatten(g, b)?;
        terms.push(head.loss(g, flat, labels, arc)?);
    }
    Ok(g.add_all(&terms)?)
}

/// `L_D + μ·L_B`.
pub fn total_loss<T: Element>(g: &mut Graph<T>, descriptor: Var, block: Var, mu: f64) -> Result<Var> {
    let weighted = g.scale(block, mu);
    Ok(g.add(descriptor, weighted)?)
}

// ---- the network ---------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    gabor: ParamId,
    conv1: ParamId,
    bn1_gamma: ParamId,
    bn1_beta: ParamId,
    conv2: ParamId,
    bn2_gamma: ParamId,
    bn2_beta: ParamId,
    fusion: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    fc1_w: ParamId,
    fc1_b: Option<ParamId>,
    fc2_w: ParamId,
    fc2_b: Option<ParamId>,
}

/// Whether batch norm uses batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub f1: Var,
    pub f2: Var,
    pub blocks: BlockSet,
    pub fused: Var,
    pub descriptor: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub descriptor: Var,
    pub block: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct CpnModel<T> {
    config: CpnConfig,
    bank: GaborBank,
    params: ParamStore<T>,
    ids: ParamIds,
    running: [RunningStats; 2],
}

impl<T: Element> CpnModel<T> {
    /// Builds the bank and draws initial weights from `N(0, init_std²)`.
    /// Batch-norm scales start at 1 and shifts and biases at 0. Arc-margin
    /// class-weight rows are rescaled to unit norm after drawing.
    pub fn new(config: CpnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bank = GaborBank::build(&config.bank)?;
        let trace = config.shape_trace(1)?;
        let flat = trace.get("block_flat").expect("traced")[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let c = config.channels();
        let groups = config.bank.groups();
        let [kd, kh, kw] = config.conv_kernel;
        let n_blocks = config.block_grid * config.block_grid;
        let dim = config.descriptor_dim;
        let classes = config.n_classes;
        let softmax = config.head == HeadKind::Softmax;

        let mut p = ParamStore::new();
        let gabor = p.add("gabor.weight", bank.conv_weight(), true);
        let conv1 = p.add("conv1.weight", Tensor::randn(vec![c, groups, kd, kh, kw], std, &mut rng), false);
        let bn1_gamma = p.add("bn1.gamma", Tensor::ones(vec![c]), false);
        let bn1_beta = p.add("bn1.beta", Tensor::zeros(vec![c]), false);
        let conv2 = p.add("conv2.weight", Tensor::randn(vec![c, c, kd, kh, kw], std, &mut rng), false);
        let bn2_gamma = p.add("bn2.gamma", Tensor::ones(vec![c]), false);
        let bn2_beta = p.add("bn2.beta", Tensor::zeros(vec![c]), false);
        let fusion = p.add(
            "fusion.weight",
            Tensor::randn(vec![n_blocks], std, &mut rng),
            config.fusion != FusionMode::Dynamic,
        );
        let fc_w = p.add("fc.weight", Tensor::randn(vec![dim, flat], std, &mut rng), false);
        let fc_b = p.add("fc.bias", Tensor::zeros(vec![dim]), false);
        let head_init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let w = Tensor::randn(vec![rows, cols], std, rng);
            if softmax {
                w
            } else {
                unit_rows(w)
            }
        };
        let fc1_w = p.add("fc1.weight", head_init(classes, flat, &mut rng), false);
        let fc1_b = softmax.then(|| p.add("fc1.bias", Tensor::zeros(vec![classes]), false));
        let fc2_w = p.add("fc2.weight", head_init(classes, dim, &mut rng), false);
        let fc2_b = softmax.then(|| p.add("fc2.bias", Tensor::zeros(vec![classes]), false));
        Ok(CpnModel {
            config,
            bank,
            params: p,
            ids: ParamIds {
                gabor,
                conv1,
                bn1_gamma,
                bn1_beta,
                conv2,
                bn2_gamma,
                bn2_beta,
                fusion,
                fc_w,
                fc_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            },
            running: [RunningStats::new(c), RunningStats::new(c)],
        })
    }

    pub fn config(&self) -> &CpnConfig {
        &self.config
    }

    pub fn bank(&self) -> &GaborBank {
        &self.bank
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats; 2] {
        &self.running
    }

    pub fn gabor_param(&self) -> ParamId {
        self.ids.gabor
    }

    pub fn fusion_param(&self) -> ParamId {
        self.ids.fusion
    }

    /// Softmax-normalized fusion weights.
    pub fn fusion_weights(&self) -> Vec<f64> {
        cpn_tensor::kernels::softmax(&self.params.value(self.ids.fusion).to_f64_vec())
    }

    /// Casts every parameter and statistic to another element type.
    pub fn cast<U: Element>(&self) -> CpnModel<U> {
        CpnModel {
            config: self.config.clone(),
            bank: self.bank.clone(),
            params: self.params.cast(),
            ids: self.ids,
            running: self.running.clone(),
        }
    }

    /// Gabor responses `[N, G·K, H, W]` of a `[N, 1, H, W]` batch.
    pub fn forward_gabor(&self, g: &mut Graph<T>, rois: Var) -> Result<Var> {
        let s = g.shape(rois).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(CoreError::ShapeMismatch(format!(
                "expected [N,1,{size},{size}] input, got {s:?}"
            )));
        }
        let w = g.param(&self.params, self.ids.gabor);
        Ok(g.conv2d(rois, w, None, 1, self.bank.size() / 2)?)
    }

    /// Gabor responses computed outside any training graph.
    pub fn gabor_features(&self, rois: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(rois.clone());
        let f1 = self.forward_gabor(&mut g, x)?;
        Ok(g.value(f1).clone())
    }

    /// Everything after the Gabor layer.
    pub fn forward_from_gabor(&mut self, g: &mut Graph<T>, f1: Var, phase: Phase) -> Result<Forward> {
        let (params, ids, cfg) = (&self.params, self.ids, &self.config);
        let [r1, r2] = &mut self.running;
        match phase {
            Phase::Train => forward_tail(
                g,
                params,
                ids,
                cfg,
                f1,
                BnMode::Train {
                    running: r1,
                    momentum: BN_MOMENTUM,
                },
                BnMode::Train {
                    running: r2,
                    momentum: BN_MOMENTUM,
                },
            ),
            Phase::Eval => forward_tail(g, params, ids, cfg, f1, BnMode::Eval(r1), BnMode::Eval(r2)),
        }
    }

    /// Inference-only forward, usable through a shared reference.
    pub fn forward_eval(&self, g: &mut Graph<T>, rois: Var) -> Result<Forward> {
        let f1 = self.forward_gabor(g, rois)?;
        let [r1, r2] = &self.running;
        forward_tail(g, &self.params, self.ids, &self.config, f1, BnMode::Eval(r1), BnMode::Eval(r2))
    }

    pub fn forward(&mut self, g: &mut Graph<T>, rois: Var, phase: Phase) -> Result<Forward> {
        let f1 = self.forward_gabor(g, rois)?;
        self.forward_from_gabor(g, f1, phase)
    }

    /// Descriptor loss, optional block loss and their weighted total.
    pub fn losses(&self, g: &mut Graph<T>, fwd: &Forward, labels: &[usize]) -> Result<Losses> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(CoreError::Model(format!(
                "label {bad} outside the {} configured classes",
                self.config.n_classes
            )));
        }
        let kind = self.config.head;
        let arc = self.config.arc;
        let fc2 = Classifier {
            weight: g.param(&self.params, self.ids.fc2_w),
            bias: self.ids.fc2_b.map(|b| g.param(&self.params, b)),
            kind,
        };
        let descriptor = fc2.loss(g, fwd.descriptor, labels, &arc)?;
        if !self.config.block_loss {
            return Ok(Losses {
                descriptor,
                block: None,
                total: descriptor,
            });
        }
        let fc1 = Classifier {
            weight: g.param(&self.params, self.ids.fc1_w),
            bias: self.ids.fc1_b.map(|b| g.param(&self.params, b)),
            kind,
        };
        let block = block_loss(g, &fwd.blocks.blocks, &fc1, labels, &arc)?;
        let total = total_loss(g, descriptor, block, self.config.mu)?;
        Ok(Losses {
            descriptor,
            block: Some(block),
            total,
        })
    }

    fn input_batch(&self, rois: &[&Raster]) -> Result<Tensor<T>> {
        let size = self.config.input_size;
        let prepared: Vec<Raster> = rois
            .iter()
            .map(|r| {
                if r.width() != size || r.height() != size {
                    Err(CoreError::ShapeMismatch(format!(
                        "ROI is {}x{}, model expects {size}x{size}",
                        r.width(),
                        r.height()
                    )))
                } else {
                    Ok(r.standardized())
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Raster> = prepared.iter().collect();
        Raster::batch(&refs)
    }

    /// Standardized `[N, 1, H, W]` batch for the given ROIs.
    pub fn prepare(&self, rois: &[&Raster]) -> Result<Tensor<T>> {
        self.input_batch(rois)
    }

    /// Descriptors of a batch of ROIs, one row each.
    pub fn embed_batch(&self, rois: &[&Raster]) -> Result<Vec<Vec<f32>>> {
        let x = self.input_batch(rois)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = self.forward_eval(&mut g, xv)?;
        Ok(rows_f32(g.value(fwd.descriptor)))
    }

    pub fn embed(&self, roi: &Raster) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[roi])?.remove(0))
    }

    /// Flattened block features of one ROI, in row-major block order.
    pub fn embed_blocks(&self, roi: &Raster) -> Result<Vec<Vec<f32>>> {
        let x = self.input_batch(&[roi])?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = self.forward_eval(&mut g, xv)?;
        Ok(fwd
            .blocks
            .blocks
            .iter()
            .map(|&b| g.value(b).data().iter().map(|v| v.as_f64() as f32).collect())
            .collect())
    }

    /// Parameters and batch-norm statistics as named arrays.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out: Vec<NamedArray> = self
            .params
            .iter()
            .map(|(_, p)| NamedArray::new(p.name.clone(), &p.value))
            .collect();
        for (i, r) in self.running.iter().enumerate() {
            let c = r.mean.len();
            out.push(NamedArray::new(
                format!("bn{}.running_mean", i + 1),
                &Tensor::<f64>::new(vec![c], r.mean.clone()).expect("length"),
            ));
            out.push(NamedArray::new(
                format!("bn{}.running_var", i + 1),
                &Tensor::<f64>::new(vec![c], r.var.clone()).expect("length"),
            ));
        }
        out
    }

    /// Replaces parameters and statistics from named arrays; every array the
    /// model owns must be present with a matching shape.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| CoreError::Model(format!("checkpoint lacks `{name}`")))
        };
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let p = self.params.get_mut(id);
            let a = find(&p.name)?;
            if a.tensor.shape() != p.value.shape() {
                return Err(CoreError::Model(format!(
                    "`{}` has shape {:?} in the checkpoint, model expects {:?}",
                    p.name,
                    a.tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = a.tensor.cast();
        }
        for (i, r) in self.running.iter_mut().enumerate() {
            for (field, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let a = find(&format!("bn{}.{field}", i + 1))?;
                if a.tensor.numel() != dst.len() {
                    return Err(CoreError::Model(format!("bn{} statistics have the wrong size", i + 1)));
                }
                *dst = a.tensor.to_f64_vec();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save(path, &self.to_arrays())?)
    }

    /// Rebuilds a model for `config` and fills it from a checkpoint file.
    pub fn load(config: CpnConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut m = CpnModel::new(config, 0)?;
        m.load_arrays(&checkpoint::load(path)?)?;
        Ok(m)
    }
}

/// Rescales every row to unit L2 norm. Arc-margin heads normalize their
/// class weights, so row scale only sets the effective step size: a row of
/// norm `r` turns by roughly `lr / r²` per unit gradient.
fn unit_rows<T: Element>(w: Tensor<T>) -> Tensor<T> {
    let cols = w.shape()[1];
    let mut data = w.to_f64_vec();
    for row in data.chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::from_f64(w.shape().to_vec(), &data).expect("same shape")
}

fn rows_f32<T: Element>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.as_f64() as f32).collect())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn forward_tail<T: Element>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    ids: ParamIds,
    cfg: &CpnConfig,
    f1: Var,
    bn1: BnMode<'_>,
    bn2: BnMode<'_>,
) -> Result<Forward> {
    let s = g.shape(f1).to_vec();
    let (groups, k) = (cfg.bank.groups(), cfg.bank.directions);
    let &[n, ch, h, w] = s.as_slice() else {
        return Err(CoreError::ShapeMismatch(format!("expected [N,C,H,W] Gabor responses, got {s:?}")));
    };
    if ch != groups * k {
        return Err(CoreError::ShapeMismatch(format!(
            "{ch} Gabor channels, bank has {}",
            groups * k
        )));
    }
    let x = g.reshape(f1, vec![n, groups, k, h, w])?;

    let w1 = g.param(params, ids.conv1);
    let x = g.conv3d(x, w1, None, cfg.geometry(cfg.stride1))?;
    let (ga, be) = (g.param(params, ids.bn1_gamma), g.param(params, ids.bn1_beta));
    let x = g.batch_norm(x, ga, be, bn1)?;
    let x = g.relu(x);

    let w2 = g.param(params, ids.conv2);
    let x = g.conv3d(x, w2, None, cfg.geometry(cfg.stride2))?;
    let (ga, be) = (g.param(params, ids.bn2_gamma), g.param(params, ids.bn2_beta));
    let x = g.batch_norm(x, ga, be, bn2)?;
    let x = g.relu(x);

    let pooled = g.max_pool_depth(x)?;
    let ps = g.shape(pooled).to_vec();
    let f2 = g.reshape(pooled, vec![ps[0], ps[1], ps[3], ps[4]])?;

    let blocks = split_blocks(g, f2, cfg.block_grid)?;
    let fw = g.param(params, ids.fusion);
    let fused = fuse_blocks(g, &blocks.blocks, Some(fw), cfg.fusion)?;
    let flat = flatten(g, fused)?;
    let (wd, bd) = (g.param(params, ids.fc_w), g.param(params, ids.fc_b));
    let descriptor = g.linear(flat, wd, Some(bd))?;
    Ok(Forward {
        f1,
        f2,
        blocks,
        fused,
        descriptor,
    })
}

impl CpnModel<f64> {
    /// Training loss of `x` (already standardized, `[N,1,H,W]`) with
    /// train-mode batch norm. Running statistics are left untouched.
    pub fn training_loss(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = scratch.forward(&mut g, xv, Phase::Train)?;
        let l = scratch.losses(&mut g, &fwd, labels)?;
        Ok(g.value(l.total).item())
    }

    /// Compares the analytic gradient of the total training loss with
    /// central differences for every trainable parameter. Frozen parameters
    /// must receive no gradient at all.
    ///
    /// A probe whose difference quotients at `step` and `step / 2` disagree
    /// straddles a ReLU or max-pool kink; it is counted in `skipped` and not
    /// compared. The agreement test involves no analytic gradient, so a wrong
    /// backward pass cannot hide behind it.
    pub fn gradcheck(&self, x: &Tensor<f64>, labels: &[usize], step: f64, probe: Probe) -> Result<ModelGradcheck> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = scratch.forward(&mut g, xv, Phase::Train)?;
        let l = scratch.losses(&mut g, &fwd, labels)?;
        g.backward(l.total)?;
        let grads = g.param_gradients();
        let mut out = ModelGradcheck::default();
        let mut probe_model = self.clone();
        for (slot, id) in self.params.ids().enumerate() {
            let p = self.params.get(id);
            if p.frozen {
                if grads.get(id).is_some() {
                    return Err(CoreError::Model(format!("frozen `{}` received a gradient", p.name)));
                }
                continue;
            }
            let analytic = grads
                .get(id)
                .ok_or_else(|| CoreError::Model(format!("`{}` received no gradient", p.name)))?;
            for i in probe_indices(p.value.numel(), probe) {
                let orig = p.value.data()[i];
                let mut quotient = |h: f64| -> Result<f64> {
                    probe_model.params.get_mut(id).value.data_mut()[i] = orig + h;
                    let up = probe_model.training_loss(x, labels)?;
                    probe_model.params.get_mut(id).value.data_mut()[i] = orig - h;
                    let down = probe_model.training_loss(x, labels)?;
                    probe_model.params.get_mut(id).value.data_mut()[i] = orig;
                    Ok((up - down) / (2.0 * h))
                };
                let (coarse, fine) = (quotient(step)?, quotient(step / 2.0)?);
                if (coarse - fine).abs() > KINK_TOLERANCE * coarse.abs().max(fine.abs()) + KINK_FLOOR {
                    out.skipped += 1;
                    continue;
                }
                out.report.record(slot, i, analytic.data()[i], coarse);
            }
        }
        Ok(out)
    }
}

/// Relative disagreement between difference quotients that marks a kink.
pub const KINK_TOLERANCE: f64 = 1e-4;
/// Absolute slack for the kink test, above central-difference round-off.
pub const KINK_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGradcheck {
    pub report: GradcheckReport,
    /// Probes dropped as non-smooth.
    pub skipped: usize,
}

/// Cosine distance `1 − cos` between two descriptors, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        return 1.0;
    }
    (1.0 - dot / denom).clamp(0.0, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_extents() {
        assert_eq!(padded_extent(43, 3), 45);
        assert_eq!(padded_extent(9, 3), 9);
        assert_eq!(padded_extent(22, 3), 24);
    }

    #[test]
    fn paper_channels() {
        assert_eq!(CpnConfig::paper(10).channels(), 864);
        assert_eq!(CpnConfig::tiny(10).channels(), 32);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = CpnConfig::tiny(5);
        c.arc.m = 2.0;
        assert!(c.validate().is_err());
        let mut c = CpnConfig::tiny(5);
        c.mu = -1.0;
        assert!(c.validate().is_err());
        assert!(CpnConfig::tiny(1).validate().is_err());
    }

    #[test]
    fn cosine_distance_bounds() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
    }
}
