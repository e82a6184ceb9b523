//! Backbone plus global / attention / drop branches.
//!
//! Training always runs the global branch and exactly one auxiliary branch,
//! picked per iteration with probability `rho` for the drop branch. Inference
//! concatenates the global and attention embeddings; the drop branch is a
//! training-time regulariser only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adadrop::{apply_drop, attention_map_with, ChannelPooling, DropMode};
use crate::attention::{cbam, clamp_reduction, ChannelGate, SpatialGate};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, total_loss, triplet_loss, Reduction};
use crate::tensor::{PoolKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Global,
    Attention,
    Drop,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Global => "global",
            BranchKind::Attention => "attention",
            BranchKind::Drop => "drop",
        }
    }
}

/// Which auxiliary branches exist in addition to the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSet {
    pub attention: bool,
    pub drop: bool,
}

impl BranchSet {
    pub const FULL: Self = Self {
        attention: true,
        drop: true,
    };
    pub const GLOBAL_ONLY: Self = Self {
        attention: false,
        drop: false,
    };
    pub const GLOBAL_ATTENTION: Self = Self {
        attention: true,
        drop: false,
    };
    pub const GLOBAL_DROP: Self = Self {
        attention: false,
        drop: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each backbone stage (one 3x3 conv + relu each).
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub global_hidden: usize,
    pub global_dim: usize,
    pub attention_dim: usize,
    pub drop_dim: usize,
    pub num_classes: usize,
    /// Requested channel-attention reduction; clamped to a divisor of C.
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub drop_pooling: PoolKind,
    pub channel_pooling: ChannelPooling,
    pub branches: BranchSet,
}

impl NetConfig {
    pub fn desk_scale(num_classes: usize) -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            stage_channels: vec![16, 32, 64, 64],
            stage_strides: vec![2, 2, 2, 1],
            global_hidden: 128,
            global_dim: 64,
            attention_dim: 64,
            drop_dim: 64,
            num_classes,
            reduction: 16,
            spatial_kernel: 7,
            drop_pooling: PoolKind::Gmp,
            channel_pooling: ChannelPooling::Mean,
            branches: BranchSet::FULL,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Spatial size of the backbone output.
    pub fn feature_size(&self) -> (usize, usize) {
        self.stage_strides.iter().fold((self.image_height, self.image_width), |(h, w), s| {
            ((h - 1) / s + 1, (w - 1) / s + 1)
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.global_dim
            + if self.branches.attention {
                self.attention_dim
            } else if self.branches.drop {
                self.drop_dim
            } else {
                0
            }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::contract("backbone needs one stride per stage"));
        }
        let dims = [
            self.image_height,
            self.image_width,
            self.global_hidden,
            self.global_dim,
            self.attention_dim,
            self.drop_dim,
            self.num_classes,
            self.reduction,
        ];
        if dims.iter().chain(&self.stage_channels).chain(&self.stage_strides).any(|&d| d == 0) {
            return Err(Error::contract("network extents must be positive"));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::contract("spatial kernel size must be odd"));
        }
        if !matches!(self.drop_pooling, PoolKind::Gap | PoolKind::Gmp) {
            return Err(Error::contract("drop branch pooling must be gap or gmp"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Head {
    fc_w: usize,
    fc_b: usize,
    cls_w: usize,
    cls_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    backbone: Vec<(usize, usize)>,
    global_fc1_w: usize,
    global_fc1_b: usize,
    /// `fc` is the second global FC layer.
    global: Head,
    att_fc1: usize,
    att_fc2: usize,
    att_kernel: usize,
    attention: Head,
    drop: Head,
}

/// Every learnable tensor of the model, in a fixed order shared by
/// binding, gradient read-back, the optimizer and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

struct Builder<'r, R: Rng + ?Sized> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t.requiring_grad());
        self.tensors.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> usize {
        let t = Tensor::randn(shape, (gain / fan_in as f64).sqrt(), self.rng);
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn head(&mut self, prefix: &str, d_in: usize, d_emb: usize, classes: usize) -> Head {
        Head {
            fc_w: self.normal(format!("{prefix}.fc.weight"), &[d_emb, d_in], d_in, 1.0),
            fc_b: self.zeros(format!("{prefix}.fc.bias"), &[d_emb]),
            cls_w: self.normal(format!("{prefix}.classifier.weight"), &[classes, d_emb], d_emb, 1.0),
            cls_b: self.zeros(format!("{prefix}.classifier.bias"), &[classes]),
        }
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let mut c_in = 3;
        let mut backbone = Vec::new();
        for (i, &c_out) in config.stage_channels.iter().enumerate() {
            let w = b.normal(format!("backbone.{i}.weight"), &[c_out, c_in, 3, 3], c_in * 9, 2.0);
            let bias = b.zeros(format!("backbone.{i}.bias"), &[c_out]);
            backbone.push((w, bias));
            c_in = c_out;
        }
        let c = config.feature_channels();
        let k = config.num_classes;
        let global_fc1_w = b.normal("global.fc1.weight".into(), &[config.global_hidden, c], c, 2.0);
        let global_fc1_b = b.zeros("global.fc1.bias".into(), &[config.global_hidden]);
        let global = b.head("global", config.global_hidden, config.global_dim, k);
        let hidden = c / clamp_reduction(c, config.reduction);
        let att_fc1 = b.normal("attention.channel.fc1".into(), &[hidden, c], c, 2.0);
        let att_fc2 = b.normal("attention.channel.fc2".into(), &[c, hidden], hidden, 1.0);
        let ks = config.spatial_kernel;
        let att_kernel = b.normal("attention.spatial.kernel".into(), &[1, 1, ks, ks], ks * ks, 1.0);
        let attention = b.head("attention", c, config.attention_dim, k);
        let drop = b.head("drop", c, config.drop_dim, k);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                backbone,
                global_fc1_w,
                global_fc1_b,
                global,
                att_fc1,
                att_fc2,
                att_kernel,
                attention,
                drop,
            },
        })
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint). Names and
    /// shapes must match a fresh model built from `config`.
    pub fn from_named(config: &NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = Self::init(config, &mut rng)?;
        if named.len() != params.tensors.len() {
            return Err(Error::dim(format!(
                "expected {} tensors, got {}",
                params.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != params.names[i] || t.shape() != params.tensors[i].shape() {
                return Err(Error::dim(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    params.names[i],
                    params.tensors[i].shape(),
                    t.shape()
                )));
            }
            params.tensors[i] = t.requiring_grad();
        }
        Ok(params)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, None)
    }

    /// Like [`Self::bind`], but parameter `index` is replaced by `var`.
    pub fn bind_with(&self, tape: &mut Tape, replace: Option<(usize, Var)>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| match replace {
                Some((j, v)) if j == i => v,
                _ => tape.leaf(t.clone()),
            })
            .collect();
        Bound {
            vars,
            layout: self.layout.clone(),
            config: self.config.clone(),
        }
    }

    /// Gives every parameter an all-zero gradient buffer.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
            let zeros = vec![0.0; t.numel()];
            t.accumulate_grad(&zeros).expect("same length");
        }
    }

    /// Adds the tape gradients of `bound` into the parameter buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    layout: Layout,
    config: NetConfig,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn channel_gate(&self) -> ChannelGate {
        ChannelGate {
            fc1: self.v(self.layout.att_fc1),
            fc2: self.v(self.layout.att_fc2),
            bias1: None,
            bias2: None,
        }
    }

    pub fn spatial_gate(&self) -> SpatialGate {
        SpatialGate {
            kernel: self.v(self.layout.att_kernel),
            padding: (self.config.spatial_kernel - 1) / 2,
        }
    }
}

/// Images, identity class labels and camera ids of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cameras: Vec<i64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub embedding: Var,
    pub logits: Var,
    pub kind: BranchKind,
}

/// Stride-`s` 3x3 conv + relu per stage.
pub fn backbone_forward(tape: &mut Tape, images: Var, bound: &Bound) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let cfg = &bound.config;
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::dim(format!("expected N x 3 x H x W images, got {shape:?}")));
    }
    if shape[2] != cfg.image_height || shape[3] != cfg.image_width {
        return Err(Error::dim(format!(
            "images are {}x{}, network expects {}x{}",
            shape[2], shape[3], cfg.image_height, cfg.image_width
        )));
    }
    let mut x = images;
    for (&(w, b), &stride) in bound.layout.backbone.iter().zip(&cfg.stage_strides) {
        let y = tape.conv2d(x, bound.v(w), Some(bound.v(b)), stride, 1)?;
        x = tape.relu(y);
    }
    Ok(x)
}

fn embed_and_classify(tape: &mut Tape, pooled: Var, head: Head, bound: &Bound, kind: BranchKind) -> Result<BranchOutput> {
    let flat = tape.flatten(pooled)?;
    let embedding = tape.linear(flat, bound.v(head.fc_w), Some(bound.v(head.fc_b)))?;
    let logits = tape.linear(embedding, bound.v(head.cls_w), Some(bound.v(head.cls_b)))?;
    Ok(BranchOutput {
        embedding,
        logits,
        kind,
    })
}

/// Runs one branch on a backbone feature map. `drop_mode` of `None` runs the
/// drop head without erasing anything (its test-time form).
pub fn branch_forward(
    tape: &mut Tape,
    featmap: Var,
    kind: BranchKind,
    bound: &Bound,
    drop_mode: Option<DropMode>,
) -> Result<BranchOutput> {
    let cfg = bound.config.clone();
    match kind {
        BranchKind::Global => {
            let pooled = tape.pool(featmap, PoolKind::Gap)?;
            let flat = tape.flatten(pooled)?;
            let l = &bound.layout;
            let hidden = tape.linear(flat, bound.v(l.global_fc1_w), Some(bound.v(l.global_fc1_b)))?;
            let hidden = tape.relu(hidden);
            let hidden = tape.reshape(hidden, &[tape.shape(hidden)[0], cfg.global_hidden, 1, 1])?;
            embed_and_classify(tape, hidden, l.global, bound, kind)
        }
        BranchKind::Attention => {
            let attended = cbam(tape, featmap, &bound.channel_gate(), &bound.spatial_gate())?;
            let pooled = tape.pool(attended, PoolKind::Gap)?;
            embed_and_classify(tape, pooled, bound.layout.attention, bound, kind)
        }
        BranchKind::Drop => {
            let kept = match drop_mode {
                Some(mode) => {
                    let map = attention_map_with(tape.value(featmap), cfg.channel_pooling)?;
                    let mask = mode.mask(&map)?;
                    apply_drop(tape, featmap, &mask)?
                }
                None => featmap,
            };
            let pooled = tape.pool(kept, cfg.drop_pooling)?;
            embed_and_classify(tape, pooled, bound.layout.drop, bound, kind)
        }
    }
}

/// Drop branch with probability `rho`, attention otherwise. Consumes exactly
/// one uniform draw.
pub fn select_branch<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> Result<BranchKind> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::contract(format!("rho must lie in [0, 1], got {rho}")));
    }
    let u: f64 = rng.gen();
    Ok(if u < rho {
        BranchKind::Drop
    } else {
        BranchKind::Attention
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub rho: f64,
    pub drop_mode: DropMode,
    pub ce_reduction: Reduction,
    pub triplet_reduction: Reduction,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            rho: 0.25,
            drop_mode: DropMode::Threshold { alpha: 0.8 },
            ce_reduction: Reduction::Mean,
            triplet_reduction: Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchLoss {
    pub kind: BranchKind,
    pub cross_entropy: f64,
    pub triplet: f64,
}

impl BranchLoss {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.triplet
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub total: Var,
    pub branches: Vec<BranchLoss>,
    /// Auxiliary branch active this iteration, if the model has any.
    pub selected: Option<BranchKind>,
}

/// Classification plus triplet loss of one branch output.
pub fn branch_loss(
    tape: &mut Tape,
    out: &BranchOutput,
    labels: &[usize],
    settings: &TrainSettings,
) -> Result<(Var, BranchLoss)> {
    let ce = cross_entropy(tape, out.logits, labels, settings.ce_reduction)?;
    let (tri, _) = triplet_loss(tape, out.embedding, labels, settings.triplet_reduction)?;
    let record = BranchLoss {
        kind: out.kind,
        cross_entropy: tape.value(ce).item(),
        triplet: tape.value(tri).item(),
    };
    Ok((total_loss(tape, ce, tri)?, record))
}

/// Forward pass of one training iteration: the global branch plus one
/// auxiliary branch, with losses summed over active branches.
pub fn train_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    batch: &Batch,
    bound: &Bound,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<TrainOutput> {
    let branches = bound.config.branches;
    let selected = match (branches.attention, branches.drop) {
        (true, true) => Some(select_branch(settings.rho, rng)?),
        (true, false) => Some(BranchKind::Attention),
        (false, true) => Some(BranchKind::Drop),
        (false, false) => None,
    };
    let images = tape.constant(batch.images.clone());
    let featmap = backbone_forward(tape, images, bound)?;
    let mut records = Vec::with_capacity(2);
    let global = branch_forward(tape, featmap, BranchKind::Global, bound, None)?;
    let (mut total, rec) = branch_loss(tape, &global, &batch.labels, settings)?;
    records.push(rec);
    if let Some(kind) = selected {
        let aux = branch_forward(tape, featmap, kind, bound, Some(settings.drop_mode))?;
        let (loss, rec) = branch_loss(tape, &aux, &batch.labels, settings)?;
        records.push(rec);
        total = tape.add(total, loss)?;
    }
    Ok(TrainOutput {
        total,
        branches: records,
        selected,
    })
}

/// Test-time embedding: `[global | attention]`. Models trained without the
/// attention branch use the unmasked drop head in its place.
pub fn inference_embedding(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(images.clone());
    let featmap = backbone_forward(&mut tape, x, &bound)?;
    let global = branch_forward(&mut tape, featmap, BranchKind::Global, &bound, None)?;
    let branches = params.config.branches;
    let second = if branches.attention {
        Some(BranchKind::Attention)
    } else if branches.drop {
        Some(BranchKind::Drop)
    } else {
        None
    };
    let out = match second {
        Some(kind) => {
            let aux = branch_forward(&mut tape, featmap, kind, &bound, None)?;
            tape.concat_cols(global.embedding, aux.embedding)?
        }
        None => global.embedding,
    };
    Ok(tape.value(out).clone())
}

/// Embeds a large image set in fixed-size chunks, preserving order.
pub fn embed_all(params: &ModelParams, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let dim = params.config.embedding_dim();
    let mut data = Vec::with_capacity(n * dim);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let part = inference_embedding(params, &images.slice_batch(start, len)?)?;
        data.extend_from_slice(part.data());
        start += len;
    }
    Tensor::new(&[n, dim], data)
}
