//! Shared-prefix / N-branch networks.
//!
//! A network is a stem, a list of blocks and a classification head. A
//! [`BranchedModel`] shares the stages up to a split index and replicates the
//! rest, so every branch is a full network when combined with the prefix.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    /// 3×3 same-padded convolution with bias.
    Conv { out_channels: usize, stride: usize },
    Relu,
    /// 2×2 average pooling.
    AvgPool,
    Flatten,
    /// Fully connected layer with bias.
    Linear { out_features: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDef {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl BlockDef {
    pub fn new(name: &str, layers: Vec<Layer>) -> Self {
        BlockDef {
            name: name.to_string(),
            layers,
        }
    }
}

/// Network topology: `blocks[0]` is the stem, `head` is never shared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<BlockDef>,
    pub head: BlockDef,
}

/// Activation shape of one sample, without the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Act {
    fn dims(self) -> Vec<usize> {
        match self {
            Act::Map(c, h, w) => vec![c, h, w],
            Act::Flat(n) => vec![n],
        }
    }
}

impl BlockSpec {
    /// stem conv16 → block[conv32 + pool] → block[conv64 + pool] → head[flatten + linear].
    pub fn tiny_cnn(input: [usize; 3], num_classes: usize) -> Self {
        let conv = |c| Layer::Conv {
            out_channels: c,
            stride: 1,
        };
        BlockSpec {
            name: "tiny_cnn".into(),
            input,
            num_classes,
            blocks: vec![
                BlockDef::new("stem", vec![conv(16), Layer::Relu]),
                BlockDef::new("block1", vec![conv(32), Layer::Relu, Layer::AvgPool]),
                BlockDef::new("block2", vec![conv(64), Layer::Relu, Layer::AvgPool]),
            ],
            head: BlockDef::new(
                "head",
                vec![
                    Layer::Flatten,
                    Layer::Linear {
                        out_features: num_classes,
                    },
                ],
            ),
        }
    }

    /// stem[flatten] → two hidden blocks → linear head.
    pub fn tiny_mlp(input: [usize; 3], num_classes: usize, hidden: usize) -> Self {
        let hidden_block = |name| {
            BlockDef::new(
                name,
                vec![
                    Layer::Linear {
                        out_features: hidden,
                    },
                    Layer::Relu,
                ],
            )
        };
        BlockSpec {
            name: "tiny_mlp".into(),
            input,
            num_classes,
            blocks: vec![
                BlockDef::new("stem", vec![Layer::Flatten]),
                hidden_block("block1"),
                hidden_block("block2"),
            ],
            head: BlockDef::new(
                "head",
                vec![Layer::Linear {
                    out_features: num_classes,
                }],
            ),
        }
    }

    /// Number of blocks after the stem; the largest valid split index.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    /// Stem, blocks and head in order.
    pub fn stages(&self) -> impl Iterator<Item = &BlockDef> {
        self.blocks.iter().chain(std::iter::once(&self.head))
    }

    fn num_stages(&self) -> usize {
        self.blocks.len() + 1
    }

    /// Checks layer compatibility and returns the parameter shapes of every stage.
    fn param_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        if self.blocks.is_empty() {
            return Err(Error::contract("a network needs at least a stem block"));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("a classifier needs at least two classes"));
        }
        if self.input.contains(&0) {
            return Err(Error::size(format!("input shape {:?}", self.input)));
        }
        let [c, h, w] = self.input;
        let mut act = Act::Map(c, h, w);
        let mut out = Vec::new();
        for stage in self.stages() {
            let mut shapes = Vec::new();
            for layer in &stage.layers {
                let bad = || {
                    Error::size(format!(
                        "{} cannot apply {layer:?} to activation {:?}",
                        stage.name,
                        act.dims()
                    ))
                };
                act = match (*layer, act) {
                    (Layer::Conv { out_channels, stride }, Act::Map(c, h, w)) => {
                        if out_channels == 0 || !(stride == 1 || stride == 2) {
                            return Err(bad());
                        }
                        shapes.push(vec![out_channels, c, 3, 3]);
                        shapes.push(vec![out_channels]);
                        Act::Map(out_channels, h.div_ceil(stride), w.div_ceil(stride))
                    }
                    (Layer::Relu, a) => a,
                    (Layer::AvgPool, Act::Map(c, h, w)) if h % 2 == 0 && w % 2 == 0 => Act::Map(c, h / 2, w / 2),
                    (Layer::Flatten, Act::Map(c, h, w)) => Act::Flat(c * h * w),
                    (Layer::Flatten, a @ Act::Flat(_)) => a,
                    (Layer::Linear { out_features }, Act::Flat(n)) if out_features > 0 => {
                        shapes.push(vec![n, out_features]);
                        shapes.push(vec![out_features]);
                        Act::Flat(out_features)
                    }
                    _ => return Err(bad()),
                };
            }
            out.push(shapes);
        }
        if act != Act::Flat(self.num_classes) {
            return Err(Error::size(format!(
                "head produces {:?}, expected {} logits",
                act.dims(),
                self.num_classes
            )));
        }
        Ok(out)
    }

    /// Parameter count of one unbranched network.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .flatten()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Parameters of a contiguous run of stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T: Real = f32> {
    /// Stage indices covered, `first..end` (head is `blocks.len()`).
    pub first: usize,
    pub end: usize,
    pub params: Vec<Param<T>>,
}

impl<T: Real> Segment<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Topology recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub spec: BlockSpec,
    pub split_index: i64,
    pub num_branches: usize,
}

/// Tape handles for every parameter of a model, in [`BranchedModel::params`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub shared: Vec<Var>,
    pub branches: Vec<Vec<Var>>,
}

impl ModelVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.shared.iter().chain(self.branches.iter().flatten()).copied()
    }
}

#[derive(Debug)]
pub struct BranchedModel<T: Real = f32> {
    spec: BlockSpec,
    split_index: i64,
    shared: Segment<T>,
    branches: Vec<Segment<T>>,
    shared_evals: AtomicUsize,
}

impl<T: Real> Clone for BranchedModel<T> {
    fn clone(&self) -> Self {
        BranchedModel {
            spec: self.spec.clone(),
            split_index: self.split_index,
            shared: self.shared.clone(),
            branches: self.branches.clone(),
            shared_evals: AtomicUsize::new(self.shared_evals.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real> PartialEq for BranchedModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.split_index == other.split_index
            && self.shared == other.shared
            && self.branches == other.branches
    }
}

/// Builds a model whose stages `0..=split_index` are shared by `n` branches.
///
/// Parameter `j` of the unbranched network (counting from the stem) in replica
/// `r` is drawn from the init stream `(init_seed, r, j)`; shared parameters use
/// replica 0. Replica 0 is therefore the same network for every split and `n`.
/// Convolution and linear weights are He-normal, biases start at zero.
pub fn build_branched<T: Real>(spec: &BlockSpec, split_index: i64, n: usize, init_seed: u64) -> Result<BranchedModel<T>> {
    if n == 0 {
        return Err(Error::contract("a model needs at least one branch"));
    }
    if split_index < -1 || split_index > spec.num_blocks() as i64 {
        return Err(Error::contract(format!(
            "split index {split_index} outside -1..={}",
            spec.num_blocks()
        )));
    }
    let shapes = spec.param_shapes()?;
    let boundary = (split_index + 1) as usize;
    let stage_names: Vec<&str> = spec.stages().map(|s| s.name.as_str()).collect();

    let make_segment = |prefix: &str, replica: u64, first: usize, end: usize| -> Result<Segment<T>> {
        let mut params = Vec::new();
        let mut global = shapes[..first].iter().map(Vec::len).sum::<usize>() as u64;
        for (stage, stage_shapes) in shapes.iter().enumerate().take(end).skip(first) {
            for (k, shape) in stage_shapes.iter().enumerate() {
                let is_bias = shape.len() == 1;
                let len: usize = shape.iter().product();
                let data = if is_bias {
                    vec![T::zero(); len]
                } else {
                    // conv kernels are [F, C, 3, 3], linear weights [in, out]
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = RngStream::derive(init_seed, "init", replica, global);
                    (0..len).map(|_| T::from_f64(rng.normal() * std)).collect()
                };
                params.push(Param {
                    name: format!(
                        "{prefix}.{}.{}.{}",
                        stage_names[stage],
                        k / 2,
                        if is_bias { "bias" } else { "weight" }
                    ),
                    value: Tensor::new(shape, data, true)?,
                });
                global += 1;
            }
        }
        Ok(Segment { first, end, params })
    };

    let shared = make_segment("shared", 0, 0, boundary)?;
    let branches = (0..n)
        .map(|r| make_segment(&format!("branch{r}"), r as u64, boundary, spec.num_stages()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchedModel {
        spec: spec.clone(),
        split_index,
        shared,
        branches,
        shared_evals: AtomicUsize::new(0),
    })
}

impl<T: Real> BranchedModel<T> {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn split_index(&self) -> i64 {
        self.split_index
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            spec: self.spec.clone(),
            split_index: self.split_index,
            num_branches: self.branches.len(),
        }
    }

    /// Rebuilds a model from a topology and a full parameter list.
    pub fn from_parts(topology: &Topology, params: Vec<Param<T>>) -> Result<Self> {
        let mut model = build_branched::<T>(&topology.spec, topology.split_index, topology.num_branches, 0)?;
        let expected = model.param_count_total();
        let slots: Vec<&mut Param<T>> = model.params_mut().collect();
        if slots.len() != params.len() {
            return Err(Error::size(format!(
                "topology needs {} tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::size(format!(
                    "tensor `{}` {:?} does not fit slot `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            let mut value = p.value;
            value.set_requires_grad(true);
            slot.value = value;
        }
        debug_assert_eq!(expected, model.param_count_total());
        Ok(model)
    }

    pub fn shared(&self) -> &Segment<T> {
        &self.shared
    }

    pub fn branch(&self, i: usize) -> Result<&Segment<T>> {
        self.branches
            .get(i)
            .ok_or_else(|| Error::contract(format!("branch {i} of {}", self.branches.len())))
    }

    /// Shared parameters, then each branch's, in a fixed order.
    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.shared
            .params
            .iter()
            .chain(self.branches.iter().flat_map(|b| b.params.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.shared
            .params
            .iter_mut()
            .chain(self.branches.iter_mut().flat_map(|b| b.params.iter_mut()))
    }

    /// `(shared, per-branch)` parameter lists.
    pub fn param_partition(&self) -> (Vec<&Param<T>>, Vec<Vec<&Param<T>>>) {
        (
            self.shared.params.iter().collect(),
            self.branches.iter().map(|b| b.params.iter().collect()).collect(),
        )
    }

    pub fn param_count_total(&self) -> usize {
        self.shared.param_count() + self.branches.iter().map(Segment::param_count).sum::<usize>()
    }

    /// How many times the shared prefix has been evaluated.
    pub fn shared_evaluations(&self) -> usize {
        self.shared_evals.load(Ordering::Relaxed)
    }

    /// Records every parameter on `tape`.
    pub fn vars(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            shared: self.shared.params.iter().map(|p| tape.leaf(&p.value)).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| b.params.iter().map(|p| tape.leaf(&p.value)).collect())
                .collect(),
        }
    }

    fn run_segment(&self, segment: &Segment<T>, vars: &[Var], tape: &mut Tape<T>, mut x: Var) -> Result<Var> {
        let mut next = vars.iter().copied();
        let stages: Vec<&BlockDef> = self.spec.stages().collect();
        for stage in &stages[segment.first..segment.end] {
            for layer in &stage.layers {
                x = match *layer {
                    Layer::Conv { stride, .. } => {
                        let (k, b) = (next.next().unwrap(), next.next().unwrap());
                        tape.conv2d(x, k, Some(b), stride)?
                    }
                    Layer::Relu => tape.relu(x),
                    Layer::AvgPool => tape.avg_pool2(x)?,
                    Layer::Flatten => tape.flatten(x)?,
                    Layer::Linear { .. } => {
                        let (w, b) = (next.next().unwrap(), next.next().unwrap());
                        let y = tape.matmul(x, w)?;
                        tape.bias_add(y, b)?
                    }
                };
            }
        }
        Ok(x)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::size(format!(
                "input batch {shape:?} does not match [B, {:?}]",
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Output of the shared prefix for one batch.
    pub fn forward_shared(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.shared_evals.fetch_add(1, Ordering::Relaxed);
        self.run_segment(&self.shared, &vars.shared, tape, x)
    }

    /// Logits of branch `i` from a shared-prefix activation.
    pub fn forward_branch(&self, tape: &mut Tape<T>, vars: &ModelVars, i: usize, features: Var) -> Result<Var> {
        let segment = self.branch(i)?;
        self.run_segment(segment, &vars.branches[i], tape, features)
    }

    /// Softmax grid: `grid[i][k]` is branch `i` applied to view `k`.
    ///
    /// Each view passes through the shared prefix exactly once.
    pub fn forward_all(&self, tape: &mut Tape<T>, vars: &ModelVars, views: &[Var]) -> Result<Vec<Vec<Var>>> {
        if views.len() != self.branches.len() {
            return Err(Error::contract(format!(
                "{} views for {} branches",
                views.len(),
                self.branches.len()
            )));
        }
        let features = views
            .iter()
            .map(|&v| self.forward_shared(tape, vars, v))
            .collect::<Result<Vec<_>>>()?;
        let mut grid = Vec::with_capacity(self.branches.len());
        for i in 0..self.branches.len() {
            let mut row = Vec::with_capacity(views.len());
            for &f in &features {
                let logits = self.forward_branch(tape, vars, i, f)?;
                row.push(tape.softmax(logits)?);
            }
            grid.push(row);
        }
        Ok(grid)
    }

    /// Softmax outputs of every branch on `images` (`[B,C,H,W]`), without gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::inference();
        let vars = self.vars(&mut tape);
        let x = tape.leaf(images);
        let f = self.forward_shared(&mut tape, &vars, x)?;
        (0..self.branches.len())
            .map(|i| {
                let logits = self.forward_branch(&mut tape, &vars, i, f)?;
                let p = tape.softmax(logits)?;
                Ok(tape.to_tensor(p))
            })
            .collect()
    }

    /// Shared prefix plus branch `i` as a standalone single-branch network.
    pub fn export_branch(&self, i: usize) -> Result<BranchedModel<T>> {
        let branch = self.branch(i)?;
        let rename = |p: &Param<T>| {
            let local = p.name.split_once('.').map(|(_, rest)| rest).unwrap_or(&p.name);
            Param {
                name: format!("branch0.{local}"),
                value: p.value.clone(),
            }
        };
        let params = self
            .shared
            .params
            .iter()
            .chain(&branch.params)
            .map(rename)
            .collect();
        BranchedModel::from_parts(
            &Topology {
                spec: self.spec.clone(),
                split_index: -1,
                num_branches: 1,
            },
            params,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.value.all_finite())
    }
}
