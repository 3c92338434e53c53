//! Training loops: the branched method, single-DA training and the two
//! multi-DA baselines, plus evaluation.
//!
//! Randomness is keyed per decision:
//! - batch order: `(shuffle, "shuffle", data_epoch, 0)`;
//! - mix partners: `(augment, "partner", step, 0)`, a permutation of the batch;
//! - view `k` of sample `id`: `(augment, "view{k}", step, id)`;
//! - baseline choices: `(augment, "choice", step, id)`.
//!
//! Single-DA training draws its augmentation from view 0, which is what makes
//! a one-branch run of the branched method reproduce it exactly.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_da, baseline1_augment, baseline2_augment, preprocess, AugmentParams, DaKind, LabeledImage};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_fit, total_loss, Ablation, BetaMode, BetaState};
use crate::model::{build_branched, BlockSpec, BranchedModel};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ours,
    SingleDa(DaKind),
    Baseline1,
    Baseline2,
    NoDa,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ours => f.write_str("ours"),
            Method::SingleDa(kind) => write!(f, "single:{kind}"),
            Method::Baseline1 => f.write_str("baseline1"),
            Method::Baseline2 => f.write_str("baseline2"),
            Method::NoDa => f.write_str("noda"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "baseline1" => Ok(Method::Baseline1),
            "baseline2" => Ok(Method::Baseline2),
            "noda" => Ok(Method::NoDa),
            _ => match s.strip_prefix("single:") {
                Some(name) => Ok(Method::SingleDa(name.parse()?)),
                None => Err(Error::config(
                    "method",
                    format!("unknown method `{s}` (ours, single:NAME, baseline1, baseline2, noda)"),
                )),
            },
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Adaptive,
    Fixed,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaConfig {
    pub schedule: BetaSchedule,
    /// β for the fixed schedule.
    pub value: f64,
    /// Momentum `m` of the adaptive schedule.
    pub momentum: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        BetaConfig {
            schedule: BetaSchedule::Adaptive,
            value: 0.0,
            momentum: 0.9,
        }
    }
}

impl BetaConfig {
    fn mode(&self, total_steps: usize) -> BetaMode {
        match self.schedule {
            BetaSchedule::Adaptive => BetaMode::Adaptive,
            BetaSchedule::Fixed => BetaMode::Fixed(self.value),
            BetaSchedule::Linear => BetaMode::Linear { total_steps },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub augment: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            augment: 1,
            shuffle: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Ordered augmentation list; its length is the branch count of `ours`.
    pub da_set: Vec<DaKind>,
    pub split_index: i64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: SgdConfig,
    pub beta: BetaConfig,
    pub seeds: Seeds,
    pub fair_budget: bool,
    pub model: BlockSpec,
    pub ablation: Ablation,
    pub augment: AugmentParams,
    /// Evaluate every this many epoch records; 0 evaluates only the last one.
    pub eval_every: usize,
}

impl TrainConfig {
    /// Defaults for `model` with the given method.
    pub fn new(method: Method, model: BlockSpec) -> Self {
        TrainConfig {
            method,
            da_set: DaKind::DEFAULT_SET.to_vec(),
            split_index: 1,
            epochs: 30,
            batch_size: 128,
            optim: SgdConfig::default(),
            beta: BetaConfig::default(),
            seeds: Seeds::default(),
            fair_budget: true,
            model,
            ablation: Ablation::default(),
            augment: AugmentParams::default(),
            eval_every: 1,
        }
    }

    /// Branch count: the DA count for `ours`, one otherwise.
    pub fn num_branches(&self) -> usize {
        match self.method {
            Method::Ours => self.da_set.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if matches!(self.method, Method::Ours | Method::Baseline1) && self.da_set.is_empty() {
            return Err(Error::config("da_set", format!("{} needs at least one augmentation", self.method)));
        }
        let b = self.beta;
        if !(0.0..=1.0).contains(&b.value) {
            return Err(Error::config("beta.value", format!("{} outside [0,1]", b.value)));
        }
        if !(0.0..=1.0).contains(&b.momentum) {
            return Err(Error::config("beta.momentum", format!("{} outside [0,1]", b.momentum)));
        }
        self.augment.validate()
    }
}

/// `floor(base_steps / n)` under the fair budget, `base_steps` otherwise.
pub fn budget_steps(base_steps: usize, n: usize, fair: bool) -> Result<usize> {
    if n == 0 || base_steps < n {
        return Err(Error::contract(format!("budget of {base_steps} base steps for {n} branches")));
    }
    Ok(if fair { base_steps / n } else { base_steps })
}

/// One metrics line: means over the steps since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Steps completed when the record was taken.
    pub step: usize,
    /// Learning rate of the last step in the window.
    pub lr: f64,
    pub total_loss: f64,
    pub branch_loss: Vec<f64>,
    pub self_loss: Vec<f64>,
    pub mutual_loss: Vec<f64>,
    /// Per-branch accuracy on the evaluation set; empty when not evaluated.
    pub accuracy: Vec<f64>,
    /// β after the window; empty for single-network methods.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub num_branches: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub base_steps: usize,
    pub total_steps: usize,
    /// Augmented samples fed through the network (`steps × batch × views`).
    pub augmented_samples: u64,
    /// Baseline 1: picks per DA in `da_set` order. Baseline 2: `[mixup, cutmix]`.
    pub choice_counts: Vec<u64>,
    pub initial_beta: Vec<f64>,
    pub records: Vec<EpochRecord>,
    pub final_accuracy: Vec<f64>,
}

impl RunMetrics {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Learning rates of the records, in order.
    pub fn lr_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }
}

/// What a step looked like, for observers that ask for it.
#[derive(Debug, Clone, Default)]
pub struct StepDetail {
    /// β values the loss was built with.
    pub beta: Vec<f64>,
    /// Labels of each view, `[B·classes]`.
    pub labels: Vec<Vec<f32>>,
    /// `grid[i][k]`: branch `i` on view `k`, `[B·classes]`.
    pub grid: Vec<Vec<Vec<f32>>>,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait Observer {
    /// Dataset indices of the batch about to be used at `step`.
    fn on_batch(&mut self, _step: usize, _ids: &[usize]) {}
    /// Called after the update of `step`, with the step's loss and learning rate.
    fn on_step(&mut self, _step: usize, _loss: f64, _lr: f64, _model: &BranchedModel, _detail: Option<&StepDetail>) {}
    fn wants_detail(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Result of any training method.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BranchedModel,
    /// Present for the branched method.
    pub beta: Option<BetaState>,
    pub metrics: RunMetrics,
}

/// Runs `config.method` on `train`, evaluating on `eval` if given.
pub fn train(config: &TrainConfig, train: &Dataset, eval: Option<&Dataset>, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    config.validate()?;
    Trainer::new(config, train, eval)?.run(observer)
}

pub fn train_ours(config: &TrainConfig, train_set: &Dataset) -> Result<(BranchedModel, BetaState, RunMetrics)> {
    expect_method(config, |m| m == Method::Ours)?;
    let out = train(config, train_set, None, &mut NoObserver)?;
    Ok((out.model, out.beta.expect("branched run keeps β"), out.metrics))
}

pub fn train_single(config: &TrainConfig, train_set: &Dataset) -> Result<(BranchedModel, RunMetrics)> {
    expect_method(config, |m| matches!(m, Method::SingleDa(_) | Method::NoDa))?;
    let out = train(config, train_set, None, &mut NoObserver)?;
    Ok((out.model, out.metrics))
}

pub fn train_baseline1(config: &TrainConfig, train_set: &Dataset) -> Result<(BranchedModel, RunMetrics)> {
    expect_method(config, |m| m == Method::Baseline1)?;
    let out = train(config, train_set, None, &mut NoObserver)?;
    Ok((out.model, out.metrics))
}

pub fn train_baseline2(config: &TrainConfig, train_set: &Dataset) -> Result<(BranchedModel, RunMetrics)> {
    expect_method(config, |m| m == Method::Baseline2)?;
    let out = train(config, train_set, None, &mut NoObserver)?;
    Ok((out.model, out.metrics))
}

fn expect_method(config: &TrainConfig, ok: impl Fn(Method) -> bool) -> Result<()> {
    if ok(config.method) {
        Ok(())
    } else {
        Err(Error::contract(format!("method {} not accepted by this entry point", config.method)))
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 500;

/// Top-1 accuracy of every branch on clean inputs.
pub fn evaluate_branches(model: &BranchedModel, data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let [c, h, w] = data.image_shape();
    let per = c * h * w;
    let classes = data.num_classes();
    let mut correct = vec![0usize; model.num_branches()];
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let pixels = data.images.data()[start * per..end * per].to_vec();
        let batch = Tensor::new(&[end - start, c, h, w], pixels, false)?;
        for (b, probs) in model.predict(&batch)?.iter().enumerate() {
            if probs.shape()[1] != classes {
                return Err(Error::size(format!(
                    "model predicts {} classes, dataset has {classes}",
                    probs.shape()[1]
                )));
            }
            for (row, i) in probs.data().chunks(classes).zip(start..end) {
                if argmax(row) == data.class_of(i) {
                    correct[b] += 1;
                }
            }
        }
        start = end;
    }
    Ok(correct.iter().map(|&k| k as f64 / data.len() as f64).collect())
}

/// Accuracy of a single-branch network (branch 0 of anything else).
pub fn evaluate(model: &BranchedModel, data: &Dataset) -> Result<f64> {
    Ok(evaluate_branches(model, data)?[0])
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    data: &'a Dataset,
    eval: Option<&'a Dataset>,
    batch: usize,
    steps_per_epoch: usize,
    base_steps: usize,
    total_steps: usize,
    order_epoch: Option<usize>,
    order: Vec<usize>,
}

#[derive(Default)]
struct Window {
    steps: usize,
    total: f64,
    branch: Vec<f64>,
    own: Vec<f64>,
    mutual: Vec<f64>,
    lr: f64,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a TrainConfig, data: &'a Dataset, eval: Option<&'a Dataset>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("training on an empty dataset"));
        }
        if data.image_shape() != config.model.input || data.num_classes() != config.model.num_classes {
            return Err(Error::size(format!(
                "dataset of {:?} images with {} classes for a model expecting {:?} and {}",
                data.image_shape(),
                data.num_classes(),
                config.model.input,
                config.model.num_classes
            )));
        }
        let batch = config.batch_size.min(data.len());
        let steps_per_epoch = data.len() / batch;
        let base_steps = config.epochs * steps_per_epoch;
        let n = config.num_branches();
        let total_steps = if config.method == Method::Ours {
            budget_steps(base_steps, n, config.fair_budget)?
        } else {
            base_steps
        };
        if total_steps < config.epochs {
            return Err(Error::contract(format!(
                "{total_steps} steps cannot fill {} epoch records",
                config.epochs
            )));
        }
        Ok(Trainer {
            config,
            data,
            eval,
            batch,
            steps_per_epoch,
            base_steps,
            total_steps,
            order_epoch: None,
            order: Vec::new(),
        })
    }

    fn batch_ids(&mut self, step: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        if self.order_epoch != Some(epoch) {
            self.order = RngStream::derive(self.config.seeds.shuffle, "shuffle", epoch as u64, 0).permutation(self.data.len());
            self.order_epoch = Some(epoch);
        }
        let pos = (step % self.steps_per_epoch) * self.batch;
        self.order[pos..pos + self.batch].to_vec()
    }

    fn base_image(&self, step: usize, id: usize) -> LabeledImage {
        let img = self.data.sample(id);
        if self.config.augment.preprocess {
            preprocess(&img, &mut RngStream::derive(self.config.seeds.augment, "pre", step as u64, id as u64))
        } else {
            img
        }
    }

    fn view_rng(&self, k: usize, step: usize, id: usize) -> RngStream {
        RngStream::derive(self.config.seeds.augment, &format!("view{k}"), step as u64, id as u64)
    }

    /// Augmented views for one step: `views[k][j]` is view `k` of batch item `j`.
    fn make_views(&self, step: usize, ids: &[usize], choices: &mut [u64]) -> Result<Vec<Vec<LabeledImage>>> {
        let cfg = self.config;
        let aug = cfg.seeds.augment;
        let partners = RngStream::derive(aug, "partner", step as u64, 0).permutation(ids.len());
        let n_views = cfg.num_branches();
        let mut views: Vec<Vec<LabeledImage>> = (0..n_views).map(|_| Vec::with_capacity(ids.len())).collect();
        for (j, &id) in ids.iter().enumerate() {
            let x = self.base_image(step, id);
            let p = self.base_image(step, ids[partners[j]]);
            let key = (step as u64, id as u64);
            match cfg.method {
                Method::Ours => {
                    for (k, &kind) in cfg.da_set.iter().enumerate() {
                        views[k].push(apply_da(kind, &x, &p, &cfg.augment, &mut self.view_rng(k, step, id))?);
                    }
                }
                Method::SingleDa(kind) => {
                    views[0].push(apply_da(kind, &x, &p, &cfg.augment, &mut self.view_rng(0, step, id))?);
                }
                Method::NoDa => views[0].push(x),
                Method::Baseline1 => {
                    let mut choice = RngStream::derive(aug, "choice", key.0, key.1);
                    let (img, c) = baseline1_augment(&x, &p, &cfg.da_set, &cfg.augment, &mut choice, &mut self.view_rng(0, step, id))?;
                    choices[c] += 1;
                    views[0].push(img);
                }
                Method::Baseline2 => {
                    let mut choice = RngStream::derive(aug, "choice", key.0, key.1);
                    let mut partner_rng = RngStream::derive(aug, "partner_view", key.0, key.1);
                    let (img, c) =
                        baseline2_augment(&x, &p, &cfg.augment, &mut choice, &mut self.view_rng(0, step, id), &mut partner_rng)?;
                    choices[c] += 1;
                    views[0].push(img);
                }
            }
        }
        Ok(views)
    }

    fn run(mut self, observer: &mut dyn Observer) -> Result<TrainOutcome> {
        let cfg = self.config;
        let n = cfg.num_branches();
        let classes = self.data.num_classes();
        let [c, h, w] = self.data.image_shape();
        let mut model = build_branched::<f32>(&cfg.model, cfg.split_index, n, cfg.seeds.init)?;
        let lens: Vec<usize> = model.params().map(|p| p.value.len()).collect();
        let mut sgd = SgdState::<f32>::new(cfg.optim, lens.iter().copied(), self.total_steps)?;
        let is_ours = cfg.method == Method::Ours;
        let mut beta = BetaState::new(n, cfg.beta.momentum, cfg.beta.mode(self.total_steps))?;
        let mut choices = match cfg.method {
            Method::Baseline1 => vec![0u64; cfg.da_set.len()],
            Method::Baseline2 => vec![0u64; 2],
            _ => Vec::new(),
        };
        let mut metrics = RunMetrics {
            method: cfg.method.to_string(),
            num_branches: n,
            batch_size: self.batch,
            steps_per_epoch: self.steps_per_epoch,
            base_steps: self.base_steps,
            total_steps: self.total_steps,
            augmented_samples: 0,
            choice_counts: Vec::new(),
            initial_beta: if is_ours { beta.beta.clone() } else { Vec::new() },
            records: Vec::with_capacity(cfg.epochs),
            final_accuracy: Vec::new(),
        };
        let mut window = Window::default();
        let mut epoch = 1;
        for step in 0..self.total_steps {
            let ids = self.batch_ids(step);
            observer.on_batch(step, &ids);
            let views = self.make_views(step, &ids, &mut choices)?;
            metrics.augmented_samples += (ids.len() * n) as u64;

            let mut tape = Tape::<f32>::new();
            let vars = model.vars(&mut tape);
            let mut inputs = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for view in &views {
                let mut px = Vec::with_capacity(view.len() * c * h * w);
                let mut lb = Vec::with_capacity(view.len() * classes);
                for s in view {
                    px.extend_from_slice(s.pixels.data());
                    lb.extend_from_slice(&s.label);
                }
                inputs.push(tape.constant(&[view.len(), c, h, w], px)?);
                labels.push(tape.constant(&[view.len(), classes], lb)?);
            }
            let grid = model.forward_all(&mut tape, &vars, &inputs)?;
            let beta_used = beta.beta.clone();
            let loss = total_loss(&mut tape, &labels, &grid, &beta_used, cfg.ablation)?;
            let loss_value = tape.value(loss.total)[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("total loss {loss_value}"),
                });
            }
            tape.backward(loss.total)?;

            let param_vars: Vec<_> = vars.all().collect();
            let zeros: Vec<Vec<f32>> = param_vars
                .iter()
                .zip(&lens)
                .map(|(&v, &len)| if tape.grad(v).is_some() { Vec::new() } else { vec![0.0; len] })
                .collect();
            let grads: Vec<&[f32]> = param_vars
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| tape.grad(v).unwrap_or(z.as_slice()))
                .collect();
            let lr = sgd_step(model.params_mut().map(|p| &mut p.value), &grads, &mut sgd)?;

            if is_ours {
                for k in 0..n {
                    let fit = batch_fit(tape.value(labels[k]), tape.value(grid[k][k]), classes)?;
                    beta.update(k, fit)?;
                }
                beta.advance_step();
            }

            let detail = observer.wants_detail().then(|| StepDetail {
                beta: beta_used.clone(),
                labels: labels.iter().map(|&l| tape.value(l).to_vec()).collect(),
                grid: grid
                    .iter()
                    .map(|row| row.iter().map(|&p| tape.value(p).to_vec()).collect())
                    .collect(),
            });
            observer.on_step(step, loss_value, lr, &model, detail.as_ref());

            window.steps += 1;
            window.total += loss_value;
            window.lr = lr;
            if window.branch.is_empty() {
                window.branch = vec![0.0; n];
                window.own = vec![0.0; n];
                window.mutual = vec![0.0; n];
            }
            for i in 0..n {
                window.branch[i] += tape.value(loss.per_branch[i])[0] as f64;
                window.own[i] += tape.value(loss.self_terms[i])[0] as f64;
                window.mutual[i] += loss.mutual_terms[i].map_or(0.0, |m| tape.value(m)[0] as f64);
            }

            let done = step + 1;
            if done == (epoch * self.total_steps).div_ceil(cfg.epochs) {
                let evaluate_now = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
                let accuracy = match self.eval {
                    Some(set) if evaluate_now => evaluate_branches(&model, set)?,
                    _ => Vec::new(),
                };
                let k = window.steps as f64;
                metrics.records.push(EpochRecord {
                    epoch,
                    step: done,
                    lr: window.lr,
                    total_loss: window.total / k,
                    branch_loss: window.branch.iter().map(|v| v / k).collect(),
                    self_loss: window.own.iter().map(|v| v / k).collect(),
                    mutual_loss: window.mutual.iter().map(|v| v / k).collect(),
                    accuracy,
                    beta: if is_ours { beta.beta.clone() } else { Vec::new() },
                });
                log::info!(
                    "{} epoch {epoch}/{} step {done}/{} loss {:.4}",
                    cfg.method,
                    cfg.epochs,
                    self.total_steps,
                    window.total / k
                );
                window = Window::default();
                epoch += 1;
            }
        }
        metrics.final_accuracy = metrics.records.last().map(|r| r.accuracy.clone()).unwrap_or_default();
        metrics.choice_counts = choices;
        Ok(TrainOutcome {
            model,
            beta: is_ours.then_some(beta),
            metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyphs;
    use crate::data::DatasetMeta;

    fn toy(n: usize) -> Dataset {
        // Two classes: bright left half vs bright right half.
        let mut px = Vec::new();
        let mut labels = Vec::new();
        let mut rng = RngStream::derive(5, "toy", 0, 0);
        for i in 0..n {
            let class = i % 2;
            for _y in 0..4 {
                for x in 0..4 {
                    let on = (x < 2) == (class == 0);
                    px.push(if on { 0.8 } else { 0.1 } + 0.1 * rng.uniform() as f32);
                }
            }
            labels.extend_from_slice(if class == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
        }
        Dataset::new(
            Tensor::new(&[n, 1, 4, 4], px, false).unwrap(),
            labels,
            DatasetMeta {
                name: "toy".into(),
                num_classes: 2,
                source: "test".into(),
            },
        )
        .unwrap()
    }

    fn mlp_config(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, BlockSpec::tiny_mlp([1, 4, 4], 2, 8));
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.optim.base_lr = 0.05;
        cfg.eval_every = 1;
        cfg
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_steps(3000, 3, true).unwrap(), 1000);
        assert_eq!(budget_steps(3000, 2, true).unwrap(), 1500);
        assert_eq!(budget_steps(3000, 3, false).unwrap(), 3000);
        assert!(budget_steps(2, 3, true).is_err());
    }

    #[test]
    fn method_round_trip() {
        for s in ["ours", "single:mixup", "single:randaugment", "baseline1", "baseline2", "noda"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("single:blur".parse::<Method>().is_err());
        assert!("best".parse::<Method>().is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn one_record_per_epoch_and_cosine_lr() {
        let data = toy(64);
        let mut cfg = mlp_config(Method::Ours);
        cfg.epochs = 4;
        let out = train(&cfg, &data, Some(&data), &mut NoObserver).unwrap();
        let m = &out.metrics;
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.base_steps, 4 * 8);
        assert_eq!(m.total_steps, 32 / 3);
        assert_eq!(m.records.last().unwrap().step, m.total_steps);
        for r in &m.records {
            let expect = crate::optim::cosine_lr(r.step - 1, m.total_steps, cfg.optim.base_lr).unwrap();
            assert_eq!(r.lr, expect);
            assert_eq!(r.accuracy.len(), 3);
            assert!(r.beta.iter().all(|b| (0.0..=1.0).contains(b)));
        }
        assert!(m.lr_trace().windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(m.augmented_samples, (m.total_steps * 8 * 3) as u64);
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let data = toy(32);
        for method in [Method::Ours, Method::NoDa, Method::Baseline1, Method::Baseline2] {
            let mut cfg = mlp_config(method);
            cfg.optim.base_lr = 0.0;
            let out = train(&cfg, &data, None, &mut NoObserver).unwrap();
            let fresh = build_branched::<f32>(&cfg.model, cfg.split_index, cfg.num_branches(), cfg.seeds.init).unwrap();
            assert_eq!(out.model, fresh, "{method}");
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let data = toy(32);
        for method in [Method::Ours, Method::SingleDa(DaKind::CutMix), Method::Baseline2] {
            let cfg = mlp_config(method);
            let a = train(&cfg, &data, Some(&data), &mut NoObserver).unwrap();
            let b = train(&cfg, &data, Some(&data), &mut NoObserver).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy(32);
        let mut cfg = mlp_config(Method::NoDa);
        cfg.epochs = 50;
        cfg.optim.base_lr = 0.1;
        let (model, _) = train_single(&cfg, &data).unwrap();
        assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
    }

    #[test]
    fn evaluation_recount() {
        let data = gen_glyphs(4, 40, 8, 0.1, 3).unwrap();
        let model = build_branched::<f32>(&BlockSpec::tiny_cnn([1, 8, 8], 4), 0, 2, 9).unwrap();
        let acc = evaluate_branches(&model, &data).unwrap();
        let probs = model.predict(&data.images).unwrap();
        for (b, p) in probs.iter().enumerate() {
            let hits = (0..data.len())
                .filter(|&i| argmax(&p.data()[i * 4..(i + 1) * 4]) == data.class_of(i))
                .count();
            assert_eq!(acc[b], hits as f64 / data.len() as f64);
        }
        let empty = data.subset(&[], "empty");
        assert!(empty.is_err() || evaluate(&model, &empty.unwrap()).is_err());
    }

    #[test]
    fn wrong_entry_point_is_rejected() {
        let data = toy(16);
        assert!(train_single(&mlp_config(Method::Ours), &data).is_err());
        assert!(train_ours(&mlp_config(Method::NoDa), &data).is_err());
    }
}
