//! Branch selection: hold out a validation split, train several times,
//! pick the branch with the best mean validation accuracy, retrain on
//! everything and export that branch.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::BranchedModel;
use crate::rng::{child_seed, RngStream};
use crate::trainer::{evaluate, train, Method, Observer, RunMetrics, Seeds, StepDetail, TrainConfig};

/// Seeded split of `0..n`: the first `floor(fraction·n)` entries of a
/// permutation train, the rest validate.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let perm = RngStream::derive(seed, "split", 0, 0).permutation(n);
    let cut = (fraction * n as f64).floor() as usize;
    let (train, val) = perm.split_at(cut);
    non_empty(train.len(), val.len(), n)?;
    Ok((train.to_vec(), val.to_vec()))
}

/// Like [`split_indices`] but applied to each class separately.
pub fn split_indices_stratified(classes: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let num_classes = classes.iter().max().map_or(0, |&c| c + 1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..num_classes {
        let members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == class).collect();
        let perm = RngStream::derive(seed, "split", 0, class as u64 + 1).permutation(members.len());
        let cut = (fraction * members.len() as f64).floor() as usize;
        train.extend(perm[..cut].iter().map(|&j| members[j]));
        val.extend(perm[cut..].iter().map(|&j| members[j]));
    }
    non_empty(train.len(), val.len(), classes.len())?;
    Ok((train, val))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("split fraction {fraction} outside (0, 1)")))
    }
}

fn non_empty(train: usize, val: usize, n: usize) -> Result<()> {
    if train == 0 || val == 0 {
        return Err(Error::contract(format!("split of {n} samples leaves an empty side ({train}/{val})")));
    }
    Ok(())
}

/// `(train, validation)` subsets of `dataset`.
pub fn split_train_val(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&train, "train")?, dataset.subset(&val, "val")?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// `val_accuracy[r][i]`: branch `i` after selection run `r`.
    pub val_accuracy: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub selected: usize,
    /// More than one branch shares the best mean.
    pub tie: bool,
    /// Test accuracy of the exported network, when a test set was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Column means of an `R × N` matrix and their argmax, ties to the lowest index.
pub fn select_branch(val_acc: &[Vec<f64>]) -> Result<SelectionReport> {
    let n = val_acc.first().map_or(0, Vec::len);
    if n == 0 || val_acc.iter().any(|row| row.len() != n) {
        return Err(Error::contract("validation accuracies must form a non-empty R×N matrix"));
    }
    let runs = val_acc.len() as f64;
    let means: Vec<f64> = (0..n)
        .map(|i| val_acc.iter().map(|row| row[i]).sum::<f64>() / runs)
        .collect();
    let selected = crate::trainer::argmax(&means);
    let tie = means.iter().filter(|&&m| m == means[selected]).count() > 1;
    Ok(SelectionReport {
        val_accuracy: val_acc.to_vec(),
        means,
        selected,
        tie,
        test_accuracy: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub runs: usize,
    pub split_fraction: f64,
    pub stratified: bool,
    pub split_seed: u64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            runs: 3,
            split_fraction: 0.8,
            stratified: false,
            split_seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    /// Shared blocks plus the selected branch.
    pub network: BranchedModel,
    pub report: SelectionReport,
    /// The full-data run the network was exported from.
    pub final_model: BranchedModel,
    pub final_metrics: RunMetrics,
    pub run_metrics: Vec<RunMetrics>,
}

/// Which part of the protocol a training run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Selection(usize),
    Final,
}

/// Observer for the whole protocol. Batch indices refer to the full dataset.
pub trait ProtocolObserver {
    fn on_batch(&mut self, _phase: Phase, _step: usize, _ids: &[usize]) {}
}

pub struct NoProtocolObserver;

impl ProtocolObserver for NoProtocolObserver {}

struct Remap<'a> {
    phase: Phase,
    ids: &'a [usize],
    inner: &'a mut dyn ProtocolObserver,
}

impl Observer for Remap<'_> {
    fn on_batch(&mut self, step: usize, ids: &[usize]) {
        let global: Vec<usize> = ids.iter().map(|&i| self.ids[i]).collect();
        self.inner.on_batch(self.phase, step, &global);
    }

    fn on_step(&mut self, _: usize, _: f64, _: f64, _: &BranchedModel, _: Option<&StepDetail>) {}
}

/// Seeds of selection run `r`, derived from the configured ones.
pub fn run_seeds(seeds: Seeds, r: usize) -> Seeds {
    Seeds {
        init: child_seed(seeds.init, "selection-run", r as u64),
        augment: child_seed(seeds.augment, "selection-run", r as u64),
        shuffle: child_seed(seeds.shuffle, "selection-run", r as u64),
    }
}

/// The full protocol. `test`, if given, is only used to score the exported
/// network at the end.
pub fn selection_protocol(
    config: &TrainConfig,
    dataset: &Dataset,
    params: ProtocolParams,
    test: Option<&Dataset>,
    observer: &mut dyn ProtocolObserver,
) -> Result<ProtocolOutcome> {
    if config.method != Method::Ours {
        return Err(Error::contract(format!("selection needs the branched method, got {}", config.method)));
    }
    if params.runs == 0 {
        return Err(Error::contract("selection needs at least one run"));
    }
    let (train_ids, val_ids) = if params.stratified {
        let classes: Vec<usize> = (0..dataset.len()).map(|i| dataset.class_of(i)).collect();
        split_indices_stratified(&classes, params.split_fraction, params.split_seed)?
    } else {
        split_indices(dataset.len(), params.split_fraction, params.split_seed)?
    };
    let train_set = dataset.subset(&train_ids, "selection-train")?;
    let val_set = dataset.subset(&val_ids, "selection-val")?;

    let mut quiet = config.clone();
    quiet.eval_every = 0;
    let mut val_acc = Vec::with_capacity(params.runs);
    let mut run_metrics = Vec::with_capacity(params.runs);
    for r in 0..params.runs {
        let mut cfg = quiet.clone();
        cfg.seeds = run_seeds(config.seeds, r);
        let mut remap = Remap {
            phase: Phase::Selection(r),
            ids: &train_ids,
            inner: observer,
        };
        let out = train(&cfg, &train_set, Some(&val_set), &mut remap)?;
        log::info!("selection run {r}: validation accuracy {:?}", out.metrics.final_accuracy);
        val_acc.push(out.metrics.final_accuracy.clone());
        run_metrics.push(out.metrics);
    }
    let mut report = select_branch(&val_acc)?;
    log::info!("selected branch {} (means {:?})", report.selected, report.means);

    let all_ids: Vec<usize> = (0..dataset.len()).collect();
    let mut remap = Remap {
        phase: Phase::Final,
        ids: &all_ids,
        inner: observer,
    };
    let final_run = train(config, dataset, test, &mut remap)?;
    let network = final_run.model.export_branch(report.selected)?;
    if let Some(test) = test {
        report.test_accuracy = Some(evaluate(&network, test)?);
    }
    Ok(ProtocolOutcome {
        network,
        report,
        final_model: final_run.model,
        final_metrics: final_run.metrics,
        run_metrics,
    })
}
