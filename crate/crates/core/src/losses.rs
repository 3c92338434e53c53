//! Self, mutual and total losses, the fit measure and the β scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// `−Σ_c t_c · log(max(p_c, 1e-12))`, averaged over the batch (leading axis).
///
/// Gradients reach `target` as well if it is grad-enabled; pass a constant or
/// a detached value to supervise `pred` only.
pub fn cross_entropy_soft<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::size(format!(
            "cross-entropy target {:?} vs prediction {:?}",
            tape.shape(target),
            tape.shape(pred)
        )));
    }
    let rows = if tape.shape(pred).len() > 1 { tape.shape(pred)[0] } else { 1 };
    let log_p = tape.log_clamped(pred);
    let prod = tape.mul(target, log_p)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, T::from_f64(-1.0 / rows as f64)))
}

/// Cross-entropy of branch `i` on its own view.
pub fn self_loss<T: Real>(tape: &mut Tape<T>, label: Var, own_pred: Var) -> Result<Var> {
    cross_entropy_soft(tape, label, own_pred)
}

/// Which parts of the mutual loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Remove the ground-truth term; the distillation term gets weight 1.
    pub drop_direct: bool,
    /// Remove the distillation term; the ground-truth term gets weight 1.
    pub drop_kd: bool,
    /// Keep only the self loss.
    pub drop_mutual: bool,
}

impl Ablation {
    /// `(direct, kd)` weights for a branch whose teacher has `beta`.
    pub fn weights(&self, beta: f64) -> (f64, f64) {
        match (self.drop_direct, self.drop_kd) {
            (true, true) => (0.0, 0.0),
            (true, false) => (0.0, 1.0),
            (false, true) => (1.0, 0.0),
            (false, false) => (1.0 - beta, beta),
        }
    }
}

/// Mutual loss of branch `i`:
/// `Σ_{k≠i} (1−β_k)·CE(y_k, ŷ_i^k) + β_k·CE(ŷ_k^k, ŷ_i^k)`.
///
/// The teacher prediction `ŷ_k^k` is detached. Terms with zero weight are not
/// built, so an endpoint β leaves no trace of the dropped term.
pub fn mutual_loss<T: Real>(
    tape: &mut Tape<T>,
    i: usize,
    labels: &[Var],
    grid: &[Vec<Var>],
    beta: &[f64],
    ablation: Ablation,
) -> Result<Option<Var>> {
    let n = grid.len();
    if i >= n || labels.len() != n || beta.len() != n || grid.iter().any(|row| row.len() != n) {
        return Err(Error::contract(format!(
            "mutual loss of branch {i} needs an N×N grid with N labels and N betas (N = {n})"
        )));
    }
    let mut acc: Option<Var> = None;
    for k in (0..n).filter(|&k| k != i) {
        let (w_direct, w_kd) = ablation.weights(beta[k]);
        if w_direct != 0.0 {
            let ce = cross_entropy_soft(tape, labels[k], grid[i][k])?;
            acc = Some(add_weighted(tape, acc, ce, w_direct)?);
        }
        if w_kd != 0.0 {
            let teacher = tape.detach(grid[k][k]);
            let ce = cross_entropy_soft(tape, teacher, grid[i][k])?;
            acc = Some(add_weighted(tape, acc, ce, w_kd)?);
        }
    }
    Ok(acc)
}

fn add_weighted<T: Real>(tape: &mut Tape<T>, acc: Option<Var>, term: Var, weight: f64) -> Result<Var> {
    let term = if weight == 1.0 { term } else { tape.scale(term, T::from_f64(weight)) };
    match acc {
        Some(a) => tape.add(a, term),
        None => Ok(term),
    }
}

/// The overall loss and its per-branch decomposition.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    pub per_branch: Vec<Var>,
    pub self_terms: Vec<Var>,
    /// `None` where the mutual loss is empty (N = 1 or dropped).
    pub mutual_terms: Vec<Option<Var>>,
}

/// `ℓ = Σ_i ℓ_i` with `ℓ_i = ℓ_i^sel + ℓ_i^mut`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    labels: &[Var],
    grid: &[Vec<Var>],
    beta: &[f64],
    ablation: Ablation,
) -> Result<TotalLoss> {
    let n = grid.len();
    if n == 0 || labels.len() != n || grid.iter().any(|row| row.len() != n) {
        return Err(Error::contract(format!(
            "total loss needs an N×N grid and N labels, got {} rows and {} labels",
            n,
            labels.len()
        )));
    }
    let mut out = TotalLoss {
        total: labels[0],
        per_branch: Vec::with_capacity(n),
        self_terms: Vec::with_capacity(n),
        mutual_terms: Vec::with_capacity(n),
    };
    let mut total: Option<Var> = None;
    for i in 0..n {
        let own = self_loss(tape, labels[i], grid[i][i])?;
        let mutual = if ablation.drop_mutual {
            None
        } else {
            mutual_loss(tape, i, labels, grid, beta, ablation)?
        };
        let branch = match mutual {
            Some(m) => tape.add(own, m)?,
            None => own,
        };
        total = Some(match total {
            Some(t) => tape.add(t, branch)?,
            None => branch,
        });
        out.self_terms.push(own);
        out.mutual_terms.push(mutual);
        out.per_branch.push(branch);
    }
    out.total = total.expect("n ≥ 1");
    Ok(out)
}

/// `1 − ‖y − ŷ‖₁ / 2` for one pair of probability vectors.
pub fn fit_measure(label: &[f64], pred: &[f64]) -> Result<f64> {
    if label.len() != pred.len() {
        return Err(Error::size(format!(
            "fit of label length {} against prediction length {}",
            label.len(),
            pred.len()
        )));
    }
    let l1: f64 = label.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum();
    Ok(1.0 - l1 / 2.0)
}

/// Mean fit over the rows of `[B, C]` label and prediction matrices.
pub fn batch_fit<T: Real>(labels: &[T], preds: &[T], classes: usize) -> Result<f64> {
    if labels.len() != preds.len() || classes == 0 || labels.len() % classes != 0 || labels.is_empty() {
        return Err(Error::size(format!(
            "batch fit of {} labels and {} predictions with {classes} classes",
            labels.len(),
            preds.len()
        )));
    }
    let rows = labels.len() / classes;
    let mut total = 0.0;
    for (y, p) in labels.chunks(classes).zip(preds.chunks(classes)) {
        let y: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
        let p: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
        total += fit_measure(&y, &p)?;
    }
    Ok(total / rows as f64)
}

/// How β evolves during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// Momentum average of each teacher's batch fit.
    Adaptive,
    Fixed(f64),
    /// `β = step / total_steps` for every branch.
    Linear { total_steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaState {
    pub beta: Vec<f64>,
    pub momentum: f64,
    pub mode: BetaMode,
    pub step: usize,
}

impl BetaState {
    /// Adaptive and linear modes start at β = 0.
    pub fn new(n: usize, momentum: f64, mode: BetaMode) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("β state needs at least one branch"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::contract(format!("β momentum {momentum} outside [0,1]")));
        }
        let start = match mode {
            BetaMode::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                return Err(Error::contract(format!("fixed β {v} outside [0,1]")));
            }
            BetaMode::Linear { total_steps: 0 } => {
                return Err(Error::contract("linear β needs a positive step count"));
            }
            BetaMode::Fixed(v) => v,
            _ => 0.0,
        };
        Ok(BetaState {
            beta: vec![start; n],
            momentum,
            mode,
            step: 0,
        })
    }

    /// `β_k ← m·β_k + (1−m)·fit` in adaptive mode; other modes ignore the fit.
    pub fn update(&mut self, k: usize, batch_fit: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&batch_fit) {
            return Err(Error::contract(format!("batch fit {batch_fit} outside [0,1]")));
        }
        if k >= self.beta.len() {
            return Err(Error::contract(format!("β index {k} of {}", self.beta.len())));
        }
        if self.mode == BetaMode::Adaptive {
            let m = self.momentum;
            self.beta[k] = (m * self.beta[k] + (1.0 - m) * batch_fit).clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Marks one optimiser step as done.
    pub fn advance_step(&mut self) {
        self.step += 1;
        if let BetaMode::Linear { total_steps } = self.mode {
            let v = (self.step as f64 / total_steps as f64).min(1.0);
            self.beta.fill(v);
        }
    }
}
