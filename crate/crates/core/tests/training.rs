use std::collections::BTreeSet;

use proptest::prelude::*;

use multida::augment::DaKind;
use multida::data::{gen_glyphs, Dataset};
use multida::losses::{total_loss, Ablation};
use multida::model::{BlockSpec, BranchedModel};
use multida::optim::cosine_lr;
use multida::rng::RngStream;
use multida::selection::{selection_protocol, split_indices, Phase, ProtocolObserver, ProtocolParams};
use multida::tensor::Tape;
use multida::trainer::{budget_steps, train, BetaSchedule, Method, NoObserver, Observer, StepDetail, TrainConfig};

fn data(n: usize, seed: u64) -> Dataset {
    gen_glyphs(4, n, 8, 0.2, seed).unwrap()
}

fn mlp(method: Method, data: &Dataset) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, BlockSpec::tiny_mlp(data.image_shape(), data.num_classes(), 12));
    cfg.eval_every = 0;
    cfg.batch_size = 16;
    cfg.epochs = 4;
    cfg.optim.base_lr = 0.05;
    cfg
}

fn params(model: &BranchedModel) -> Vec<u32> {
    model.params().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[derive(Default)]
struct Record {
    params: Vec<Vec<u32>>,
    losses: Vec<f64>,
    lrs: Vec<f64>,
    details: Vec<StepDetail>,
}

impl Observer for Record {
    fn on_step(&mut self, _: usize, loss: f64, lr: f64, model: &BranchedModel, detail: Option<&StepDetail>) {
        self.params.push(params(model));
        self.losses.push(loss);
        self.lrs.push(lr);
        if let Some(d) = detail {
            self.details.push(d.clone());
        }
    }

    fn wants_detail(&self) -> bool {
        true
    }
}

fn run(cfg: &TrainConfig, data: &Dataset) -> Record {
    let mut rec = Record::default();
    train(cfg, data, None, &mut rec).unwrap();
    rec
}

/// Independent soft cross-entropy in f64.
fn ce(t: &[f32], p: &[f32], classes: usize) -> f64 {
    let rows = t.len() / classes;
    let s: f64 = t
        .iter()
        .zip(p)
        .map(|(&t, &p)| t as f64 * (p as f64).max(1e-12).ln())
        .sum();
    -s / rows as f64
}

fn oracle(d: &StepDetail, classes: usize) -> f64 {
    let n = d.grid.len();
    let mut total = 0.0;
    for i in 0..n {
        total += ce(&d.labels[i], &d.grid[i][i], classes);
        for k in (0..n).filter(|&k| k != i) {
            total += (1.0 - d.beta[k]) * ce(&d.labels[k], &d.grid[i][k], classes);
            total += d.beta[k] * ce(&d.grid[k][k], &d.grid[i][k], classes);
        }
    }
    total
}

#[test]
fn logged_loss_matches_independent_reevaluation() {
    let d = data(96, 1);
    let mut cfg = mlp(Method::Ours, &d);
    cfg.epochs = 2;
    let rec = run(&cfg, &d);
    assert_eq!(rec.details.len(), rec.losses.len());
    for (step, (detail, &loss)) in rec.details.iter().zip(&rec.losses).enumerate() {
        let want = oracle(detail, d.num_classes());
        assert!(loss.is_finite());
        assert!((loss - want).abs() <= 1e-6 * want.abs().max(1.0), "step {step}: {loss} vs {want}");
    }
}

#[test]
fn learning_rate_follows_cosine_and_never_rises() {
    let d = data(64, 2);
    let cfg = mlp(Method::Ours, &d);
    let rec = run(&cfg, &d);
    let total = rec.lrs.len();
    for (s, &lr) in rec.lrs.iter().enumerate() {
        assert_eq!(lr, cosine_lr(s, total, cfg.optim.base_lr).unwrap());
    }
    assert!(rec.lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_learning_rate_keeps_every_method_still() {
    let d = data(64, 3);
    for method in [
        Method::Ours,
        Method::SingleDa(DaKind::CutMix),
        Method::Baseline1,
        Method::Baseline2,
        Method::NoDa,
    ] {
        let mut cfg = mlp(method, &d);
        cfg.optim.base_lr = 0.0;
        cfg.epochs = 3;
        let rec = run(&cfg, &d);
        assert!(rec.params.windows(2).all(|w| w[0] == w[1]), "{method} moved at lr 0");
        let init = multida::model::build_branched::<f32>(&cfg.model, cfg.split_index, cfg.num_branches(), cfg.seeds.init).unwrap();
        assert_eq!(rec.params[0], params(&init), "{method}");
    }
}

#[test]
fn ablations_match_their_fixed_beta_counterparts() {
    let d = data(96, 4);
    let pairs = [
        (
            Ablation {
                drop_kd: true,
                ..Ablation::default()
            },
            0.0,
        ),
        (
            Ablation {
                drop_direct: true,
                ..Ablation::default()
            },
            1.0,
        ),
    ];
    for (ablation, beta) in pairs {
        let mut a = mlp(Method::Ours, &d);
        a.ablation = ablation;
        let mut b = mlp(Method::Ours, &d);
        b.beta.schedule = BetaSchedule::Fixed;
        b.beta.value = beta;
        let (ra, rb) = (run(&a, &d), run(&b, &d));
        assert_eq!(ra.params, rb.params, "{ablation:?} vs fixed β={beta}");
        assert_eq!(ra.losses, rb.losses);
    }
}

#[test]
fn drop_mutual_leaves_only_self_losses() {
    let d = data(64, 5);
    let mut cfg = mlp(Method::Ours, &d);
    cfg.ablation.drop_mutual = true;
    cfg.epochs = 2;
    let rec = run(&cfg, &d);
    let classes = d.num_classes();
    for (detail, &loss) in rec.details.iter().zip(&rec.losses) {
        let want: f64 = (0..detail.grid.len()).map(|i| ce(&detail.labels[i], &detail.grid[i][i], classes)).sum();
        assert!((loss - want).abs() <= 1e-6 * want.max(1.0));
    }
}

#[test]
fn baseline1_picks_each_augmentation_equally_often() {
    // 100 samples, batch 10, 400 epochs: 40 000 augmented samples.
    let d = data(100, 6);
    let mut cfg = mlp(Method::Baseline1, &d);
    cfg.batch_size = 10;
    cfg.epochs = 400;
    cfg.optim.base_lr = 0.0;
    let out = train(&cfg, &d, None, &mut NoObserver).unwrap();
    let counts = &out.metrics.choice_counts;
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 40_000);
    assert_eq!(out.metrics.augmented_samples, 40_000);
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 2 degrees of freedom.
    assert!(chi2 < 13.82, "counts {counts:?}, χ² = {chi2}");
}

#[test]
fn baseline2_splits_between_mixup_and_cutmix() {
    let d = data(100, 7);
    let mut cfg = mlp(Method::Baseline2, &d);
    cfg.batch_size = 10;
    cfg.epochs = 300;
    cfg.optim.base_lr = 0.0;
    let out = train(&cfg, &d, None, &mut NoObserver).unwrap();
    let c = &out.metrics.choice_counts;
    assert_eq!(c.len(), 2);
    let total = (c[0] + c[1]) as f64;
    let z = (c[0] as f64 - total / 2.0) / (total / 4.0).sqrt();
    assert!(z.abs() < 3.3, "{c:?}");
}

#[test]
fn fair_budget_for_three_thousand_base_steps() {
    for n in 1..=6 {
        assert_eq!(budget_steps(3000, n, true).unwrap(), 3000 / n);
        assert_eq!(budget_steps(3000, n, false).unwrap(), 3000);
    }
    assert_eq!(budget_steps(3000, 3, true).unwrap(), 1000);
    assert!(budget_steps(3000, 0, true).is_err());
    assert!(budget_steps(2, 3, true).is_err());
}

#[test]
fn unfair_budget_runs_every_base_step() {
    let d = data(64, 8);
    let mut cfg = mlp(Method::Ours, &d);
    cfg.fair_budget = false;
    let out = train(&cfg, &d, None, &mut NoObserver).unwrap();
    assert_eq!(out.metrics.total_steps, out.metrics.base_steps);
    assert_eq!(out.metrics.records.len(), cfg.epochs);
}

#[derive(Default)]
struct Ids {
    selection: Vec<BTreeSet<usize>>,
    final_ids: BTreeSet<usize>,
}

impl ProtocolObserver for Ids {
    fn on_batch(&mut self, phase: Phase, _: usize, ids: &[usize]) {
        match phase {
            Phase::Selection(r) => {
                if self.selection.len() <= r {
                    self.selection.resize(r + 1, BTreeSet::new());
                }
                self.selection[r].extend(ids);
            }
            Phase::Final => self.final_ids.extend(ids),
        }
    }
}

#[test]
fn selection_runs_never_touch_validation_samples() {
    let d = data(120, 9);
    let cfg = mlp(Method::Ours, &d);
    let params = ProtocolParams {
        runs: 2,
        split_fraction: 0.75,
        stratified: false,
        split_seed: 5,
    };
    let mut ids = Ids::default();
    let out = selection_protocol(&cfg, &d, params, None, &mut ids).unwrap();
    let (train_ids, val_ids) = split_indices(d.len(), 0.75, 5).unwrap();
    let train_ids: BTreeSet<usize> = train_ids.into_iter().collect();
    let val_ids: BTreeSet<usize> = val_ids.into_iter().collect();
    assert_eq!(ids.selection.len(), 2);
    for seen in &ids.selection {
        assert!(seen.is_subset(&train_ids));
        assert!(seen.is_disjoint(&val_ids));
        assert!(!seen.is_empty());
    }
    // The final run sees validation samples too.
    assert!(!ids.final_ids.is_disjoint(&val_ids));
    assert_eq!(out.report.val_accuracy.len(), 2);
    assert_eq!(out.run_metrics.len(), 2);
    assert!(out.report.selected < 3);
}

#[test]
fn stratified_selection_scores_the_exported_network() {
    let d = data(120, 10);
    let cfg = mlp(Method::Ours, &d);
    let params = ProtocolParams {
        runs: 1,
        split_fraction: 0.8,
        stratified: true,
        split_seed: 3,
    };
    let out = selection_protocol(&cfg, &d, params, Some(&d), &mut Ids::default()).unwrap();
    assert!(out.report.test_accuracy.is_some());
}

fn simplex(rng: &mut RngStream, rows: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let e: Vec<f64> = (0..classes).map(|_| rng.normal().exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_loss_matches_oracle_for_any_grid(seed in any::<u64>(), n in 1usize..5, rows in 1usize..5, classes in 2usize..6) {
        let mut rng = RngStream::derive(seed, "prop/grid", 0, 0);
        let labels: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng, rows, classes)).collect();
        let grid: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..n).map(|_| simplex(&mut rng, rows, classes)).collect()).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();

        let mut tape = Tape::<f64>::new();
        let lv: Vec<_> = labels.iter().map(|l| tape.constant(&[rows, classes], l.clone()).unwrap()).collect();
        let gv: Vec<Vec<_>> = grid.iter().map(|r| r.iter().map(|p| tape.constant(&[rows, classes], p.clone()).unwrap()).collect()).collect();
        let loss = total_loss(&mut tape, &lv, &gv, &beta, Ablation::default()).unwrap();

        let ce = |t: &[f64], p: &[f64]| -> f64 {
            -t.iter().zip(p).map(|(t, p)| t * p.max(1e-12).ln()).sum::<f64>() / rows as f64
        };
        let mut want = 0.0;
        for i in 0..n {
            want += ce(&labels[i], &grid[i][i]);
            for k in (0..n).filter(|&k| k != i) {
                want += (1.0 - beta[k]) * ce(&labels[k], &grid[i][k]) + beta[k] * ce(&grid[k][k], &grid[i][k]);
            }
        }
        prop_assert!((tape.value(loss.total)[0] - want).abs() <= 1e-9 * want.max(1.0));
    }
}
