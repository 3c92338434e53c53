//! Central finite differences and the built-in gradient check suite.

use std::fmt::Write as _;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Central-difference estimate of `d f / d param`, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    param: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut probe = param.clone();
    let mut grad = Vec::with_capacity(param.len());
    let two_eps = eps + eps;
    for i in 0..param.len() {
        let orig = param.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_eps);
    }
    Tensor::new(param.shape(), grad, false)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

type Builder<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

struct Case<T: Real> {
    name: String,
    inputs: Vec<Tensor<T>>,
    build: Builder<T>,
    /// Score all grad-enabled inputs as one concatenated vector.
    whole_network: bool,
}

impl<T: Real> Case<T> {
    fn eval(&self, inputs: &[Tensor<T>]) -> Result<T> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let root = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(root)[0])
    }

    fn check(&self, eps: T, tolerance: f64) -> Result<Vec<GradCheckRow>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t)).collect();
        let root = (self.build)(&mut tape, &vars)?;
        tape.backward(root)?;
        let mut rows = Vec::new();
        let (mut all_analytic, mut all_numeric) = (Vec::new(), Vec::new());
        for (slot, var) in vars.iter().enumerate() {
            if !self.inputs[slot].requires_grad() {
                continue;
            }
            let analytic = tape.grad(*var).expect("grad-enabled leaf").to_vec();
            let mut failure = None;
            let numeric = finite_diff_grad(
                |probe| {
                    let mut inputs = self.inputs.clone();
                    inputs[slot] = probe.clone();
                    self.eval(&inputs).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        T::nan()
                    })
                },
                &self.inputs[slot],
                eps,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            if self.whole_network {
                all_analytic.extend(analytic);
                all_numeric.extend_from_slice(numeric.data());
                continue;
            }
            let error = relative_error(&analytic, numeric.data());
            rows.push(GradCheckRow {
                case: self.name.clone(),
                input: slot.to_string(),
                error,
                tolerance,
                passed: error <= tolerance,
            });
        }
        if self.whole_network {
            let error = relative_error(&all_analytic, &all_numeric);
            rows.push(GradCheckRow {
                case: self.name.clone(),
                input: "params".into(),
                error,
                tolerance,
                passed: error <= tolerance,
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub case: String,
    /// Input slot, or `params` for a whole-network row.
    pub input: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckSuite {
    pub dtype: &'static str,
    pub eps: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckSuite {
    /// 32-bit run: `eps = 1e-3`, relative tolerance `1e-3`.
    pub fn run_f32(seed: u64) -> Result<Self> {
        Self::run::<f32>(1e-3, 1e-3, seed, "f32")
    }

    /// 64-bit run: `eps = 1e-5`, relative tolerance `1e-6`.
    pub fn run_f64(seed: u64) -> Result<Self> {
        Self::run::<f64>(1e-5, 1e-6, seed, "f64")
    }

    fn run<T: Real>(eps: f64, tolerance: f64, seed: u64, dtype: &'static str) -> Result<Self> {
        let mut rows = Vec::new();
        for case in builtin_cases::<T>(seed)? {
            rows.extend(case.check(T::from_f64(eps), tolerance)?);
        }
        Ok(GradCheckSuite { dtype, eps, rows })
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "gradient check ({}, eps={:e})", self.dtype, self.eps);
        let _ = writeln!(out, "{:<28} {:>6} {:>12} {:>10}  result", "case", "input", "rel.error", "tol");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>12.3e} {:>10.0e}  {}",
                r.case,
                r.input,
                r.error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        let failed = self.rows.iter().filter(|r| !r.passed).count();
        let _ = writeln!(out, "{} checks, {} failed", self.rows.len(), failed);
        out
    }
}

fn random_tensor<T: Real>(rng: &mut RngStream, shape: &[usize], scale: f64, grad: bool) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * scale)).collect();
    Tensor::new(shape, data, grad).expect("valid shape")
}

fn positive_tensor<T: Real>(rng: &mut RngStream, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(0.5 + rng.uniform())).collect();
    Tensor::new(shape, data, true).expect("valid shape")
}

fn simplex_rows(rng: &mut RngStream, rows: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..classes).map(|_| (rng.uniform() + 0.05).powi(3)).collect();
        let total: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / total));
    }
    out
}

/// `sum(x ⊙ w)` with a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum<T: Real>(tape: &mut Tape<T>, x: Var, weights: &[T]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(&shape, weights.to_vec())?;
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn projection<T: Real>(rng: &mut RngStream, n: usize) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.normal())).collect()
}

/// Soft-target cross entropy, averaged over rows.
fn soft_ce<T: Real>(tape: &mut Tape<T>, probs: Var, target: &[T]) -> Result<Var> {
    let rows = tape.shape(probs)[0];
    let shape = tape.shape(probs).to_vec();
    let t = tape.constant(&shape, target.to_vec())?;
    let logp = tape.log_clamped(probs);
    let prod = tape.mul(t, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, T::from_f64(-1.0 / rows as f64)))
}

fn builtin_cases<T: Real>(seed: u64) -> Result<Vec<Case<T>>> {
    let mut rng = RngStream::derive(seed, "gradcheck", 0, 0);
    let mut cases: Vec<Case<T>> = Vec::new();

    let w: Vec<T> = projection(&mut rng, 12);
    cases.push(Case {
        name: "matmul".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[3, 4], 1.0, true), random_tensor(&mut rng, &[4, 4], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    });

    for stride in [1usize, 2] {
        let out = if stride == 1 { 3 * 5 * 5 } else { 3 * 3 * 3 };
        let w: Vec<T> = projection(&mut rng, out);
        cases.push(Case {
            whole_network: false,
            name: format!("conv2d/stride{stride}"),
            inputs: vec![
                random_tensor(&mut rng, &[1, 2, 5, 5], 1.0, true),
                random_tensor(&mut rng, &[3, 2, 3, 3], 0.5, true),
                random_tensor(&mut rng, &[3], 0.5, true),
            ],
            build: Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
                weighted_sum(t, y, &w)
            }),
        });
    }

    let w: Vec<T> = projection(&mut rng, 10);
    cases.push(Case {
        name: "relu".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[10], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 2 * 2 * 3);
    cases.push(Case {
        name: "avg_pool2".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[1, 2, 4, 6], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.avg_pool2(v[0])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 12);
    cases.push(Case {
        name: "bias_add".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[3, 4], 1.0, true), random_tensor(&mut rng, &[4], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.bias_add(v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 12);
    cases.push(Case {
        name: "flatten".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[2, 3, 2], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.flatten(v[0])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 8);
    cases.push(Case {
        name: "softmax".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[2, 4], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 6);
    cases.push(Case {
        name: "add".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[6], 1.0, true), random_tensor(&mut rng, &[6], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 6);
    cases.push(Case {
        name: "mul".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[6], 1.0, true), random_tensor(&mut rng, &[6], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    });

    let w: Vec<T> = projection(&mut rng, 6);
    cases.push(Case {
        name: "scale".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[6], 1.0, true)],
        build: Box::new(move |t, v| {
            let y = t.scale(v[0], T::from_f64(-1.7));
            weighted_sum(t, y, &w)
        }),
    });

    cases.push(Case {
        name: "sum".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[5], 1.0, true)],
        build: Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
    });

    cases.push(Case {
        name: "mean".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[5], 1.0, true)],
        build: Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
    });

    let w: Vec<T> = projection(&mut rng, 6);
    cases.push(Case {
        name: "log".into(),
        whole_network: false,
        inputs: vec![positive_tensor(&mut rng, &[6])],
        build: Box::new(move |t, v| {
            let y = t.log_clamped(v[0]);
            weighted_sum(t, y, &w)
        }),
    });

    let target: Vec<T> = simplex_rows(&mut rng, 3, 4).into_iter().map(T::from_f64).collect();
    cases.push(Case {
        name: "softmax+cross_entropy".into(),
        whole_network: false,
        inputs: vec![random_tensor(&mut rng, &[3, 4], 1.0, true)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            soft_ce(t, p, &target)
        }),
    });

    for index in 0..3 {
        cases.push(random_composite(seed, index)?);
    }
    Ok(cases)
}

/// Smallest distance from a ReLU kink accepted for a composite draw.
const KINK_MARGIN: f64 = 0.02;

/// A randomly shaped conv → relu → (pool) → linear → softmax → CE network.
///
/// Draws whose ReLU inputs come within [`KINK_MARGIN`] of zero are skipped:
/// central differences straddling a kink do not estimate the derivative.
fn random_composite<T: Real>(seed: u64, index: u64) -> Result<Case<T>> {
    for attempt in 0.. {
        let case = draw_composite::<T>(seed, index, attempt)?;
        let mut tape = Tape::inference();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
        (case.build)(&mut tape, &vars)?;
        if tape.relu_margin().is_none_or(|m| m.as_f64() >= KINK_MARGIN) {
            return Ok(case);
        }
    }
    unreachable!()
}

fn draw_composite<T: Real>(seed: u64, index: u64, attempt: u64) -> Result<Case<T>> {
    let mut rng = RngStream::derive(seed, "gradcheck/composite", attempt, index);
    let batch = 2;
    let in_ch = 1 + rng.below(2);
    let side = 6;
    let convs = 1 + rng.below(2);
    let classes = 3;

    let mut inputs = vec![random_tensor::<T>(&mut rng, &[batch, in_ch, side, side], 1.0, false)];
    let mut layout = Vec::new();
    let (mut ch, mut h) = (in_ch, side);
    for _ in 0..convs {
        let out = 2 + rng.below(2);
        let stride = 1 + rng.below(2);
        let pool = stride == 1 && h % 2 == 0 && rng.coin();
        let fan_in = (ch * 9) as f64;
        inputs.push(random_tensor(&mut rng, &[out, ch, 3, 3], (2.0 / fan_in).sqrt(), true));
        inputs.push(random_tensor(&mut rng, &[out], 0.1, true));
        layout.push((stride, pool));
        h = h.div_ceil(stride);
        if pool {
            h /= 2;
        }
        ch = out;
    }
    let features = ch * h * h;
    let hidden = rng.coin().then_some(4);
    let head_in = hidden.unwrap_or(features);
    if let Some(hd) = hidden {
        inputs.push(random_tensor(&mut rng, &[features, hd], (2.0 / features as f64).sqrt(), true));
        inputs.push(random_tensor(&mut rng, &[hd], 0.1, true));
    }
    inputs.push(random_tensor(&mut rng, &[head_in, classes], (1.0 / head_in as f64).sqrt(), true));
    inputs.push(random_tensor(&mut rng, &[classes], 0.1, true));
    let mut target = vec![T::zero(); batch * classes];
    for row in 0..batch {
        target[row * classes + rng.below(classes)] = T::one();
    }

    let name = format!(
        "composite#{index} ({} conv{})",
        convs,
        if hidden.is_some() { ", hidden" } else { "" }
    );
    Ok(Case {
        name,
        whole_network: true,
        inputs,
        build: Box::new(move |t, v| {
            let mut x = v[0];
            let mut next = 1;
            for &(stride, pool) in &layout {
                x = t.conv2d(x, v[next], Some(v[next + 1]), stride)?;
                x = t.relu(x);
                if pool {
                    x = t.avg_pool2(x)?;
                }
                next += 2;
            }
            x = t.flatten(x)?;
            if hidden.is_some() {
                x = t.matmul(x, v[next])?;
                x = t.bias_add(x, v[next + 1])?;
                x = t.relu(x);
                next += 2;
            }
            x = t.matmul(x, v[next])?;
            x = t.bias_add(x, v[next + 1])?;
            let p = t.softmax(x)?;
            soft_ce(t, p, &target)
        }),
    })
}
