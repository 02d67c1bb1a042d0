//! Soft-margin linear SVM with an unregularized bias.
//!
//! Minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))` in the primal. The
//! feature dimension is small, so each step solves the `(n+1)`-dimensional
//! Newton system of a smoothed objective directly.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MODEL_HEADER: &str = "weaksearch-linear-model v1";

/// Confidence function `f(x) = w·x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Raw signed margin. Errors on a dimension mismatch.
    pub fn decision(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                actual: features.len(),
            });
        }
        Ok(self.score(features))
    }

    /// Unchecked variant of [`LinearModel::decision`] for hot loops.
    #[inline]
    pub fn score(&self, features: &[f64]) -> f64 {
        dot(&self.w, features) + self.b
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MODEL_HEADER}").unwrap();
        writeln!(out, "dim {}", self.w.len()).unwrap();
        out.push('w');
        for v in &self.w {
            write!(out, " {v:?}").unwrap();
        }
        out.push('\n');
        writeln!(out, "b {:?}", self.b).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::schema(1, "empty model"))?;
        if header.trim() != MODEL_HEADER {
            return Err(Error::Version {
                found: header.trim().to_string(),
                expected: MODEL_HEADER.to_string(),
            });
        }
        let mut field = |name: &str| -> Result<(usize, Vec<String>)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::schema(0, format!("missing `{name}` line")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(name) {
                return Err(Error::schema(n + 1, format!("expected `{name}`")));
            }
            Ok((n + 1, toks.map(str::to_string).collect()))
        };
        let (ln, dim) = field("dim")?;
        let dim: usize = dim
            .first()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::schema(ln, "bad dimension"))?;
        let (ln, w) = field("w")?;
        let w = parse_reals(&w, ln)?;
        if w.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: w.len(),
            });
        }
        let (ln, b) = field("b")?;
        let b = parse_reals(&b, ln)?;
        if b.len() != 1 {
            return Err(Error::schema(ln, "bias must be a single value"));
        }
        Ok(LinearModel { w, b: b[0] })
    }
}

pub(crate) fn parse_reals(toks: &[String], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::schema(line, format!("bad real `{t}`")))
        })
        .collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    /// Bound on the relative gap between the returned objective and the
    /// optimum.
    pub tolerance: f64,
    /// Cap on Newton steps.
    pub max_epochs: usize,
    /// The solver is deterministic; kept so configs stay stable if a
    /// randomized solver is swapped in.
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tolerance: 1e-6,
            max_epochs: 10_000,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("SVM tolerance must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Training output with solver diagnostics.
#[derive(Clone, Debug)]
pub struct SvmFit {
    pub model: LinearModel,
    /// Primal objective of the incumbent after each step.
    pub objective_trace: Vec<f64>,
    pub inner_epochs: usize,
}

/// `½‖w‖² + C Σ hinge`.
pub fn primal_objective(model: &LinearModel, xs: &[&[f64]], ys: &[f64], c: f64) -> f64 {
    let reg = 0.5 * dot(&model.w, &model.w);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * model.score(x)).max(0.0))
        .sum();
    reg + c * loss
}

pub fn train(examples: &[(&[f64], f64)], config: &SvmConfig) -> Result<LinearModel> {
    Ok(train_with_trace(examples, config)?.model)
}

pub fn train_with_trace(examples: &[(&[f64], f64)], config: &SvmConfig) -> Result<SvmFit> {
    config.validate()?;
    let dim = examples.first().map(|(x, _)| x.len()).unwrap_or(0);
    let mut positives = 0;
    let mut negatives = 0;
    for (x, y) in examples {
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        if *y > 0.0 {
            positives += 1;
        } else {
            negatives += 1;
        }
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    let xs: Vec<&[f64]> = examples.iter().map(|(x, _)| *x).collect();
    let ys: Vec<f64> = examples
        .iter()
        .map(|(_, y)| if *y > 0.0 { 1.0 } else { -1.0 })
        .collect();
    Ok(Solver::new(&xs, &ys, config).run())
}

/// Primal Newton solver on a Huber-smoothed hinge.
///
/// The hinge on margin violation `z` is replaced by `z²/2h` on `[0, h]` and
/// `z − h/2` above. Each level is minimized by damped Newton steps; `h`
/// then shrinks tenfold until the duality gap certified by the smoothed
/// solution is within `tolerance` of the objective.
struct Solver<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [f64],
    c: f64,
    tol: f64,
    max_steps: usize,
    dim: usize,
}

// At w = 0, b = 0 every margin violation is 1, inside the first band.
const INITIAL_SMOOTHING: f64 = 2.0;
const MAX_LEVEL_STEPS: usize = 100;
const LEVEL_DECREMENT: f64 = 1e-16;

impl<'a> Solver<'a> {
    fn new(xs: &'a [&'a [f64]], ys: &'a [f64], config: &SvmConfig) -> Self {
        Solver {
            xs,
            ys,
            c: config.c,
            tol: config.tolerance,
            max_steps: config.max_epochs,
            dim: xs[0].len(),
        }
    }

    fn margins(&self, wb: &DVector<f64>) -> Vec<f64> {
        let (w, b) = (&wb.as_slice()[..self.dim], wb[self.dim]);
        self.xs
            .iter()
            .zip(self.ys)
            .map(|(x, y)| 1.0 - y * (dot(w, x) + b))
            .collect()
    }

    fn exact(&self, wb: &DVector<f64>) -> f64 {
        let w = &wb.as_slice()[..self.dim];
        let loss: f64 = self.margins(wb).iter().map(|z| z.max(0.0)).sum();
        0.5 * dot(w, w) + self.c * loss
    }

    fn smoothed(&self, wb: &DVector<f64>, h: f64) -> f64 {
        let w = &wb.as_slice()[..self.dim];
        let loss: f64 = self
            .margins(wb)
            .iter()
            .map(|&z| {
                if z <= 0.0 {
                    0.0
                } else if z < h {
                    z * z / (2.0 * h)
                } else {
                    z - h / 2.0
                }
            })
            .sum();
        0.5 * dot(w, w) + self.c * loss
    }

    /// Gap between the exact primal at `wb` and the dual value of
    /// `αᵢ = C·ℓ'_h(zᵢ)`, which is dual feasible once `wb` minimizes the
    /// smoothed objective (the bias condition gives `Σ αᵢyᵢ = 0`).
    fn duality_gap(&self, wb: &DVector<f64>, h: f64) -> f64 {
        let z = self.margins(wb);
        let mut v = vec![0.0; self.dim];
        let mut sum = 0.0;
        for ((x, &y), &zi) in self.xs.iter().zip(self.ys).zip(&z) {
            let a = self.c * (zi / h).clamp(0.0, 1.0);
            if a > 0.0 {
                sum += a;
                for (vk, xk) in v.iter_mut().zip(x.iter()) {
                    *vk += a * y * xk;
                }
            }
        }
        let dual = sum - 0.5 * dot(&v, &v);
        let w = &wb.as_slice()[..self.dim];
        let loss: f64 = z.iter().map(|zi| zi.max(0.0)).sum();
        0.5 * dot(w, w) + self.c * loss - dual
    }

    fn run(self) -> SvmFit {
        let d = self.dim;
        let mut wb = DVector::<f64>::zeros(d + 1);
        let mut h = INITIAL_SMOOTHING;
        let mut best = (self.exact(&wb), wb.clone());
        let mut trace = vec![best.0];
        let mut steps = 0;
        'levels: loop {
            for _ in 0..MAX_LEVEL_STEPS {
                if steps >= self.max_steps {
                    break 'levels;
                }
                steps += 1;
                let z = self.margins(&wb);
                let mut grad = DVector::<f64>::zeros(d + 1);
                let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
                for k in 0..d {
                    grad[k] = wb[k];
                    hess[(k, k)] = 1.0;
                }
                let mut xt = DVector::<f64>::zeros(d + 1);
                for ((x, &y), &zi) in self.xs.iter().zip(self.ys).zip(&z) {
                    if zi <= 0.0 {
                        continue;
                    }
                    xt.as_mut_slice()[..d].copy_from_slice(x);
                    xt[d] = 1.0;
                    let slope = if zi < h { zi / h } else { 1.0 };
                    grad.axpy(-self.c * y * slope, &xt, 1.0);
                    if zi < h {
                        hess.ger(self.c / h, &xt, &xt, 1.0);
                    }
                }
                // The bias is unregularized; keep the system definite.
                let ridge = 1e-9 * hess.trace() / (d + 1) as f64;
                hess[(d, d)] += ridge;
                let Some(chol) = hess.cholesky() else {
                    break 'levels;
                };
                let dir = -chol.solve(&grad);
                let decrease = grad.dot(&dir);
                if decrease > -LEVEL_DECREMENT * (1.0 + best.0) {
                    break;
                }
                let f0 = self.smoothed(&wb, h);
                let mut t = 1.0;
                let mut next = &wb + &dir * t;
                let mut f1 = self.smoothed(&next, h);
                while f1 > f0 + 1e-4 * t * decrease && t > 1e-12 {
                    t *= 0.5;
                    next = &wb + &dir * t;
                    f1 = self.smoothed(&next, h);
                }
                if f1 >= f0 {
                    break;
                }
                wb = next;
                let e = self.exact(&wb);
                if e < best.0 {
                    best = (e, wb.clone());
                }
                trace.push(best.0);
                if f0 - f1 <= 1e-15 * f0.abs().max(1.0) {
                    break;
                }
            }
            if self.duality_gap(&wb, h) <= self.tol * best.0.max(f64::MIN_POSITIVE) {
                break;
            }
            h /= 10.0;
            if h < 1e-300 {
                break;
            }
        }
        let wb = best.1;
        SvmFit {
            model: LinearModel {
                w: wb.as_slice()[..d].to_vec(),
                b: wb[d],
            },
            objective_trace: trace,
            inner_epochs: steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn examples(points: &[(Vec<f64>, f64)]) -> Vec<(&[f64], f64)> {
        points.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
    }

    #[test]
    fn separable_clouds_have_zero_hinge_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        for i in 0..40 {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            let x = vec![y * 2.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..1.0)];
            pts.push((x, y));
        }
        let cfg = SvmConfig {
            c: 1e4,
            ..SvmConfig::default()
        };
        let model = train(&examples(&pts), &cfg).unwrap();
        for (x, y) in &pts {
            assert!(y * model.score(x) >= 1.0 - 1e-4, "margin violated");
        }
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let pts = vec![
            (vec![0.0, 0.0], 1.0),
            (vec![1.0, 1.0], 1.0),
            (vec![0.0, 1.0], -1.0),
            (vec![1.0, 0.0], -1.0),
        ];
        for c in [0.01, 1.0, 100.0] {
            let cfg = SvmConfig {
                c,
                ..SvmConfig::default()
            };
            let model = train(&examples(&pts), &cfg).unwrap();
            let correct = pts
                .iter()
                .filter(|(x, y)| y * model.score(x) > 0.0)
                .count();
            assert!(correct <= 3);
        }
    }

    #[test]
    fn rejects_single_class_and_mismatched_dims() {
        let pts = vec![(vec![0.0, 1.0], 1.0), (vec![1.0, 1.0], 1.0)];
        assert!(matches!(
            train(&examples(&pts), &SvmConfig::default()),
            Err(Error::SingleClass { .. })
        ));
        let pts = vec![(vec![0.0, 1.0], 1.0), (vec![1.0], -1.0)];
        assert!(matches!(
            train(&examples(&pts), &SvmConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = SvmConfig {
            c: 0.0,
            ..SvmConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decision_examples() {
        let zero = LinearModel::zeros(3);
        assert_eq!(zero.decision(&[1.0, -2.0, 5.0]).unwrap(), 0.0);
        let m = LinearModel {
            w: vec![1.0, 0.0, 0.0],
            b: -1.0,
        };
        assert_eq!(m.decision(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(m.decision(&[1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let mut naive = b;
            for k in 0..24 {
                naive += w[k] * x[k];
            }
            let m = LinearModel { w, b };
            assert!((m.decision(&x).unwrap() - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_text_round_trip() {
        let m = LinearModel {
            w: vec![0.1, -1e-300, 3.0f64.sqrt()],
            b: -0.7,
        };
        assert_eq!(LinearModel::from_text(&m.to_text()).unwrap(), m);
        assert!(LinearModel::from_text("garbage\n").is_err());
    }

    #[test]
    fn incumbent_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<_> = (0..120)
            .map(|i| {
                let y = if i % 3 == 0 { 1.0 } else { -1.0 };
                let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0) + 0.4 * y).collect();
                (x, y)
            })
            .collect();
        let fit = train_with_trace(&examples(&pts), &SvmConfig::default()).unwrap();
        assert!(fit.objective_trace.len() > 1);
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    // Reference: SMO on the dual with the equality constraint Σ αᵢyᵢ = 0,
    // maximal-violating-pair selection, run to a 1e-12 KKT gap.
    fn smo_oracle(pts: &[(Vec<f64>, f64)], c: f64) -> LinearModel {
        let n = pts.len();
        let k = |i: usize, j: usize| dot(&pts[i].0, &pts[j].0);
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let mut alpha = vec![0.0; n];
        // grad[i] = ∂/∂αᵢ of ½αᵀQα − Σα.
        let mut grad = vec![-1.0; n];
        for _ in 0..1_000_000 {
            let up = |i: usize, a: f64| (y[i] > 0.0 && a < c) || (y[i] < 0.0 && a > 0.0);
            let low = |i: usize, a: f64| (y[i] > 0.0 && a > 0.0) || (y[i] < 0.0 && a < c);
            let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
            let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
            for t in 0..n {
                let v = -y[t] * grad[t];
                if up(t, alpha[t]) && v > gmax {
                    (i, gmax) = (t, v);
                }
                if low(t, alpha[t]) && v < gmin {
                    (j, gmin) = (t, v);
                }
            }
            if gmax - gmin < 1e-12 {
                break;
            }
            let eta = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(1e-15);
            let mut step = (gmax - gmin) / eta;
            // Move αᵢ by yᵢ·step and αⱼ by −yⱼ·step within the box.
            let room = |t: usize, dir: f64| if dir > 0.0 { c - alpha[t] } else { alpha[t] };
            step = step.min(room(i, y[i])).min(room(j, -y[j]));
            alpha[i] += y[i] * step;
            alpha[j] -= y[j] * step;
            for t in 0..n {
                grad[t] += y[t] * (k(t, i) * step - k(t, j) * step);
            }
        }
        let d = pts[0].0.len();
        let mut w = vec![0.0; d];
        for t in 0..n {
            for (wk, xk) in w.iter_mut().zip(&pts[t].0) {
                *wk += alpha[t] * y[t] * xk;
            }
        }
        // Bias: best value over free-vector estimates, refined by scanning.
        let f = |b: f64| {
            primal_objective(
                &LinearModel { w: w.clone(), b },
                &pts.iter().map(|p| p.0.as_slice()).collect::<Vec<_>>(),
                &y,
                c,
            )
        };
        let candidates: Vec<f64> = (0..n).map(|t| y[t] - dot(&w, &pts[t].0)).collect();
        let b = candidates
            .into_iter()
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        LinearModel { w, b }
    }

    fn random_problem(seed: u64, n: usize, d: usize, shift: f64) -> Vec<(Vec<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..n)
            .map(|i| {
                let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                let x = (0..d)
                    .map(|k| rng.gen_range(-1.0..1.0) + shift * y * dir[k])
                    .collect();
                (x, y)
            })
            .collect()
    }

    #[test]
    fn matches_qp_oracle_on_small_problems() {
        for seed in 0..10 {
            for (shift, c) in [(2.0, 10.0), (0.3, 1.0), (0.3, 0.05)] {
                let pts = random_problem(seed, 40, 4, shift);
                let xs: Vec<&[f64]> = pts.iter().map(|p| p.0.as_slice()).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
                let reference = primal_objective(&smo_oracle(&pts, c), &xs, &ys, c);
                let cfg = SvmConfig {
                    c,
                    ..SvmConfig::default()
                };
                let got = primal_objective(&train(&examples(&pts), &cfg).unwrap(), &xs, &ys, c);
                assert!(
                    got <= reference * 1.01 + 1e-12,
                    "seed {seed}: {got} vs oracle {reference}"
                );
            }
        }
    }

    #[test]
    fn removing_a_non_support_point_keeps_the_solution() {
        let cfg = SvmConfig::default();
        let mut checked = 0;
        for seed in 0..10 {
            let pts = random_problem(seed, 60, 3, 0.8);
            let model = train(&examples(&pts), &cfg).unwrap();
            let Some(drop) = pts
                .iter()
                .position(|(x, y)| y * model.score(x) > 1.0 + 1e-3)
            else {
                continue;
            };
            let mut fewer = pts.clone();
            fewer.remove(drop);
            let again = train(&examples(&fewer), &cfg).unwrap();
            for (a, b) in model.w.iter().zip(&again.w) {
                assert!((a - b).abs() <= 1e-4, "seed {seed}: {a} vs {b}");
            }
            assert!((model.b - again.b).abs() <= 1e-4);
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn training_is_bit_exact_deterministic() {
        let pts = random_problem(4, 80, 5, 0.5);
        let cfg = SvmConfig::default();
        assert_eq!(train(&examples(&pts), &cfg).unwrap(), train(&examples(&pts), &cfg).unwrap());
    }
}
