//! Likelihood-ratio policy gradient for the search agent.
//!
//! The objective is `F(θ) = E[Σₜ rₜ] − (λ/2)‖θ‖²`. Its gradient is
//! estimated from sampled episodes as `Σₜ ∇log π(aₜ|sₜ) · Σₜ rₜ − λθ`. For
//! scenes small enough to enumerate, [`exact_objective`] computes `F` and
//! `∇F` in closed form, integrating the location Gaussian over the cells cut
//! out by the region boundaries.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::agent::{
    accumulate_log_prob_gradient, best_observed, evidence_distribution, location_mean, observe,
    reward, rollout, sigmoid, termination_features, AgentConfig, AgentState, Episode,
    PolicyParams, Scene,
};
use crate::error::{Error, Result};
use crate::rng;

/// `Σₜ ∇log π(aₜ|sₜ)` over the recorded steps of `episode`.
pub fn episode_score_gradient(
    episode: &Episode,
    theta: &PolicyParams,
    scene: &Scene,
) -> Result<Vec<f64>> {
    if theta.feature_dim() != scene.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.feature_dim(),
            actual: scene.feature_dim(),
        });
    }
    let mut grad = vec![0.0; PolicyParams::flat_len(theta.feature_dim())];
    for step in &episode.steps {
        accumulate_log_prob_gradient(&step.state, &step.action, theta, scene, 1.0, &mut grad)?;
    }
    Ok(grad)
}

/// Log-probability of the recorded actions of `episode` under `theta`.
pub fn episode_log_prob(episode: &Episode, theta: &PolicyParams, scene: &Scene) -> Result<f64> {
    episode
        .steps
        .iter()
        .map(|s| crate::agent::action_log_prob(&s.state, &s.action, theta, scene))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    /// Aligned with [`PolicyParams::flatten`].
    pub gradient: Vec<f64>,
    pub samples: usize,
    pub mean_reward: f64,
    pub reward_variance: f64,
    pub evaluated_fraction: f64,
}

fn check_scenes(scenes: &[Scene], theta: &PolicyParams) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for s in scenes {
        if s.feature_dim() != theta.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: theta.feature_dim(),
                actual: s.feature_dim(),
            });
        }
    }
    Ok(())
}

/// Monte Carlo gradient from `samples` episodes on uniformly drawn scenes.
/// Episode `i` uses its own stream derived from `(seed, i)`.
pub fn estimate_gradient(
    scenes: &[Scene],
    theta: &PolicyParams,
    agent: &AgentConfig,
    samples: usize,
    lambda: f64,
    seed: u64,
) -> Result<GradientEstimate> {
    check_scenes(scenes, theta)?;
    if samples == 0 {
        return Err(Error::Config("gradient estimate needs at least one sample".into()));
    }
    let per_episode: Vec<(Vec<f64>, f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[i as u64]);
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let ep = rollout(scene, theta, agent, &mut rng)?;
            let ret = ep.total_reward();
            let mut g = episode_score_gradient(&ep, theta, scene)?;
            g.iter_mut().for_each(|v| *v *= ret);
            Ok((g, ret, ep.evaluated_fraction()))
        })
        .collect::<Result<_>>()?;
    let m = samples as f64;
    let flat = theta.flatten();
    let mut gradient: Vec<f64> = flat.iter().map(|t| -lambda * t).collect();
    let mut sum_g = vec![0.0; flat.len()];
    for (g, _, _) in &per_episode {
        for (s, v) in sum_g.iter_mut().zip(g) {
            *s += v;
        }
    }
    for (out, s) in gradient.iter_mut().zip(&sum_g) {
        *out += s / m;
    }
    let mean_reward = per_episode.iter().map(|e| e.1).sum::<f64>() / m;
    let reward_variance = per_episode
        .iter()
        .map(|e| (e.1 - mean_reward).powi(2))
        .sum::<f64>()
        / m;
    let evaluated_fraction = per_episode.iter().map(|e| e.2).sum::<f64>() / m;
    Ok(GradientEstimate {
        gradient,
        samples,
        mean_reward,
        reward_variance,
        evaluated_fraction,
    })
}

/// Mean total reward and evaluated fraction over `rollouts` episodes per
/// scene, with streams fixed by `(seed, scene, k)`.
pub fn evaluate_policy(
    scenes: &[Scene],
    theta: &PolicyParams,
    agent: &AgentConfig,
    rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_scenes(scenes, theta)?;
    let results: Vec<(f64, f64)> = (0..scenes.len() * rollouts.max(1))
        .into_par_iter()
        .map(|i| {
            let (s, k) = (i / rollouts.max(1), i % rollouts.max(1));
            let mut rng = rng::stream(seed, &[s as u64, k as u64]);
            let ep = rollout(&scenes[s], theta, agent, &mut rng)?;
            Ok((ep.total_reward(), ep.evaluated_fraction()))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.0).sum::<f64>() / n,
        results.iter().map(|r| r.1).sum::<f64>() / n,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    /// Episodes per gradient estimate.
    pub samples: usize,
    pub lambda: f64,
    pub iterations: usize,
    /// Step size at iteration `k` is `step_size / (1 + step_decay·k)`.
    pub step_size: f64,
    pub step_decay: f64,
    /// Estimates longer than this are rescaled to it.
    pub max_grad_norm: f64,
    pub restarts: usize,
    /// Stop a restart after this many iterations without a validation gain
    /// above `tolerance`.
    pub patience: usize,
    pub tolerance: f64,
    pub validation_rollouts: usize,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
    pub init_log_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            agent: AgentConfig::default(),
            samples: 256,
            lambda: 3e-3,
            iterations: 300,
            step_size: 0.1,
            step_decay: 0.01,
            max_grad_norm: 5.0,
            restarts: 8,
            patience: 100,
            tolerance: 1e-4,
            validation_rollouts: 8,
            init_scale: 0.1,
            init_log_sigma: -1.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.samples == 0 || self.restarts == 0 || self.validation_rollouts == 0 {
            return bad("samples, restarts and validation rollouts must be >= 1");
        }
        if !(self.lambda >= 0.0) || !(self.agent.alpha >= 0.0) {
            return bad("lambda and alpha must be non-negative");
        }
        if !(self.step_size > 0.0 && self.step_decay >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("step schedule must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub restart: usize,
    pub iteration: usize,
    pub train_reward: f64,
    pub val_reward: f64,
    pub evaluated_fraction: f64,
    pub grad_norm: f64,
    /// Validation reward beat the restart's best so far by more than the
    /// tolerance.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub val_reward: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    /// Iteration at which θ became non-finite.
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTraining {
    pub params: PolicyParams,
    pub restart: usize,
    pub val_reward: f64,
    pub restarts: Vec<RestartSummary>,
    pub log: Vec<LogEntry>,
}

const STREAM_INIT: u64 = 1;
const STREAM_GRAD: u64 = 2;
const STREAM_VAL: u64 = 3;

fn initial_params(n: usize, config: &TrainConfig, restart: usize) -> PolicyParams {
    let mut rng = rng::stream(config.seed, &[STREAM_INIT, restart as u64]);
    let normal = Normal::new(0.0, config.init_scale).unwrap();
    let mut flat: Vec<f64> = (0..PolicyParams::flat_len(n))
        .map(|_| normal.sample(&mut rng))
        .collect();
    let len = flat.len();
    flat[len - 2] = config.init_log_sigma;
    flat[len - 1] = config.init_log_sigma;
    PolicyParams::from_flat(&flat, n).unwrap()
}

struct RestartOutcome {
    params: PolicyParams,
    summary: RestartSummary,
    log: Vec<LogEntry>,
}

fn train_restart(
    train: &[Scene],
    val: &[Scene],
    config: &TrainConfig,
    restart: usize,
) -> Result<RestartOutcome> {
    let n = train[0].feature_dim();
    let val_seed = rng::derive_seed(config.seed, &[STREAM_VAL]);
    let mut theta = initial_params(n, config, restart);
    let (mut best_val, _) =
        evaluate_policy(val, &theta, &config.agent, config.validation_rollouts, val_seed)?;
    let mut best = theta.clone();
    let mut best_iteration = 0;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut diverged_at = None;
    let mut iterations = 0;
    for k in 1..=config.iterations {
        iterations = k;
        let seed = rng::derive_seed(config.seed, &[STREAM_GRAD, restart as u64, k as u64]);
        let est = estimate_gradient(train, &theta, &config.agent, config.samples, config.lambda, seed)?;
        let norm = est.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > config.max_grad_norm {
            config.max_grad_norm / norm
        } else {
            1.0
        };
        let step = config.step_size / (1.0 + config.step_decay * k as f64);
        let mut flat = theta.flatten();
        for (t, g) in flat.iter_mut().zip(&est.gradient) {
            *t += step * scale * g;
        }
        if flat.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(k);
            break;
        }
        theta = PolicyParams::from_flat(&flat, n)?;
        let (val_reward, fraction) =
            evaluate_policy(val, &theta, &config.agent, config.validation_rollouts, val_seed)?;
        let accepted = val_reward > best_val + config.tolerance;
        if accepted {
            stale = 0;
        } else {
            stale += 1;
        }
        // Ties move the snapshot forward: a plateau in validation reward
        // does not mean the policy stopped improving.
        if val_reward >= best_val {
            best_val = val_reward;
            best = theta.clone();
            best_iteration = k;
        }
        log.push(LogEntry {
            restart,
            iteration: k,
            train_reward: est.mean_reward,
            val_reward,
            evaluated_fraction: fraction,
            grad_norm: norm,
            accepted,
        });
        if stale >= config.patience {
            break;
        }
    }
    Ok(RestartOutcome {
        params: best,
        summary: RestartSummary {
            restart,
            val_reward: best_val,
            best_iteration,
            iterations,
            diverged_at,
        },
        log,
    })
}

/// Stochastic gradient ascent from `config.restarts` random starts; returns
/// the parameters with the best validation reward (lowest restart index on
/// ties).
pub fn train_policy(train: &[Scene], val: &[Scene], config: &TrainConfig) -> Result<PolicyTraining> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let outcomes: Vec<RestartOutcome> = (0..config.restarts)
        .into_par_iter()
        .map(|r| train_restart(train, val, config, r))
        .collect::<Result<_>>()?;
    let winner = outcomes
        .iter()
        .filter(|o| o.summary.diverged_at.is_none() || o.summary.best_iteration > 0)
        .fold(None, |best: Option<&RestartOutcome>, o| match best {
            Some(b) if b.summary.val_reward >= o.summary.val_reward => Some(b),
            _ => Some(o),
        });
    let Some(winner) = winner else {
        let first = &outcomes[0].summary;
        return Err(Error::Diverged {
            restart: first.restart,
            iteration: first.diverged_at.unwrap_or(0),
        });
    };
    Ok(PolicyTraining {
        params: winner.params.clone(),
        restart: winner.summary.restart,
        val_reward: winner.summary.val_reward,
        restarts: outcomes.iter().map(|o| o.summary.clone()).collect(),
        log: outcomes.iter().flat_map(|o| o.log.iter().cloned()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Exact expectation on enumerable scenes

pub const MAX_ENUMERABLE_REGIONS: usize = 4;
pub const MAX_ENUMERABLE_STEPS: usize = 2;

/// `F(θ)` without the regularizer, and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Upper-tail probability `P(N(0,1) > x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn std_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
}

/// Probability of `(lo, hi)` under `N(mu, sigma²)` with derivatives with
/// respect to `mu` and `log sigma`.
fn interval_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    // Difference of tails, taken on the side where it does not cancel.
    let p = if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    };
    let (pa, pb) = (std_pdf(a), std_pdf(b));
    let d_mu = -(pb - pa) / sigma;
    let xa = if a.is_infinite() { 0.0 } else { pa * a };
    let xb = if b.is_infinite() { 0.0 } else { pb * b };
    let d_log_sigma = -(xb - xa);
    (p, d_mu, d_log_sigma)
}

/// Outcomes of one fixation: observed-set bitmask with its probability and
/// the derivatives of that probability with respect to
/// `(μx, μy, log σx, log σy)`.
fn observation_outcomes(
    scene: &Scene,
    mean: [f64; 2],
    log_sigma: [f64; 2],
) -> BTreeMap<u64, (f64, [f64; 4])> {
    let mut axes: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for r in &scene.regions {
        axes[0].extend([r.rect.x1(), r.rect.x2()]);
        axes[1].extend([r.rect.y1(), r.rect.y2()]);
    }
    let cells = |k: usize| {
        let mut cuts = axes[k].clone();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend(cuts);
        edges.push(f64::INFINITY);
        let sigma = log_sigma[k].exp();
        edges
            .windows(2)
            .map(|w| {
                let (p, dm, ds) = interval_mass(w[0], w[1], mean[k], sigma);
                (w[0], w[1], p, dm, ds)
            })
            .collect::<Vec<_>>()
    };
    let (xs, ys) = (cells(0), cells(1));
    let mut out: BTreeMap<u64, (f64, [f64; 4])> = BTreeMap::new();
    for &(x0, x1, px, dmx, dsx) in &xs {
        for &(y0, y1, py, dmy, dsy) in &ys {
            let mask = scene
                .regions
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    r.rect.x1() <= x0 && x1 <= r.rect.x2() && r.rect.y1() <= y0 && y1 <= r.rect.y2()
                })
                .fold(0u64, |m, (i, _)| m | (1 << i));
            let e = out.entry(mask).or_insert((0.0, [0.0; 4]));
            e.0 += px * py;
            e.1[0] += dmx * py;
            e.1[1] += px * dmy;
            e.1[2] += dsx * py;
            e.1[3] += px * dsy;
        }
    }
    out
}

fn terminal_reward(state: &AgentState, scene: &Scene, agent: &AgentConfig) -> f64 {
    let (_, c) = best_observed(state, scene).expect("non-empty history");
    reward(true, c, scene.label, agent.alpha)
}

fn state_value(
    state: &AgentState,
    scene: &Scene,
    theta: &PolicyParams,
    agent: &AgentConfig,
) -> Result<ExactValue> {
    let n = theta.feature_dim();
    let dim = PolicyParams::flat_len(n);
    let stop_reward = terminal_reward(state, scene, agent);
    if state.t >= agent.max_steps || state.candidates().next().is_none() {
        return Ok(ExactValue {
            value: stop_reward,
            gradient: vec![0.0; dim],
        });
    }
    let v = termination_features(state, scene)?;
    let p_stop = sigmoid(theta.termination.iter().zip(&v).map(|(a, b)| a * b).sum());
    let dist = evidence_distribution(state, scene, theta)?;
    let mean_g: Vec<f64> = (0..n)
        .map(|k| dist.iter().map(|(i, p)| p * scene.regions[*i].features[k]).sum())
        .collect();

    let mut go_value = 0.0;
    let mut go_grad = vec![0.0; dim];
    for &(e, q) in &dist {
        let region = &scene.regions[e];
        let mean = location_mean(&region.rect, &region.features, theta);
        let half = region.rect.half_extent();
        let mut q_value = -agent.alpha;
        let mut q_grad = vec![0.0; dim];
        for (mask, (p, dp)) in observation_outcomes(scene, mean, theta.log_sigma) {
            if p == 0.0 && dp.iter().all(|d| *d == 0.0) {
                continue;
            }
            let mut next = observe(state, e, [f64::NAN, f64::NAN], scene);
            let observed: Vec<usize> = next
                .observed()
                .chain((0..scene.len()).filter(|i| mask & (1 << i) != 0))
                .collect();
            let used: Vec<usize> = next.used().collect();
            next = AgentState::from_sets(scene.len(), &observed, &used, next.t);
            let child = state_value(&next, scene, theta, agent)?;
            q_value += p * child.value;
            for (qg, cg) in q_grad.iter_mut().zip(&child.gradient) {
                *qg += p * cg;
            }
            // dP/dθ through the mean and the log standard deviations.
            for (k, g) in region.features.iter().enumerate() {
                q_grad[4 + n + k] += dp[0] * half[0] * g * child.value;
                q_grad[4 + 2 * n + k] += dp[1] * half[1] * g * child.value;
            }
            q_grad[4 + 3 * n] += dp[2] * child.value;
            q_grad[4 + 3 * n + 1] += dp[3] * child.value;
        }
        go_value += q * q_value;
        for (gg, qg) in go_grad.iter_mut().zip(&q_grad) {
            *gg += q * qg;
        }
        // dq/dθ_e = q (g_e − E[g]).
        for k in 0..n {
            go_grad[4 + k] += q * (region.features[k] - mean_g[k]) * q_value;
        }
    }

    let value = p_stop * stop_reward + (1.0 - p_stop) * go_value;
    let mut gradient: Vec<f64> = go_grad.iter().map(|g| (1.0 - p_stop) * g).collect();
    let d_stop = p_stop * (1.0 - p_stop);
    for k in 0..4 {
        gradient[k] += d_stop * v[k] * (stop_reward - go_value);
    }
    Ok(ExactValue { value, gradient })
}

/// Exact `E[Σₜ rₜ]` and its gradient on one scene by enumerating the
/// episode tree.
pub fn exact_scene_value(scene: &Scene, theta: &PolicyParams, agent: &AgentConfig) -> Result<ExactValue> {
    if scene.len() > MAX_ENUMERABLE_REGIONS || agent.max_steps > MAX_ENUMERABLE_STEPS {
        return Err(Error::NotEnumerable(format!(
            "{} regions, T_max {} (limits {MAX_ENUMERABLE_REGIONS}, {MAX_ENUMERABLE_STEPS})",
            scene.len(),
            agent.max_steps
        )));
    }
    if theta.feature_dim() != scene.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.feature_dim(),
            actual: scene.feature_dim(),
        });
    }
    let start = scene.initial_state();
    if start.observed_count() == 0 {
        return Err(Error::EmptyHistory);
    }
    state_value(&start, scene, theta, agent)
}

/// Exact regularized objective `F(θ) = mean over scenes of E[Σ r] − (λ/2)‖θ‖²`
/// and its gradient.
pub fn exact_objective(
    scenes: &[Scene],
    theta: &PolicyParams,
    agent: &AgentConfig,
    lambda: f64,
) -> Result<ExactValue> {
    check_scenes(scenes, theta)?;
    let flat = theta.flatten();
    let mut value = -0.5 * lambda * flat.iter().map(|t| t * t).sum::<f64>();
    let mut gradient: Vec<f64> = flat.iter().map(|t| -lambda * t).collect();
    let m = scenes.len() as f64;
    for s in scenes {
        let e = exact_scene_value(s, theta, agent)?;
        value += e.value / m;
        for (g, v) in gradient.iter_mut().zip(&e.gradient) {
            *g += v / m;
        }
    }
    Ok(ExactValue { value, gradient })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Components smaller than this in both gradients are compared absolutely.
pub const FD_ERROR_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the exact objective with central
/// differences of step `h`.
pub fn fd_check(
    scenes: &[Scene],
    theta: &PolicyParams,
    agent: &AgentConfig,
    lambda: f64,
    h: f64,
) -> Result<FdReport> {
    let analytic = exact_objective(scenes, theta, agent, lambda)?.gradient;
    let flat = theta.flatten();
    let n = theta.feature_dim();
    let mut numeric = Vec::with_capacity(flat.len());
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[k] += h;
        minus[k] -= h;
        let fp = exact_objective(scenes, &PolicyParams::from_flat(&plus, n)?, agent, lambda)?.value;
        let fm = exact_objective(scenes, &PolicyParams::from_flat(&minus, n)?, agent, lambda)?.value;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let max_relative_error = relative_error(&analytic, &numeric);
    Ok(FdReport {
        max_relative_error,
        analytic,
        numeric,
    })
}

/// `max_k |aₖ − bₖ| / max(|aₖ|, |bₖ|, FD_ERROR_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(FD_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
