//! Saccade-and-fixate search agent.
//!
//! The state is the set `H` of observed regions and the set `S` of regions
//! already used as saccade evidence. Each step the policy either stops
//! (Bernoulli on a sigmoid of four summary features) or picks an evidence
//! region from `H \ S` (softmax over a linear score of its features) and
//! samples a fixation point from a diagonal Gaussian centred at a
//! box-normalized offset predicted from the evidence features. Every region
//! containing the fixation point becomes observed.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticImage;
use crate::error::{Error, Result};
use crate::geometry::{Rect, RegionId};
use crate::svm::{dot, parse_reals, LinearModel};

pub const CANVAS_CENTER: [f64; 2] = [0.5, 0.5];
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const POLICY_HEADER: &str = "weaksearch-policy v1";

/// Policy parameters: termination (4), evidence (n), location (2×n) and
/// per-axis log standard deviations (2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub termination: [f64; 4],
    pub evidence: Vec<f64>,
    pub location_x: Vec<f64>,
    pub location_y: Vec<f64>,
    pub log_sigma: [f64; 2],
}

impl PolicyParams {
    pub fn zeros(n: usize) -> Self {
        PolicyParams {
            termination: [0.0; 4],
            evidence: vec![0.0; n],
            location_x: vec![0.0; n],
            location_y: vec![0.0; n],
            log_sigma: [0.0; 2],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.evidence.len()
    }

    /// Length of [`PolicyParams::flatten`]: `4 + 3n + 2`.
    pub fn flat_len(n: usize) -> usize {
        4 + 3 * n + 2
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_len(self.feature_dim()));
        v.extend_from_slice(&self.termination);
        v.extend_from_slice(&self.evidence);
        v.extend_from_slice(&self.location_x);
        v.extend_from_slice(&self.location_y);
        v.extend_from_slice(&self.log_sigma);
        v
    }

    pub fn from_flat(flat: &[f64], n: usize) -> Result<Self> {
        if flat.len() != Self::flat_len(n) {
            return Err(Error::DimensionMismatch {
                expected: Self::flat_len(n),
                actual: flat.len(),
            });
        }
        let (term, rest) = flat.split_at(4);
        let (evidence, rest) = rest.split_at(n);
        let (lx, rest) = rest.split_at(n);
        let (ly, ls) = rest.split_at(n);
        Ok(PolicyParams {
            termination: term.try_into().unwrap(),
            evidence: evidence.to_vec(),
            location_x: lx.to_vec(),
            location_y: ly.to_vec(),
            log_sigma: ls.try_into().unwrap(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn sigma(&self) -> [f64; 2] {
        [self.log_sigma[0].exp(), self.log_sigma[1].exp()]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{POLICY_HEADER}").unwrap();
        writeln!(out, "n {}", self.feature_dim()).unwrap();
        let mut row = |name: &str, vals: &[f64]| {
            out.push_str(name);
            for v in vals {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        };
        row("termination", &self.termination);
        row("evidence", &self.evidence);
        row("location_x", &self.location_x);
        row("location_y", &self.location_y);
        row("log_sigma", &self.log_sigma);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some(POLICY_HEADER) {
            return Err(Error::Version {
                found: lines.first().unwrap_or(&"").to_string(),
                expected: POLICY_HEADER.to_string(),
            });
        }
        if lines.len() != 7 {
            return Err(Error::schema(lines.len(), "policy file must have 7 lines"));
        }
        let n: usize = lines[1]
            .strip_prefix("n ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::schema(2, "missing `n`"))?;
        let mut rows = Vec::new();
        for (k, name) in ["termination", "evidence", "location_x", "location_y", "log_sigma"]
            .iter()
            .enumerate()
        {
            let mut toks = lines[k + 2].split_whitespace();
            if toks.next() != Some(name) {
                return Err(Error::schema(k + 3, format!("expected `{name}`")));
            }
            let toks: Vec<String> = toks.map(str::to_string).collect();
            rows.extend(parse_reals(&toks, k + 3)?);
        }
        Self::from_flat(&rows, n)
    }
}

/// One region as seen by the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRegion {
    pub id: RegionId,
    pub rect: Rect,
    pub features: Vec<f64>,
    /// Confidence `f_c` of the region.
    pub confidence: f64,
}

/// An image prepared for search: regions with their confidences and the
/// image label used by the reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: usize,
    pub label: i8,
    pub regions: Vec<SceneRegion>,
}

impl Scene {
    pub fn from_image(img: &SyntheticImage, class: usize, model: &LinearModel) -> Result<Self> {
        let regions = img
            .regions
            .iter()
            .map(|r| {
                Ok(SceneRegion {
                    id: r.id,
                    rect: r.rect,
                    features: r.features.clone(),
                    confidence: model.decision(&r.features)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            image: img.id,
            label: img.label(class),
            regions,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.features.len())
    }

    /// Local indices of regions containing `point`.
    pub fn regions_at(&self, point: [f64; 2]) -> impl Iterator<Item = usize> + '_ {
        self.regions
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.rect.contains_point(point))
            .map(|(i, _)| i)
    }

    /// Initial state: everything visible from the canvas centre.
    pub fn initial_state(&self) -> AgentState {
        let mut s = AgentState::empty(self.len());
        for i in self.regions_at(CANVAS_CENTER) {
            s.observe(i);
        }
        s
    }
}

/// Observed set `H`, used-evidence set `S` and step counter.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AgentState {
    observed: Vec<bool>,
    used: Vec<bool>,
    observed_count: usize,
    pub t: usize,
}

impl AgentState {
    pub fn empty(n: usize) -> Self {
        AgentState {
            observed: vec![false; n],
            used: vec![false; n],
            observed_count: 0,
            t: 0,
        }
    }

    pub fn from_sets(n: usize, observed: &[usize], used: &[usize], t: usize) -> Self {
        let mut s = AgentState::empty(n);
        for &i in observed {
            s.observe(i);
        }
        for &i in used {
            s.used[i] = true;
        }
        s.t = t;
        s
    }

    fn observe(&mut self, i: usize) {
        if !self.observed[i] {
            self.observed[i] = true;
            self.observed_count += 1;
        }
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn is_used(&self, i: usize) -> bool {
        self.used[i]
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed.iter().enumerate().filter(|(_, o)| **o).map(|(i, _)| i)
    }

    pub fn used(&self) -> impl Iterator<Item = usize> + '_ {
        self.used.iter().enumerate().filter(|(_, u)| **u).map(|(i, _)| i)
    }

    /// `H \ S`, in index order.
    pub fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.observed.len()).filter(|&i| self.observed[i] && !self.used[i])
    }

    /// Bitmask of `H` (scenes up to 64 regions).
    pub fn observed_mask(&self) -> u64 {
        self.observed().fold(0u64, |m, i| m | (1 << i))
    }

    pub fn used_mask(&self) -> u64 {
        self.used().fold(0u64, |m, i| m | (1 << i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// Stop and predict `region` with `confidence`. `forced` marks stops
    /// imposed by the step cap or an exhausted candidate set, which carry no
    /// sampled decision.
    Terminate {
        region: usize,
        confidence: f64,
        forced: bool,
    },
    Saccade {
        evidence: usize,
        location: [f64; 2],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Penalty per saccade.
    pub alpha: f64,
    pub max_steps: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha: 0.01,
            max_steps: 20,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Highest-confidence observed region, lowest index on ties.
pub fn best_observed(state: &AgentState, scene: &Scene) -> Option<(usize, f64)> {
    state.observed().fold(None, |best, i| {
        let c = scene.regions[i].confidence;
        match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((i, c)),
        }
    })
}

/// `[max_{r∈H} f_c(r), t, |H|/|R|, 1]`.
pub fn termination_features(state: &AgentState, scene: &Scene) -> Result<[f64; 4]> {
    let (_, c) = best_observed(state, scene).ok_or(Error::EmptyHistory)?;
    Ok([
        c,
        state.t as f64,
        state.observed_count() as f64 / scene.len() as f64,
        1.0,
    ])
}

pub fn termination_logit(state: &AgentState, scene: &Scene, theta: &PolicyParams) -> Result<f64> {
    Ok(dot(&theta.termination, &termination_features(state, scene)?))
}

pub fn termination_prob(state: &AgentState, scene: &Scene, theta: &PolicyParams) -> Result<f64> {
    Ok(sigmoid(termination_logit(state, scene, theta)?))
}

/// Softmax of `θ_e·g(r)` over `H \ S`, as `(local index, probability)`.
pub fn evidence_distribution(
    state: &AgentState,
    scene: &Scene,
    theta: &PolicyParams,
) -> Result<Vec<(usize, f64)>> {
    let logits: Vec<(usize, f64)> = state
        .candidates()
        .map(|i| (i, dot(&theta.evidence, &scene.regions[i].features)))
        .collect();
    if logits.is_empty() {
        return Err(Error::NoEvidence);
    }
    let max = logits.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|(_, l)| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(logits
        .iter()
        .zip(weights)
        .map(|((i, _), w)| (*i, w / total))
        .collect())
}

/// Box-normalized location prediction: centre plus per-axis offsets
/// `θ_p·g` in units of the half extent.
pub fn location_mean(rect: &Rect, features: &[f64], theta: &PolicyParams) -> [f64; 2] {
    let [cx, cy] = rect.center();
    let [hx, hy] = rect.half_extent();
    let ux = dot(&theta.location_x, features);
    let uy = dot(&theta.location_y, features);
    [cx + ux * hx, cy + uy * hy]
}

pub fn location_log_density(z: [f64; 2], mean: [f64; 2], log_sigma: [f64; 2]) -> f64 {
    (0..2)
        .map(|k| {
            let s = log_sigma[k].exp();
            let u = (z[k] - mean[k]) / s;
            -0.5 * u * u - log_sigma[k] - 0.5 * LN_2PI
        })
        .sum()
}

/// Samples one action. Returns the action and the log-probability of the
/// factors that were actually sampled (zero for a forced stop).
pub fn sample_step<R: Rng + ?Sized>(
    state: &AgentState,
    theta: &PolicyParams,
    scene: &Scene,
    rng: &mut R,
) -> Result<(Action, f64)> {
    let (best, confidence) = best_observed(state, scene).ok_or(Error::EmptyHistory)?;
    if state.candidates().next().is_none() {
        return Ok((
            Action::Terminate {
                region: best,
                confidence,
                forced: true,
            },
            0.0,
        ));
    }
    let logit = termination_logit(state, scene, theta)?;
    if rng.gen::<f64>() < sigmoid(logit) {
        return Ok((
            Action::Terminate {
                region: best,
                confidence,
                forced: false,
            },
            -softplus(-logit),
        ));
    }
    let dist = evidence_distribution(state, scene, theta)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = dist[dist.len() - 1];
    for &(i, p) in &dist {
        acc += p;
        if u < acc {
            pick = (i, p);
            break;
        }
    }
    let region = &scene.regions[pick.0];
    let mean = location_mean(&region.rect, &region.features, theta);
    let sigma = theta.sigma();
    let zx: f64 = StandardNormal.sample(rng);
    let zy: f64 = StandardNormal.sample(rng);
    let z = [mean[0] + sigma[0] * zx, mean[1] + sigma[1] * zy];
    let log_prob = -softplus(logit) + pick.1.ln() + location_log_density(z, mean, theta.log_sigma);
    Ok((
        Action::Saccade {
            evidence: pick.0,
            location: z,
        },
        log_prob,
    ))
}

/// Log-probability of `action` at `state` under `theta`, recomputed from
/// scratch (forced stops contribute zero).
pub fn action_log_prob(
    state: &AgentState,
    action: &Action,
    theta: &PolicyParams,
    scene: &Scene,
) -> Result<f64> {
    match action {
        Action::Terminate { forced: true, .. } => Ok(0.0),
        Action::Terminate { forced: false, .. } => {
            Ok(-softplus(-termination_logit(state, scene, theta)?))
        }
        Action::Saccade { evidence, location } => {
            let logit = termination_logit(state, scene, theta)?;
            let dist = evidence_distribution(state, scene, theta)?;
            let p = dist
                .iter()
                .find(|(i, _)| i == evidence)
                .map(|(_, p)| *p)
                .ok_or(Error::NoEvidence)?;
            let r = &scene.regions[*evidence];
            let mean = location_mean(&r.rect, &r.features, theta);
            Ok(-softplus(logit) + p.ln() + location_log_density(*location, mean, theta.log_sigma))
        }
    }
}

/// Gradient of [`action_log_prob`] with respect to the flattened
/// parameters, accumulated into `grad` scaled by `weight`.
pub fn accumulate_log_prob_gradient(
    state: &AgentState,
    action: &Action,
    theta: &PolicyParams,
    scene: &Scene,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    let n = theta.feature_dim();
    let v = match action {
        Action::Terminate { forced: true, .. } => return Ok(()),
        _ => termination_features(state, scene)?,
    };
    let p_stop = sigmoid(dot(&theta.termination, &v));
    match action {
        Action::Terminate { .. } => {
            // d/dθ log σ(θ·v) = (1 − σ) v
            for k in 0..4 {
                grad[k] += weight * (1.0 - p_stop) * v[k];
            }
        }
        Action::Saccade { evidence, location } => {
            // d/dθ log(1 − σ(θ·v)) = −σ v
            for k in 0..4 {
                grad[k] -= weight * p_stop * v[k];
            }
            let dist = evidence_distribution(state, scene, theta)?;
            let ev = &mut grad[4..4 + n];
            for (k, g) in scene.regions[*evidence].features.iter().enumerate() {
                ev[k] += weight * g;
            }
            for (i, p) in dist {
                for (k, g) in scene.regions[i].features.iter().enumerate() {
                    ev[k] -= weight * p * g;
                }
            }
            let r = &scene.regions[*evidence];
            let mean = location_mean(&r.rect, &r.features, theta);
            let half = r.rect.half_extent();
            for axis in 0..2 {
                let s = theta.log_sigma[axis].exp();
                let u = (location[axis] - mean[axis]) / s;
                // d/dμ = u/σ, dμ/dθ_p = h·g
                let dmean = weight * u / s * half[axis];
                let block = &mut grad[4 + n * (1 + axis)..4 + n * (2 + axis)];
                for (k, g) in r.features.iter().enumerate() {
                    block[k] += dmean * g;
                }
                grad[4 + 3 * n + axis] += weight * (u * u - 1.0);
            }
        }
    }
    Ok(())
}

/// State transition: every region containing the fixation point becomes
/// observed and the evidence region is marked used.
pub fn observe(state: &AgentState, evidence: usize, location: [f64; 2], scene: &Scene) -> AgentState {
    let mut next = state.clone();
    for i in scene.regions_at(location) {
        next.observe(i);
    }
    next.used[evidence] = true;
    next.t += 1;
    next
}

pub fn reward(terminate: bool, confidence: f64, label: i8, alpha: f64) -> f64 {
    if !terminate {
        -alpha
    } else if label > 0 {
        confidence.min(1.0)
    } else {
        confidence.max(-1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub state: AgentState,
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub image: usize,
    pub label: i8,
    pub steps: Vec<EpisodeStep>,
    pub confidence: f64,
    /// Local index of the predicted region.
    pub prediction: usize,
    pub initial_observed: usize,
    pub evaluated: usize,
    pub total_regions: usize,
    /// Regions observed by the end of the episode.
    pub observed: Vec<usize>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    pub fn saccades(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn evaluated_fraction(&self) -> f64 {
        self.evaluated as f64 / self.total_regions as f64
    }

    /// Per-step action log.
    pub fn trace_text(&self, scene: &Scene) -> String {
        let mut out = String::new();
        writeln!(out, "episode image={} label={}", self.image, self.label).unwrap();
        for s in &self.steps {
            match &s.action {
                Action::Saccade { evidence, location } => writeln!(
                    out,
                    "t={} |H|={} saccade evidence={} z=({:.4}, {:.4}) logp={:.6} r={}",
                    s.state.t,
                    s.state.observed_count(),
                    scene.regions[*evidence].id,
                    location[0],
                    location[1],
                    s.log_prob,
                    s.reward
                ),
                Action::Terminate {
                    region,
                    confidence,
                    forced,
                } => writeln!(
                    out,
                    "t={} |H|={} stop{} region={} c={:.6} logp={:.6} r={}",
                    s.state.t,
                    s.state.observed_count(),
                    if *forced { " (forced)" } else { "" },
                    scene.regions[*region].id,
                    confidence,
                    s.log_prob,
                    s.reward
                ),
            }
            .unwrap();
        }
        out
    }
}

/// Runs the policy from the centre fixation until it stops.
pub fn rollout<R: Rng + ?Sized>(
    scene: &Scene,
    theta: &PolicyParams,
    config: &AgentConfig,
    rng: &mut R,
) -> Result<Episode> {
    if theta.feature_dim() != scene.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.feature_dim(),
            actual: scene.feature_dim(),
        });
    }
    let mut state = scene.initial_state();
    if state.observed_count() == 0 {
        return Err(Error::EmptyHistory);
    }
    let initial_observed = state.observed_count();
    let mut steps = Vec::new();
    loop {
        let (action, log_prob) = if state.t >= config.max_steps {
            let (region, confidence) = best_observed(&state, scene).unwrap();
            (
                Action::Terminate {
                    region,
                    confidence,
                    forced: true,
                },
                0.0,
            )
        } else {
            sample_step(&state, theta, scene, rng)?
        };
        match action {
            Action::Terminate {
                region, confidence, ..
            } => {
                let r = reward(true, confidence, scene.label, config.alpha);
                let observed: Vec<usize> = state.observed().collect();
                let evaluated = state.observed_count();
                steps.push(EpisodeStep {
                    state,
                    action,
                    log_prob,
                    reward: r,
                });
                return Ok(Episode {
                    image: scene.image,
                    label: scene.label,
                    steps,
                    confidence,
                    prediction: region,
                    initial_observed,
                    evaluated,
                    total_regions: scene.len(),
                    observed,
                });
            }
            Action::Saccade { evidence, location } => {
                let next = observe(&state, evidence, location, scene);
                steps.push(EpisodeStep {
                    state,
                    action,
                    log_prob,
                    reward: reward(false, 0.0, scene.label, config.alpha),
                });
                state = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    fn scene(rects: &[Rect], confidences: &[f64], label: i8) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        Scene {
            image: 0,
            label,
            regions: rects
                .iter()
                .zip(confidences)
                .enumerate()
                .map(|(i, (r, c))| SceneRegion {
                    id: RegionId(i),
                    rect: *r,
                    features: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    confidence: *c,
                })
                .collect(),
        }
    }

    fn three() -> Scene {
        scene(
            &[
                Rect::canvas(),
                rect(0.1, 0.1, 0.4, 0.4),
                rect(0.6, 0.6, 0.9, 0.9),
            ],
            &[-0.5, 1.5, 0.3],
            1,
        )
    }

    #[test]
    fn termination_feature_examples() {
        let s = three();
        let all = AgentState::from_sets(3, &[0, 1, 2], &[], 0);
        assert_eq!(termination_features(&all, &s).unwrap()[2], 1.0);
        let mut zero = s.clone();
        zero.regions.iter_mut().for_each(|r| r.confidence = 0.0);
        let one = AgentState::from_sets(3, &[2], &[], 4);
        assert_eq!(
            termination_features(&one, &zero).unwrap(),
            [0.0, 4.0, 1.0 / 3.0, 1.0]
        );
        assert!(matches!(
            termination_features(&AgentState::empty(3), &s),
            Err(Error::EmptyHistory)
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let obs: Vec<usize> = (0..3).filter(|_| rng.gen_bool(0.6)).collect();
            if obs.is_empty() {
                continue;
            }
            let st = AgentState::from_sets(3, &obs, &[], 1);
            let brute = obs
                .iter()
                .map(|&i| s.regions[i].confidence)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(termination_features(&st, &s).unwrap()[0], brute);
        }
    }

    #[test]
    fn termination_prob_examples() {
        let s = three();
        let st = s.initial_state();
        let mut theta = PolicyParams::zeros(3);
        assert_eq!(termination_prob(&st, &s, &theta).unwrap(), 0.5);
        theta.termination[3] = 800.0;
        assert_eq!(termination_prob(&st, &s, &theta).unwrap(), 1.0);
        theta.termination = [0.3, -0.2, 1.1, 0.05];
        let v = termination_features(&st, &s).unwrap();
        let naive = 1.0 / (1.0 + (-(0.3 * v[0] - 0.2 * v[1] + 1.1 * v[2] + 0.05 * v[3])).exp());
        let p = termination_prob(&st, &s, &theta).unwrap();
        assert!((p - naive).abs() <= 1e-12);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn evidence_distribution_examples() {
        let s = three();
        let st = AgentState::from_sets(3, &[0, 1, 2], &[], 0);
        let theta = PolicyParams::zeros(3);
        for (_, p) in evidence_distribution(&st, &s, &theta).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut two = three();
        two.regions[0].features = vec![10.0, 0.0, 0.0];
        two.regions[1].features = vec![0.0, 0.0, 0.0];
        let st = AgentState::from_sets(3, &[0, 1], &[], 0);
        let mut theta = PolicyParams::zeros(3);
        theta.evidence[0] = 1.0;
        let d = evidence_distribution(&st, &two, &theta).unwrap();
        let oracle = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((d[0].1 - oracle).abs() < 1e-15);
        assert!((d[1].1 - (1.0 - oracle)).abs() < 1e-15);

        theta.evidence = vec![700.0, -3.0, 2.0];
        two.regions[1].features = vec![1.5, 2.0, -1.0];
        let d = evidence_distribution(&st, &two, &theta).unwrap();
        assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() <= 1e-12);

        let used = AgentState::from_sets(3, &[0], &[0], 1);
        assert!(matches!(
            evidence_distribution(&used, &two, &theta),
            Err(Error::NoEvidence)
        ));
    }

    #[test]
    fn location_mean_examples() {
        let r = rect(0.2, 0.4, 0.6, 0.6);
        let g = [0.3, -1.0, 2.0];
        assert_eq!(location_mean(&r, &g, &PolicyParams::zeros(3)), r.center());

        let unit = Rect::canvas();
        let mut theta = PolicyParams::zeros(3);
        theta.location_x = vec![1.0, 0.0, 0.0];
        theta.location_y = vec![1.0, 0.0, 0.0];
        assert_eq!(location_mean(&unit, &[1.0, 0.0, 0.0], &theta), [1.0, 1.0]);

        // Affine map x -> 2x + 0.1 applied to the box maps the prediction.
        theta.location_x = vec![0.4, -0.2, 0.7];
        theta.location_y = vec![-0.1, 0.5, 0.3];
        let m = location_mean(&r, &g, &theta);
        let mapped = rect(2.0 * 0.2 + 0.1, 2.0 * 0.4 + 0.1, 2.0 * 0.6 + 0.1, 2.0 * 0.6 + 0.1);
        let mm = location_mean(&mapped, &g, &theta);
        assert!((mm[0] - (2.0 * m[0] + 0.1)).abs() < 1e-12);
        assert!((mm[1] - (2.0 * m[1] + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn observe_examples() {
        let s = three();
        let st = AgentState::from_sets(3, &[0], &[], 0);
        let next = observe(&st, 0, [1.5, 1.5], &s);
        assert_eq!(next.observed_count(), 1);
        assert!(next.is_used(0));
        assert_eq!(next.t, 1);

        let nested = scene(
            &[Rect::canvas(), rect(0.2, 0.2, 0.8, 0.8), rect(0.4, 0.4, 0.6, 0.6)],
            &[0.0; 3],
            1,
        );
        let st = AgentState::from_sets(3, &[0], &[], 0);
        let next = observe(&st, 0, [0.5, 0.5], &nested);
        assert_eq!(next.observed_count(), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let z = [rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1)];
            let next = observe(&st, 0, z, &s);
            for (i, r) in s.regions.iter().enumerate() {
                let inside = z[0] >= r.rect.x1() && z[0] <= r.rect.x2() && z[1] >= r.rect.y1() && z[1] <= r.rect.y2();
                assert_eq!(next.is_observed(i), inside || i == 0);
            }
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(false, 3.0, 1, 0.05), -0.05);
        assert_eq!(reward(true, 2.7, 1, 0.05), 1.0);
        assert_eq!(reward(true, -3.0, -1, 0.05), -1.0);
        assert_eq!(reward(true, 0.4, -1, 0.05), 0.4);
        assert_eq!(reward(true, -2.0, 1, 0.05), -2.0);
    }

    #[test]
    fn saturated_termination_stops_immediately() {
        let s = three();
        let mut theta = PolicyParams::zeros(3);
        theta.termination[3] = 1e3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ep = rollout(&s, &theta, &AgentConfig::default(), &mut rng).unwrap();
            assert_eq!(ep.steps.len(), 1);
            let h0 = s.initial_state();
            assert_eq!(ep.prediction, best_observed(&h0, &s).unwrap().0);
        }
    }

    #[test]
    fn step_cap_of_zero_forces_immediate_stop() {
        let s = three();
        let theta = PolicyParams::zeros(3);
        let cfg = AgentConfig {
            alpha: 0.3,
            max_steps: 0,
        };
        let ep = rollout(&s, &theta, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(ep.steps.len(), 1);
        assert!(matches!(ep.steps[0].action, Action::Terminate { forced: true, .. }));
        assert_eq!(ep.total_reward(), reward(true, ep.confidence, 1, 0.3));
    }

    #[test]
    fn forced_evidence_path() {
        let s = three();
        let mut theta = PolicyParams::zeros(3);
        theta.termination[3] = -1e3;
        let st = AgentState::from_sets(3, &[0, 2], &[2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (a, _) = sample_step(&st, &theta, &s, &mut rng).unwrap();
            assert!(matches!(a, Action::Saccade { evidence: 0, .. }));
        }
    }

    #[test]
    fn rollout_invariants_and_log_prob_reconstruction() {
        let s = three();
        let theta = PolicyParams {
            termination: [0.5, -0.3, 0.2, -0.4],
            evidence: vec![0.2, -0.5, 1.0],
            location_x: vec![0.3, 0.1, -0.2],
            location_y: vec![-0.3, 0.4, 0.1],
            log_sigma: [-1.0, -1.2],
        };
        let cfg = AgentConfig {
            alpha: 0.1,
            max_steps: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let ep = rollout(&s, &theta, &cfg, &mut rng).unwrap();
            assert!(ep.steps.len() <= cfg.max_steps + 1);
            let mut prev = 0;
            for (k, step) in ep.steps.iter().enumerate() {
                let st = &step.state;
                assert!(st.used().all(|i| st.is_observed(i)));
                assert!(st.observed_count() >= prev);
                prev = st.observed_count();
                let is_last = k + 1 == ep.steps.len();
                assert_eq!(matches!(step.action, Action::Terminate { .. }), is_last);
                if let Action::Saccade { evidence, .. } = step.action {
                    assert!(!st.is_used(evidence));
                }
                let re = action_log_prob(st, &step.action, &theta, &s).unwrap();
                assert!((re - step.log_prob).abs() < 1e-12);
            }
            let last = &ep.steps.last().unwrap().state;
            let (best, c) = best_observed(last, &s).unwrap();
            assert_eq!((ep.prediction, ep.confidence), (best, c));
            assert!(ep.evaluated >= ep.initial_observed);
        }
    }

    #[test]
    fn policy_text_round_trip() {
        let mut theta = PolicyParams::zeros(2);
        theta.termination = [0.1, -0.2, 0.3, 1e-9];
        theta.location_y = vec![0.25, -7.5];
        theta.log_sigma = [-1.5, 0.0];
        assert_eq!(PolicyParams::from_text(&theta.to_text()).unwrap(), theta);
        assert_eq!(PolicyParams::flat_len(24), 4 + 24 + 48 + 2);
        assert!(PolicyParams::from_flat(&[0.0; 5], 2).is_err());
    }

    #[test]
    fn sampled_actions_follow_the_policy() {
        let s = three();
        let st = AgentState::from_sets(3, &[0, 1, 2], &[], 1);
        let mut theta = PolicyParams::zeros(3);
        theta.termination = [0.4, -0.1, 0.3, -0.6];
        theta.evidence = vec![0.8, -0.5, 0.2];
        theta.location_x = vec![0.3, 0.1, -0.2];
        theta.log_sigma = [-1.0, -0.5];
        let p_stop = termination_prob(&st, &s, &theta).unwrap();
        let dist = evidence_distribution(&st, &s, &theta).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut stops = 0usize;
        let mut picks = [0usize; 3];
        let mut xs = Vec::new();
        for _ in 0..n {
            match sample_step(&st, &theta, &s, &mut rng).unwrap().0 {
                Action::Terminate { .. } => stops += 1,
                Action::Saccade { evidence, location } => {
                    picks[evidence] += 1;
                    if evidence == 1 {
                        xs.push(location[0]);
                    }
                }
            }
        }
        let within = |count: usize, trials: usize, p: f64| {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            (count as f64 / trials as f64 - p).abs() <= 4.0 * se
        };
        assert!(within(stops, n, p_stop));
        let saccades = n - stops;
        for (i, p) in dist {
            assert!(within(picks[i], saccades, p), "region {i}");
        }
        let r = &s.regions[1];
        let mu = location_mean(&r.rect, &r.features, &theta)[0];
        let sigma = theta.sigma()[0];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - mu).abs() <= 4.0 * sigma / (xs.len() as f64).sqrt());
    }
}
