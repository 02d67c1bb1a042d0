//! Constrained multiple-instance SVM training.
//!
//! Alternates an SVM fit on the currently labeled instances with a greedy
//! per-bag relabeling. With constraints enabled, every region chosen as a
//! positive forces its fringe (IoU ≥ `t_f`) to label 0 and its remaining
//! subregions (containment ≥ `t_s`) to −1. With constraints disabled the
//! relabeling reduces to miSVM: positive-scoring instances are +1, the
//! rest −1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{containment_fraction, iou, Rect, RegionId};
use crate::rng;
use crate::svm::{self, dot, LinearModel, SvmConfig};

/// Flat table of regions: geometry, owning image and features.
#[derive(Clone, Debug, Default)]
pub struct RegionTable {
    rects: Vec<Rect>,
    images: Vec<usize>,
    features: Vec<Vec<f64>>,
    pools: BTreeMap<usize, Vec<(RegionId, Rect)>>,
}

impl RegionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut table = RegionTable::new();
        for img in &ds.images {
            for r in &img.regions {
                let id = table.push(img.id, r.rect, r.features.clone());
                debug_assert_eq!(id, r.id);
            }
        }
        table
    }

    pub fn push(&mut self, image: usize, rect: Rect, features: Vec<f64>) -> RegionId {
        let id = RegionId(self.rects.len());
        self.rects.push(rect);
        self.images.push(image);
        self.features.push(features);
        self.pools.entry(image).or_default().push((id, rect));
        id
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn rect(&self, id: RegionId) -> &Rect {
        &self.rects[id.0]
    }

    pub fn features(&self, id: RegionId) -> &[f64] {
        &self.features[id.0]
    }

    pub fn image_of(&self, id: RegionId) -> usize {
        self.images[id.0]
    }

    /// All regions of the image owning `id`.
    pub fn pool_of(&self, id: RegionId) -> &[(RegionId, Rect)] {
        &self.pools[&self.images[id.0]]
    }

    fn contains(&self, id: RegionId) -> bool {
        id.0 < self.rects.len()
    }
}

/// Instance labels in {−1, 0, +1}, indexed by region id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub labels: Vec<i8>,
}

impl LabelAssignment {
    pub fn zeros(n: usize) -> Self {
        LabelAssignment { labels: vec![0; n] }
    }

    pub fn get(&self, id: RegionId) -> i8 {
        self.labels[id.0]
    }

    pub fn positives(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0)
            .map(|(i, _)| RegionId(i))
    }

    /// One `id label` line per labeled (non-zero) region.
    pub fn to_text(&self) -> String {
        let mut out = String::from("weaksearch-assignment v1\n");
        writeln!(out, "regions {}", self.labels.len()).unwrap();
        for (i, y) in self.labels.iter().enumerate() {
            if *y != 0 {
                writeln!(out, "{i} {y}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("weaksearch-assignment v1") {
            return Err(Error::schema(1, "bad assignment header"));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("regions "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::schema(2, "missing region count"))?;
        let mut labels = vec![0i8; n];
        for (k, line) in lines.enumerate() {
            let mut toks = line.split_whitespace();
            let parsed = (|| {
                let id: usize = toks.next()?.parse().ok()?;
                let y: i8 = toks.next()?.parse().ok()?;
                (id < n && matches!(y, -1 | 1)).then_some((id, y))
            })();
            let (id, y) = parsed.ok_or_else(|| Error::schema(k + 3, "bad label line"))?;
            labels[id] = y;
        }
        Ok(LabelAssignment { labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiConfig {
    pub t_s: f64,
    pub t_f: f64,
    pub restarts: usize,
    /// Range of the initial positive-label ratio.
    pub init_ratio: (f64, f64),
    pub max_iterations: usize,
    pub svm: SvmConfig,
    pub constraints: bool,
    /// Keep every intermediate assignment in the restart traces.
    pub record_trajectory: bool,
    pub seed: u64,
}

impl Default for CmiConfig {
    fn default() -> Self {
        CmiConfig {
            t_s: 0.2,
            t_f: 0.2,
            restarts: 30,
            init_ratio: (0.1, 1.0),
            max_iterations: 50,
            svm: SvmConfig::default(),
            constraints: true,
            record_trajectory: false,
            seed: 0,
        }
    }
}

impl CmiConfig {
    pub fn validate(&self) -> Result<()> {
        // Thresholds above 1 are allowed: they empty the region sets.
        if !(self.t_s > 0.0 && self.t_f > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.restarts == 0 || self.max_iterations == 0 {
            return Err(Error::Config("restarts and iterations must be >= 1".into()));
        }
        let (lo, hi) = self.init_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("init ratio range must lie in (0,1]".into()));
        }
        self.svm.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestartTrace {
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Constrained objective after each SVM fit.
    pub objective_trace: Vec<f64>,
    /// Initial assignment followed by the assignment after every
    /// relabeling step, when recording is enabled.
    pub trajectory: Option<Vec<LabelAssignment>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmiResult {
    pub model: LinearModel,
    pub assignment: LabelAssignment,
    pub restart: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub traces: Vec<RestartTrace>,
}

/// `½‖w‖² + C Σ_{yᵢ≠0} max(0, 1 − yᵢ(w·gᵢ + b))`.
pub fn eq4_objective(
    model: &LinearModel,
    assignment: &LabelAssignment,
    table: &RegionTable,
    c: f64,
) -> f64 {
    let hinge: f64 = assignment
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != 0)
        .map(|(i, &y)| (1.0 - y as f64 * model.score(table.features(RegionId(i)))).max(0.0))
        .sum();
    0.5 * dot(&model.w, &model.w) + c * hinge
}

pub fn cmi_svm_train(bags: &[Bag], table: &RegionTable, config: &CmiConfig) -> Result<CmiResult> {
    config.validate()?;
    let problem = Problem::new(bags, table, config)?;
    let runs: Vec<Result<RestartRun>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| problem.run_restart(r))
        .collect();
    let mut best: Option<RestartRun> = None;
    let mut traces = Vec::with_capacity(runs.len());
    for run in runs {
        let run = run?;
        traces.push(run.trace.clone());
        if best.as_ref().map_or(true, |b| run.trace.objective < b.trace.objective) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(CmiResult {
        model: best.model,
        assignment: best.assignment,
        restart: best.trace.restart,
        iterations: best.trace.iterations,
        converged: best.trace.converged,
        objective: best.trace.objective,
        traces,
    })
}

/// Unconstrained miSVM: labels restricted to {−1, +1}, no fringe or
/// subregion handling.
pub fn mi_svm_train(bags: &[Bag], table: &RegionTable, config: &CmiConfig) -> Result<CmiResult> {
    let config = CmiConfig {
        constraints: false,
        ..config.clone()
    };
    cmi_svm_train(bags, table, &config)
}

struct RestartRun {
    model: LinearModel,
    assignment: LabelAssignment,
    trace: RestartTrace,
}

/// Constraint sets of one positive-bag region.
#[derive(Default)]
struct Topology {
    fringe: Vec<RegionId>,
    /// Subregions outside the fringe; these are forced negative.
    inner: Vec<RegionId>,
}

struct Problem<'a> {
    table: &'a RegionTable,
    config: &'a CmiConfig,
    positive: Vec<&'a Bag>,
    negative_members: Vec<RegionId>,
    locked_negative: Vec<bool>,
    topology: BTreeMap<RegionId, Topology>,
}

impl<'a> Problem<'a> {
    fn new(bags: &'a [Bag], table: &'a RegionTable, config: &'a CmiConfig) -> Result<Self> {
        for bag in bags {
            if let Some(id) = bag.regions.iter().find(|id| !table.contains(**id)) {
                return Err(Error::UnknownRegion(id.0));
            }
        }
        let positive: Vec<&Bag> = bags.iter().filter(|b| b.label > 0).collect();
        if positive.is_empty() {
            return Err(Error::NoPositiveBags);
        }
        if !bags.iter().any(|b| b.label < 0) {
            return Err(Error::NoNegativeBags);
        }
        let mut locked_negative = vec![false; table.len()];
        let mut negative_members = Vec::new();
        for bag in bags.iter().filter(|b| b.label < 0) {
            for &id in &bag.regions {
                if !locked_negative[id.0] {
                    locked_negative[id.0] = true;
                    negative_members.push(id);
                }
            }
        }
        negative_members.sort();
        let mut topology = BTreeMap::new();
        if config.constraints {
            for bag in &positive {
                for &id in &bag.regions {
                    topology.entry(id).or_insert_with(|| {
                        let rect = table.rect(id);
                        let mut t = Topology::default();
                        for (other, r) in table.pool_of(id) {
                            if *other == id {
                                continue;
                            }
                            if iou(rect, r) >= config.t_f {
                                t.fringe.push(*other);
                            } else if containment_fraction(rect, r) >= config.t_s {
                                t.inner.push(*other);
                            }
                        }
                        t
                    });
                }
            }
        }
        Ok(Problem {
            table,
            config,
            positive,
            negative_members,
            locked_negative,
            topology,
        })
    }

    fn initial_assignment(&self, rng: &mut impl Rng) -> LabelAssignment {
        let mut y = LabelAssignment::zeros(self.table.len());
        let (lo, hi) = self.config.init_ratio;
        let ratio = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut members = Vec::new();
        for bag in &self.positive {
            for &id in &bag.regions {
                if !self.locked_negative[id.0] {
                    members.push(id);
                    y.labels[id.0] = if rng.gen_bool(ratio) { 1 } else { -1 };
                }
            }
        }
        for &id in &self.negative_members {
            y.labels[id.0] = -1;
        }
        if !y.labels.iter().any(|&v| v > 0) {
            if let Some(id) = members.choose(rng) {
                y.labels[id.0] = 1;
            }
        }
        y
    }

    fn fit(&self, y: &LabelAssignment) -> Result<LinearModel> {
        let examples: Vec<(&[f64], f64)> = y
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, &v)| (self.table.features(RegionId(i)), v as f64))
            .collect();
        svm::train(&examples, &self.config.svm)
    }

    fn run_restart(&self, restart: usize) -> Result<RestartRun> {
        let mut rng = rng::stream(self.config.seed, &[restart as u64]);
        let mut y = self.initial_assignment(&mut rng);
        let mut trajectory = self.config.record_trajectory.then(|| vec![y.clone()]);
        let mut objective_trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut model = self.fit(&y)?;
        objective_trace.push(eq4_objective(&model, &y, self.table, self.config.svm.c));
        while iterations < self.config.max_iterations {
            iterations += 1;
            let next = self.relabel(&model)?;
            if let Some(t) = trajectory.as_mut() {
                t.push(next.clone());
            }
            if next == y {
                converged = true;
                break;
            }
            y = next;
            model = self.fit(&y)?;
            objective_trace.push(eq4_objective(&model, &y, self.table, self.config.svm.c));
        }
        let objective = *objective_trace.last().unwrap();
        Ok(RestartRun {
            model,
            assignment: y,
            trace: RestartTrace {
                restart,
                iterations,
                converged,
                objective,
                objective_trace,
                trajectory,
            },
        })
    }

    fn topology(&self, id: RegionId) -> Option<&Topology> {
        self.topology.get(&id)
    }

    /// Whether `id` may become positive given the claims of the positives
    /// kept so far.
    fn feasible(&self, id: RegionId, claims: &[Option<i8>]) -> bool {
        if self.locked_negative[id.0] || claims[id.0].is_some_and(|c| c != 1) {
            return false;
        }
        let Some(t) = self.topology(id) else {
            return true;
        };
        let ok = |k: &RegionId, want: i8| match claims[k.0] {
            Some(c) => c == want,
            None => !(self.locked_negative[k.0] && want != -1),
        };
        t.fringe.iter().all(|k| ok(k, 0)) && t.inner.iter().all(|k| ok(k, -1))
    }

    fn claim(&self, id: RegionId, claims: &mut [Option<i8>], y: &mut LabelAssignment) {
        claims[id.0] = Some(1);
        y.labels[id.0] = 1;
        if let Some(t) = self.topology(id) {
            for k in &t.inner {
                claims[k.0] = Some(-1);
                y.labels[k.0] = -1;
            }
            for k in &t.fringe {
                claims[k.0] = Some(0);
                y.labels[k.0] = 0;
            }
        }
    }

    fn relabel(&self, model: &LinearModel) -> Result<LabelAssignment> {
        let n = self.table.len();
        let scores: Vec<f64> = (0..n)
            .map(|i| model.score(self.table.features(RegionId(i))))
            .collect();
        let better = |a: RegionId, b: RegionId| {
            // Higher score first, lowest id on ties.
            scores[b.0].total_cmp(&scores[a.0]).then(a.cmp(&b))
        };
        let mut y = LabelAssignment::zeros(n);
        for &id in &self.negative_members {
            y.labels[id.0] = -1;
        }
        let mut claims: Vec<Option<i8>> = vec![None; n];
        let mut removed = vec![false; n];
        let else_label = if self.config.constraints { 0 } else { -1 };

        for bag in &self.positive {
            let mut open: Vec<RegionId> = bag
                .regions
                .iter()
                .copied()
                .filter(|id| !self.locked_negative[id.0])
                .collect();
            open.sort_by(|a, b| better(*a, *b));
            for id in &open {
                removed[id.0] = false;
            }
            let mut selected = Vec::new();
            for &k in &open {
                if removed[k.0] {
                    continue;
                }
                removed[k.0] = true;
                if scores[k.0] > 0.0 {
                    y.labels[k.0] = 1;
                    selected.push(k);
                    if let Some(t) = self.topology(k) {
                        for i in &t.inner {
                            if !self.locked_negative[i.0] {
                                y.labels[i.0] = -1;
                            }
                            removed[i.0] = true;
                        }
                        for i in &t.fringe {
                            if !self.locked_negative[i.0] {
                                y.labels[i.0] = 0;
                            }
                            removed[i.0] = true;
                        }
                    }
                } else {
                    y.labels[k.0] = else_label;
                }
            }

            // Later positives overwrite the sets of earlier ones; earlier
            // positives whose constraints were overwritten are demoted.
            let mut kept = 0;
            for &p in selected.iter().rev() {
                if y.labels[p.0] == 1 && self.feasible(p, &claims) {
                    self.claim(p, &mut claims, &mut y);
                    kept += 1;
                } else if claims[p.0].is_none() {
                    y.labels[p.0] = 0;
                }
            }

            if kept == 0 {
                let fallback = open
                    .iter()
                    .copied()
                    .find(|&k| self.feasible(k, &claims))
                    .ok_or(Error::Infeasible { bag: bag.id })?;
                self.claim(fallback, &mut claims, &mut y);
            }
        }
        Ok(y)
    }
}

/// One violated constraint found by [`constraint_violations`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// (4.1) label outside {−1, 0, +1}.
    Range(RegionId),
    /// (4.2) a fringe region of a positive is not 0.
    Fringe { positive: RegionId, region: RegionId },
    /// (4.3) a non-fringe subregion of a positive is not −1.
    Subregion { positive: RegionId, region: RegionId },
    /// (4.5) positive bag without a positive instance.
    EmptyPositiveBag(usize),
    /// (4.6) negative-bag instance not labeled −1.
    NegativeBag { bag: usize, region: RegionId },
}

/// Exhaustive check of the constraint set against an assignment, computing
/// the region sets from scratch over each image's full region pool.
pub fn constraint_violations(
    assignment: &LabelAssignment,
    bags: &[Bag],
    table: &RegionTable,
    t_s: f64,
    t_f: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, &y) in assignment.labels.iter().enumerate() {
        if !matches!(y, -1..=1) {
            out.push(Violation::Range(RegionId(i)));
        }
    }
    for p in assignment.positives() {
        let rect = table.rect(p);
        for (k, r) in table.pool_of(p) {
            if *k == p {
                continue;
            }
            let in_fringe = iou(rect, r) >= t_f;
            let in_sub = containment_fraction(rect, r) >= t_s;
            let y = assignment.get(*k);
            if in_fringe && y != 0 {
                out.push(Violation::Fringe {
                    positive: p,
                    region: *k,
                });
            } else if in_sub && !in_fringe && y != -1 {
                out.push(Violation::Subregion {
                    positive: p,
                    region: *k,
                });
            }
        }
    }
    for bag in bags {
        if bag.label > 0 && !bag.regions.iter().any(|id| assignment.get(*id) == 1) {
            out.push(Violation::EmptyPositiveBag(bag.id));
        }
        if bag.label < 0 {
            for id in &bag.regions {
                if assignment.get(*id) != -1 {
                    out.push(Violation::NegativeBag {
                        bag: bag.id,
                        region: *id,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect::new(x1, y1, x2, y2).unwrap()
    }

    fn quick() -> CmiConfig {
        CmiConfig {
            restarts: 3,
            ..CmiConfig::default()
        }
    }

    #[test]
    fn minimal_separable_instance() {
        let mut table = RegionTable::new();
        let a = table.push(0, rect(0.1, 0.1, 0.5, 0.5), vec![2.0, 1.0]);
        let b = table.push(1, rect(0.1, 0.1, 0.5, 0.5), vec![-2.0, 1.0]);
        let bags = vec![
            Bag {
                id: 0,
                image: 0,
                regions: vec![a],
                label: 1,
            },
            Bag {
                id: 1,
                image: 1,
                regions: vec![b],
                label: -1,
            },
        ];
        for train in [cmi_svm_train, mi_svm_train] {
            let res = train(&bags, &table, &quick()).unwrap();
            assert_eq!(res.assignment.get(a), 1);
            assert_eq!(res.assignment.get(b), -1);
            assert!(res.model.score(table.features(a)) > 0.0);
            assert!(res.model.score(table.features(b)) < 0.0);
        }
    }

    #[test]
    fn bag_errors() {
        let mut table = RegionTable::new();
        let a = table.push(0, rect(0.1, 0.1, 0.5, 0.5), vec![1.0]);
        let pos = Bag {
            id: 0,
            image: 0,
            regions: vec![a],
            label: 1,
        };
        let neg = Bag {
            label: -1,
            ..pos.clone()
        };
        assert!(matches!(
            cmi_svm_train(&[pos.clone()], &table, &quick()),
            Err(Error::NoNegativeBags)
        ));
        assert!(matches!(
            cmi_svm_train(&[neg], &table, &quick()),
            Err(Error::NoPositiveBags)
        ));
        let ghost = Bag {
            regions: vec![RegionId(9)],
            ..pos
        };
        assert!(matches!(
            cmi_svm_train(&[ghost], &table, &quick()),
            Err(Error::UnknownRegion(9))
        ));
    }

    #[test]
    fn objective_examples() {
        let mut table = RegionTable::new();
        let mut y = LabelAssignment::zeros(0);
        for i in 0..5 {
            table.push(0, rect(0.0, 0.0, 1.0, 1.0), vec![i as f64, 1.0]);
            y.labels.push(if i % 2 == 0 { 1 } else { -1 });
        }
        let zero = LinearModel::zeros(2);
        assert_eq!(eq4_objective(&zero, &y, &table, 0.7), 0.7 * 5.0);
        let m = LinearModel {
            w: vec![0.3, -1.2],
            b: 0.1,
        };
        let unl = LabelAssignment::zeros(5);
        assert!((eq4_objective(&m, &unl, &table, 3.0) - 0.5 * (0.09 + 1.44)).abs() < 1e-15);
    }

    #[test]
    fn fallback_labels_bag_argmax_when_nothing_scores_positive() {
        // Positive bag regions look exactly like the negatives, so the SVM
        // scores them all negative; the fallback still marks one positive.
        let mut table = RegionTable::new();
        let mut bags = Vec::new();
        let mut pos = Vec::new();
        for k in 0..3 {
            pos.push(table.push(0, rect(0.1 * k as f64, 0.0, 0.1 * k as f64 + 0.05, 0.05), vec![-1.0 - k as f64, 1.0]));
        }
        bags.push(Bag {
            id: 0,
            image: 0,
            regions: pos.clone(),
            label: 1,
        });
        for j in 1..6 {
            let id = table.push(j, rect(0.0, 0.0, 0.5, 0.5), vec![-1.0 - 0.1 * j as f64, 1.0]);
            bags.push(Bag {
                id: j,
                image: j,
                regions: vec![id],
                label: -1,
            });
        }
        let cfg = CmiConfig {
            restarts: 2,
            ..CmiConfig::default()
        };
        let res = cmi_svm_train(&bags, &table, &cfg).unwrap();
        assert!(pos.iter().any(|id| res.assignment.get(*id) == 1));
        assert!(constraint_violations(&res.assignment, &bags, &table, 0.2, 0.2).is_empty());
    }

    #[test]
    fn assignment_text_round_trip() {
        let y = LabelAssignment {
            labels: vec![1, 0, -1, -1, 0, 1],
        };
        assert_eq!(LabelAssignment::from_text(&y.to_text()).unwrap(), y);
        assert!(LabelAssignment::from_text("weaksearch-assignment v1\nregions 2\n5 1\n").is_err());
    }

    #[test]
    fn objective_matches_naive_hinge_sum() {
        use rand::Rng;
        let mut rng = rng::stream(5, &[]);
        for _ in 0..50 {
            let dim = rng.gen_range(1..5);
            let n = rng.gen_range(1..12);
            let mut table = RegionTable::new();
            let mut y = LabelAssignment::zeros(0);
            for _ in 0..n {
                let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                table.push(0, rect(0.0, 0.0, 1.0, 1.0), f);
                y.labels.push(rng.gen_range(-1..=1));
            }
            let m = LinearModel {
                w: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                b: rng.gen_range(-1.0..1.0),
            };
            let c = rng.gen_range(0.01..10.0);
            let mut naive = 0.0;
            for k in 0..dim {
                naive += 0.5 * m.w[k] * m.w[k];
            }
            for i in 0..n {
                if y.labels[i] != 0 {
                    let f = table.features(RegionId(i));
                    let mut s = m.b;
                    for k in 0..dim {
                        s += m.w[k] * f[k];
                    }
                    let margin = 1.0 - y.labels[i] as f64 * s;
                    if margin > 0.0 {
                        naive += c * margin;
                    }
                }
            }
            assert!((eq4_objective(&m, &y, &table, c) - naive).abs() < 1e-12);
        }
    }

    fn benchmark() -> (crate::dataset::Dataset, Vec<Bag>, RegionTable) {
        use crate::dataset::{generate, make_bags, GeneratorConfig, Split, SupervisionMode};
        let ds = generate(&GeneratorConfig::default()).unwrap();
        let bags = make_bags(ds.split(Split::Train), 0, SupervisionMode::Eye).bags;
        let table = RegionTable::from_dataset(&ds);
        (ds, bags, table)
    }

    #[test]
    fn sub_parts_inside_selected_positives_are_negative() {
        use crate::dataset::RegionKind;
        let (ds, bags, table) = benchmark();
        let res = cmi_svm_train(&bags, &table, &quick()).unwrap();
        let mut checked = 0;
        for p in res.assignment.positives() {
            let outer = table.rect(p);
            let image = &ds.images[table.image_of(p)];
            for r in image.regions.iter().filter(|r| r.kind == RegionKind::Subpart && r.id != p) {
                if containment_fraction(outer, &r.rect) >= 0.2 && iou(outer, &r.rect) < 0.2 {
                    assert_eq!(res.assignment.get(r.id), -1, "{:?} inside {p:?}", r.id);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn unconstrained_training_selects_sub_parts() {
        use crate::dataset::RegionKind;
        let (ds, bags, table) = benchmark();
        let res = mi_svm_train(&bags, &table, &quick()).unwrap();
        let positive: Vec<&Bag> = bags.iter().filter(|b| b.label > 0).collect();
        let trapped = positive
            .iter()
            .filter(|b| {
                b.regions
                    .iter()
                    .any(|&id| res.assignment.get(id) == 1 && ds.region(id).unwrap().kind == RegionKind::Subpart)
            })
            .count();
        assert!(trapped as f64 >= 0.3 * positive.len() as f64, "{trapped}/{}", positive.len());
    }

    #[test]
    fn unconstrained_path_and_restarts_are_deterministic() {
        let (_, bags, table) = benchmark();
        let cfg = CmiConfig {
            constraints: false,
            ..quick()
        };
        let a = cmi_svm_train(&bags, &table, &cfg).unwrap();
        let b = mi_svm_train(&bags, &table, &quick()).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.model, b.model);
        assert_eq!(a.restart, b.restart);
        let c = cmi_svm_train(&bags, &table, &quick()).unwrap();
        let d = cmi_svm_train(&bags, &table, &quick()).unwrap();
        assert_eq!(c.assignment, d.assignment);
        assert_eq!(c.model, d.model);
        assert_eq!(c.restart, d.restart);
        assert_eq!(c.traces.iter().map(|t| t.objective).collect::<Vec<_>>(), d.traces.iter().map(|t| t.objective).collect::<Vec<_>>());
    }

    #[test]
    fn unconstrained_labels_stay_binary_on_bag_members() {
        let (_, bags, table) = benchmark();
        let res = mi_svm_train(&bags, &table, &quick()).unwrap();
        for bag in &bags {
            for id in &bag.regions {
                assert!(matches!(res.assignment.get(*id), -1 | 1));
            }
        }
        assert!(constraint_violations(&res.assignment, &bags, &table, 1.0, 1.0)
            .iter()
            .all(|v| !matches!(v, Violation::EmptyPositiveBag(_) | Violation::NegativeBag { .. })));
    }
}
