//! Detector training per supervision mode and exhaustive / sequential
//! evaluation on a dataset split.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout, AgentConfig, PolicyParams, Scene};
use crate::dataset::{make_bags, Dataset, Split, SupervisionMode, SyntheticImage};
use crate::error::{Error, Result};
use crate::eval::{
    classification_ap, cost_report, detection_ap, nms_per_image, CostReport, Criterion, Detection,
    MeanStd, NMS_THRESHOLD,
};
use crate::geometry::Rect;
use crate::miltrain::{cmi_svm_train, LabelAssignment, RegionTable};
use crate::miltrain::CmiConfig;
use crate::rng;
use crate::svm::{self, LinearModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub mode: SupervisionMode,
    /// Ignored in bounding-box mode.
    pub constraints: bool,
    pub c_grid: Vec<f64>,
    pub cmi: CmiConfig,
}

impl DetectorConfig {
    pub fn new(mode: SupervisionMode, constraints: bool) -> Self {
        DetectorConfig {
            mode,
            constraints,
            c_grid: vec![0.1, 1.0, 10.0],
            cmi: CmiConfig::default(),
        }
    }

    /// Short pipeline name such as `CMI-EYE` or `BB`.
    pub fn method_name(&self) -> String {
        match self.mode {
            SupervisionMode::BoundingBox => "BB".into(),
            SupervisionMode::Eye => format!("{}-EYE", if self.constraints { "CMI" } else { "MI" }),
            SupervisionMode::ImageLabel => {
                format!("{}-IL", if self.constraints { "CMI" } else { "MI" })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDetector {
    pub model: LinearModel,
    pub c: f64,
    /// Validation detection AP per grid value.
    pub grid: Vec<(f64, f64)>,
    pub assignment: Option<LabelAssignment>,
}

/// Fits one detector on `images` for `class` with a given C.
pub fn fit_detector(
    ds: &Dataset,
    table: &RegionTable,
    images: &[&SyntheticImage],
    class: usize,
    config: &DetectorConfig,
    c: f64,
) -> Result<(LinearModel, Option<LabelAssignment>)> {
    let sup = make_bags(images.iter().copied(), class, config.mode);
    let mut svm_cfg = config.cmi.svm.clone();
    svm_cfg.c = c;
    match &sup.instance_labels {
        Some(labels) => {
            let examples: Vec<(&[f64], f64)> = labels
                .iter()
                .map(|(id, y)| (ds.features(*id), *y as f64))
                .collect();
            Ok((svm::train(&examples, &svm_cfg)?, None))
        }
        None => {
            let cmi = CmiConfig {
                constraints: config.constraints,
                svm: svm_cfg,
                ..config.cmi.clone()
            };
            let result = cmi_svm_train(&sup.bags, table, &cmi)?;
            Ok((result.model, Some(result.assignment)))
        }
    }
}

/// Picks C on the validation split by detection AP (IoU criterion, first
/// best on ties) and refits on train+val.
pub fn train_detector(ds: &Dataset, class: usize, config: &DetectorConfig) -> Result<TrainedDetector> {
    if config.c_grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    let table = RegionTable::from_dataset(ds);
    let train: Vec<&SyntheticImage> = ds.split(Split::Train).collect();
    let val: Vec<&SyntheticImage> = ds.split(Split::Val).collect();
    let mut grid = Vec::new();
    for &c in &config.c_grid {
        let (model, _) = fit_detector(ds, &table, &train, class, config, c)?;
        let ap = exhaustive_eval(&val, class, &model)?.detection_ap_iou;
        grid.push((c, ap));
    }
    let (c, _) = grid
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, x| match best {
            Some(b) if b.1 >= x.1 => Some(b),
            _ => Some(x),
        })
        .unwrap();
    let trainval: Vec<&SyntheticImage> = ds.splits(&[Split::Train, Split::Val]).collect();
    let (model, assignment) = fit_detector(ds, &table, &trainval, class, config, c)?;
    Ok(TrainedDetector {
        model,
        c,
        grid,
        assignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub detection_ap_iou: f64,
    pub detection_ap_inclusion: f64,
    pub classification_ap: f64,
}

fn ground_truth(images: &[&SyntheticImage], class: usize) -> BTreeMap<usize, Vec<Rect>> {
    images
        .iter()
        .filter(|img| !img.targets(class).is_empty())
        .map(|img| (img.id, img.targets(class).to_vec()))
        .collect()
}

fn metrics(
    images: &[&SyntheticImage],
    class: usize,
    detections: &[Detection],
    scores: &[(usize, f64, bool)],
) -> Result<DetectionMetrics> {
    let kept = nms_per_image(detections, NMS_THRESHOLD);
    let gt = ground_truth(images, class);
    Ok(DetectionMetrics {
        detection_ap_iou: detection_ap(&kept, &gt, Criterion::Iou(0.5))?,
        detection_ap_inclusion: detection_ap(&kept, &gt, Criterion::Inclusion(0.5))?,
        classification_ap: classification_ap(scores)?,
    })
}

/// Scores every region, applies NMS and computes the three AP metrics.
pub fn exhaustive_eval(
    images: &[&SyntheticImage],
    class: usize,
    model: &LinearModel,
) -> Result<DetectionMetrics> {
    let mut detections = Vec::new();
    let mut scores = Vec::new();
    for img in images {
        let mut best = f64::NEG_INFINITY;
        for r in &img.regions {
            let c = model.decision(&r.features)?;
            best = best.max(c);
            detections.push(Detection {
                image: img.id,
                rect: r.rect,
                confidence: c,
            });
        }
        scores.push((img.id, best, img.label(class) > 0));
    }
    metrics(images, class, &detections, &scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialReport {
    pub detection_ap_iou: MeanStd,
    pub detection_ap_inclusion: MeanStd,
    pub classification_ap: MeanStd,
    pub evaluated_fraction: MeanStd,
    pub per_repeat: Vec<(DetectionMetrics, CostReport)>,
}

/// Rolls the policy out once per image per repeat. Detections are the
/// observed regions (NMS-filtered); the image score is the confidence the
/// agent stops with.
pub fn sequential_eval(
    images: &[&SyntheticImage],
    class: usize,
    model: &LinearModel,
    policy: &PolicyParams,
    agent: &AgentConfig,
    repeats: usize,
    seed: u64,
) -> Result<SequentialReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let scenes: Vec<Scene> = images
        .iter()
        .map(|img| Scene::from_image(img, class, model))
        .collect::<Result<_>>()?;
    let mut per_repeat = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let episodes = scenes
            .par_iter()
            .map(|scene| {
                let mut rng = rng::stream(seed, &[rep as u64, scene.image as u64]);
                rollout(scene, policy, agent, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut detections = Vec::new();
        let mut scores = Vec::new();
        let mut costs = Vec::new();
        for (scene, ep) in scenes.iter().zip(&episodes) {
            for &i in &ep.observed {
                let r = &scene.regions[i];
                detections.push(Detection {
                    image: scene.image,
                    rect: r.rect,
                    confidence: r.confidence,
                });
            }
            scores.push((scene.image, ep.confidence, scene.label > 0));
            costs.push((ep.initial_observed, ep.evaluated, ep.total_regions));
        }
        per_repeat.push((
            metrics(images, class, &detections, &scores)?,
            cost_report(&costs, None),
        ));
    }
    let col = |f: &dyn Fn(&(DetectionMetrics, CostReport)) -> f64| {
        MeanStd::of(&per_repeat.iter().map(f).collect::<Vec<_>>())
    };
    Ok(SequentialReport {
        detection_ap_iou: col(&|r| r.0.detection_ap_iou),
        detection_ap_inclusion: col(&|r| r.0.detection_ap_inclusion),
        classification_ap: col(&|r| r.0.classification_ap),
        evaluated_fraction: col(&|r| r.1.evaluated_fraction.mean),
        per_repeat,
    })
}

/// Scenes for policy training and validation.
pub fn scenes(images: &[&SyntheticImage], class: usize, model: &LinearModel) -> Result<Vec<Scene>> {
    images
        .iter()
        .map(|img| Scene::from_image(img, class, model))
        .collect()
}
