use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use weaksearch::dataset::{fixation_summary, generate, Dataset, Split, SupervisionMode, SyntheticImage};
use weaksearch::eval::MeanStd;
use weaksearch::pipeline::{exhaustive_eval, scenes, sequential_eval, train_detector};
use weaksearch::reinforce::train_policy;

use crate::artifact::*;
use crate::config::{self, DetectorSection, EvaluateSection, PolicySection};
use crate::CliError;

fn load_dataset(path: &Path) -> Result<(Dataset, String), CliError> {
    let hash = file_hash(path)?;
    let ds = Dataset::load(path)?;
    Ok((ds, hash))
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    out.with_file_name(name)
}

pub fn gen_data(table: toml::Table, out: &Path) -> Result<(), CliError> {
    let config = config::generator(table)?;
    let ds = generate(&config)?;
    ds.save(out)?;
    let summary = DataSummary {
        format: SUMMARY_FORMAT.into(),
        config_hash: config_hash(&config),
        dataset_hash: file_hash(out)?,
        images: ds.images.len(),
        regions: ds.region_count(),
        fixations: fixation_summary(&ds),
        config,
    };
    eprintln!(
        "generated {} images / {} regions; fixated fraction {:.3}, best overlap fixated {:.3} vs all {:.3}",
        summary.images,
        summary.regions,
        summary.fixations.fixated_fraction,
        summary.fixations.best_overlap_fixated,
        summary.fixations.best_overlap_all
    );
    write_json(&summary_path(out), &summary)
}

pub fn train_detector_cmd(table: toml::Table, data: &Path, out: &Path) -> Result<(), CliError> {
    let explicit_constraints = table.contains_key("constraints");
    let section: DetectorSection = config::resolve(table)?;
    let config = section.to_core()?;
    if config.mode == SupervisionMode::BoundingBox && explicit_constraints {
        eprintln!("warning: constraints flag is ignored in bb mode");
    }
    let (ds, dataset_hash) = load_dataset(data)?;
    let method = config.method_name();
    let mut classes = Vec::new();
    for class in 0..ds.config.classes {
        let trained = train_detector(&ds, class, &config)?;
        eprintln!(
            "{method} class {class}: C={} (validation AP per C: {:?})",
            trained.c, trained.grid
        );
        classes.push(ClassDetector {
            class,
            c: trained.c,
            grid: trained.grid,
            model: trained.model,
            assignment: trained.assignment,
        });
    }
    write_json(
        out,
        &DetectorArtifact {
            format: DETECTOR_FORMAT.into(),
            method,
            config_hash: config_hash(&section),
            config: section,
            dataset_hash,
            classes,
        },
    )
}

fn check_dataset(found: &str, expected: &str, what: &str) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::Runtime(format!(
            "{what} was built from dataset {expected}, but the dataset given hashes to {found}"
        )));
    }
    Ok(())
}

fn check_dims(ds: &Dataset, detector: &DetectorArtifact) -> Result<(), CliError> {
    for c in &detector.classes {
        if c.model.dim() != ds.dim() {
            return Err(CliError::Runtime(format!(
                "detector for class {} has dimension {}, dataset has {}",
                c.class,
                c.model.dim(),
                ds.dim()
            )));
        }
    }
    Ok(())
}

pub fn train_policy_cmd(
    table: toml::Table,
    data: &Path,
    detector_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let section: PolicySection = config::resolve(table)?;
    if section.lambda_grid.is_empty() || section.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(CliError::Usage("lambda_grid needs non-negative values".into()));
    }
    let (ds, dataset_hash) = load_dataset(data)?;
    let detector_hash = file_hash(detector_path)?;
    let detector: DetectorArtifact = read_json(detector_path, DETECTOR_FORMAT)?;
    check_dataset(&dataset_hash, &detector.dataset_hash, "detector")?;
    check_dims(&ds, &detector)?;
    let train: Vec<&SyntheticImage> = ds.split(Split::Train).collect();
    let val: Vec<&SyntheticImage> = ds.split(Split::Val).collect();
    let mut classes = Vec::new();
    for det in &detector.classes {
        let train_scenes = scenes(&train, det.class, &det.model)?;
        let val_scenes = scenes(&val, det.class, &det.model)?;
        let mut best: Option<(f64, weaksearch::reinforce::PolicyTraining)> = None;
        let mut lambda_grid = Vec::new();
        for &lambda in &section.lambda_grid {
            let trained = train_policy(&train_scenes, &val_scenes, &section.to_core(lambda)?)?;
            eprintln!(
                "class {} lambda {lambda}: validation reward {:.4} (restart {})",
                det.class, trained.val_reward, trained.restart
            );
            lambda_grid.push((lambda, trained.val_reward));
            if best.as_ref().map_or(true, |b| trained.val_reward > b.1.val_reward) {
                best = Some((lambda, trained));
            }
        }
        let (lambda, trained) = best.expect("non-empty grid");
        classes.push(ClassPolicy {
            class: det.class,
            lambda,
            lambda_grid,
            restart: trained.restart,
            val_reward: trained.val_reward,
            params: trained.params,
            restarts: trained.restarts,
            log: trained.log,
        });
    }
    write_json(
        out,
        &PolicyArtifact {
            format: POLICY_FORMAT.into(),
            method: format!("{}-SEQ", detector.method),
            config_hash: config_hash(&section),
            config: section,
            dataset_hash,
            detector_hash,
            classes,
        },
    )
}

pub fn evaluate_cmd(
    table: toml::Table,
    data: &Path,
    detector_path: &Path,
    policy_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let section: EvaluateSection = config::resolve(table)?;
    let splits = section.splits()?;
    if section.repeats == 0 {
        return Err(CliError::Usage("repeats must be >= 1".into()));
    }
    let (ds, dataset_hash) = load_dataset(data)?;
    let detector_hash = file_hash(detector_path)?;
    let detector: DetectorArtifact = read_json(detector_path, DETECTOR_FORMAT)?;
    check_dataset(&dataset_hash, &detector.dataset_hash, "detector")?;
    check_dims(&ds, &detector)?;
    let policy = match policy_path {
        Some(p) => {
            let artifact: PolicyArtifact = read_json(p, POLICY_FORMAT)?;
            check_dataset(&dataset_hash, &artifact.dataset_hash, "policy")?;
            if artifact.detector_hash != detector_hash {
                return Err(CliError::Runtime(format!(
                    "policy was trained on detector {}, not {}",
                    artifact.detector_hash, detector_hash
                )));
            }
            Some((artifact, file_hash(p)?))
        }
        None => None,
    };
    let images: Vec<&SyntheticImage> = ds.splits(&splits).collect();
    let mut classes = Vec::new();
    for det in &detector.classes {
        let exhaustive = exhaustive_eval(&images, det.class, &det.model)?;
        let sequential = match &policy {
            Some((artifact, _)) => {
                let p = artifact
                    .classes
                    .iter()
                    .find(|p| p.class == det.class)
                    .ok_or_else(|| CliError::Runtime(format!("policy has no class {}", det.class)))?;
                if p.params.feature_dim() != ds.dim() {
                    return Err(CliError::Runtime(format!(
                        "policy has feature dimension {}, dataset has {}",
                        p.params.feature_dim(),
                        ds.dim()
                    )));
                }
                let agent = weaksearch::agent::AgentConfig {
                    alpha: artifact.config.alpha,
                    max_steps: artifact.config.max_steps,
                };
                Some(sequential_eval(
                    &images,
                    det.class,
                    &det.model,
                    &p.params,
                    &agent,
                    section.repeats,
                    section.seed,
                )?)
            }
            None => None,
        };
        eprintln!(
            "class {}: detection AP {:.3} (inclusion {:.3}), classification AP {:.3}",
            det.class,
            exhaustive.detection_ap_iou,
            exhaustive.detection_ap_inclusion,
            exhaustive.classification_ap
        );
        classes.push(ClassEval {
            class: det.class,
            exhaustive,
            sequential,
        });
    }
    write_json(
        out,
        &EvalReport {
            format: EVAL_FORMAT.into(),
            method: detector.method,
            repeats: section.repeats,
            config_hash: config_hash(&section),
            config: section,
            dataset_hash,
            detector_hash,
            policy_hash: policy.map(|p| p.1),
            classes,
        },
    )
}

#[derive(Debug, Serialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<Option<MeanStd>>,
}

#[derive(Debug, Serialize)]
pub struct MetricTable {
    pub metric: String,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub format: String,
    pub dataset_hash: String,
    pub columns: Vec<String>,
    pub tables: Vec<MetricTable>,
}

struct Column<'a> {
    name: String,
    report: &'a EvalReport,
    sequential: bool,
}

fn cell(report: &EvalReport, class: usize, sequential: bool, metric: usize) -> Option<MeanStd> {
    let c = report.classes.iter().find(|c| c.class == class)?;
    if sequential {
        let s = c.sequential.as_ref()?;
        Some(match metric {
            0 => s.detection_ap_iou,
            1 => s.detection_ap_inclusion,
            2 => s.classification_ap,
            _ => s.evaluated_fraction,
        })
    } else {
        let e = &c.exhaustive;
        let v = match metric {
            0 => e.detection_ap_iou,
            1 => e.detection_ap_inclusion,
            2 => e.classification_ap,
            _ => return None,
        };
        Some(MeanStd { mean: v, std: 0.0 })
    }
}

pub fn build_report(reports: &[EvalReport]) -> Result<Report, CliError> {
    let first = reports
        .first()
        .ok_or_else(|| CliError::Usage("report needs at least one eval file".into()))?;
    let hashes: std::collections::BTreeSet<&str> =
        reports.iter().map(|r| r.dataset_hash.as_str()).collect();
    if hashes.len() > 1 {
        return Err(CliError::Runtime(format!(
            "eval files come from different datasets: {}",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut columns = Vec::new();
    for r in reports {
        columns.push(Column {
            name: format!("{}-DET", r.method),
            report: r,
            sequential: false,
        });
        if r.classes.iter().any(|c| c.sequential.is_some()) {
            columns.push(Column {
                name: format!("{}-SEQ", r.method),
                report: r,
                sequential: true,
            });
        }
    }
    let mut classes: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.classes.iter().map(|c| c.class))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let metrics = [
        "detection AP (IoU 0.5)",
        "detection AP (inclusion 0.5)",
        "classification AP",
        "evaluated fraction",
    ];
    let mut tables = Vec::new();
    for (m, name) in metrics.iter().enumerate() {
        let mut rows: Vec<TableRow> = classes
            .iter()
            .map(|&class| TableRow {
                label: format!("class {class}"),
                values: columns
                    .iter()
                    .map(|col| cell(col.report, class, col.sequential, m))
                    .collect(),
            })
            .collect();
        if rows.iter().all(|r| r.values.iter().all(Option::is_none)) {
            continue;
        }
        let mean = (0..columns.len())
            .map(|j| {
                let vals: Vec<MeanStd> = rows.iter().filter_map(|r| r.values[j]).collect();
                (!vals.is_empty()).then(|| MeanStd {
                    mean: vals.iter().map(|v| v.mean).sum::<f64>() / vals.len() as f64,
                    std: vals.iter().map(|v| v.std).sum::<f64>() / vals.len() as f64,
                })
            })
            .collect();
        rows.push(TableRow {
            label: "mean".into(),
            values: mean,
        });
        tables.push(MetricTable {
            metric: name.to_string(),
            rows,
        });
    }
    Ok(Report {
        format: "weaksearch-report v1".into(),
        dataset_hash: first.dataset_hash.clone(),
        columns: columns.into_iter().map(|c| c.name).collect(),
        tables,
    })
}

/// Aligned text; values in percent, with `± std` when a column has repeats.
pub fn render_report(report: &Report, repeats: &[bool]) -> String {
    let mut out = String::new();
    for table in &report.tables {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(table.metric.clone())
            .chain(report.columns.iter().cloned())
            .collect()];
        for row in &table.rows {
            let mut line = vec![row.label.clone()];
            for (j, v) in row.values.iter().enumerate() {
                line.push(match v {
                    None => "-".into(),
                    Some(v) if repeats[j] => format!("{:.1} ± {:.1}", 100.0 * v.mean, 100.0 * v.std),
                    Some(v) => format!("{:.1}", 100.0 * v.mean),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &grid {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let pad = widths[j] - c.chars().count();
                    if j == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn report_cmd(inputs: &[PathBuf], out: Option<&Path>, json: Option<&Path>) -> Result<(), CliError> {
    let reports: Vec<EvalReport> = inputs
        .iter()
        .map(|p| read_json(p, EVAL_FORMAT))
        .collect::<Result<_, _>>()?;
    let report = build_report(&reports)?;
    let repeats: Vec<bool> = reports
        .iter()
        .flat_map(|r| {
            let seq = r.classes.iter().any(|c| c.sequential.is_some());
            std::iter::once(false).chain(seq.then_some(r.repeats > 1))
        })
        .collect();
    let text = render_report(&report, &repeats);
    match out {
        Some(path) => std::fs::write(path, &text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}
