//! Synthetic scenes standing in for segment pools, region descriptors and
//! human fixations.
//!
//! Each positive image holds one or two targets. Around every target the
//! generator plants:
//!
//! * target regions tightly overlapping the ground truth, carrying the full
//!   object signature;
//! * small sub-part regions clustered on one spot inside the target, carrying
//!   a *stronger* copy of the class pattern than the target itself (the
//!   pattern a multiple-instance learner latches onto);
//! * fringe regions overlapping the target loosely;
//! * a context region next to the target carrying a class-specific context
//!   signature (present only in positive images, never fixated).
//!
//! The rest is clutter plus one full-canvas region. Two appearance
//! dimensions act as a location pointer: for regions related to a target
//! they hold the target offset in units of the region's half extent.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{containment_fraction, intersection_area, iou, Rect, RegionId};
use crate::rng;
use crate::svm::parse_reals;

/// Number of trailing geometric descriptor components.
pub const GEOMETRY_DIMS: usize = 5;
/// Number of leading location-pointer components.
pub const POINTER_DIMS: usize = 2;
const POINTER_SCALE: f64 = 0.5;

const DATASET_HEADER: &str = "weaksearch-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Target,
    Subpart,
    Fringe,
    Context,
    Clutter,
    Canvas,
}

impl RegionKind {
    fn code(self) -> &'static str {
        match self {
            RegionKind::Target => "T",
            RegionKind::Subpart => "S",
            RegionKind::Fringe => "F",
            RegionKind::Context => "C",
            RegionKind::Clutter => "X",
            RegionKind::Canvas => "W",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "T" => RegionKind::Target,
            "S" => RegionKind::Subpart,
            "F" => RegionKind::Fringe,
            "C" => RegionKind::Context,
            "X" => RegionKind::Clutter,
            "W" => RegionKind::Canvas,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: RegionId,
    pub rect: Rect,
    pub features: Vec<f64>,
    pub fixated: bool,
    /// Generator ground truth; never visible to learners.
    pub kind: RegionKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub id: usize,
    pub split: Split,
    /// Target class of a positive image; `None` for background images.
    pub class: Option<usize>,
    pub ground_truth: Vec<Rect>,
    pub regions: Vec<Region>,
}

impl SyntheticImage {
    /// One-vs-all image label for `class`.
    pub fn label(&self, class: usize) -> i8 {
        if self.class == Some(class) {
            1
        } else {
            -1
        }
    }

    /// Ground truth boxes relevant to `class`.
    pub fn targets(&self, class: usize) -> &[Rect] {
        if self.class == Some(class) {
            &self.ground_truth
        } else {
            &[]
        }
    }

    pub fn region_ids(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.regions.iter().map(|r| r.id)
    }

    pub fn pool(&self) -> Vec<(RegionId, Rect)> {
        self.regions.iter().map(|r| (r.id, r.rect)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub images: usize,
    pub positive_fraction: f64,
    pub classes: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub feature_dim: usize,
    /// Magnitude of the planted object signature.
    pub separation: f64,
    /// Magnitude of the class pattern in sub-part regions, relative to
    /// `separation`.
    pub subpart_strength: f64,
    /// Magnitude of the context signature beside targets, relative to
    /// `separation`.
    pub context_strength: f64,
    pub noise: f64,
    pub fixation_fraction: f64,
    /// Probability that a positive image holds a second target.
    pub second_target_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            images: 160,
            positive_fraction: 0.5,
            classes: 1,
            min_regions: 20,
            max_regions: 28,
            feature_dim: 24,
            separation: 1.3,
            subpart_strength: 1.8,
            context_strength: 2.0,
            noise: 0.6,
            fixation_fraction: 0.34,
            second_target_prob: 0.15,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.images == 0 {
            return err("image count must be positive");
        }
        if self.classes == 0 {
            return err("class count must be positive");
        }
        if self.min_regions < 16 || self.max_regions < self.min_regions {
            return err("regions per image must satisfy 16 <= min <= max");
        }
        if self.feature_dim < POINTER_DIMS + GEOMETRY_DIMS + 3 {
            return err("feature dimension too small");
        }
        for (name, v) in [
            ("positive_fraction", self.positive_fraction),
            ("fixation_fraction", self.fixation_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.second_target_prob) {
            return err("second_target_prob must lie in [0,1)");
        }
        if !(self.separation >= 0.0
            && self.subpart_strength >= 0.0
            && self.context_strength >= 0.0
            && self.noise > 0.0) {
            return err("signature magnitudes must be non-negative and noise positive");
        }
        Ok(())
    }

    fn to_tokens(&self) -> String {
        format!(
            "images={} positive_fraction={:?} classes={} min_regions={} max_regions={} \
             dim={} separation={:?} subpart_strength={:?} context_strength={:?} noise={:?} \
             fixation_fraction={:?} \
             second_target_prob={:?} seed={}",
            self.images,
            self.positive_fraction,
            self.classes,
            self.min_regions,
            self.max_regions,
            self.feature_dim,
            self.separation,
            self.subpart_strength,
            self.context_strength,
            self.noise,
            self.fixation_fraction,
            self.second_target_prob,
            self.seed
        )
    }

    fn from_tokens(toks: &[&str], line: usize) -> Result<Self> {
        let mut cfg = GeneratorConfig::default();
        let mut seen = 0;
        for tok in toks {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::schema(line, format!("bad header token `{tok}`")))?;
            let bad = || Error::schema(line, format!("bad value for `{k}`"));
            let uint = |v: &str| v.parse::<usize>().map_err(|_| bad());
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
            match k {
                "images" => cfg.images = uint(v)?,
                "positive_fraction" => cfg.positive_fraction = real(v)?,
                "classes" => cfg.classes = uint(v)?,
                "min_regions" => cfg.min_regions = uint(v)?,
                "max_regions" => cfg.max_regions = uint(v)?,
                "dim" => cfg.feature_dim = uint(v)?,
                "separation" => cfg.separation = real(v)?,
                "subpart_strength" => cfg.subpart_strength = real(v)?,
                "context_strength" => cfg.context_strength = real(v)?,
                "noise" => cfg.noise = real(v)?,
                "fixation_fraction" => cfg.fixation_fraction = real(v)?,
                "second_target_prob" => cfg.second_target_prob = real(v)?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::schema(line, format!("unknown header key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 13 {
            return Err(Error::schema(line, "incomplete header"));
        }
        Ok(cfg)
    }
}

/// A generated (or loaded) dataset with a flat region index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub images: Vec<SyntheticImage>,
    index: Vec<(usize, usize)>,
}

impl Dataset {
    fn from_images(config: GeneratorConfig, images: Vec<SyntheticImage>) -> Result<Self> {
        let mut index = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if img.id != i {
                return Err(Error::Config(format!("image {} out of order", img.id)));
            }
            for (j, r) in img.regions.iter().enumerate() {
                if r.id.0 != index.len() {
                    return Err(Error::UnknownRegion(r.id.0));
                }
                index.push((i, j));
            }
        }
        Ok(Dataset {
            config,
            images,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn region_count(&self) -> usize {
        self.index.len()
    }

    pub fn region(&self, id: RegionId) -> Option<&Region> {
        let &(i, j) = self.index.get(id.0)?;
        Some(&self.images[i].regions[j])
    }

    pub fn features(&self, id: RegionId) -> &[f64] {
        &self.region(id).expect("region id out of range").features
    }

    pub fn image_of(&self, id: RegionId) -> Option<usize> {
        self.index.get(id.0).map(|&(i, _)| i)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(move |img| img.split == split)
    }

    /// Images from any of the given splits.
    pub fn splits<'a>(&'a self, splits: &'a [Split]) -> impl Iterator<Item = &'a SyntheticImage> {
        self.images.iter().filter(move |img| splits.contains(&img.split))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{DATASET_HEADER} {}", self.config.to_tokens()).unwrap();
        for img in &self.images {
            let class = img.class.map_or("-".to_string(), |c| c.to_string());
            write!(
                out,
                "image {} {} {} gt {}",
                img.id,
                img.split.code(),
                class,
                img.ground_truth.len()
            )
            .unwrap();
            for g in &img.ground_truth {
                write!(out, " {:?} {:?} {:?} {:?}", g.x1(), g.y1(), g.x2(), g.y2()).unwrap();
            }
            write!(out, " regions {}", img.regions.len()).unwrap();
            for r in &img.regions {
                write!(
                    out,
                    " | {} {} {} {:?} {:?} {:?} {:?}",
                    r.id,
                    r.kind.code(),
                    r.fixated as u8,
                    r.rect.x1(),
                    r.rect.y1(),
                    r.rect.x2(),
                    r.rect.y2()
                )
                .unwrap();
                for v in &r.features {
                    write!(out, " {v:?}").unwrap();
                }
            }
            out.push('\n');
        }
        writeln!(out, "end {}", self.images.len()).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::schema(1, "empty file"))?;
        let rest = header
            .strip_prefix(DATASET_HEADER)
            .ok_or_else(|| Error::Version {
                found: header.split_whitespace().take(2).collect::<Vec<_>>().join(" "),
                expected: DATASET_HEADER.to_string(),
            })?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        let config = GeneratorConfig::from_tokens(&toks, 1)?;
        let dim = config.feature_dim;
        if !text.lines().any(|l| l.starts_with("end ")) {
            return Err(Error::schema(text.lines().count(), "truncated file (no trailer)"));
        }
        let mut images = Vec::with_capacity(config.images);
        let mut ended = false;
        for (n, line) in lines.enumerate() {
            let ln = n + 2;
            if let Some(count) = line.strip_prefix("end ") {
                if count.trim().parse::<usize>().ok() != Some(images.len()) {
                    return Err(Error::schema(ln, "trailer count mismatch"));
                }
                ended = true;
                break;
            }
            images.push(parse_image(line, ln, dim)?);
        }
        if !ended {
            return Err(Error::schema(text.lines().count(), "truncated file (no trailer)"));
        }
        if images.len() != config.images {
            return Err(Error::schema(
                text.lines().count(),
                format!("expected {} images, found {}", config.images, images.len()),
            ));
        }
        Dataset::from_images(config, images)
    }
}

fn parse_image(line: &str, ln: usize, dim: usize) -> Result<SyntheticImage> {
    let mut chunks = line.split(" | ");
    let head: Vec<&str> = chunks.next().unwrap_or("").split_whitespace().collect();
    let bad = |m: &str| Error::schema(ln, m.to_string());
    if head.len() < 6 || head[0] != "image" || head[4] != "gt" {
        return Err(bad("malformed image record"));
    }
    let id: usize = head[1].parse().map_err(|_| bad("bad image id"))?;
    let split = Split::from_code(head[2]).ok_or_else(|| bad("bad split"))?;
    let class = match head[3] {
        "-" => None,
        c => Some(c.parse().map_err(|_| bad("bad class"))?),
    };
    let n_gt: usize = head[5].parse().map_err(|_| bad("bad gt count"))?;
    let expect = 6 + 4 * n_gt + 2;
    if head.len() != expect || head[6 + 4 * n_gt] != "regions" {
        return Err(bad("malformed ground truth block"));
    }
    let to_owned = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let gt_vals = parse_reals(&to_owned(&head[6..6 + 4 * n_gt]), ln)?;
    let ground_truth = gt_vals
        .chunks(4)
        .map(|c| Rect::new(c[0], c[1], c[2], c[3]))
        .collect::<Result<Vec<_>>>()?;
    let n_regions: usize = head[expect - 1].parse().map_err(|_| bad("bad region count"))?;
    let mut regions = Vec::with_capacity(n_regions);
    for chunk in chunks {
        let toks: Vec<&str> = chunk.split_whitespace().collect();
        if toks.len() < 7 {
            return Err(bad("truncated region record"));
        }
        let features = parse_reals(&to_owned(&toks[7..]), ln)?;
        if features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: features.len(),
            });
        }
        let c = parse_reals(&to_owned(&toks[3..7]), ln)?;
        regions.push(Region {
            id: RegionId(toks[0].parse().map_err(|_| bad("bad region id"))?),
            kind: RegionKind::from_code(toks[1]).ok_or_else(|| bad("bad region kind"))?,
            fixated: match toks[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad fixation flag")),
            },
            rect: Rect::new(c[0], c[1], c[2], c[3])?,
            features,
        });
    }
    if regions.len() != n_regions {
        return Err(bad("region count mismatch"));
    }
    Ok(SyntheticImage {
        id,
        split,
        class,
        ground_truth,
        regions,
    })
}

// ---------------------------------------------------------------------------
// Generation

/// Per-class signature directions in appearance space.
struct Signatures {
    object: Vec<Vec<f64>>,
    pattern: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
}

fn unit_directions<R: Rng>(count: usize, dim: usize, offset: usize, total: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // Gram-Schmidt while the appearance block has room, plain random
    // unit vectors afterwards.
    let span = total - offset;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for k in 0..count {
        loop {
            let mut v = vec![0.0; dim];
            for x in v.iter_mut().skip(offset).take(span) {
                *x = StandardNormal.sample(rng);
            }
            if k < span {
                for u in &out {
                    let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(u) {
                        *x -= d * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                out.push(v);
                break;
            }
        }
    }
    out
}

struct Planned {
    rect: Rect,
    kind: RegionKind,
    /// Coefficients on (object, pattern, context) signatures.
    mix: [f64; 3],
    /// Target the pointer refers to, if any.
    pointer: Option<usize>,
}

fn rect_around(cx: f64, cy: f64, w: f64, h: f64) -> Option<Rect> {
    let x1 = (cx - w / 2.0).max(0.0);
    let y1 = (cy - h / 2.0).max(0.0);
    let x2 = (cx + w / 2.0).min(1.0);
    let y2 = (cy + h / 2.0).min(1.0);
    Rect::new(x1, y1, x2, y2).ok().filter(|r| r.width() > 0.01 && r.height() > 0.01)
}

fn sample_until<R: Rng>(rng: &mut R, mut f: impl FnMut(&mut R) -> Option<Rect>) -> Option<Rect> {
    (0..400).find_map(|_| f(rng))
}

fn plan_target<R: Rng>(rng: &mut R, gt: &Rect, t: usize, others: &[Rect]) -> Vec<Planned> {
    let mut out = Vec::new();
    let [gcx, gcy] = gt.center();
    let (gw, gh) = (gt.width(), gt.height());

    // Target regions: jittered copies of the ground truth.
    let n_target = rng.gen_range(2..=3);
    for _ in 0..n_target {
        if let Some(r) = sample_until(rng, |rng| {
            let r = rect_around(
                gcx + rng.gen_range(-0.08..0.08) * gw,
                gcy + rng.gen_range(-0.08..0.08) * gh,
                gw * rng.gen_range(0.85..1.12),
                gh * rng.gen_range(0.85..1.12),
            )?;
            (iou(&r, gt) >= 0.65).then_some(r)
        }) {
            let q = iou(&r, gt);
            out.push(Planned {
                rect: r,
                kind: RegionKind::Target,
                mix: [q, 0.6, 0.0],
                pointer: Some(t),
            });
        }
    }

    // Sub-parts: small boxes clustered on the pattern spot.
    let px = gt.x1() + gw * rng.gen_range(0.3..0.7);
    let py = gt.y1() + gh * rng.gen_range(0.3..0.7);
    let n_sub = rng.gen_range(2..=3);
    for _ in 0..n_sub {
        if let Some(r) = sample_until(rng, |rng| {
            let frac = rng.gen_range(0.05..0.13f64);
            let aspect = rng.gen_range(0.7..1.4f64);
            let w = gw * (frac * aspect).sqrt();
            let h = gh * (frac / aspect).sqrt();
            let r = rect_around(
                px + rng.gen_range(-0.1..0.1) * gw,
                py + rng.gen_range(-0.1..0.1) * gh,
                w,
                h,
            )?;
            (containment_fraction(gt, &r) >= 0.9 && iou(&r, gt) < 0.18).then_some(r)
        }) {
            out.push(Planned {
                rect: r,
                kind: RegionKind::Subpart,
                mix: [0.1, 1.0, 0.0],
                pointer: Some(t),
            });
        }
    }

    // Fringe: loose overlaps.
    let n_fringe = rng.gen_range(2..=3);
    for _ in 0..n_fringe {
        if let Some(r) = sample_until(rng, |rng| {
            let s = rng.gen_range(0.5..1.8f64);
            let r = rect_around(
                gcx + rng.gen_range(-0.6..0.6) * gw,
                gcy + rng.gen_range(-0.6..0.6) * gh,
                gw * s * rng.gen_range(0.8..1.25),
                gh * s * rng.gen_range(0.8..1.25),
            )?;
            let o = iou(&r, gt);
            (0.22..0.5).contains(&o).then_some(r)
        }) {
            let o = iou(&r, gt);
            let cover = containment_fraction(&r, gt);
            out.push(Planned {
                rect: r,
                kind: RegionKind::Fringe,
                mix: [0.8 * o, 0.5 * cover, 0.0],
                pointer: Some(t),
            });
        }
    }

    // Context: beside the target, not touching it.
    if let Some(r) = sample_until(rng, |rng| {
        let side = rng.gen_range(0..4);
        let w = rng.gen_range(0.1..0.22);
        let h = rng.gen_range(0.1..0.22);
        let gap = rng.gen_range(0.02..0.06);
        let (cx, cy) = match side {
            0 => (gt.x1() - gap - w / 2.0, gcy + rng.gen_range(-0.3..0.3) * gh),
            1 => (gt.x2() + gap + w / 2.0, gcy + rng.gen_range(-0.3..0.3) * gh),
            2 => (gcx + rng.gen_range(-0.3..0.3) * gw, gt.y1() - gap - h / 2.0),
            _ => (gcx + rng.gen_range(-0.3..0.3) * gw, gt.y2() + gap + h / 2.0),
        };
        let r = rect_around(cx, cy, w, h)?;
        let clear = std::iter::once(gt)
            .chain(others.iter())
            .all(|g| intersection_area(&r, g) == 0.0);
        (clear && r.width() > 0.06 && r.height() > 0.06).then_some(r)
    }) {
        out.push(Planned {
            rect: r,
            kind: RegionKind::Context,
            mix: [0.0, 0.0, 1.0],
            pointer: Some(t),
        });
    }
    out
}

fn plan_clutter<R: Rng>(rng: &mut R, targets: &[Rect]) -> Option<Rect> {
    sample_until(rng, |rng| {
        let w = rng.gen_range(0.06..0.35);
        let h = rng.gen_range(0.06..0.35);
        let x1 = rng.gen_range(0.0..1.0 - w);
        let y1 = rng.gen_range(0.0..1.0 - h);
        let r = Rect::new(x1, y1, x1 + w, y1 + h).ok()?;
        let clear = targets
            .iter()
            .all(|g| iou(&r, g) < 0.1 && containment_fraction(g, &r) < 0.3);
        clear.then_some(r)
    })
}

fn place_ground_truth<R: Rng>(rng: &mut R, count: usize) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::new();
    for _ in 0..count {
        if let Some(r) = sample_until(rng, |rng| {
            let w = rng.gen_range(0.22..0.42);
            let h = rng.gen_range(0.22..0.42);
            let x1 = rng.gen_range(0.04..0.96 - w);
            let y1 = rng.gen_range(0.04..0.96 - h);
            let r = Rect::new(x1, y1, x1 + w, y1 + h).ok()?;
            out.iter()
                .all(|g| intersection_area(&r, g) == 0.0 && iou(&r, g) == 0.0)
                .then_some(r)
        }) {
            out.push(r);
        }
    }
    out
}

fn geometry_descriptor(r: &Rect) -> [f64; GEOMETRY_DIMS] {
    let [cx, cy] = r.center();
    [cx, cy, r.width(), r.height(), r.width() / r.height()]
}

fn fixation_weight(kind: RegionKind) -> f64 {
    match kind {
        RegionKind::Target => 3.0,
        RegionKind::Subpart => 3.0,
        RegionKind::Fringe => 2.0,
        RegionKind::Context => 0.0,
        RegionKind::Clutter => 0.6,
        RegionKind::Canvas => 0.0,
    }
}

/// Generates a dataset. Deterministic in `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let dim = config.feature_dim;
    let appearance_end = dim - GEOMETRY_DIMS;
    let mut sig_rng = rng::stream(config.seed, &[1]);
    let dirs = unit_directions(3 * config.classes, dim, POINTER_DIMS, appearance_end, &mut sig_rng);
    let sigs = Signatures {
        object: dirs[..config.classes].to_vec(),
        pattern: dirs[config.classes..2 * config.classes].to_vec(),
        context: dirs[2 * config.classes..].to_vec(),
    };

    let n_pos = ((config.images as f64) * config.positive_fraction).round() as usize;
    let n_pos = n_pos.clamp(1.min(config.images), config.images);
    let mut split_rng = rng::stream(config.seed, &[2]);
    let mut classes: Vec<Option<usize>> = (0..config.images)
        .map(|i| (i < n_pos).then_some(i % config.classes))
        .collect();
    classes.shuffle(&mut split_rng);
    let splits = stratified_splits(&classes, &mut split_rng);

    let mut images = Vec::with_capacity(config.images);
    let mut next_id = 0;
    for (i, class) in classes.iter().enumerate() {
        let mut img_rng = rng::stream(config.seed, &[3, i as u64]);
        let img = generate_image(
            config,
            &sigs,
            i,
            *class,
            splits[i],
            &mut next_id,
            &mut img_rng,
        );
        images.push(img);
    }
    Dataset::from_images(config.clone(), images)
}

fn stratified_splits<R: Rng>(classes: &[Option<usize>], rng: &mut R) -> Vec<Split> {
    let mut out = vec![Split::Train; classes.len()];
    let mut groups: std::collections::BTreeMap<Option<usize>, Vec<usize>> = Default::default();
    for (i, c) in classes.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.shuffle(rng);
        let n = members.len();
        let n_train = (n as f64 * 0.5).round() as usize;
        let n_val = (n as f64 * 0.25).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

fn generate_image<R: Rng>(
    config: &GeneratorConfig,
    sigs: &Signatures,
    id: usize,
    class: Option<usize>,
    split: Split,
    next_id: &mut usize,
    rng: &mut R,
) -> SyntheticImage {
    let dim = config.feature_dim;
    let ground_truth = match class {
        Some(_) => {
            let count = if rng.gen_bool(config.second_target_prob) { 2 } else { 1 };
            place_ground_truth(rng, count)
        }
        None => Vec::new(),
    };

    let mut planned = vec![Planned {
        rect: Rect::canvas(),
        kind: RegionKind::Canvas,
        mix: if class.is_some() { [0.15, 0.15, 0.15] } else { [0.0; 3] },
        pointer: class.is_some().then_some(0),
    }];
    for (t, gt) in ground_truth.iter().enumerate() {
        let others: Vec<Rect> = ground_truth
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != t)
            .map(|(_, g)| *g)
            .collect();
        planned.extend(plan_target(rng, gt, t, &others));
    }
    let total = rng.gen_range(config.min_regions..=config.max_regions);
    while planned.len() < total {
        match plan_clutter(rng, &ground_truth) {
            Some(rect) => planned.push(Planned {
                rect,
                kind: RegionKind::Clutter,
                mix: [0.0; 3],
                pointer: None,
            }),
            None => break,
        }
    }

    let fixated = simulate_fixations(config, &planned, &ground_truth, rng);
    let appearance_end = dim - GEOMETRY_DIMS;
    let regions = planned
        .iter()
        .zip(fixated)
        .map(|(p, fixated)| {
            let mut f = vec![0.0; dim];
            for x in f.iter_mut().take(appearance_end) {
                let z: f64 = StandardNormal.sample(rng);
                *x = config.noise * z;
            }
            if let Some(c) = class {
                let dirs = [&sigs.object[c], &sigs.pattern[c], &sigs.context[c]];
                let scale = [
                    config.separation,
                    config.separation * config.subpart_strength_for(p.kind),
                    config.separation * config.context_strength,
                ];
                for k in 0..3 {
                    let a = p.mix[k] * scale[k];
                    if a != 0.0 {
                        for (x, d) in f.iter_mut().zip(dirs[k].iter()) {
                            *x += a * d;
                        }
                    }
                }
            }
            if let Some(t) = p.pointer {
                let [gx, gy] = ground_truth[t].center();
                let [cx, cy] = p.rect.center();
                let [hx, hy] = p.rect.half_extent();
                let jitter = 0.05 * config.noise;
                f[0] = POINTER_SCALE * (gx - cx) / hx + jitter * Distribution::<f64>::sample(&StandardNormal, rng);
                f[1] = POINTER_SCALE * (gy - cy) / hy + jitter * Distribution::<f64>::sample(&StandardNormal, rng);
            }
            f[appearance_end..].copy_from_slice(&geometry_descriptor(&p.rect));
            let id = RegionId(*next_id);
            *next_id += 1;
            Region {
                id,
                rect: p.rect,
                features: f,
                fixated,
                kind: p.kind,
            }
        })
        .collect();

    SyntheticImage {
        id,
        split,
        class,
        ground_truth,
        regions,
    }
}

impl GeneratorConfig {
    fn subpart_strength_for(&self, kind: RegionKind) -> f64 {
        if kind == RegionKind::Subpart {
            self.subpart_strength
        } else {
            1.0
        }
    }
}

/// Fixated set: about `fixation_fraction` of the regions, biased towards
/// target-related regions; on positive images at least one fixated region
/// overlaps a ground truth box with IoU >= 0.5.
fn simulate_fixations<R: Rng>(
    config: &GeneratorConfig,
    planned: &[Planned],
    ground_truth: &[Rect],
    rng: &mut R,
) -> Vec<bool> {
    let n = planned.len();
    let target = ((n as f64) * config.fixation_fraction).round() as usize;
    let target = target.clamp(1, n);
    let mut fixated = vec![false; n];
    let mut count = 0;
    if !ground_truth.is_empty() {
        let anchor = planned
            .iter()
            .enumerate()
            .filter(|(_, p)| ground_truth.iter().any(|g| iou(&p.rect, g) >= 0.5))
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        if let Some(&i) = anchor.choose(rng) {
            fixated[i] = true;
            count += 1;
        }
    }
    let weight = |p: &Planned| {
        if ground_truth.is_empty() {
            if p.kind == RegionKind::Canvas {
                0.0
            } else {
                1.0
            }
        } else {
            fixation_weight(p.kind)
        }
    };
    while count < target {
        let total: f64 = planned
            .iter()
            .zip(&fixated)
            .filter(|(_, f)| !**f)
            .map(|(p, _)| weight(p))
            .sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.gen_range(0.0..total);
        let mut pick = None;
        for (i, p) in planned.iter().enumerate() {
            if fixated[i] {
                continue;
            }
            let w = weight(p);
            if w > 0.0 && u < w {
                pick = Some(i);
                break;
            }
            u -= w;
        }
        let Some(i) = pick.or_else(|| {
            (0..n).rev().find(|&i| !fixated[i] && weight(&planned[i]) > 0.0)
        }) else {
            break;
        };
        fixated[i] = true;
        count += 1;
    }
    fixated
}

// ---------------------------------------------------------------------------
// Supervision

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisionMode {
    /// Fixated regions as positive bags, plus augmented negative bags.
    Eye,
    /// All regions of a positive image as its bag.
    ImageLabel,
    /// Instance labels from ground truth boxes.
    BoundingBox,
}

impl std::str::FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eye" => Ok(SupervisionMode::Eye),
            "il" => Ok(SupervisionMode::ImageLabel),
            "bb" => Ok(SupervisionMode::BoundingBox),
            other => Err(Error::Config(format!("unknown supervision mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub id: usize,
    pub image: usize,
    pub regions: Vec<RegionId>,
    pub label: i8,
}

/// Training signal for one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    pub bags: Vec<Bag>,
    /// Direct instance labels (bounding-box mode only); excluded fringe
    /// regions are absent.
    pub instance_labels: Option<Vec<(RegionId, i8)>>,
}

/// Fringe threshold used to drop neighbours of bounding-box positives.
pub const BB_FRINGE_THRESHOLD: f64 = 0.2;

pub fn make_bags<'a>(
    images: impl IntoIterator<Item = &'a SyntheticImage>,
    class: usize,
    mode: SupervisionMode,
) -> Supervision {
    let mut sup = Supervision::default();
    let mut labels = Vec::new();
    let push = |sup: &mut Supervision, image: usize, regions: Vec<RegionId>, label: i8| {
        if !regions.is_empty() {
            let id = sup.bags.len();
            sup.bags.push(Bag {
                id,
                image,
                regions,
                label,
            });
        }
    };
    for img in images {
        let all: Vec<RegionId> = img.region_ids().collect();
        if img.label(class) < 0 {
            push(&mut sup, img.id, all.clone(), -1);
            labels.extend(all.iter().map(|&id| (id, -1)));
            continue;
        }
        match mode {
            SupervisionMode::Eye => {
                let fixated: Vec<&Region> = img.regions.iter().filter(|r| r.fixated).collect();
                push(&mut sup, img.id, fixated.iter().map(|r| r.id).collect(), 1);
                let augmented = img
                    .regions
                    .iter()
                    .filter(|r| {
                        !r.fixated
                            && fixated
                                .iter()
                                .all(|f| intersection_area(&f.rect, &r.rect) == 0.0)
                    })
                    .map(|r| r.id)
                    .collect();
                push(&mut sup, img.id, augmented, -1);
            }
            SupervisionMode::ImageLabel => push(&mut sup, img.id, all, 1),
            SupervisionMode::BoundingBox => {
                push(&mut sup, img.id, all, 1);
                labels.extend(bounding_box_labels(img, class));
            }
        }
    }
    if mode == SupervisionMode::BoundingBox {
        sup.instance_labels = Some(labels);
    }
    sup
}

/// Highest-overlap region per ground truth box is positive, its fringe is
/// dropped and every other region is negative.
pub fn bounding_box_labels(img: &SyntheticImage, class: usize) -> Vec<(RegionId, i8)> {
    let pool = img.pool();
    let mut positive = Vec::new();
    for gt in img.targets(class) {
        let best = img
            .regions
            .iter()
            .map(|r| (iou(&r.rect, gt), r.id))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, id)) = best {
            positive.push(id);
        }
    }
    let mut excluded = Vec::new();
    for &p in &positive {
        excluded.extend(crate::geometry::fringe_set(p, &pool, BB_FRINGE_THRESHOLD));
    }
    img.regions
        .iter()
        .filter_map(|r| {
            if positive.contains(&r.id) {
                Some((r.id, 1))
            } else if excluded.contains(&r.id) {
                None
            } else {
                Some((r.id, -1))
            }
        })
        .collect()
}

/// Fixation statistics mirroring the calibration columns: fixated fraction
/// and best ground-truth overlap among fixated vs. all regions (positive
/// images only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationSummary {
    pub positive_images: usize,
    pub fixated_fraction: f64,
    pub best_overlap_fixated: f64,
    pub best_overlap_all: f64,
}

pub fn fixation_summary(ds: &Dataset) -> FixationSummary {
    let mut n = 0;
    let (mut frac, mut fix, mut all) = (0.0, 0.0, 0.0);
    for img in ds.images.iter().filter(|i| i.class.is_some()) {
        n += 1;
        let k = img.regions.iter().filter(|r| r.fixated).count();
        frac += k as f64 / img.regions.len() as f64;
        let best = |only_fixated: bool| {
            img.regions
                .iter()
                .filter(|r| !only_fixated || r.fixated)
                .flat_map(|r| img.ground_truth.iter().map(move |g| iou(&r.rect, g)))
                .fold(0.0, f64::max)
        };
        fix += best(true);
        all += best(false);
    }
    let d = n.max(1) as f64;
    FixationSummary {
        positive_images: n,
        fixated_fraction: frac / d,
        best_overlap_fixated: fix / d,
        best_overlap_all: all / d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            images: 40,
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn determinism() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GeneratorConfig {
                images: 0,
                ..small()
            },
            GeneratorConfig {
                fixation_fraction: 1.0,
                ..small()
            },
            GeneratorConfig {
                feature_dim: 6,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn image_invariants() {
        let ds = generate(&small()).unwrap();
        for img in &ds.images {
            assert_eq!(img.class.is_some(), !img.ground_truth.is_empty());
            assert!(img.regions.iter().any(|r| r.rect == Rect::canvas()));
            for r in &img.regions {
                assert_eq!(r.features.len(), ds.dim());
                let g = &r.features[ds.dim() - GEOMETRY_DIMS..];
                let [cx, cy] = r.rect.center();
                assert_eq!(g, &[cx, cy, r.rect.width(), r.rect.height(), r.rect.width() / r.rect.height()]);
            }
            if img.class.is_some() {
                assert!(img
                    .regions
                    .iter()
                    .any(|r| r.fixated && img.ground_truth.iter().any(|g| iou(&r.rect, g) >= 0.5)));
            }
        }
    }

    #[test]
    fn negative_image_gives_one_full_bag_in_every_mode() {
        let ds = generate(&small()).unwrap();
        let neg = ds.images.iter().find(|i| i.class.is_none()).unwrap();
        for mode in [
            SupervisionMode::Eye,
            SupervisionMode::ImageLabel,
            SupervisionMode::BoundingBox,
        ] {
            let sup = make_bags(std::iter::once(neg), 0, mode);
            assert_eq!(sup.bags.len(), 1);
            assert_eq!(sup.bags[0].label, -1);
            assert_eq!(sup.bags[0].regions.len(), neg.regions.len());
        }
    }

    #[test]
    fn eye_bags_respect_fixations() {
        let ds = generate(&small()).unwrap();
        let sup = make_bags(ds.images.iter(), 0, SupervisionMode::Eye);
        for bag in &sup.bags {
            assert!(!bag.regions.is_empty());
            let img = &ds.images[bag.image];
            for id in &bag.regions {
                assert_eq!(ds.image_of(*id), Some(img.id));
                if bag.label > 0 {
                    assert!(ds.region(*id).unwrap().fixated);
                }
            }
        }

        let mut img = ds.images.iter().find(|i| i.class.is_some()).unwrap().clone();
        img.regions.iter_mut().for_each(|r| r.fixated = true);
        let sup = make_bags(std::iter::once(&img), 0, SupervisionMode::Eye);
        assert_eq!(sup.bags.len(), 1);
        assert_eq!(sup.bags[0].label, 1);
    }

    #[test]
    fn bounding_box_labels_on_three_region_image() {
        let gt = Rect::new(0.2, 0.2, 0.6, 0.6).unwrap();
        let target = Rect::new(0.2, 0.2, 0.6, 0.56).unwrap();
        let fringe = Rect::new(0.2, 0.0, 0.6, 0.8).unwrap();
        let clutter = Rect::new(0.8, 0.8, 0.95, 0.95).unwrap();
        let rects = [target, fringe, clutter];
        let img = SyntheticImage {
            id: 0,
            split: Split::Train,
            class: Some(0),
            ground_truth: vec![gt],
            regions: rects
                .iter()
                .enumerate()
                .map(|(i, r)| Region {
                    id: RegionId(i),
                    rect: *r,
                    features: vec![0.0; 3],
                    fixated: false,
                    kind: RegionKind::Clutter,
                })
                .collect(),
        };
        // Geometry oracle: overlaps with the ground truth and with the
        // chosen positive decide the labels.
        assert!((iou(&target, &gt) - 0.9).abs() < 1e-12);
        assert!((iou(&fringe, &gt) - 0.5).abs() < 1e-12);
        assert_eq!(iou(&clutter, &gt), 0.0);
        assert!(iou(&fringe, &target) >= BB_FRINGE_THRESHOLD);
        assert!(iou(&clutter, &target) < BB_FRINGE_THRESHOLD);

        let labels = bounding_box_labels(&img, 0);
        assert_eq!(labels, vec![(RegionId(0), 1), (RegionId(2), -1)]);
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("xyz".parse::<SupervisionMode>().is_err());
        assert_eq!("EYE".parse::<SupervisionMode>().unwrap(), SupervisionMode::Eye);
    }

    #[test]
    fn text_round_trip_and_corruption() {
        let ds = generate(&small()).unwrap();
        let text = ds.to_text();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, ds);

        let cut = &text[..text.len() * 2 / 3];
        assert!(matches!(Dataset::from_text(cut), Err(Error::Schema { .. })));

        let wrong_dim = text.replacen(" dim=24 ", " dim=23 ", 1);
        assert!(matches!(
            Dataset::from_text(&wrong_dim),
            Err(Error::DimensionMismatch { expected: 23, actual: 24 })
        ));

        let bad_version = text.replacen("v1", "v9", 1);
        assert!(matches!(Dataset::from_text(&bad_version), Err(Error::Version { .. })));
    }

    #[test]
    fn save_and_load_from_disk() {
        let ds = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.txt");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert!(matches!(Dataset::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn fixated_fraction_per_positive_image() {
        let ds = generate(&GeneratorConfig::default()).unwrap();
        for img in ds.images.iter().filter(|i| i.class.is_some()) {
            let f = img.regions.iter().filter(|r| r.fixated).count() as f64 / img.regions.len() as f64;
            assert!((0.25..=0.45).contains(&f), "image {} fixated {f}", img.id);
        }
        let s = fixation_summary(&ds);
        assert!((s.fixated_fraction - 0.34).abs() < 0.02, "{s:?}");
    }

    /// Balanced accuracy of a linear SVM trained on `train` and scored on
    /// `test`, looking only at feature components in `dims`.
    fn held_out_balanced_accuracy(
        train: &[(Vec<f64>, f64)],
        test: &[(Vec<f64>, f64)],
        dims: std::ops::Range<usize>,
    ) -> f64 {
        let project = |set: &[(Vec<f64>, f64)]| -> Vec<(Vec<f64>, f64)> {
            set.iter().map(|(f, y)| (f[dims.clone()].to_vec(), *y)).collect()
        };
        let (train, test) = (project(train), project(test));
        // Positives are rare; replicate them so both classes weigh alike.
        let pos = train.iter().filter(|(_, y)| *y > 0.0).count();
        let copies = ((train.len() - pos) / pos.max(1)).max(1);
        let examples: Vec<(&[f64], f64)> = train
            .iter()
            .flat_map(|(f, y)| std::iter::repeat((f.as_slice(), *y)).take(if *y > 0.0 { copies } else { 1 }))
            .collect();
        let model = crate::svm::train(&examples, &crate::svm::SvmConfig::default()).unwrap();
        let rate = |label: f64| {
            let of: Vec<_> = test.iter().filter(|(_, y)| *y == label).collect();
            of.iter().filter(|(f, _)| model.score(f).signum() == label).count() as f64 / of.len() as f64
        };
        (rate(1.0) + rate(-1.0)) / 2.0
    }

    fn labelled(ds: &Dataset, split: Split, label: impl Fn(&Region) -> f64) -> Vec<(Vec<f64>, f64)> {
        ds.split(split)
            .flat_map(|img| &img.regions)
            .map(|r| (r.features.clone(), label(r)))
            .collect()
    }

    #[test]
    fn bounding_box_labels_are_linearly_separable() {
        let ds = generate(&GeneratorConfig::default()).unwrap();
        let bb = |split| -> Vec<(Vec<f64>, f64)> {
            ds.split(split)
                .flat_map(|img| {
                    bounding_box_labels(img, 0)
                        .into_iter()
                        .map(|(id, y)| (ds.features(id).to_vec(), y as f64))
                })
                .collect()
        };
        let acc = held_out_balanced_accuracy(&bb(Split::Train), &bb(Split::Test), 0..ds.dim());
        assert!(acc >= 0.9, "{acc}");
    }

    #[test]
    fn zero_separation_hides_targets_in_appearance() {
        let cfg = GeneratorConfig {
            separation: 0.0,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let is_target = |r: &Region| if r.kind == RegionKind::Target { 1.0 } else { -1.0 };
        // The pointer and geometric descriptors locate regions rather than
        // describe them, so only the signature block is examined.
        let dims = POINTER_DIMS..ds.dim() - GEOMETRY_DIMS;
        let acc = held_out_balanced_accuracy(
            &labelled(&ds, Split::Train, is_target),
            &labelled(&ds, Split::Test, is_target),
            dims.clone(),
        );
        assert!((acc - 0.5).abs() < 0.1, "{acc}");
        let control = generate(&GeneratorConfig::default()).unwrap();
        let acc = held_out_balanced_accuracy(
            &labelled(&control, Split::Train, is_target),
            &labelled(&control, Split::Test, is_target),
            dims,
        );
        assert!(acc > 0.7, "{acc}");
    }

    #[test]
    fn sub_parts_carry_the_class_pattern() {
        let ds = generate(&GeneratorConfig::default()).unwrap();
        let block = POINTER_DIMS..ds.dim() - GEOMETRY_DIMS;
        let mean = |kind: RegionKind| -> Vec<f64> {
            let rs: Vec<&Region> = ds.images.iter().flat_map(|i| &i.regions).filter(|r| r.kind == kind).collect();
            block
                .clone()
                .map(|d| rs.iter().map(|r| r.features[d]).sum::<f64>() / rs.len() as f64)
                .collect()
        };
        let background = mean(RegionKind::Clutter);
        let signature: Vec<f64> = mean(RegionKind::Target).iter().zip(&background).map(|(t, b)| t - b).collect();
        let cosine = |f: &[f64]| {
            let v: Vec<f64> = f[block.clone()].iter().zip(&background).map(|(x, b)| x - b).collect();
            let dot: f64 = v.iter().zip(&signature).map(|(a, b)| a * b).sum();
            dot / (v.iter().map(|x| x * x).sum::<f64>().sqrt() * signature.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let positives: Vec<&SyntheticImage> = ds.images.iter().filter(|i| i.class.is_some()).collect();
        let trapped = positives
            .iter()
            .filter(|img| {
                img.regions.iter().any(|r| {
                    img.ground_truth.iter().any(|g| containment_fraction(g, &r.rect) >= 0.8)
                        && r.rect != Rect::canvas()
                        && !img.ground_truth.iter().any(|g| iou(&r.rect, g) >= 0.5)
                        && cosine(&r.features) > 0.2
                })
            })
            .count();
        assert!(trapped as f64 >= 0.8 * positives.len() as f64, "{trapped}/{}", positives.len());
    }
}
