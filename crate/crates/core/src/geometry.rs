//! Axis-aligned rectangles on the unit canvas and the topological region
//! sets built from them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a dataset-wide region table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId(pub usize);

impl RegionId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Closed axis-aligned rectangle with strictly positive area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidRect { x1, y1, x2, y2 });
        }
        Ok(Rect { x1, y1, x2, y2 })
    }

    /// The full unit canvas `[0,1]²`.
    pub fn canvas() -> Self {
        Rect {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0]
    }

    pub fn half_extent(&self) -> [f64; 2] {
        [self.width() / 2.0, self.height() / 2.0]
    }

    /// Point membership, boundary included.
    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x1 && p[0] <= self.x2 && p[1] >= self.y1 && p[1] <= self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`, used for tie-breaking.
    pub fn lex_cmp(&self, other: &Rect) -> std::cmp::Ordering {
        self.corners()
            .iter()
            .zip(other.corners().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn intersection_area(a: &Rect, b: &Rect) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `inner`'s area covered by `outer`.
pub fn containment_fraction(outer: &Rect, inner: &Rect) -> f64 {
    (intersection_area(outer, inner) / inner.area()).clamp(0.0, 1.0)
}

/// Regions of `pool` (other than `r`) whose area lies mostly inside `r`:
/// `containment_fraction(r, r') >= threshold`.
pub fn subregion_set(r: RegionId, pool: &[(RegionId, Rect)], threshold: f64) -> Vec<RegionId> {
    let Some(rect) = lookup(r, pool) else {
        return Vec::new();
    };
    pool.iter()
        .filter(|(id, other)| *id != r && containment_fraction(&rect, other) >= threshold)
        .map(|(id, _)| *id)
        .collect()
}

/// Regions of `pool` (other than `r`) overlapping `r` with IoU at least
/// `threshold`.
pub fn fringe_set(r: RegionId, pool: &[(RegionId, Rect)], threshold: f64) -> Vec<RegionId> {
    let Some(rect) = lookup(r, pool) else {
        return Vec::new();
    };
    pool.iter()
        .filter(|(id, other)| *id != r && iou(&rect, other) >= threshold)
        .map(|(id, _)| *id)
        .collect()
}

fn lookup(r: RegionId, pool: &[(RegionId, Rect)]) -> Option<Rect> {
    pool.iter().find(|(id, _)| *id == r).map(|(_, rect)| *rect)
}
