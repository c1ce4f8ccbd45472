//! Geometric layout relations between two boxes and their annotation.
//!
//! Frame: +x right, +y front, +z up. Mirrored relations use strict
//! inequalities, so an exact tie makes both members of a pair false.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{obb_distance, Obb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Left,
    Right,
    Front,
    Behind,
    Smaller,
    Larger,
    Taller,
    Shorter,
    CloseBy,
    Symmetrical,
}

impl Relation {
    pub const ALL: [Relation; 10] = [
        Relation::Left,
        Relation::Right,
        Relation::Front,
        Relation::Behind,
        Relation::Smaller,
        Relation::Larger,
        Relation::Taller,
        Relation::Shorter,
        Relation::CloseBy,
        Relation::Symmetrical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Front => "front",
            Relation::Behind => "behind",
            Relation::Smaller => "smaller",
            Relation::Larger => "larger",
            Relation::Taller => "taller",
            Relation::Shorter => "shorter",
            Relation::CloseBy => "close_by",
            Relation::Symmetrical => "symmetrical",
        }
    }

    /// Decidable from box coordinates alone (no threshold).
    pub fn is_easy(self) -> bool {
        !matches!(self, Relation::CloseBy | Relation::Symmetrical)
    }

    /// The relation that holds for `(j, i)` whenever `self` holds for `(i, j)`.
    pub fn mirror(self) -> Relation {
        match self {
            Relation::Left => Relation::Right,
            Relation::Right => Relation::Left,
            Relation::Front => Relation::Behind,
            Relation::Behind => Relation::Front,
            Relation::Smaller => Relation::Larger,
            Relation::Larger => Relation::Smaller,
            Relation::Taller => Relation::Shorter,
            Relation::Shorter => Relation::Taller,
            r => r,
        }
    }

    pub fn names() -> Vec<String> {
        Relation::ALL.iter().map(|r| r.name().to_string()).collect()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Validation(format!("unsupported predicate {s:?}")))
    }
}

/// Thresholds for the two relations that need them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationThresholds {
    /// Maximum surface distance for `close_by`, meters.
    pub close_by: f64,
    /// Allowed per-axis dimension ratio for `symmetrical`.
    pub sym_dim_ratio: f64,
    /// Allowed yaw mismatch for `symmetrical` after reflection, radians (mod π).
    pub sym_yaw_tol: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        RelationThresholds {
            close_by: 0.45,
            sym_dim_ratio: 1.1,
            sym_yaw_tol: 0.45,
        }
    }
}

/// A box with the class index used by `symmetrical`.
#[derive(Debug, Clone, Copy)]
pub struct Placed<'a> {
    pub obb: &'a Obb,
    pub class: usize,
}

/// Signed remainder of `x` modulo `period`, in `[-period/2, period/2)`.
pub fn wrap_signed(x: f64, period: f64) -> f64 {
    let r = (x + period / 2.0).rem_euclid(period);
    r - period / 2.0
}

/// Reflects box `a` across the vertical plane that perpendicularly bisects the
/// segment between the two centroids and compares it with `b`.
pub fn symmetrical(a: &Obb, b: &Obb, th: &RelationThresholds) -> bool {
    let (ca, cb) = (a.centroid(), b.centroid());
    let (dx, dy) = (cb[0] - ca[0], cb[1] - ca[1]);
    if dx == 0.0 && dy == 0.0 {
        return false;
    }
    let (da, db) = (a.dims(), b.dims());
    let lo = 1.0 / th.sym_dim_ratio;
    if !(0..3).all(|k| {
        let r = da[k] / db[k];
        r >= lo && r <= th.sym_dim_ratio
    }) {
        return false;
    }
    // A direction at angle θ reflects across a line at angle β + π/2 to
    // 2β + π − θ; box yaw is only defined modulo π.
    let two_beta = (2.0 * dx * dy).atan2(dx * dx - dy * dy);
    let reflected = two_beta + PI - a.yaw();
    wrap_signed(reflected - b.yaw(), PI).abs() <= th.sym_yaw_tol
}

/// Whether `rel(i, j)` holds.
pub fn holds(rel: Relation, i: Placed<'_>, j: Placed<'_>, th: &RelationThresholds) -> bool {
    let (a, b) = (i.obb, j.obb);
    let (ca, cb) = (a.centroid(), b.centroid());
    match rel {
        Relation::Left => ca[0] < cb[0],
        Relation::Right => ca[0] > cb[0],
        Relation::Behind => ca[1] < cb[1],
        Relation::Front => ca[1] > cb[1],
        Relation::Smaller => a.volume() < b.volume(),
        Relation::Larger => a.volume() > b.volume(),
        Relation::Shorter => a.top() < b.top(),
        Relation::Taller => a.top() > b.top(),
        Relation::CloseBy => obb_distance(a, b) <= th.close_by,
        Relation::Symmetrical => i.class == j.class && symmetrical(a, b, th),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Every relation that holds.
    #[default]
    All,
    /// At most one relation per ordered pair (see [`most_specific`]).
    MostSpecific,
}

impl FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AnnotationMode::All),
            "most_specific" => Ok(AnnotationMode::MostSpecific),
            _ => Err(Error::Config(format!("unknown annotation mode {s:?}"))),
        }
    }
}

/// Single label for an ordered pair: `symmetrical` first, then `close_by`,
/// otherwise the direction family (x, y, top, size) with the largest gap in
/// meters, oriented by sign. `None` only when nothing holds.
pub fn most_specific(i: Placed<'_>, j: Placed<'_>, th: &RelationThresholds) -> Option<Relation> {
    for r in [Relation::Symmetrical, Relation::CloseBy] {
        if holds(r, i, j, th) {
            return Some(r);
        }
    }
    let (ca, cb) = (i.obb.centroid(), j.obb.centroid());
    let families = [
        (cb[0] - ca[0], Relation::Left, Relation::Right),
        (cb[1] - ca[1], Relation::Behind, Relation::Front),
        (j.obb.top() - i.obb.top(), Relation::Shorter, Relation::Taller),
        (j.obb.volume().cbrt() - i.obb.volume().cbrt(), Relation::Smaller, Relation::Larger),
    ];
    let mut best: Option<(f64, Relation)> = None;
    for (gap, pos, neg) in families {
        let rel = if gap > 0.0 { pos } else { neg };
        if !holds(rel, i, j, th) {
            continue;
        }
        if best.is_none_or(|(g, _)| gap.abs() > g) {
            best = Some((gap.abs(), rel));
        }
    }
    best.map(|(_, r)| r)
}

/// Relations of ordered pairs `(i, j)`, `i ≠ j`, as `(i, j, relation)`.
/// With `pairs = None` every ordered pair is considered.
pub fn annotate(
    boxes: &[Placed<'_>],
    pairs: Option<&[(usize, usize)]>,
    mode: AnnotationMode,
    th: &RelationThresholds,
) -> Vec<(usize, usize, Relation)> {
    let all: Vec<(usize, usize)>;
    let pairs = match pairs {
        Some(p) => p,
        None => {
            all = (0..boxes.len())
                .flat_map(|i| (0..boxes.len()).filter(move |j| *j != i).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut out = Vec::new();
    for &(i, j) in pairs {
        match mode {
            AnnotationMode::All => {
                for r in Relation::ALL {
                    if holds(r, boxes[i], boxes[j], th) {
                        out.push((i, j, r));
                    }
                }
            }
            AnnotationMode::MostSpecific => {
                if let Some(r) = most_specific(boxes[i], boxes[j], th) {
                    out.push((i, j, r));
                }
            }
        }
    }
    out
}
