//! Oriented bounding boxes with yaw-only rotation.
//!
//! Frame convention: right-handed, +z up, meters. Yaw rotates counterclockwise
//! about +z when viewed from above. Because rotation never tilts the vertical
//! axis, every box is a prism: a rectangle in the ground plane extruded over a
//! vertical interval. Overlap and distance queries split into a 2D polygon
//! problem and a 1D interval problem.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted box dimension in meters.
pub const MIN_DIM: f64 = 1e-6;

/// Default inflation used when building the neighbor graph.
pub const DEFAULT_NEIGHBOR_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObbRepr", into = "ObbRepr")]
pub struct Obb {
    centroid: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct ObbRepr {
    centroid: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
}

impl TryFrom<ObbRepr> for Obb {
    type Error = Error;

    fn try_from(r: ObbRepr) -> Result<Self> {
        Obb::new(r.centroid, r.dims, r.yaw)
    }
}

impl From<Obb> for ObbRepr {
    fn from(o: Obb) -> Self {
        ObbRepr {
            centroid: o.centroid,
            dims: o.dims,
            yaw: o.yaw,
        }
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(TAU);
    if y >= TAU {
        0.0
    } else {
        y
    }
}

impl Obb {
    /// `dims` is (width along local x, depth along local y, height).
    pub fn new(centroid: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        if centroid.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry(format!(
                "centroid must be finite, got {centroid:?}"
            )));
        }
        if dims.iter().any(|d| !d.is_finite() || *d <= MIN_DIM) {
            return Err(Error::Geometry(format!(
                "dims must be finite and > {MIN_DIM}, got {dims:?}"
            )));
        }
        if !yaw.is_finite() {
            return Err(Error::Geometry(format!("yaw must be finite, got {yaw}")));
        }
        Ok(Obb {
            centroid,
            dims,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn centroid(&self) -> [f64; 3] {
        self.centroid
    }

    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Height of the top face.
    pub fn top(&self) -> f64 {
        self.centroid[2] + 0.5 * self.dims[2]
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = 0.5 * self.dims[2];
        (self.centroid[2] - h, self.centroid[2] + h)
    }

    /// Grows every dimension by `2 * margin` (the box gains `margin` on each side).
    pub fn inflated(&self, margin: f64) -> Result<Obb> {
        let m = 2.0 * margin;
        Obb::new(
            self.centroid,
            [self.dims[0] + m, self.dims[1] + m, self.dims[2] + m],
            self.yaw,
        )
    }

    pub fn translated(&self, offset: [f64; 3]) -> Obb {
        Obb {
            centroid: [
                self.centroid[0] + offset[0],
                self.centroid[1] + offset[1],
                self.centroid[2] + offset[2],
            ],
            ..*self
        }
    }

    /// Rotates a local-frame offset into the world frame (yaw only).
    pub fn rotate(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * local[0] - s * local[1],
            s * local[0] + c * local[1],
            local[2],
        ]
    }

    /// The 8 corners. Corner `k` uses the sign pattern of its bits:
    /// bit 0 selects -/+ half width, bit 1 -/+ half depth, bit 2 -/+ half height.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let half = [0.5 * self.dims[0], 0.5 * self.dims[1], 0.5 * self.dims[2]];
        let mut out = [[0.0; 3]; 8];
        for (k, corner) in out.iter_mut().enumerate() {
            let sign = |bit: usize| if k & (1 << bit) != 0 { 1.0 } else { -1.0 };
            let local = [sign(0) * half[0], sign(1) * half[1], sign(2) * half[2]];
            let w = self.rotate(local);
            *corner = [
                self.centroid[0] + w[0],
                self.centroid[1] + w[1],
                self.centroid[2] + w[2],
            ];
        }
        out
    }

    /// Ground-plane rectangle, counterclockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let hw = 0.5 * self.dims[0];
        let hd = 0.5 * self.dims[1];
        let (s, c) = self.yaw.sin_cos();
        let local = [[-hw, -hd], [hw, -hd], [hw, hd], [-hw, hd]];
        local.map(|[x, y]| {
            [
                self.centroid[0] + c * x - s * y,
                self.centroid[1] + s * x + c * y,
            ]
        })
    }

    /// Per-axis (min, max) over the world-space corners.
    pub fn world_extents(&self) -> [(f64, f64); 3] {
        let corners = self.corners();
        let mut ext = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for c in &corners {
            for k in 0..3 {
                ext[k].0 = ext[k].0.min(c[k]);
                ext[k].1 = ext[k].1.max(c[k]);
            }
        }
        ext
    }

    /// Whether a world point lies inside the closed box.
    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        let d = [
            p[0] - self.centroid[0],
            p[1] - self.centroid[1],
            p[2] - self.centroid[2],
        ];
        let (s, c) = self.yaw.sin_cos();
        let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        (0..3).all(|k| local[k].abs() <= 0.5 * self.dims[k] + tol)
    }
}

fn project(poly: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in poly {
        let d = p[0] * axis[0] + p[1] * axis[1];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (lo, hi)
}

fn edge_normals(poly: &[[f64; 2]; 4]) -> [[f64; 2]; 2] {
    let e0 = [poly[1][0] - poly[0][0], poly[1][1] - poly[0][1]];
    let e1 = [poly[2][0] - poly[1][0], poly[2][1] - poly[1][1]];
    [[-e0[1], e0[0]], [-e1[1], e1[0]]]
}

/// Separating-axis test on two rectangles. Touching counts as overlapping.
fn footprints_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for axis in edge_normals(a).into_iter().chain(edge_normals(b)) {
        let (alo, ahi) = project(a, axis);
        let (blo, bhi) = project(b, axis);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

/// Distance between two disjoint convex polygons: the minimum over
/// vertex-to-edge distances in both directions.
fn polygon_distance(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    let mut best = f64::INFINITY;
    for (from, to) in [(a, b), (b, a)] {
        for &p in from.iter() {
            for i in 0..4 {
                best = best.min(point_segment_distance(p, to[i], to[(i + 1) % 4]));
            }
        }
    }
    best
}

fn vertical_gap(a: &Obb, b: &Obb) -> f64 {
    let (alo, ahi) = a.z_range();
    let (blo, bhi) = b.z_range();
    (alo.max(blo) - ahi.min(bhi)).max(0.0)
}

/// True iff the two closed boxes intersect.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    vertical_gap(a, b) == 0.0 && footprints_overlap(&a.footprint(), &b.footprint())
}

/// Euclidean distance between the closest points of two boxes; 0 iff they overlap.
pub fn obb_distance(a: &Obb, b: &Obb) -> f64 {
    let fa = a.footprint();
    let fb = b.footprint();
    let planar = if footprints_overlap(&fa, &fb) {
        0.0
    } else {
        polygon_distance(&fa, &fb)
    };
    let vert = vertical_gap(a, b);
    (planar * planar + vert * vert).sqrt()
}

/// Relative pose descriptor, ordered (Δmax_x, Δmin_x, Δmax_y, Δmin_y, Δmax_z, Δmin_z)
/// where Δ is `a - b` over world-space corner extents.
pub fn pose_descriptor(a: &Obb, b: &Obb) -> [f64; 6] {
    let ea = a.world_extents();
    let eb = b.world_extents();
    let mut out = [0.0; 6];
    for k in 0..3 {
        out[2 * k] = ea[k].1 - eb[k].1;
        out[2 * k + 1] = ea[k].0 - eb[k].0;
    }
    out
}

/// Directed index pairs `(i, j)`, `i != j`, whose boxes overlap after
/// inflating both by `margin`. Every undirected pair appears in both directions,
/// sorted by `(i, j)`.
pub fn neighbor_pairs(boxes: &[Obb], margin: f64) -> Result<Vec<(usize, usize)>> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Geometry(format!(
            "neighbor margin must be >= 0, got {margin}"
        )));
    }
    let inflated = boxes
        .iter()
        .map(|b| b.inflated(margin))
        .collect::<Result<Vec<_>>>()?;
    let n = inflated.len();
    let mut adj = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if obb_overlap(&inflated[i], &inflated[j]) {
                adj[i * n + j] = true;
                adj[j * n + i] = true;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if adj[i * n + j] {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}
