//! Reference implementations that share no code with the library beyond the
//! `Obb` accessors.

use std::collections::BTreeMap;

use sgforge::metrics::{Relation, RelationThresholds};
use sgforge::{Obb, SceneGraph};

type P3 = [f64; 3];
type P2 = [f64; 2];

fn to_local(b: &Obb, p: P3) -> P3 {
    let c = b.centroid();
    let (s, co) = b.yaw().sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [co * dx + s * dy, -s * dx + co * dy, p[2] - c[2]]
}

fn to_world(b: &Obb, l: P3) -> P3 {
    let c = b.centroid();
    let (s, co) = b.yaw().sin_cos();
    [c[0] + co * l[0] - s * l[1], c[1] + s * l[0] + co * l[1], c[2] + l[2]]
}

pub fn inside(b: &Obb, p: P3) -> bool {
    let l = to_local(b, p);
    let d = b.dims();
    (0..3).all(|k| l[k].abs() <= 0.5 * d[k])
}

/// Exact Euclidean distance from `p` to the solid box.
pub fn point_box_distance(b: &Obb, p: P3) -> f64 {
    let l = to_local(b, p);
    let d = b.dims();
    (0..3)
        .map(|k| (l[k].abs() - 0.5 * d[k]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn local_corners(b: &Obb) -> Vec<P3> {
    let d = b.dims();
    let mut out = Vec::with_capacity(8);
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                out.push([sx * d[0], sy * d[1], sz * d[2]]);
            }
        }
    }
    out
}

/// World-space samples along the 12 edges, spaced at most `step` apart.
pub fn edge_samples(b: &Obb, step: f64) -> Vec<P3> {
    let c = local_corners(b);
    let mut out = Vec::new();
    for i in 0..8 {
        for j in i + 1..8 {
            // Corners sharing two coordinates span an edge.
            let same = (0..3).filter(|&k| c[i][k] == c[j][k]).count();
            if same != 2 {
                continue;
            }
            let len = (0..3).map(|k| (c[i][k] - c[j][k]).abs()).sum::<f64>();
            let n = (len / step).ceil().max(1.0) as usize;
            for s in 0..=n {
                let t = s as f64 / n as f64;
                let l = [0, 1, 2].map(|k| c[i][k] + t * (c[j][k] - c[i][k]));
                out.push(to_world(b, l));
            }
        }
    }
    out
}

/// Sampling overlap test. Two convex solids intersect iff an edge of one
/// meets the other (or one contains the other, which shows at the corners),
/// so dense edge samples of both boxes decide overlap up to `step`.
pub fn overlap_oracle(a: &Obb, b: &Obb, step: f64) -> bool {
    edge_samples(a, step).into_iter().any(|p| inside(b, p)) || edge_samples(b, step).into_iter().any(|p| inside(a, p))
}

/// Grid samples on the six faces of `b`, at most `step` apart.
pub fn surface_samples(b: &Obb, step: f64) -> Vec<P3> {
    let d = b.dims();
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = (d[u] / step).ceil() as usize;
        let nv = (d[v] / step).ceil() as usize;
        for side in [-0.5, 0.5] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut l = [0.0; 3];
                    l[axis] = side * d[axis];
                    l[u] = (i as f64 / nu as f64 - 0.5) * d[u];
                    l[v] = (j as f64 / nv as f64 - 0.5) * d[v];
                    out.push(to_world(b, l));
                }
            }
        }
    }
    out
}

/// Minimum over surface samples of either box of the exact distance to the
/// other box. Overestimates the true distance by at most `step / √2`.
pub fn distance_oracle(a: &Obb, b: &Obb, step: f64) -> f64 {
    let one = |x: &Obb, y: &Obb| {
        surface_samples(x, step)
            .into_iter()
            .map(|p| point_box_distance(y, p))
            .fold(f64::INFINITY, f64::min)
    };
    one(a, b).min(one(b, a))
}

fn footprint(b: &Obb) -> Vec<P2> {
    local_corners(b)
        .into_iter()
        .filter(|l| l[2] < 0.0)
        .map(|l| {
            let w = to_world(b, l);
            [w[0], w[1]]
        })
        .collect()
}

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; counterclockwise, no collinear points.
fn convex_hull(mut pts: Vec<P2>) -> Vec<P2> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lower: Vec<P2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<P2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn origin_segment_distance(a: P2, b: P2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (-(a[0] * ab[0] + a[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a[0] + t * ab[0]).hypot(a[1] + t * ab[1])
}

/// Footprint distance via the Minkowski difference: the distance from the
/// origin to the hull of all vertex differences (0 when inside).
pub fn planar_distance(a: &Obb, b: &Obb) -> f64 {
    let (fa, fb) = (footprint(a), footprint(b));
    let diff: Vec<P2> = fa
        .iter()
        .flat_map(|p| fb.iter().map(move |q| [p[0] - q[0], p[1] - q[1]]))
        .collect();
    let hull = convex_hull(diff);
    let n = hull.len();
    let inside = (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], [0.0, 0.0]) >= 0.0);
    if inside {
        return 0.0;
    }
    (0..n)
        .map(|i| origin_segment_distance(hull[i], hull[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

pub fn box_distance(a: &Obb, b: &Obb) -> f64 {
    let (ca, cb) = (a.centroid(), b.centroid());
    let (ha, hb) = (0.5 * a.dims()[2], 0.5 * b.dims()[2]);
    let gap = ((ca[2] - ha).max(cb[2] - hb) - (ca[2] + ha).min(cb[2] + hb)).max(0.0);
    planar_distance(a, b).hypot(gap)
}

fn mirror_matches(a: &Obb, b: &Obb, class_a: usize, class_b: usize, th: &RelationThresholds) -> bool {
    if class_a != class_b {
        return false;
    }
    let (ca, cb) = (a.centroid(), b.centroid());
    let (dx, dy) = (cb[0] - ca[0], cb[1] - ca[1]);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return false;
    }
    let (da, db) = (a.dims(), b.dims());
    for k in 0..3 {
        let r = da[k] / db[k];
        if r > th.sym_dim_ratio || r < 1.0 / th.sym_dim_ratio {
            return false;
        }
    }
    // Reflect a's heading across the bisector line, whose direction is
    // perpendicular to the centroid offset.
    let u = [-dy / len, dx / len];
    let h = [a.yaw().cos(), a.yaw().sin()];
    let dot = h[0] * u[0] + h[1] * u[1];
    let r = [2.0 * dot * u[0] - h[0], 2.0 * dot * u[1] - h[1]];
    let hb = [b.yaw().cos(), b.yaw().sin()];
    // Headings are compared modulo a half turn.
    let c = (r[0] * hb[0] + r[1] * hb[1]).abs().min(1.0);
    c.acos() <= th.sym_yaw_tol
}

/// Whether the named relation holds for `(a, b)`.
pub fn relation_holds(name: &str, a: &Obb, b: &Obb, class_a: usize, class_b: usize, th: &RelationThresholds) -> bool {
    let (ca, cb) = (a.centroid(), b.centroid());
    let vol = |o: &Obb| o.dims().iter().product::<f64>();
    let top = |o: &Obb| o.centroid()[2] + 0.5 * o.dims()[2];
    match name {
        "left" => ca[0] < cb[0],
        "right" => ca[0] > cb[0],
        "behind" => ca[1] < cb[1],
        "front" => ca[1] > cb[1],
        "smaller" => vol(a) < vol(b),
        "larger" => vol(a) > vol(b),
        "shorter" => top(a) < top(b),
        "taller" => top(a) > top(b),
        "close_by" => box_distance(a, b) <= th.close_by,
        "symmetrical" => mirror_matches(a, b, class_a, class_b, th),
        other => panic!("no oracle for {other}"),
    }
}

/// Per-relation `(satisfied, total)` over the edges of `graph`, judged by
/// each edge's top-1 predicate.
pub fn brute_force_counts(
    graph: &SceneGraph,
    boxes: &BTreeMap<u64, Obb>,
    th: &RelationThresholds,
) -> BTreeMap<Relation, (usize, usize)> {
    let top1 = |p: &[f64]| {
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    };
    let class: BTreeMap<u64, usize> = graph.nodes.iter().map(|n| (n.id, top1(n.class_dist.probs()))).collect();
    let mut out = BTreeMap::new();
    for e in &graph.edges {
        let name = &graph.vocab.predicates[top1(e.predicate_dist.probs())];
        let ok = relation_holds(name, &boxes[&e.src], &boxes[&e.dst], class[&e.src], class[&e.dst], th);
        let rel: Relation = name.parse().unwrap();
        let c = out.entry(rel).or_insert((0, 0));
        c.0 += ok as usize;
        c.1 += 1;
    }
    out
}
