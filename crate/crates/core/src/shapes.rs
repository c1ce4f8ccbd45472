//! Procedural shape catalog, code retrieval, scene assembly and OBJ export.
//!
//! Each catalog entry pairs a unit-norm 8-d shape code with a parametric mesh
//! generator. Canonical meshes are centered at the origin with their largest
//! axis-aligned extent equal to 1; assembly scales each axis to the box
//! dimensions, applies the yaw and moves the mesh to the box centroid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Obb;
use crate::graph::NodeId;
use crate::io_util::write_atomic;

pub const SHAPE_CODE_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    Box,
    Cylinder { segments: usize },
    TaperedBox { top_scale: f64 },
    /// Table/chair archetype: a top plate on four corner legs.
    BoxWithLegs { top_thickness: f64, leg_width: f64 },
    /// Shelf archetype: horizontal plates between two side panels.
    Slab { plates: usize, thickness: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    fn add_box(&mut self, lo: [f64; 3], hi: [f64; 3]) {
        let base = self.vertices.len();
        for k in 0..8 {
            self.vertices.push([
                if k & 1 == 0 { lo[0] } else { hi[0] },
                if k & 2 == 0 { lo[1] } else { hi[1] },
                if k & 4 == 0 { lo[2] } else { hi[2] },
            ]);
        }
        self.add_hexahedron_faces(base);
    }

    /// Faces of 8 vertices laid out with bit0 = x, bit1 = y, bit2 = z.
    fn add_hexahedron_faces(&mut self, b: usize) {
        const QUADS: [[usize; 4]; 6] = [
            [0, 2, 3, 1], // bottom (−z)
            [4, 5, 7, 6], // top (+z)
            [0, 1, 5, 4], // −y
            [2, 6, 7, 3], // +y
            [0, 4, 6, 2], // −x
            [1, 3, 7, 5], // +x
        ];
        for q in QUADS {
            self.triangles.push([b + q[0], b + q[1], b + q[2]]);
            self.triangles.push([b + q[0], b + q[2], b + q[3]]);
        }
    }

    /// Axis-aligned `(min, max)` per axis.
    pub fn extents(&self) -> [(f64, f64); 3] {
        let mut e = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for v in &self.vertices {
            for k in 0..3 {
                e[k].0 = e[k].0.min(v[k]);
                e[k].1 = e[k].1.max(v[k]);
            }
        }
        e
    }

    pub fn triangle_area(&self, t: [usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.triangles {
            if t.iter().any(|i| *i >= self.vertices.len()) {
                return Err(Error::Validation(format!("triangle {t:?} indexes past the vertex list")));
            }
            if self.triangle_area(*t) <= 1e-12 {
                return Err(Error::Validation(format!("degenerate triangle {t:?}")));
            }
        }
        Ok(())
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|c| *c == 2)
    }

    /// Recenters on the bounding-box center and scales to unit max extent.
    fn canonicalize(mut self) -> Mesh {
        let e = self.extents();
        let center = [0, 1, 2].map(|k| 0.5 * (e[k].0 + e[k].1));
        let size = (0..3).map(|k| e[k].1 - e[k].0).fold(0.0, f64::max);
        for v in &mut self.vertices {
            for k in 0..3 {
                v[k] = (v[k] - center[k]) / size;
            }
        }
        self
    }
}

impl Generator {
    /// Canonical mesh (centered, unit max extent).
    pub fn build(&self) -> Mesh {
        let mut m = Mesh::default();
        match *self {
            Generator::Box => m.add_box([-0.5; 3], [0.5; 3]),
            Generator::Cylinder { segments } => {
                let n = segments.max(3);
                for z in [-0.5, 0.5] {
                    for k in 0..n {
                        let a = std::f64::consts::TAU * k as f64 / n as f64;
                        m.vertices.push([0.5 * a.cos(), 0.5 * a.sin(), z]);
                    }
                }
                m.vertices.push([0.0, 0.0, -0.5]);
                m.vertices.push([0.0, 0.0, 0.5]);
                let (cb, ct) = (2 * n, 2 * n + 1);
                for k in 0..n {
                    let k1 = (k + 1) % n;
                    m.triangles.push([cb, k1, k]);
                    m.triangles.push([ct, n + k, n + k1]);
                    m.triangles.push([k, k1, n + k1]);
                    m.triangles.push([k, n + k1, n + k]);
                }
            }
            Generator::TaperedBox { top_scale } => {
                let s = top_scale.clamp(0.05, 1.0) * 0.5;
                for k in 0..8 {
                    let h = if k & 4 == 0 { 0.5 } else { s };
                    m.vertices.push([
                        if k & 1 == 0 { -h } else { h },
                        if k & 2 == 0 { -h } else { h },
                        if k & 4 == 0 { -0.5 } else { 0.5 },
                    ]);
                }
                m.add_hexahedron_faces(0);
            }
            Generator::BoxWithLegs { top_thickness, leg_width } => {
                let t = top_thickness.clamp(0.02, 0.9);
                let w = leg_width.clamp(0.02, 0.45);
                m.add_box([-0.5, -0.5, 0.5 - t], [0.5, 0.5, 0.5]);
                for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                    let x0 = if sx < 0.0 { -0.5 } else { 0.5 - w };
                    let y0 = if sy < 0.0 { -0.5 } else { 0.5 - w };
                    m.add_box([x0, y0, -0.5], [x0 + w, y0 + w, 0.5 - t]);
                }
            }
            Generator::Slab { plates, thickness } => {
                let n = plates.max(2);
                let t = thickness.clamp(0.01, 0.5 / n as f64);
                m.add_box([-0.5, -0.5, -0.5], [-0.5 + t, 0.5, 0.5]);
                m.add_box([0.5 - t, -0.5, -0.5], [0.5, 0.5, 0.5]);
                for p in 0..n {
                    let z = -0.5 + (1.0 - t) * p as f64 / (n - 1) as f64;
                    m.add_box([-0.5 + t, -0.5, z], [0.5 - t, 0.5, z + t]);
                }
            }
        }
        m.canonicalize()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub class: String,
    pub code: Vec<f64>,
    #[serde(flatten)]
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeCatalog {
    pub entries: Vec<CatalogEntry>,
}

fn archetypes(class: &str) -> [Generator; 2] {
    use Generator::*;
    match class {
        "table" | "desk" => [
            BoxWithLegs { top_thickness: 0.08, leg_width: 0.08 },
            BoxWithLegs { top_thickness: 0.15, leg_width: 0.12 },
        ],
        "chair" => [
            BoxWithLegs { top_thickness: 0.12, leg_width: 0.1 },
            TaperedBox { top_scale: 0.8 },
        ],
        "sofa" | "bed" => [Box, TaperedBox { top_scale: 0.9 }],
        "lamp" | "plant" => [Cylinder { segments: 16 }, TaperedBox { top_scale: 0.3 }],
        "shelf" | "tv_stand" => [Slab { plates: 4, thickness: 0.05 }, Slab { plates: 3, thickness: 0.08 }],
        "cabinet" | "wardrobe" | "nightstand" => [Box, Slab { plates: 2, thickness: 0.1 }],
        _ => [Box, Cylinder { segments: 12 }],
    }
}

fn unit_code(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..SHAPE_CODE_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl ShapeCatalog {
    /// Two archetype entries per class with seeded unit-norm codes.
    pub fn procedural(classes: &[String], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let entries = classes
            .iter()
            .flat_map(|c| {
                archetypes(c)
                    .into_iter()
                    .map(|g| CatalogEntry {
                        class: c.clone(),
                        code: unit_code(&mut rng),
                        generator: g,
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        ShapeCatalog { entries }
    }

    pub fn validate(&self, classes: &[String]) -> Result<()> {
        for c in classes {
            if self.entries.iter().filter(|e| &e.class == c).count() < 2 {
                return Err(Error::Validation(format!("catalog has fewer than two entries for {c}")));
            }
        }
        let mut seen: BTreeSet<(String, Vec<u64>)> = BTreeSet::new();
        for e in &self.entries {
            if e.code.len() != SHAPE_CODE_DIM {
                return Err(Error::Validation(format!("catalog code for {} has length {}", e.class, e.code.len())));
            }
            let norm = e.code.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("catalog code for {} is not unit norm", e.class)));
            }
            if !seen.insert((e.class.clone(), e.code.iter().map(|x| x.to_bits()).collect())) {
                return Err(Error::Validation(format!("duplicate code within class {}", e.class)));
            }
            e.generator.build().validate()?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Indices of entries of one class.
    pub fn class_entries(&self, class: &str) -> Vec<usize> {
        (0..self.entries.len()).filter(|i| self.entries[*i].class == class).collect()
    }

    /// Entry of `class` with the highest cosine similarity to `code`
    /// (ties to the lowest index).
    pub fn retrieve(&self, code: &[f64], class: &str) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in self.class_entries(class) {
            let s = cosine(code, &self.entries[i].code);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|b| b.0)
            .ok_or_else(|| Error::Validation(format!("class {class:?} is not in the shape catalog")))
    }
}

/// One decoded object: box, class and shape code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutNode {
    pub id: NodeId,
    pub class: String,
    pub obb: Obb,
    pub shape_code: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub nodes: Vec<LayoutNode>,
}

impl Layout {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: NodeId,
    pub class: String,
    pub obb: Obb,
    pub shape_code: Vec<f64>,
    pub entry: usize,
    pub mesh: Mesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Places `canonical` inside `obb`: per-axis scale to the box dimensions,
/// yaw rotation, then translation to the centroid.
pub fn place_mesh(canonical: &Mesh, obb: &Obb) -> Mesh {
    let e = canonical.extents();
    let dims = obb.dims();
    let c = obb.centroid();
    let center = [0, 1, 2].map(|k| 0.5 * (e[k].0 + e[k].1));
    let scale = [0, 1, 2].map(|k| dims[k] / (e[k].1 - e[k].0));
    let vertices = canonical
        .vertices
        .iter()
        .map(|v| {
            let local = [0, 1, 2].map(|k| (v[k] - center[k]) * scale[k]);
            let r = obb.rotate(local);
            [r[0] + c[0], r[1] + c[1], r[2] + c[2]]
        })
        .collect();
    Mesh {
        vertices,
        triangles: canonical.triangles.clone(),
    }
}

pub fn assemble(layout: &Layout, catalog: &ShapeCatalog) -> Result<Scene> {
    let mut objects = Vec::with_capacity(layout.nodes.len());
    for n in &layout.nodes {
        if n.shape_code.len() != SHAPE_CODE_DIM {
            return Err(Error::Validation(format!("node {} has no {SHAPE_CODE_DIM}-d shape code", n.id)));
        }
        let entry = catalog.retrieve(&n.shape_code, &n.class)?;
        let mesh = place_mesh(&catalog.entries[entry].generator.build(), &n.obb);
        objects.push(SceneObject {
            id: n.id,
            class: n.class.clone(),
            obb: n.obb,
            shape_code: n.shape_code.clone(),
            entry,
            mesh,
        });
    }
    Ok(Scene { objects })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarObject {
    pub id: NodeId,
    pub class: String,
    pub obb: Obb,
    pub shape_code: Vec<f64>,
    pub entry: usize,
    pub vertex_count: usize,
    pub triangle_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub objects: Vec<SidecarObject>,
}

pub fn group_name(id: NodeId, class: &str) -> String {
    format!("node_{id}_{class}")
}

pub fn to_obj(scene: &Scene) -> String {
    let mut s = String::new();
    let mut base = 1;
    for o in &scene.objects {
        let _ = writeln!(s, "o {}", group_name(o.id, &o.class));
        for v in &o.mesh.vertices {
            // Shortest round-trip formatting keeps the export lossless.
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &o.mesh.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + base, t[1] + base, t[2] + base);
        }
        base += o.mesh.vertices.len();
    }
    s
}

pub fn to_sidecar(scene: &Scene) -> Sidecar {
    Sidecar {
        objects: scene
            .objects
            .iter()
            .map(|o| SidecarObject {
                id: o.id,
                class: o.class.clone(),
                obb: o.obb,
                shape_code: o.shape_code.clone(),
                entry: o.entry,
                vertex_count: o.mesh.vertices.len(),
                triangle_count: o.mesh.triangles.len(),
            })
            .collect(),
    }
}

/// One `o` group of a parsed OBJ file with group-local triangle indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjGroup {
    pub name: String,
    pub mesh: Mesh,
}

pub fn parse_obj(text: &str) -> Result<Vec<ObjGroup>> {
    let mut groups: Vec<ObjGroup> = Vec::new();
    let mut offset = 0usize;
    let mut total = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::Dataset {
            line: ln + 1,
            msg: m.to_string(),
        };
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("o") => {
                offset = total;
                groups.push(ObjGroup {
                    name: parts.next().ok_or_else(|| bad("unnamed group"))?.to_string(),
                    mesh: Mesh::default(),
                });
            }
            Some("v") => {
                let g = groups.last_mut().ok_or_else(|| bad("vertex before any group"))?;
                let c: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                g.mesh.vertices.push([c[0], c[1], c[2]]);
                total += 1;
            }
            Some("f") => {
                let g = groups.last_mut().ok_or_else(|| bad("face before any group"))?;
                let idx: Vec<usize> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or(p);
                        first.parse::<usize>().map_err(|_| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.iter().any(|i| *i <= offset || *i > total) {
                    return Err(bad("face must reference three vertices of its group"));
                }
                g.mesh.triangles.push([idx[0] - 1 - offset, idx[1] - 1 - offset, idx[2] - 1 - offset]);
            }
            Some(t) if t.starts_with('#') => {}
            None => {}
            Some(other) => return Err(bad(&format!("unsupported record {other:?}"))),
        }
    }
    Ok(groups)
}

/// Rebuilds a scene from an OBJ file and its sidecar, checking that group
/// names and counts agree. Vertex positions come from the OBJ text.
pub fn scene_from_export(obj: &str, sidecar: &Sidecar) -> Result<Scene> {
    let groups = parse_obj(obj)?;
    if groups.len() != sidecar.objects.len() {
        return Err(Error::Validation(format!(
            "OBJ has {} groups but sidecar lists {} objects",
            groups.len(),
            sidecar.objects.len()
        )));
    }
    let mut objects = Vec::with_capacity(groups.len());
    for (g, s) in groups.into_iter().zip(&sidecar.objects) {
        if g.name != group_name(s.id, &s.class)
            || g.mesh.vertices.len() != s.vertex_count
            || g.mesh.triangles.len() != s.triangle_count
        {
            return Err(Error::Validation(format!("OBJ group {} disagrees with the sidecar", g.name)));
        }
        objects.push(SceneObject {
            id: s.id,
            class: s.class.clone(),
            obb: s.obb,
            shape_code: s.shape_code.clone(),
            entry: s.entry,
            mesh: g.mesh,
        });
    }
    Ok(Scene { objects })
}

pub fn sidecar_path(obj_path: &Path) -> PathBuf {
    obj_path.with_extension("json")
}

/// Writes `<path>` (OBJ) and the JSON sidecar next to it. Both texts are
/// rendered before anything touches the disk.
pub fn export_scene(scene: &Scene, obj_path: &Path) -> Result<()> {
    if scene.objects.is_empty() {
        return Err(Error::Validation("cannot export an empty scene".into()));
    }
    let obj = to_obj(scene);
    let mut side = serde_json::to_string_pretty(&to_sidecar(scene))?;
    side.push('\n');
    write_atomic(obj_path, obj.as_bytes())?;
    write_atomic(&sidecar_path(obj_path), side.as_bytes())
}
