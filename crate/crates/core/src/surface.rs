//! Dense implicit-field sampling around occupied cells, iso-surface
//! extraction and point/mesh export.
//!
//! Field nodes are the centres of fine cells obtained by splitting every
//! coarse cell into `u^3` children: fine cell `F` sits at
//! `origin + (F + 0.5) * ε / u`. Only coarse cells within the 3x3x3
//! dilation of the occupied set are sampled.

mod tables;

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autoencoder::{Autoencoder, FieldMode};
use crate::error::{Error, Result};
use crate::grid::{Coord, SparseState};
use crate::net::ParamStore;

const QUERY_CHUNK: usize = 4096;

/// Scalar samples on a sparse set of fine nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    nodes: Vec<Coord>,
    values: Vec<f64>,
    index: HashMap<Coord, usize>,
    origin: f64,
    spacing: f64,
    upsample: u32,
    mode: FieldMode,
}

impl ScalarField {
    /// Sample `f` at the given fine nodes (deduplicated and sorted).
    pub fn from_fn(
        nodes: impl IntoIterator<Item = Coord>,
        origin: f64,
        spacing: f64,
        upsample: u32,
        mode: FieldMode,
        f: impl Fn([f64; 3]) -> f64,
    ) -> Self {
        let mut nodes: Vec<Coord> = nodes.into_iter().collect();
        nodes.sort_unstable();
        nodes.dedup();
        let values = nodes
            .iter()
            .map(|&c| f(node_position(c, origin, spacing)))
            .collect();
        Self::from_parts(nodes, values, origin, spacing, upsample, mode)
    }

    fn from_parts(
        nodes: Vec<Coord>,
        values: Vec<f64>,
        origin: f64,
        spacing: f64,
        upsample: u32,
        mode: FieldMode,
    ) -> Self {
        let index = nodes.iter().enumerate().map(|(n, c)| (*c, n)).collect();
        ScalarField {
            nodes,
            values,
            index,
            origin,
            spacing,
            upsample,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Coord] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn upsample(&self) -> u32 {
        self.upsample
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn get(&self, c: Coord) -> Option<f64> {
        self.index.get(&c).map(|&n| self.values[n])
    }

    pub fn position(&self, c: Coord) -> [f64; 3] {
        node_position(c, self.origin, self.spacing)
    }
}

fn node_position(c: Coord, origin: f64, h: f64) -> [f64; 3] {
    [
        origin + (c.i as f64 + 0.5) * h,
        origin + (c.j as f64 + 0.5) * h,
        origin + (c.k as f64 + 0.5) * h,
    ]
}

/// Fine nodes of every coarse cell within the 3x3x3 dilation of `state`,
/// clipped to the grid.
pub fn dilated_fine_nodes(state: &SparseState, upsample: u32) -> Result<Vec<Coord>> {
    if state.is_empty() {
        return Err(Error::EmptyState);
    }
    if upsample == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let mut coarse = BTreeSet::new();
    for &c in state.coords() {
        for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    let n = c.offset(Coord::new(di, dj, dk));
                    if state.in_bounds(n) {
                        coarse.insert(n);
                    }
                }
            }
        }
    }
    let u = upsample as i32;
    let mut out = Vec::with_capacity(coarse.len() * (u * u * u) as usize);
    for c in coarse {
        for a in 0..u {
            for b in 0..u {
                for d in 0..u {
                    out.push(Coord::new(c.i * u + a, c.j * u + b, c.k * u + d));
                }
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Decode the implicit field at every fine node near the occupied cells.
pub fn dense_query(
    ae: &Autoencoder,
    params: &ParamStore,
    state: &SparseState,
    upsample: u32,
) -> Result<ScalarField> {
    let nodes = dilated_fine_nodes(state, upsample)?;
    let origin = state.origin();
    let h = state.voxel_size() / upsample as f64;
    let pyr = ae.build_pyramid(params, state)?;
    let mut values = Vec::with_capacity(nodes.len());
    for chunk in nodes.chunks(QUERY_CHUNK) {
        let qs: Vec<[f64; 3]> = chunk.iter().map(|&c| node_position(c, origin, h)).collect();
        values.extend(ae.decode_with_pyramid(params, &pyr, &qs)?);
    }
    Ok(ScalarField::from_parts(nodes, values, origin, h, upsample, ae.mode()))
}

/// Positions of the nodes whose distance value is below `tau` (`|v|` in
/// signed mode).
pub fn extract_points(field: &ScalarField, tau: f64) -> Vec<[f64; 3]> {
    field
        .nodes
        .iter()
        .zip(&field.values)
        .filter(|(_, v)| match field.mode {
            FieldMode::Sdf => v.abs() < tau,
            FieldMode::Udf => **v < tau,
        })
        .map(|(c, _)| field.position(*c))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let x = [
                    u[1] * v[2] - u[2] * v[1],
                    u[2] * v[0] - u[0] * v[2],
                    u[0] * v[1] - u[1] * v[0],
                ];
                0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
            })
            .sum()
    }
}

/// How cube corners without a sample are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentPolicy {
    /// Missing corners take the "far outside" value 1.
    #[default]
    Outside,
    /// Cubes with any missing corner are not polygonized.
    Skip,
}

const CORNERS: [(i32, i32, i32); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Polygonize the `iso` level set with the classic 256-case tables.
/// Corners below `iso` count as inside. Vertices on shared lattice edges
/// are shared between cubes.
pub fn marching_cubes(field: &ScalarField, iso: f64, policy: AbsentPolicy) -> Mesh {
    let mut cubes = BTreeSet::new();
    for &c in &field.nodes {
        for &(a, b, d) in &CORNERS {
            cubes.insert(c.offset(Coord::new(-a, -b, -d)));
        }
    }
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(Coord, Coord), usize> = HashMap::new();
    for base in cubes {
        let mut vals = [0.0; 8];
        let mut pts = [Coord::new(0, 0, 0); 8];
        let mut missing = false;
        for (n, &(a, b, d)) in CORNERS.iter().enumerate() {
            pts[n] = base.offset(Coord::new(a, b, d));
            vals[n] = match field.get(pts[n]) {
                Some(v) => v,
                None => {
                    missing = true;
                    1.0
                }
            };
        }
        if missing && policy == AbsentPolicy::Skip {
            continue;
        }
        let mut index = 0usize;
        for (n, v) in vals.iter().enumerate() {
            if *v < iso {
                index |= 1 << n;
            }
        }
        if tables::EDGE_TABLE[index] == 0 {
            continue;
        }
        let row = &tables::TRI_TABLE[index];
        let mut t = 0;
        while t + 2 < 16 && row[t] >= 0 {
            let mut tri = [0usize; 3];
            for (s, slot) in tri.iter_mut().enumerate() {
                let (e0, e1) = EDGES[row[t + s] as usize];
                let (p0, p1, v0, v1) = if pts[e0] < pts[e1] {
                    (pts[e0], pts[e1], vals[e0], vals[e1])
                } else {
                    (pts[e1], pts[e0], vals[e1], vals[e0])
                };
                *slot = *edge_vertex.entry((p0, p1)).or_insert_with(|| {
                    let a = field.position(p0);
                    let b = field.position(p1);
                    let dv = v1 - v0;
                    let w = if dv.abs() < 1e-12 { 0.5 } else { (iso - v0) / dv };
                    mesh.vertices.push([
                        a[0] + w * (b[0] - a[0]),
                        a[1] + w * (b[1] - a[1]),
                        a[2] + w * (b[2] - a[2]),
                    ]);
                    mesh.vertices.len() - 1
                });
            }
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                mesh.triangles.push(tri);
            }
            t += 3;
        }
    }
    mesh
}

/// Shortest text that reads back to the same single-precision value.
fn fmt_coord(v: f64) -> String {
    format!("{}", v as f32)
}

pub fn export_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut body = format!(
        "# cgca mesh: {} vertices, {} faces\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for v in &mesh.vertices {
        body.push_str(&format!("v {} {} {}\n", fmt_coord(v[0]), fmt_coord(v[1]), fmt_coord(v[2])));
    }
    for t in &mesh.triangles {
        body.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    write_text(path, &body)
}

pub fn export_xyz(points: &[[f64; 3]], path: &Path) -> Result<()> {
    let mut body = String::with_capacity(points.len() * 32);
    for p in points {
        body.push_str(&format!("{} {} {}\n", fmt_coord(p[0]), fmt_coord(p[1]), fmt_coord(p[2])));
    }
    write_text(path, &body)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read whitespace-separated `x y z` lines; `#` starts a comment.
pub fn read_xyz(path: &Path) -> Result<Vec<[f64; 3]>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, format!("line {}: expected 3 finite values", n + 1)));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}
