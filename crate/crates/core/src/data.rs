//! Procedural toy corpus: analytic shapes, surface and near-surface
//! sampling, partial scans by iterative removal, and dataset files.
//!
//! A dataset directory holds `manifest.txt` (key=value lines) and, per
//! shape `<name>`, `<name>.surface.xyz`, `<name>.partial.xyz` and
//! `<name>.queries.csv`. Numbers are written in shortest round-trip form, so
//! loading reproduces the generated values bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autoencoder::{FieldMode, PointSample};
use crate::error::{Error, Result};
use crate::metrics::Point;
use crate::rng::{self, standard_normal, uniform};

const MAGIC: &str = "cgca-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    TwoBlobs,
    LineUnion,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Torus,
        ShapeKind::TwoBlobs,
        ShapeKind::LineUnion,
    ];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Torus => "torus",
            ShapeKind::TwoBlobs => "two_blobs",
            ShapeKind::LineUnion => "line_union",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .iter()
            .copied()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind '{s}'")))
    }
}

/// An analytic shape given by its kind and a flat parameter vector:
///
/// - sphere: `cx cy cz r`
/// - box: `cx cy cz hx hy hz`
/// - torus (axis z): `cx cy cz R r`
/// - two_blobs: `ax ay az ra bx by bz rb`
/// - line_union: `r` then `x0 y0 z0 x1 y1 z1` per segment
#[derive(Debug, Clone, PartialEq)]
pub struct ToyShape {
    pub kind: ShapeKind,
    pub params: Vec<f64>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn p3(v: &[f64]) -> Point {
    [v[0], v[1], v[2]]
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Point {
    loop {
        let v = [standard_normal(rng), standard_normal(rng), standard_normal(rng)];
        let n = norm(v);
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Unit vector orthogonal to `a`, plus `a x that`.
fn frame(a: Point) -> (Point, Point) {
    let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = [
        a[1] * helper[2] - a[2] * helper[1],
        a[2] * helper[0] - a[0] * helper[2],
        a[0] * helper[1] - a[1] * helper[0],
    ];
    let n = norm(u);
    let u = [u[0] / n, u[1] / n, u[2] / n];
    let v = [
        a[1] * u[2] - a[2] * u[1],
        a[2] * u[0] - a[0] * u[2],
        a[0] * u[1] - a[1] * u[0],
    ];
    (u, v)
}

fn capsule_sdf(p: Point, a: Point, b: Point, r: f64) -> f64 {
    let pa = sub(p, a);
    let ba = sub(b, a);
    let len2 = ba[0] * ba[0] + ba[1] * ba[1] + ba[2] * ba[2];
    let t = ((pa[0] * ba[0] + pa[1] * ba[1] + pa[2] * ba[2]) / len2).clamp(0.0, 1.0);
    norm([pa[0] - t * ba[0], pa[1] - t * ba[1], pa[2] - t * ba[2]]) - r
}

impl ToyShape {
    pub fn new(kind: ShapeKind, params: Vec<f64>) -> Result<Self> {
        let ok = match kind {
            ShapeKind::Sphere => params.len() == 4 && params[3] > 0.0,
            ShapeKind::Box => params.len() == 6 && params[3..].iter().all(|h| *h > 0.0),
            ShapeKind::Torus => params.len() == 5 && params[4] > 0.0 && params[3] > params[4],
            ShapeKind::TwoBlobs => {
                params.len() == 8 && params[3] > 0.0 && params[7] > 0.0 && {
                    let gap = norm(sub(p3(&params[0..3]), p3(&params[4..7])));
                    gap > params[3] + params[7]
                }
            }
            ShapeKind::LineUnion => {
                params.len() >= 7
                    && (params.len() - 1) % 6 == 0
                    && params[0] > 0.0
                    && params[1..]
                        .chunks(6)
                        .all(|s| norm(sub(p3(&s[0..3]), p3(&s[3..6]))) > 0.0)
            }
        };
        if !ok || params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("invalid {kind} parameters {params:?}")));
        }
        Ok(ToyShape { kind, params })
    }

    /// A randomly jittered instance of `kind` with overall size `scale`
    /// (1 fills roughly the central half of `[-1, 1]^3`).
    pub fn random<R: Rng + ?Sized>(kind: ShapeKind, scale: f64, rng: &mut R) -> Self {
        let mut j = |lo: f64, hi: f64| scale * rng.random_range(lo..hi);
        let params = match kind {
            ShapeKind::Sphere => vec![j(-0.1, 0.1), j(-0.1, 0.1), j(-0.1, 0.1), j(0.45, 0.6)],
            ShapeKind::Box => vec![
                j(-0.1, 0.1),
                j(-0.1, 0.1),
                j(-0.1, 0.1),
                j(0.3, 0.5),
                j(0.3, 0.5),
                j(0.3, 0.5),
            ],
            ShapeKind::Torus => vec![j(-0.05, 0.05), j(-0.05, 0.05), j(-0.05, 0.05), j(0.4, 0.5), j(0.12, 0.18)],
            ShapeKind::TwoBlobs => vec![
                j(-0.5, -0.4),
                j(-0.1, 0.1),
                j(-0.1, 0.1),
                j(0.2, 0.28),
                j(0.4, 0.5),
                j(-0.1, 0.1),
                j(-0.1, 0.1),
                j(0.2, 0.28),
            ],
            ShapeKind::LineUnion => {
                let r = j(0.09, 0.12);
                let hub = [j(-0.2, -0.1), j(-0.2, -0.1), j(-0.2, -0.1)];
                let mut v = vec![r];
                for axis in 0..3 {
                    let mut end = hub;
                    end[axis] += j(0.5, 0.65);
                    v.extend_from_slice(&hub);
                    v.extend_from_slice(&end);
                }
                v
            }
        };
        ToyShape::new(kind, params).expect("random parameters are valid")
    }

    /// Signed distance (negative inside).
    pub fn sdf(&self, p: Point) -> f64 {
        let v = &self.params;
        match self.kind {
            ShapeKind::Sphere => norm(sub(p, p3(v))) - v[3],
            ShapeKind::Box => {
                let q: Vec<f64> = (0..3).map(|a| (p[a] - v[a]).abs() - v[3 + a]).collect();
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            ShapeKind::Torus => {
                let d = sub(p, p3(v));
                let radial = (d[0] * d[0] + d[1] * d[1]).sqrt() - v[3];
                (radial * radial + d[2] * d[2]).sqrt() - v[4]
            }
            ShapeKind::TwoBlobs => {
                let a = norm(sub(p, p3(&v[0..3]))) - v[3];
                let b = norm(sub(p, p3(&v[4..7]))) - v[7];
                a.min(b)
            }
            ShapeKind::LineUnion => v[1..]
                .chunks(6)
                .map(|s| capsule_sdf(p, p3(&s[0..3]), p3(&s[3..6]), v[0]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn distance(&self, p: Point, mode: FieldMode) -> f64 {
        match mode {
            FieldMode::Sdf => self.sdf(p),
            FieldMode::Udf => self.sdf(p).abs(),
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        let v = &self.params;
        match self.kind {
            ShapeKind::Sphere => 4.0 * PI * v[3] * v[3],
            ShapeKind::Box => 8.0 * (v[3] * v[4] + v[4] * v[5] + v[3] * v[5]),
            ShapeKind::Torus => 4.0 * PI * PI * v[3] * v[4],
            ShapeKind::TwoBlobs => 4.0 * PI * (v[3] * v[3] + v[7] * v[7]),
            // Sum over capsules; overlaps are not subtracted.
            ShapeKind::LineUnion => v[1..]
                .chunks(6)
                .map(|s| {
                    let len = norm(sub(p3(&s[0..3]), p3(&s[3..6])));
                    2.0 * PI * v[0] * len + 4.0 * PI * v[0] * v[0]
                })
                .sum(),
        }
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        use std::f64::consts::PI;
        let v = &self.params;
        match self.kind {
            ShapeKind::Sphere => {
                let u = random_unit(rng);
                [v[0] + v[3] * u[0], v[1] + v[3] * u[1], v[2] + v[3] * u[2]]
            }
            ShapeKind::Box => {
                let h = [v[3], v[4], v[5]];
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = uniform(rng) * total;
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if uniform(rng) < 0.5 { -h[a] } else { h[a] }
                    } else {
                        rng.random_range(-h[a]..=h[a])
                    };
                }
                [v[0] + p[0], v[1] + p[1], v[2] + p[2]]
            }
            ShapeKind::Torus => {
                let (big, small) = (v[3], v[4]);
                // Area element is proportional to (R + r cos θ).
                let theta = loop {
                    let t = rng.random_range(0.0..2.0 * PI);
                    if uniform(rng) * (big + small) <= big + small * t.cos() {
                        break t;
                    }
                };
                let phi = rng.random_range(0.0..2.0 * PI);
                let w = big + small * theta.cos();
                [v[0] + w * phi.cos(), v[1] + w * phi.sin(), v[2] + small * theta.sin()]
            }
            ShapeKind::TwoBlobs => {
                let (ra, rb) = (v[3], v[7]);
                let (c, r) = if uniform(rng) * (ra * ra + rb * rb) < ra * ra {
                    (p3(&v[0..3]), ra)
                } else {
                    (p3(&v[4..7]), rb)
                };
                let u = random_unit(rng);
                [c[0] + r * u[0], c[1] + r * u[1], c[2] + r * u[2]]
            }
            ShapeKind::LineUnion => loop {
                let r = v[0];
                let segs: Vec<&[f64]> = v[1..].chunks(6).collect();
                let areas: Vec<f64> = segs
                    .iter()
                    .map(|s| 2.0 * PI * r * norm(sub(p3(&s[0..3]), p3(&s[3..6]))) + 4.0 * PI * r * r)
                    .collect();
                let mut pick = uniform(rng) * areas.iter().sum::<f64>();
                let mut idx = segs.len() - 1;
                for (n, a) in areas.iter().enumerate() {
                    if pick < *a {
                        idx = n;
                        break;
                    }
                    pick -= a;
                }
                let (a, b) = (p3(&segs[idx][0..3]), p3(&segs[idx][3..6]));
                let axis = sub(b, a);
                let len = norm(axis);
                let dir = [axis[0] / len, axis[1] / len, axis[2] / len];
                let cyl = 2.0 * PI * r * len;
                let p = if uniform(rng) * (cyl + 4.0 * PI * r * r) < cyl {
                    let (e1, e2) = frame(dir);
                    let t = rng.random_range(0.0..len);
                    let ang = rng.random_range(0.0..2.0 * PI);
                    let (c, s) = (ang.cos(), ang.sin());
                    [0, 1, 2].map(|i| a[i] + t * dir[i] + r * (c * e1[i] + s * e2[i]))
                } else {
                    let u = random_unit(rng);
                    let along = u[0] * dir[0] + u[1] * dir[1] + u[2] * dir[2];
                    let cap = if along >= 0.0 { b } else { a };
                    [0, 1, 2].map(|i| cap[i] + r * u[i])
                };
                // Keep only points on the boundary of the union.
                if self.sdf(p).abs() < 1e-9 {
                    break p;
                }
            },
        }
    }

    /// `count` points uniformly distributed by area on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Point> {
        (0..count).map(|_| self.sample_one(rng)).collect()
    }

    /// Surface points displaced by isotropic Gaussian noise of standard
    /// deviation `band_sd`, with their exact distances.
    pub fn sample_query_pairs<R: Rng + ?Sized>(
        &self,
        count: usize,
        band_sd: f64,
        mode: FieldMode,
        rng: &mut R,
    ) -> Result<Vec<PointSample>> {
        if !(band_sd > 0.0) {
            return Err(Error::DomainError(format!("band_sd = {band_sd} must be positive")));
        }
        Ok((0..count)
            .map(|_| {
                let s = self.sample_one(rng);
                let p = [
                    s[0] + band_sd * standard_normal(rng),
                    s[1] + band_sd * standard_normal(rng),
                    s[2] + band_sd * standard_normal(rng),
                ];
                PointSample {
                    p,
                    d: self.distance(p, mode),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialSpec {
    pub removal_radius: f64,
    pub min_rate: f64,
    pub iterations: usize,
    pub noise_sd: f64,
}

impl Default for PartialSpec {
    fn default() -> Self {
        PartialSpec {
            removal_radius: 0.3,
            min_rate: 0.5,
            iterations: 4,
            noise_sd: 0.0,
        }
    }
}

impl PartialSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_rate > 0.0 && self.min_rate <= 1.0) {
            return Err(Error::Config(format!("min_rate {} outside (0, 1]", self.min_rate)));
        }
        if !(self.removal_radius >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::Config("removal radius and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Repeatedly delete every point within `removal_radius` of a random
/// survivor; a round that would leave fewer than `min_rate * n` points is
/// revoked. Survivors are then jittered by `noise_sd`.
pub fn make_partial<R: Rng + ?Sized>(points: &[Point], spec: &PartialSpec, rng: &mut R) -> Result<Vec<Point>> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let floor = spec.min_rate * points.len() as f64;
    let mut alive: Vec<usize> = (0..points.len()).collect();
    for _ in 0..spec.iterations {
        let center = points[alive[rng.random_range(0..alive.len())]];
        let keep: Vec<usize> = alive
            .iter()
            .copied()
            .filter(|&n| norm(sub(points[n], center)) > spec.removal_radius)
            .collect();
        if (keep.len() as f64) >= floor {
            alive = keep;
        }
    }
    Ok(alive
        .into_iter()
        .map(|n| {
            let p = points[n];
            if spec.noise_sd > 0.0 {
                [0, 1, 2].map(|a| p[a] + spec.noise_sd * standard_normal(rng))
            } else {
                p
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub resolution: u32,
    pub shapes_per_kind: usize,
    /// Held-out shapes per kind (taken from the end).
    pub test_per_kind: usize,
    pub scale: f64,
    pub surface_points: usize,
    pub query_points: usize,
    pub band_sd: f64,
    pub mode: FieldMode,
    pub partial: PartialSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            resolution: 32,
            shapes_per_kind: 4,
            test_per_kind: 1,
            scale: 1.0,
            surface_points: 4000,
            query_points: 4000,
            band_sd: 0.05,
            mode: FieldMode::Sdf,
            partial: PartialSpec::default(),
        }
    }
}

impl DataConfig {
    /// World box `[-1, 1]^3` split into `resolution` cells per axis.
    pub fn voxel_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub name: String,
    pub split: Split,
    pub shape: ToyShape,
    pub surface: Vec<Point>,
    pub partial: Vec<Point>,
    pub queries: Vec<PointSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ShapeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Queries falling outside the world box are redrawn.
fn in_box(p: Point) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.partial.validate()?;
    if config.test_per_kind > config.shapes_per_kind || config.resolution == 0 {
        return Err(Error::Config("invalid dataset sizes".into()));
    }
    let mut records = Vec::new();
    for (ki, kind) in ShapeKind::ALL.iter().enumerate() {
        for n in 0..config.shapes_per_kind {
            let chain = (ki * 100_000 + n) as u64;
            let mut r = rng::stream(config.seed, chain, "shape");
            let shape = ToyShape::random(*kind, config.scale, &mut r);
            let surface = shape.sample_surface(config.surface_points, &mut r);
            let partial = make_partial(&surface, &config.partial, &mut r)?;
            let mut queries = Vec::with_capacity(config.query_points);
            while queries.len() < config.query_points {
                let need = config.query_points - queries.len();
                queries.extend(
                    shape
                        .sample_query_pairs(need, config.band_sd, config.mode, &mut r)?
                        .into_iter()
                        .filter(|q| in_box(q.p)),
                );
            }
            let split = if n >= config.shapes_per_kind - config.test_per_kind {
                Split::Test
            } else {
                Split::Train
            };
            records.push(ShapeRecord {
                name: format!("{kind}_{n:03}"),
                split,
                shape,
                surface,
                partial,
                queries,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        records,
    })
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn points_text(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

fn parse_points(path: &Path) -> Result<Vec<Point>> {
    crate::surface::read_xyz(path)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &ds.config;
    let mut m = format!("{MAGIC} {VERSION}\n");
    let kv = [
        ("seed", c.seed.to_string()),
        ("resolution", c.resolution.to_string()),
        ("shapes_per_kind", c.shapes_per_kind.to_string()),
        ("test_per_kind", c.test_per_kind.to_string()),
        ("scale", c.scale.to_string()),
        ("surface_points", c.surface_points.to_string()),
        ("query_points", c.query_points.to_string()),
        ("band_sd", c.band_sd.to_string()),
        ("mode", c.mode.to_string()),
        ("removal_radius", c.partial.removal_radius.to_string()),
        ("min_rate", c.partial.min_rate.to_string()),
        ("iterations", c.partial.iterations.to_string()),
        ("noise_sd", c.partial.noise_sd.to_string()),
    ];
    for (k, v) in kv {
        m.push_str(&format!("{k}={v}\n"));
    }
    for (n, r) in ds.records.iter().enumerate() {
        m.push_str(&format!(
            "shape.{n}={} {} {} {}\n",
            r.name,
            r.split,
            r.shape.kind,
            join(&r.shape.params)
        ));
        write(&dir.join(format!("{}.surface.xyz", r.name)), &points_text(&r.surface))?;
        write(&dir.join(format!("{}.partial.xyz", r.name)), &points_text(&r.partial))?;
        crate::autoencoder::write_samples_csv(&dir.join(format!("{}.queries.csv", r.name)), &r.queries, "d")?;
    }
    write(&dir.join("manifest.txt"), &m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != format!("{MAGIC} {VERSION}") {
        return Err(Error::format(&mpath, format!("bad magic or version '{header}'")));
    }
    let mut kv = BTreeMap::new();
    let mut shapes = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&mpath, format!("expected key=value, got '{line}'")))?;
        if let Some(idx) = k.strip_prefix("shape.") {
            let idx: usize = idx.parse().map_err(|_| Error::format(&mpath, format!("bad key '{k}'")))?;
            shapes.push((idx, v.to_string()));
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> { kv.get(k).ok_or_else(|| Error::format(&mpath, format!("missing key '{k}'"))) };
    fn num<T: FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::format(path, format!("bad value for {k}: '{v}'")))
    }
    let config = DataConfig {
        seed: num(&mpath, "seed", get("seed")?)?,
        resolution: num(&mpath, "resolution", get("resolution")?)?,
        shapes_per_kind: num(&mpath, "shapes_per_kind", get("shapes_per_kind")?)?,
        test_per_kind: num(&mpath, "test_per_kind", get("test_per_kind")?)?,
        scale: num(&mpath, "scale", get("scale")?)?,
        surface_points: num(&mpath, "surface_points", get("surface_points")?)?,
        query_points: num(&mpath, "query_points", get("query_points")?)?,
        band_sd: num(&mpath, "band_sd", get("band_sd")?)?,
        mode: get("mode")?.parse().map_err(|_| Error::format(&mpath, "bad mode"))?,
        partial: PartialSpec {
            removal_radius: num(&mpath, "removal_radius", get("removal_radius")?)?,
            min_rate: num(&mpath, "min_rate", get("min_rate")?)?,
            iterations: num(&mpath, "iterations", get("iterations")?)?,
            noise_sd: num(&mpath, "noise_sd", get("noise_sd")?)?,
        },
    };
    shapes.sort_by_key(|s| s.0);
    let mut records = Vec::with_capacity(shapes.len());
    for (n, (idx, v)) in shapes.into_iter().enumerate() {
        if idx != n {
            return Err(Error::format(&mpath, format!("shape indices not contiguous at {idx}")));
        }
        let mut it = v.split_whitespace();
        let bad = || Error::format(&mpath, format!("bad shape line '{v}'"));
        let name = it.next().ok_or_else(bad)?.to_string();
        let split: Split = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let kind: ShapeKind = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let params: Vec<f64> = it.map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let shape = ToyShape::new(kind, params).map_err(|_| bad())?;
        records.push(ShapeRecord {
            surface: parse_points(&dir.join(format!("{name}.surface.xyz")))?,
            partial: parse_points(&dir.join(format!("{name}.partial.xyz")))?,
            queries: crate::autoencoder::read_samples_csv(&dir.join(format!("{name}.queries.csv")))?,
            name,
            split,
            shape,
        });
    }
    Ok(Dataset { config, records })
}
