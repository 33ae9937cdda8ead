//! Sparse voxel embeddings on the integer lattice.
//!
//! A [`SparseState`] stores only occupied cells and their latent codes. Absent
//! cells are unoccupied with a zero code. Cells are kept sorted by
//! lexicographic `(i, j, k)` so iteration order, and everything derived from
//! it, is reproducible bit for bit.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coord {
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl Coord {
    pub const fn new(i: i32, j: i32, k: i32) -> Self {
        Coord { i, j, k }
    }

    pub fn offset(self, d: Coord) -> Coord {
        Coord::new(self.i + d.i, self.j + d.j, self.k + d.k)
    }

    /// Parent cell one level coarser.
    pub fn coarsen(self) -> Coord {
        Coord::new(self.i.div_euclid(2), self.j.div_euclid(2), self.k.div_euclid(2))
    }
}

impl From<[i32; 3]> for Coord {
    fn from(a: [i32; 3]) -> Self {
        Coord::new(a[0], a[1], a[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    L1,
    Linf,
}

impl Metric {
    pub fn distance(self, a: Coord, b: Coord) -> u32 {
        let di = (a.i - b.i).unsigned_abs();
        let dj = (a.j - b.j).unsigned_abs();
        let dk = (a.k - b.k).unsigned_abs();
        match self {
            Metric::L1 => di + dj + dk,
            Metric::Linf => di.max(dj).max(dk),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "linf" => Ok(Metric::Linf),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L1 => "l1",
            Metric::Linf => "linf",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub radius: u32,
    pub metric: Metric,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec {
            radius: 2,
            metric: Metric::L1,
        }
    }
}

impl NeighborhoodSpec {
    pub fn new(radius: u32, metric: Metric) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Config("neighborhood radius must be at least 1".into()));
        }
        Ok(NeighborhoodSpec { radius, metric })
    }

    /// All offsets within the radius, in lexicographic order.
    pub fn offsets(&self) -> Vec<Coord> {
        let r = self.radius as i32;
        let mut out = Vec::new();
        for i in -r..=r {
            for j in -r..=r {
                for k in -r..=r {
                    let d = Coord::new(i, j, k);
                    if self.metric.distance(d, Coord::default()) <= self.radius {
                        out.push(d);
                    }
                }
            }
        }
        out
    }
}

/// Occupied cells with per-cell latent codes.
#[derive(Debug, Clone)]
pub struct SparseState {
    coords: Vec<Coord>,
    latents: Vec<f64>,
    index: HashMap<Coord, usize>,
    latent_dim: usize,
    /// Cells per axis; `0` means the lattice is unbounded.
    resolution: u32,
    voxel_size: f64,
}

impl PartialEq for SparseState {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
            && self.latents == other.latents
            && self.latent_dim == other.latent_dim
            && self.resolution == other.resolution
            && self.voxel_size == other.voxel_size
    }
}

impl SparseState {
    pub fn empty(latent_dim: usize, resolution: u32, voxel_size: f64) -> Self {
        SparseState {
            coords: Vec::new(),
            latents: Vec::new(),
            index: HashMap::new(),
            latent_dim,
            resolution,
            voxel_size,
        }
    }

    /// Build from a coordinate map; codes must all have length `latent_dim`.
    pub fn from_map(
        cells: BTreeMap<Coord, Vec<f64>>,
        latent_dim: usize,
        resolution: u32,
        voxel_size: f64,
    ) -> Result<Self> {
        let mut s = SparseState::empty(latent_dim, resolution, voxel_size);
        s.coords.reserve(cells.len());
        s.latents.reserve(cells.len() * latent_dim);
        for (c, z) in cells {
            if z.len() != latent_dim {
                return Err(Error::LatentDim {
                    expected: latent_dim,
                    got: z.len(),
                });
            }
            if !s.in_bounds(c) {
                return Err(Error::out_of_bounds(c, resolution));
            }
            s.coords.push(c);
            s.latents.extend_from_slice(&z);
        }
        s.rebuild_index();
        Ok(s)
    }

    /// Build from sorted, deduplicated coordinates and a flat latent buffer.
    pub(crate) fn from_sorted_parts(
        coords: Vec<Coord>,
        latents: Vec<f64>,
        latent_dim: usize,
        resolution: u32,
        voxel_size: f64,
    ) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(coords.len() * latent_dim, latents.len());
        let mut s = SparseState {
            coords,
            latents,
            index: HashMap::new(),
            latent_dim,
            resolution,
            voxel_size,
        };
        s.rebuild_index();
        s
    }

    /// Occupied cells with all-zero codes.
    pub fn from_coords(
        coords: impl IntoIterator<Item = Coord>,
        latent_dim: usize,
        resolution: u32,
        voxel_size: f64,
    ) -> Result<Self> {
        let mut v: Vec<Coord> = coords.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        let probe = SparseState::empty(latent_dim, resolution, voxel_size);
        if let Some(c) = v.iter().find(|c| !probe.in_bounds(**c)) {
            return Err(Error::out_of_bounds(*c, resolution));
        }
        let n = v.len();
        Ok(SparseState::from_sorted_parts(
            v,
            vec![0.0; n * latent_dim],
            latent_dim,
            resolution,
            voxel_size,
        ))
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .coords
            .iter()
            .enumerate()
            .map(|(n, c)| (*c, n))
            .collect();
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn is_bounded(&self) -> bool {
        self.resolution > 0
    }

    /// World position of the lower corner of cell (0, 0, 0). The grid is
    /// centred on the origin.
    pub fn origin(&self) -> f64 {
        -0.5 * self.resolution as f64 * self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn latents(&self) -> &[f64] {
        &self.latents
    }

    pub fn latent_at(&self, n: usize) -> &[f64] {
        let k = self.latent_dim;
        &self.latents[n * k..(n + 1) * k]
    }

    pub fn index_of(&self, c: Coord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn get(&self, c: Coord) -> Option<&[f64]> {
        self.index_of(c).map(|n| self.latent_at(n))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Coord, &[f64])> + '_ {
        self.coords
            .iter()
            .enumerate()
            .map(move |(n, c)| (*c, self.latent_at(n)))
    }

    pub fn in_bounds(&self, c: Coord) -> bool {
        if self.resolution == 0 {
            return true;
        }
        let r = self.resolution as i32;
        (0..r).contains(&c.i) && (0..r).contains(&c.j) && (0..r).contains(&c.k)
    }

    pub fn same_occupancy(&self, other: &SparseState) -> bool {
        self.coords == other.coords
    }

    /// Copy with the same cells and new codes.
    pub fn with_latents(&self, latents: Vec<f64>) -> Result<Self> {
        if latents.len() != self.latents.len() {
            return Err(Error::LatentDim {
                expected: self.latents.len(),
                got: latents.len(),
            });
        }
        Ok(SparseState::from_sorted_parts(
            self.coords.clone(),
            latents,
            self.latent_dim,
            self.resolution,
            self.voxel_size,
        ))
    }

    /// Center of cell `c` in world units.
    pub fn cell_center(&self, c: Coord) -> [f64; 3] {
        let o = self.origin();
        let e = self.voxel_size;
        [
            o + (c.i as f64 + 0.5) * e,
            o + (c.j as f64 + 0.5) * e,
            o + (c.k as f64 + 0.5) * e,
        ]
    }

    /// Cell containing the world point `p` (not bounds-checked).
    pub fn cell_of(&self, p: [f64; 3]) -> Coord {
        cell_of(p, self.origin(), self.voxel_size)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_csv_string().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = format!(
            "# cgca-state K={} R={} eps={}\n",
            self.latent_dim, self.resolution, self.voxel_size
        );
        for (c, z) in self.iter() {
            let _ = write!(s, "{},{},{}", c.i, c.j, c.k);
            for v in z {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing header"))?
            .map_err(|e| Error::io(path, e))?;
        let (k, r, eps) = parse_state_header(&header).ok_or_else(|| {
            Error::format(path, format!("bad header {header:?}"))
        })?;
        let mut cells = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: {line:?}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + k {
                return Err(bad());
            }
            let ijk: Vec<i32> = fields[..3]
                .iter()
                .map(|f| f.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let z: Vec<f64> = fields[3..]
                .iter()
                .map(|f| f.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if cells.insert(Coord::new(ijk[0], ijk[1], ijk[2]), z).is_some() {
                return Err(Error::format(path, format!("duplicate cell on line {}", n + 2)));
            }
        }
        SparseState::from_map(cells, k, r, eps)
    }
}

fn parse_state_header(h: &str) -> Option<(usize, u32, f64)> {
    let rest = h.strip_prefix("# cgca-state")?;
    let (mut k, mut r, mut eps) = (None, None, None);
    for tok in rest.split_whitespace() {
        let (key, val) = tok.split_once('=')?;
        match key {
            "K" => k = val.parse().ok(),
            "R" => r = val.parse().ok(),
            "eps" => eps = val.parse().ok(),
            _ => return None,
        }
    }
    Some((k?, r?, eps?))
}

pub(crate) fn cell_of(p: [f64; 3], origin: f64, voxel_size: f64) -> Coord {
    let f = |x: f64| ((x - origin) / voxel_size).floor() as i32;
    Coord::new(f(p[0]), f(p[1]), f(p[2]))
}

/// N(s): every cell within the metric radius of an occupied cell, clipped to
/// the grid bounds, sorted.
pub fn neighborhood(state: &SparseState, spec: &NeighborhoodSpec) -> Vec<Coord> {
    let offsets = spec.offsets();
    let mut out = Vec::with_capacity(state.len() * offsets.len());
    for &c in state.coords() {
        for &d in &offsets {
            let n = c.offset(d);
            if state.in_bounds(n) {
                out.push(n);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// G_x(s): for each target cell, the closest cell of N(s); ties go to the
/// lexicographically smallest coordinate. Returned sorted and deduplicated.
pub fn nearest_target_cells(
    state: &SparseState,
    target: &SparseState,
    spec: &NeighborhoodSpec,
) -> Result<Vec<Coord>> {
    if state.is_empty() {
        return Err(Error::EmptyState);
    }
    let nbhd = neighborhood(state, spec);
    Ok(nearest_in_set(&nbhd, target.coords(), spec.metric))
}

/// Nearest member of `sources` (sorted) for each of `targets`, with
/// lexicographic tie-breaking.
///
/// Targets already in `sources` map to themselves. The rest are resolved by a
/// breadth-first sweep over the bounding box of both sets; on a box the
/// lattice graph distance (6-connected for L1, 26-connected for L-inf) equals
/// the metric distance, and the lexicographically smallest nearest source of a
/// cell is the smallest label among its predecessors in the sweep.
pub(crate) fn nearest_in_set(sources: &[Coord], targets: &[Coord], metric: Metric) -> Vec<Coord> {
    let src_set: std::collections::HashSet<Coord> = sources.iter().copied().collect();
    let mut out: Vec<Coord> = Vec::with_capacity(targets.len());
    let mut pending: Vec<Coord> = Vec::new();
    for &t in targets {
        if src_set.contains(&t) {
            out.push(t);
        } else {
            pending.push(t);
        }
    }
    if !pending.is_empty() && !sources.is_empty() {
        let mut lo = sources[0];
        let mut hi = sources[0];
        for c in sources.iter().chain(pending.iter()) {
            lo = Coord::new(lo.i.min(c.i), lo.j.min(c.j), lo.k.min(c.k));
            hi = Coord::new(hi.i.max(c.i), hi.j.max(c.j), hi.k.max(c.k));
        }
        let dims = [
            (hi.i - lo.i + 1) as usize,
            (hi.j - lo.j + 1) as usize,
            (hi.k - lo.k + 1) as usize,
        ];
        let flat = |c: Coord| -> usize {
            ((c.i - lo.i) as usize * dims[1] + (c.j - lo.j) as usize) * dims[2]
                + (c.k - lo.k) as usize
        };
        let total = dims[0] * dims[1] * dims[2];
        let mut dist = vec![u32::MAX; total];
        let mut label: Vec<Coord> = vec![Coord::default(); total];
        let mut queue = VecDeque::with_capacity(sources.len());
        for &s in sources {
            let f = flat(s);
            dist[f] = 0;
            label[f] = s;
            queue.push_back(s);
        }
        let steps: Vec<Coord> = match metric {
            Metric::L1 => NeighborhoodSpec { radius: 1, metric: Metric::L1 }.offsets(),
            Metric::Linf => NeighborhoodSpec { radius: 1, metric: Metric::Linf }.offsets(),
        }
        .into_iter()
        .filter(|d| *d != Coord::default())
        .collect();
        while let Some(c) = queue.pop_front() {
            let fc = flat(c);
            let (dc, lc) = (dist[fc], label[fc]);
            for &d in &steps {
                let n = c.offset(d);
                if n.i < lo.i || n.j < lo.j || n.k < lo.k || n.i > hi.i || n.j > hi.j || n.k > hi.k
                {
                    continue;
                }
                let fnb = flat(n);
                if dist[fnb] == u32::MAX {
                    dist[fnb] = dc + 1;
                    label[fnb] = lc;
                    queue.push_back(n);
                } else if dist[fnb] == dc + 1 && lc < label[fnb] {
                    label[fnb] = lc;
                }
            }
        }
        out.extend(pending.iter().map(|&t| label[flat(t)]));
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Occupied cells of every grid cell that contains at least one point.
pub fn voxelize(
    points: &[[f64; 3]],
    resolution: u32,
    voxel_size: f64,
    latent_dim: usize,
) -> Result<SparseState> {
    let probe = SparseState::empty(latent_dim, resolution, voxel_size);
    let mut cells = Vec::with_capacity(points.len());
    for p in points {
        let c = probe.cell_of(*p);
        if !probe.in_bounds(c) {
            return Err(Error::OutOfBounds {
                what: format!("point ({}, {}, {})", p[0], p[1], p[2]),
                resolution,
            });
        }
        cells.push(c);
    }
    SparseState::from_coords(cells, latent_dim, resolution, voxel_size)
}
