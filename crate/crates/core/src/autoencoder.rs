//! Encoder from coordinate-distance samples to a sparse voxel embedding, and
//! decoder from the embedding to truncated distance values.
//!
//! Encoder: each sample is assigned to its cell, expressed in the cell's
//! local frame `[-1, 1]^3` together with `d / ε`, pushed through a shared
//! MLP, and average-pooled per cell. Only cells that receive a sample with
//! `|d| <= ε/2` are kept.
//!
//! Decoder: a feature pyramid of `n` levels is built from the codes (level 1
//! is a per-cell MLP of the code, level `k+1` an MLP of the mean of its
//! children). The feature of cell `C` on level `k` sits at that cell's centre,
//! `origin + (C + 1/2) * ε 2^(k-1)`. A query reads
//! the trilinear blend of the 8 surrounding nodes per level (absent nodes are
//! zero), sums over levels, and a residual MLP head maps the sum to
//! `[-1, 1]` (tanh, signed mode) or `[0, 1]` (sigmoid, unsigned mode).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Coord, SparseState};
use crate::loss::{self, AutoencoderLoss};
use crate::net::{self, Activation, Mlp, MlpInput, MlpSpec, MlpTape, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    /// Truncated signed distance, decoded into `[-1, 1]`.
    Sdf,
    /// Truncated unsigned distance, decoded into `[0, 1]`.
    Udf,
}

impl FromStr for FieldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdf" => Ok(FieldMode::Sdf),
            "udf" => Ok(FieldMode::Udf),
            _ => Err(Error::Config(format!("unknown field mode '{s}'"))),
        }
    }
}

impl fmt::Display for FieldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldMode::Sdf => "sdf",
            FieldMode::Udf => "udf",
        })
    }
}

impl FieldMode {
    fn squash(self, x: f64) -> f64 {
        match self {
            FieldMode::Sdf => x.tanh(),
            FieldMode::Udf => net::sigmoid(x),
        }
    }

    /// Derivative of the squashing function written in terms of its output.
    fn squash_grad(self, y: f64) -> f64 {
        match self {
            FieldMode::Sdf => 1.0 - y * y,
            FieldMode::Udf => y * (1.0 - y),
        }
    }
}

/// A position with its distance to the surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub p: [f64; 3],
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderSpec {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub levels: usize,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub mode: FieldMode,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            latent_dim: 32,
            feature_dim: 32,
            levels: 3,
            encoder_width: 32,
            encoder_blocks: 4,
            decoder_width: 64,
            decoder_blocks: 2,
            mode: FieldMode::Sdf,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    coords: Vec<Coord>,
    features: Vec<f64>,
    index: HashMap<Coord, usize>,
}

impl PyramidLevel {
    fn new(coords: Vec<Coord>, features: Vec<f64>) -> Self {
        let index = coords.iter().enumerate().map(|(n, c)| (*c, n)).collect();
        PyramidLevel {
            coords,
            features,
            index,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Multi-resolution sparse feature grids; level `k` (0-based here) is
/// downsampled by `2^k`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<PyramidLevel>,
    feature_dim: usize,
    origin: f64,
    voxel_size: f64,
    resolution: u32,
}

impl FeaturePyramid {
    /// Build directly from per-level features (row-major, `feature_dim` wide).
    pub fn from_levels(
        levels: Vec<(Vec<Coord>, Vec<f64>)>,
        feature_dim: usize,
        resolution: u32,
        voxel_size: f64,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(levels.len());
        for (coords, features) in levels {
            if features.len() != coords.len() * feature_dim {
                return Err(Error::ShapeMismatch {
                    context: "pyramid level".into(),
                    expected: format!("{} values", coords.len() * feature_dim),
                    got: format!("{}", features.len()),
                });
            }
            out.push(PyramidLevel::new(coords, features));
        }
        Ok(FeaturePyramid {
            levels: out,
            feature_dim,
            origin: -0.5 * resolution as f64 * voxel_size,
            voxel_size,
            resolution,
        })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Node spacing of level `k` (0-based).
    pub fn spacing(&self, k: usize) -> f64 {
        self.voxel_size * (1u64 << k) as f64
    }

    /// `(level, row, weight)` for every present node touching `q`.
    fn weights(&self, q: [f64; 3]) -> Result<Vec<(usize, usize, f64)>> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite query".into()));
        }
        if self.resolution > 0 {
            let hi = self.origin + self.resolution as f64 * self.voxel_size;
            if q.iter().any(|v| *v < self.origin || *v > hi) {
                return Err(Error::OutOfBounds {
                    what: format!("query ({}, {}, {})", q[0], q[1], q[2]),
                    resolution: self.resolution,
                });
            }
        }
        let mut out = Vec::with_capacity(8 * self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let h = self.spacing(k);
            let mut base = [0i32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let u = (q[a] - self.origin) / h - 0.5;
                let b = u.floor();
                base[a] = b as i32;
                frac[a] = u - b;
            }
            for corner in 0..8 {
                let di = corner & 1;
                let dj = (corner >> 1) & 1;
                let dk = (corner >> 2) & 1;
                let c = Coord::new(base[0] + di, base[1] + dj, base[2] + dk);
                if let Some(&row) = level.index.get(&c) {
                    let w = [di, dj, dk]
                        .iter()
                        .zip(frac)
                        .map(|(d, f)| if *d == 1 { f } else { 1.0 - f })
                        .product::<f64>();
                    out.push((k, row, w));
                }
            }
        }
        Ok(out)
    }

    /// Σ_k trilinear blend of level-k features at `q`.
    pub fn interpolate(&self, q: [f64; 3]) -> Result<Vec<f64>> {
        let l = self.feature_dim;
        let mut out = vec![0.0; l];
        for (k, row, w) in self.weights(q)? {
            let f = &self.levels[k].features[row * l..(row + 1) * l];
            for (o, v) in out.iter_mut().zip(f) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

struct EncodeTape {
    mlp: MlpTape,
    /// Row range of each kept cell in the canonical sample order.
    groups: Vec<(usize, usize)>,
}

struct PyramidTape {
    mlps: Vec<MlpTape>,
    /// `children[k][n]`: rows of level `k` pooled into row `n` of level `k+1`.
    children: Vec<Vec<Vec<usize>>>,
}

struct DecodeTape {
    head: MlpTape,
    weights: Vec<Vec<(usize, usize, f64)>>,
    outputs: Vec<f64>,
}

/// Result of a full encode-decode pass on one shape.
#[derive(Debug, Clone)]
pub struct AeEvaluation {
    pub loss: AutoencoderLoss,
    pub decoded: Vec<f64>,
    pub state: SparseState,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    encoder: Mlp,
    level_mlps: Vec<Mlp>,
    head: Mlp,
}

impl Autoencoder {
    pub fn new(spec: AutoencoderSpec) -> Result<Self> {
        if spec.levels == 0 || spec.latent_dim == 0 || spec.feature_dim == 0 {
            return Err(Error::Config(
                "autoencoder needs at least one level and positive widths".into(),
            ));
        }
        let encoder = Mlp::new(
            "enc",
            MlpSpec::new(
                vec![4, spec.encoder_width, spec.latent_dim],
                Activation::Relu,
                spec.encoder_blocks,
            )?,
        );
        let mut level_mlps = Vec::with_capacity(spec.levels);
        for k in 0..spec.levels {
            let input = if k == 0 {
                spec.latent_dim
            } else {
                spec.feature_dim
            };
            level_mlps.push(Mlp::new(
                &format!("lvl{k}"),
                MlpSpec::new(
                    vec![input, spec.feature_dim, spec.feature_dim],
                    Activation::Relu,
                    0,
                )?,
            ));
        }
        let head = Mlp::new(
            "dec",
            MlpSpec::new(
                vec![spec.feature_dim, spec.decoder_width, 1],
                Activation::Relu,
                spec.decoder_blocks,
            )?,
        );
        Ok(Autoencoder {
            spec,
            encoder,
            level_mlps,
            head,
        })
    }

    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    pub fn mode(&self) -> FieldMode {
        self.spec.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.encoder)
            .chain(self.level_mlps.iter())
            .chain(std::iter::once(&self.head))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for m in self.mlps() {
            m.init(store, rng)?;
        }
        Ok(())
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        for m in self.mlps() {
            m.init_zero(store)?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.mlps().flat_map(|m| m.param_names()).collect()
    }

    fn encode_impl(
        &self,
        store: &ParamStore,
        samples: &[PointSample],
        resolution: u32,
        voxel_size: f64,
    ) -> Result<(SparseState, EncodeTape)> {
        let k = self.spec.latent_dim;
        let probe = SparseState::empty(k, resolution, voxel_size);
        let half = 0.5 * voxel_size;
        let mut assigned: Vec<(Coord, usize)> = Vec::with_capacity(samples.len());
        let mut surface = std::collections::BTreeSet::new();
        for (n, s) in samples.iter().enumerate() {
            if s.p.iter().any(|v| !v.is_finite()) || !s.d.is_finite() {
                return Err(Error::DomainError(format!("non-finite sample {n}")));
            }
            let mut c = probe.cell_of(s.p);
            if resolution > 0 {
                let hi = resolution as i32 - 1;
                c = Coord::new(c.i.clamp(0, hi), c.j.clamp(0, hi), c.k.clamp(0, hi));
            }
            if s.d.abs() <= half {
                surface.insert(c);
            }
            assigned.push((c, n));
        }
        assigned.retain(|(c, _)| surface.contains(c));
        if assigned.is_empty() {
            return Err(Error::NoSurfaceCells);
        }
        // Canonical order makes pooling independent of the input order.
        let key = |n: usize| {
            let s = &samples[n];
            [s.p[0].to_bits(), s.p[1].to_bits(), s.p[2].to_bits(), s.d.to_bits()]
        };
        assigned.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| key(a.1).cmp(&key(b.1))));
        let mut rows = Vec::with_capacity(assigned.len() * 4);
        for &(c, n) in &assigned {
            let center = probe.cell_center(c);
            let s = &samples[n];
            for a in 0..3 {
                rows.push((s.p[a] - center[a]) / half);
            }
            rows.push(s.d / voxel_size);
        }
        let x = net::to_array2(assigned.len(), 4, rows);
        let (y, mlp) = self.encoder.forward(store, MlpInput::Dense(x))?;
        let mut coords = Vec::new();
        let mut groups = Vec::new();
        let mut latents = Vec::new();
        let mut start = 0;
        while start < assigned.len() {
            let c = assigned[start].0;
            let mut end = start;
            while end < assigned.len() && assigned[end].0 == c {
                end += 1;
            }
            let inv = 1.0 / (end - start) as f64;
            for j in 0..k {
                let mut acc = 0.0;
                for r in start..end {
                    acc += y[[r, j]];
                }
                latents.push(acc * inv);
            }
            coords.push(c);
            groups.push((start, end));
            start = end;
        }
        let state = SparseState::from_sorted_parts(coords, latents, k, resolution, voxel_size);
        Ok((state, EncodeTape { mlp, groups }))
    }

    /// g_φ: samples to a sparse voxel embedding over the surface cells.
    pub fn encode(
        &self,
        store: &ParamStore,
        samples: &[PointSample],
        resolution: u32,
        voxel_size: f64,
    ) -> Result<SparseState> {
        Ok(self.encode_impl(store, samples, resolution, voxel_size)?.0)
    }

    fn pyramid_impl(&self, store: &ParamStore, state: &SparseState) -> Result<(FeaturePyramid, PyramidTape)> {
        if state.is_empty() {
            return Err(Error::EmptyState);
        }
        if state.latent_dim() != self.spec.latent_dim {
            return Err(Error::LatentDim {
                expected: self.spec.latent_dim,
                got: state.latent_dim(),
            });
        }
        let l = self.spec.feature_dim;
        let x0 = net::to_array2(state.len(), state.latent_dim(), state.latents().to_vec());
        let (f0, t0) = self.level_mlps[0].forward(store, MlpInput::Dense(x0))?;
        let mut levels = vec![(state.coords().to_vec(), f0.into_raw_vec_and_offset().0)];
        let mut mlps = vec![t0];
        let mut children = Vec::new();
        for k in 1..self.spec.levels {
            let (prev_coords, prev_feat) = levels.last().unwrap();
            let mut groups: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
            for (n, c) in prev_coords.iter().enumerate() {
                groups.entry(c.coarsen()).or_default().push(n);
            }
            let mut input = Vec::with_capacity(groups.len() * l);
            for kids in groups.values() {
                let inv = 1.0 / kids.len() as f64;
                for j in 0..l {
                    let s: f64 = kids.iter().map(|&n| prev_feat[n * l + j]).sum();
                    input.push(s * inv);
                }
            }
            let coords: Vec<Coord> = groups.keys().copied().collect();
            let x = net::to_array2(coords.len(), l, input);
            let (f, t) = self.level_mlps[k].forward(store, MlpInput::Dense(x))?;
            children.push(groups.into_values().collect());
            levels.push((coords, f.into_raw_vec_and_offset().0));
            mlps.push(t);
        }
        let pyr = FeaturePyramid::from_levels(levels, l, state.resolution(), state.voxel_size())?;
        Ok((pyr, PyramidTape { mlps, children }))
    }

    pub fn build_pyramid(&self, store: &ParamStore, state: &SparseState) -> Result<FeaturePyramid> {
        Ok(self.pyramid_impl(store, state)?.0)
    }

    fn decode_impl(
        &self,
        store: &ParamStore,
        pyr: &FeaturePyramid,
        queries: &[[f64; 3]],
    ) -> Result<DecodeTape> {
        let l = self.spec.feature_dim;
        let mut psi = vec![0.0; queries.len() * l];
        let mut weights = Vec::with_capacity(queries.len());
        for (n, q) in queries.iter().enumerate() {
            let w = pyr.weights(*q)?;
            let row = &mut psi[n * l..(n + 1) * l];
            for &(k, r, wt) in &w {
                let f = &pyr.levels[k].features[r * l..(r + 1) * l];
                for (o, v) in row.iter_mut().zip(f) {
                    *o += wt * v;
                }
            }
            weights.push(w);
        }
        let x = net::to_array2(queries.len(), l, psi);
        let (y, head) = self.head.forward(store, MlpInput::Dense(x))?;
        let mode = self.spec.mode;
        let outputs = y.iter().map(|v| mode.squash(*v)).collect();
        Ok(DecodeTape {
            head,
            weights,
            outputs,
        })
    }

    /// f_ω at every query, sharing one pyramid.
    pub fn decode_many(&self, store: &ParamStore, state: &SparseState, queries: &[[f64; 3]]) -> Result<Vec<f64>> {
        let pyr = self.build_pyramid(store, state)?;
        self.decode_with_pyramid(store, &pyr, queries)
    }

    pub fn decode_with_pyramid(
        &self,
        store: &ParamStore,
        pyr: &FeaturePyramid,
        queries: &[[f64; 3]],
    ) -> Result<Vec<f64>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.decode_impl(store, pyr, queries)?.outputs)
    }

    pub fn decode(&self, store: &ParamStore, state: &SparseState, q: [f64; 3]) -> Result<f64> {
        Ok(self.decode_many(store, state, &[q])?[0])
    }

    fn check_queries(queries: &[PointSample]) -> Result<Vec<[f64; 3]>> {
        if queries.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        Ok(queries.iter().map(|q| q.p).collect())
    }

    /// Encode `surface`, decode at `queries` and evaluate the loss, without
    /// touching gradients.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        surface: &[PointSample],
        queries: &[PointSample],
        resolution: u32,
        voxel_size: f64,
        beta: f64,
    ) -> Result<AeEvaluation> {
        let qp = Self::check_queries(queries)?;
        let state = self.encode(store, surface, resolution, voxel_size)?;
        let decoded = self.decode_many(store, &state, &qp)?;
        let targets: Vec<f64> = queries.iter().map(|q| q.d).collect();
        let loss = loss::autoencoder_loss(&decoded, &targets, &state, beta, voxel_size, self.spec.mode)?;
        Ok(AeEvaluation {
            loss,
            decoded,
            state,
        })
    }

    /// As [`Autoencoder::evaluate`], and accumulate the parameter gradients
    /// of the loss into `store`.
    pub fn evaluate_and_backward(
        &self,
        store: &mut ParamStore,
        surface: &[PointSample],
        queries: &[PointSample],
        resolution: u32,
        voxel_size: f64,
        beta: f64,
    ) -> Result<AeEvaluation> {
        let qp = Self::check_queries(queries)?;
        let (state, etape) = self.encode_impl(store, surface, resolution, voxel_size)?;
        let (pyr, ptape) = self.pyramid_impl(store, &state)?;
        let dtape = self.decode_impl(store, &pyr, &qp)?;
        let targets: Vec<f64> = queries.iter().map(|q| q.d).collect();
        let ae = loss::autoencoder_loss(&dtape.outputs, &targets, &state, beta, voxel_size, self.spec.mode)?;

        let l = self.spec.feature_dim;
        let mode = self.spec.mode;
        let g_head: Vec<f64> = ae
            .d_decoded
            .iter()
            .zip(&dtape.outputs)
            .map(|(g, y)| g * mode.squash_grad(*y))
            .collect();
        let g_head = net::to_array2(qp.len(), 1, g_head);
        let d_psi = self
            .head
            .backward(store, &dtape.head, &g_head)?
            .expect("dense input");
        let mut d_feat: Vec<Vec<f64>> = pyr.levels.iter().map(|lv| vec![0.0; lv.features.len()]).collect();
        for (n, w) in dtape.weights.iter().enumerate() {
            let g = d_psi.row(n);
            for &(k, r, wt) in w {
                let dst = &mut d_feat[k][r * l..(r + 1) * l];
                for (d, gv) in dst.iter_mut().zip(g.iter()) {
                    *d += wt * gv;
                }
            }
        }
        for k in (0..self.spec.levels).rev() {
            let g = net::to_array2(pyr.levels[k].len(), l, std::mem::take(&mut d_feat[k]));
            let d_in = self.level_mlps[k]
                .backward(store, &ptape.mlps[k], &g)?
                .expect("dense input");
            if k == 0 {
                d_feat[0] = d_in.into_raw_vec_and_offset().0;
            } else {
                for (n, kids) in ptape.children[k - 1].iter().enumerate() {
                    let inv = 1.0 / kids.len() as f64;
                    for &child in kids {
                        for j in 0..l {
                            d_feat[k - 1][child * l + j] += d_in[[n, j]] * inv;
                        }
                    }
                }
            }
        }
        let kd = self.spec.latent_dim;
        let mut d_z = std::mem::take(&mut d_feat[0]);
        for (d, r) in d_z.iter_mut().zip(&ae.d_latents) {
            *d += r;
        }
        let n_rows = etape.groups.last().map(|g| g.1).unwrap_or(0);
        let mut g_enc = Array2::zeros((n_rows, kd));
        for (cell, &(start, end)) in etape.groups.iter().enumerate() {
            let inv = 1.0 / (end - start) as f64;
            for r in start..end {
                for j in 0..kd {
                    g_enc[[r, j]] = d_z[cell * kd + j] * inv;
                }
            }
        }
        self.encoder.backward(store, &etape.mlp, &g_enc)?;
        Ok(AeEvaluation {
            loss: ae,
            decoded: dtape.outputs,
            state,
        })
    }
}

/// Write samples as CSV with header `x,y,z,<value>`.
pub fn write_samples_csv(path: &Path, samples: &[PointSample], value_name: &str) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut body = format!("x,y,z,{value_name}\n");
    for s in samples {
        body.push_str(&format!("{},{},{},{}\n", s.p[0], s.p[1], s.p[2], s.d));
    }
    w.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<PointSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if !line.starts_with("x,y,z,") {
                return Err(Error::format(path, "missing x,y,z header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if v.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", n + 1)));
        }
        out.push(PointSample {
            p: [v[0], v[1], v[2]],
            d: v[3],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(mode: FieldMode) -> AutoencoderSpec {
        AutoencoderSpec {
            latent_dim: 3,
            feature_dim: 4,
            levels: 3,
            encoder_width: 5,
            encoder_blocks: 1,
            decoder_width: 6,
            decoder_blocks: 1,
            mode,
        }
    }

    fn sphere_samples(r: &mut ChaCha8Rng, n: usize, radius: f64, band: f64) -> Vec<PointSample> {
        (0..n)
            .map(|_| {
                let v: [f64; 3] = [
                    crate::rng::standard_normal(r),
                    crate::rng::standard_normal(r),
                    crate::rng::standard_normal(r),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let rr = radius + band * crate::rng::standard_normal(r);
                let p = [v[0] / norm * rr, v[1] / norm * rr, v[2] / norm * rr];
                PointSample { p, d: rr - radius }
            })
            .collect()
    }

    fn setup(seed: u64, mode: FieldMode) -> (Autoencoder, ParamStore) {
        let ae = Autoencoder::new(small_spec(mode)).unwrap();
        let mut store = ParamStore::new();
        ae.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ae, store)
    }

    #[test]
    fn encode_pooling_properties() {
        let (ae, store) = setup(1, FieldMode::Sdf);
        let s = PointSample {
            p: [0.01, 0.02, -0.03],
            d: 0.0,
        };
        let one = ae.encode(&store, &[s], 8, 0.25).unwrap();
        let two = ae.encode(&store, &[s, s], 8, 0.25).unwrap();
        assert_eq!(one, two);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut samples = sphere_samples(&mut r, 200, 0.6, 0.05);
        let a = ae.encode(&store, &samples, 8, 0.25).unwrap();
        samples.reverse();
        samples.swap(3, 77);
        let b = ae.encode(&store, &samples, 8, 0.25).unwrap();
        assert_eq!(a, b);
        let far = PointSample { p: [0.0; 3], d: 0.5 };
        assert!(matches!(ae.encode(&store, &[far], 8, 0.25), Err(Error::NoSurfaceCells)));
        let mut zero = ParamStore::new();
        ae.init_zero(&mut zero).unwrap();
        let z = ae.encode(&zero, &samples, 8, 0.25).unwrap();
        assert!(z.latents().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_prunes_cells_without_surface() {
        let (ae, store) = setup(2, FieldMode::Sdf);
        let eps = 0.25;
        let near = PointSample {
            p: [0.1, 0.1, 0.1],
            d: 0.1,
        };
        let far = PointSample {
            p: [0.6, 0.1, 0.1],
            d: 0.2,
        };
        let s = ae.encode(&store, &[near, far], 8, eps).unwrap();
        assert_eq!(s.coords(), &[Coord::new(4, 4, 4)]);
    }

    #[test]
    fn pyramid_shapes() {
        let (ae, store) = setup(4, FieldMode::Sdf);
        let single = SparseState::from_coords([Coord::new(5, 2, 7)], 3, 16, 0.1).unwrap();
        let p = ae.build_pyramid(&store, &single).unwrap();
        assert!(p.levels().iter().all(|l| l.len() == 1));
        let block: Vec<Coord> = (0..8)
            .map(|n| Coord::new(2 + (n & 1), 4 + ((n >> 1) & 1), 6 + ((n >> 2) & 1)))
            .collect();
        let s = SparseState::from_coords(block, 3, 16, 0.1).unwrap();
        let p = ae.build_pyramid(&store, &s).unwrap();
        assert_eq!(p.levels()[0].len(), 8);
        assert_eq!(p.levels()[1].coords(), &[Coord::new(1, 2, 3)]);
        let mut zero = ParamStore::new();
        ae.init_zero(&mut zero).unwrap();
        let p = ae.build_pyramid(&zero, &s).unwrap();
        assert!(p.levels().iter().all(|l| l.features().iter().all(|v| *v == 0.0)));
        assert!(matches!(
            ae.build_pyramid(&store, &SparseState::empty(3, 16, 0.1)),
            Err(Error::EmptyState)
        ));
    }

    #[test]
    fn interpolation_cases() {
        let f = vec![1.0, 2.0];
        let g = vec![3.0, -4.0];
        let pyr = FeaturePyramid::from_levels(
            vec![(vec![Coord::new(2, 2, 2), Coord::new(3, 2, 2)], [f.clone(), g.clone()].concat())],
            2,
            8,
            0.25,
        )
        .unwrap();
        // Node (2,2,2) sits at origin + 2.5h = -1 + 0.625.
        assert_eq!(pyr.interpolate([-0.375, -0.375, -0.375]).unwrap(), f);
        let mid = pyr.interpolate([-0.25, -0.375, -0.375]).unwrap();
        assert!((mid[0] - 2.0).abs() < 1e-12 && (mid[1] + 1.0).abs() < 1e-12);
        assert!(matches!(pyr.interpolate([1.5, 0.0, 0.0]), Err(Error::OutOfBounds { .. })));

        // Uniform features on every node of every level: n * u.
        let r = 4u32;
        let mut levels = Vec::new();
        for k in 0..3 {
            let m = (r >> k) as i32 + 1;
            let mut coords = Vec::new();
            for i in -1..m {
                for j in -1..m {
                    for kk in -1..m {
                        coords.push(Coord::new(i, j, kk));
                    }
                }
            }
            let n = coords.len();
            levels.push((coords, [0.7, -0.2].repeat(n)));
        }
        let pyr = FeaturePyramid::from_levels(levels, 2, r, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let v = pyr.interpolate(q).unwrap();
            assert!((v[0] - 2.1).abs() < 1e-12 && (v[1] + 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_codomain_and_determinism() {
        for mode in [FieldMode::Sdf, FieldMode::Udf] {
            let (ae, store) = setup(5, mode);
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let samples = sphere_samples(&mut r, 300, 0.5, 0.02);
            let state = ae.encode(&store, &samples, 16, 0.125).unwrap();
            let qs: Vec<[f64; 3]> = (0..10_000)
                .map(|_| {
                    [
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                    ]
                })
                .collect();
            let a = ae.decode_many(&store, &state, &qs).unwrap();
            let (lo, hi) = match mode {
                FieldMode::Sdf => (-1.0, 1.0),
                FieldMode::Udf => (0.0, 1.0),
            };
            assert!(a.iter().all(|v| (lo..=hi).contains(v)));
            let b = ae.decode_many(&store, &state, &qs).unwrap();
            assert_eq!(a, b);
            assert_eq!(ae.decode(&store, &state, qs[17]).unwrap(), a[17]);
        }
    }

    #[test]
    fn end_to_end_gradients_match_central_differences() {
        for seed in 0..5u64 {
            for mode in [FieldMode::Sdf, FieldMode::Udf] {
                let (ae, mut store) = setup(20 + seed, mode);
                let mut r = ChaCha8Rng::seed_from_u64(40 + seed);
                // Zero biases put every empty-query ReLU exactly on its kink.
                for idx in 0..store.num_values() {
                    let v = store.flat_get(idx) + r.random_range(-0.1..0.1);
                    store.flat_set(idx, v);
                }
                let surface = sphere_samples(&mut r, 60, 0.5, 0.01);
                let queries = sphere_samples(&mut r, 40, 0.5, 0.08);
                let (res, eps, beta) = (16, 0.125, 0.3);
                ae.evaluate_and_backward(&mut store, &surface, &queries, res, eps, beta)
                    .unwrap();
                let h = 1e-5;
                let n = store.num_values();
                let l0 = ae.evaluate(&store, &surface, &queries, res, eps, beta).unwrap().loss.value;
                let mut checked = 0;
                while checked < 40 {
                    let idx = r.random_range(0..n);
                    let analytic = store.flat_grad(idx);
                    let v0 = store.flat_get(idx);
                    let mut probe = store.clone();
                    probe.flat_set(idx, v0 + h);
                    let lp = ae.evaluate(&probe, &surface, &queries, res, eps, beta).unwrap().loss.value;
                    probe.flat_set(idx, v0 - h);
                    let lm = ae.evaluate(&probe, &surface, &queries, res, eps, beta).unwrap().loss.value;
                    if crate::verify::crosses_kink(lm, l0, lp, h) {
                        continue;
                    }
                    checked += 1;
                    let fd = (lp - lm) / (2.0 * h);
                    let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                    assert!(err < 1e-4, "seed {seed} {mode} param {idx}: fd {fd} analytic {analytic}");
                }
            }
        }
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let s = sphere_samples(&mut r, 25, 0.4, 0.1);
        write_samples_csv(&path, &s, "d").unwrap();
        assert_eq!(read_samples_csv(&path).unwrap(), s);
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_samples_csv(&path), Err(Error::Format { .. })));
    }
}
