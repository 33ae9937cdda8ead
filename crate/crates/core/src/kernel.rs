//! The transition kernel p_θ(s^{t+1} | s^t).
//!
//! For every cell of N(s^t) a shared network reads an L-inf window of the
//! current state (optionally concatenated with the initial state) and emits
//! an occupancy logit and a latent mean. Sampling is independent per cell:
//! occupied with probability λ, and if occupied the code is μ + σ ξ.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::grid::{self, Coord, Metric, NeighborhoodSpec, SparseState};
use crate::net::{self, Activation, Mlp, MlpInput, MlpSpec, MlpTape, ParamStore};
use crate::rng::{self, ChainRng};

/// Occupancy probabilities are clamped to `[LAMBDA_MIN, 1 - LAMBDA_MIN]`.
pub const LAMBDA_MIN: f64 = 1e-6;

/// σ^t = 10^(-base - decay * t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub base: f64,
    pub decay: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule {
            base: 1.0,
            decay: 0.01,
        }
    }
}

impl SigmaSchedule {
    pub fn new(base: f64, decay: f64) -> Result<Self> {
        if !base.is_finite() || !(decay >= 0.0) || !decay.is_finite() {
            return Err(Error::Config(format!(
                "sigma schedule needs finite base and decay >= 0, got ({base}, {decay})"
            )));
        }
        Ok(SigmaSchedule { base, decay })
    }

    pub fn at(&self, t: usize) -> f64 {
        10f64.powf(-self.base - self.decay * t as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub latent_dim: usize,
    pub conditioned: bool,
    /// L-inf radius of the feature window around each candidate cell.
    pub window_radius: u32,
    pub hidden: Vec<usize>,
}

impl KernelSpec {
    pub fn new(latent_dim: usize, conditioned: bool) -> Self {
        KernelSpec {
            latent_dim,
            conditioned,
            window_radius: 2,
            hidden: vec![64, 64],
        }
    }
}

/// Per-cell (λ, μ) over N(s^t), in the sorted order of N(s^t).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionOutput {
    pub coords: Vec<Coord>,
    pub lambda: Vec<f64>,
    /// Row-major `coords.len() x latent_dim`.
    pub mu: Vec<f64>,
    pub latent_dim: usize,
    pub source_step: usize,
    pub resolution: u32,
    pub voxel_size: f64,
}

impl TransitionOutput {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn mu_at(&self, n: usize) -> &[f64] {
        &self.mu[n * self.latent_dim..(n + 1) * self.latent_dim]
    }
}

pub struct KernelTape {
    mlp: MlpTape,
    /// Unclamped logistic outputs, for the squashing derivative.
    raw: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TransitionKernel {
    spec: KernelSpec,
    mlp: Mlp,
    window: Vec<Coord>,
}

impl TransitionKernel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        if spec.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let window = NeighborhoodSpec::new(spec.window_radius, Metric::Linf)?.offsets();
        let block = net::feature_block_width(spec.latent_dim, spec.conditioned);
        let mut widths = vec![window.len() * block];
        widths.extend(&spec.hidden);
        widths.push(spec.latent_dim + 1);
        let mlp = Mlp::new("kernel", MlpSpec::new(widths, Activation::Relu, 0)?);
        Ok(TransitionKernel { spec, mlp, window })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn window(&self) -> &[Coord] {
        &self.window
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp.init(store, rng)
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        self.mlp.init_zero(store)
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        state: &SparseState,
        cond: Option<&SparseState>,
        nbhd: &NeighborhoodSpec,
    ) -> Result<TransitionOutput> {
        self.predict_with_tape(store, state, cond, nbhd).map(|(o, _)| o)
    }

    pub fn predict_with_tape(
        &self,
        store: &ParamStore,
        state: &SparseState,
        cond: Option<&SparseState>,
        nbhd: &NeighborhoodSpec,
    ) -> Result<(TransitionOutput, KernelTape)> {
        if state.is_empty() {
            return Err(Error::EmptyState);
        }
        let k = self.spec.latent_dim;
        if state.latent_dim() != k {
            return Err(Error::LatentDim {
                expected: k,
                got: state.latent_dim(),
            });
        }
        if let Some(c) = cond {
            if c.latent_dim() != k {
                return Err(Error::LatentDim {
                    expected: k,
                    got: c.latent_dim(),
                });
            }
        }
        if cond.is_some() != self.spec.conditioned {
            return Err(Error::ShapeMismatch {
                context: "kernel conditioning".into(),
                expected: format!("conditioned = {}", self.spec.conditioned),
                got: format!("conditioned = {}", cond.is_some()),
            });
        }
        let coords = grid::neighborhood(state, nbhd);
        let features = net::gather_sparse(state, cond, &coords, &self.window);
        let (out, tape) = self.mlp.forward(store, MlpInput::Sparse(features))?;
        let n = coords.len();
        let mut lambda = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut mu = Vec::with_capacity(n * k);
        for row in out.rows() {
            let s = net::sigmoid(row[0]);
            raw.push(s);
            lambda.push(s.clamp(LAMBDA_MIN, 1.0 - LAMBDA_MIN));
            mu.extend(row.iter().skip(1));
        }
        Ok((
            TransitionOutput {
                coords,
                lambda,
                mu,
                latent_dim: k,
                source_step: 0,
                resolution: state.resolution(),
                voxel_size: state.voxel_size(),
            },
            KernelTape { mlp: tape, raw },
        ))
    }

    /// Push `dL/dλ` and `dL/dμ` (same layout as the output) into the
    /// parameter gradients.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &KernelTape,
        d_lambda: &[f64],
        d_mu: &[f64],
    ) -> Result<()> {
        let n = tape.raw.len();
        let k = self.spec.latent_dim;
        if d_lambda.len() != n || d_mu.len() != n * k {
            return Err(Error::ShapeMismatch {
                context: "kernel output gradient".into(),
                expected: format!("{n} + {n}x{k}"),
                got: format!("{} + {}", d_lambda.len(), d_mu.len()),
            });
        }
        let mut g = Array2::zeros((n, k + 1));
        for (r, mut row) in g.rows_mut().into_iter().enumerate() {
            let s = tape.raw[r];
            if (LAMBDA_MIN..=1.0 - LAMBDA_MIN).contains(&s) {
                row[0] = d_lambda[r] * s * (1.0 - s);
            }
            for j in 0..k {
                row[1 + j] = d_mu[r * k + j];
            }
        }
        self.mlp.backward(store, &tape.mlp, &g)?;
        Ok(())
    }
}

/// Independent per-cell draws: occupancy from `rng.occupancy`, codes from
/// `rng.latent`. Shared by the transition and infusion kernels so both
/// consume their streams identically.
pub(crate) fn sample_cells(
    coords: &[Coord],
    lambda: &[f64],
    mu: &[f64],
    latent_dim: usize,
    sigma: f64,
    resolution: u32,
    voxel_size: f64,
    rng: &mut ChainRng,
) -> SparseState {
    let mut kept = Vec::new();
    let mut latents = Vec::new();
    for (n, &c) in coords.iter().enumerate() {
        if rng::uniform(&mut rng.occupancy) < lambda[n] {
            kept.push(c);
            for &m in &mu[n * latent_dim..(n + 1) * latent_dim] {
                let xi = rng::standard_normal(&mut rng.latent);
                latents.push(m + sigma * xi);
            }
        }
    }
    SparseState::from_sorted_parts(kept, latents, latent_dim, resolution, voxel_size)
}

pub fn sample_transition(out: &TransitionOutput, sigma: f64, rng: &mut ChainRng) -> SparseState {
    debug_assert!(sigma >= 0.0);
    sample_cells(
        &out.coords,
        &out.lambda,
        &out.mu,
        out.latent_dim,
        sigma,
        out.resolution,
        out.voxel_size,
        rng,
    )
}

/// Keep cells with λ > 0.5 and set their codes to μ.
pub fn mode_seek_step(out: &TransitionOutput) -> SparseState {
    let k = out.latent_dim;
    let mut kept = Vec::new();
    let mut latents = Vec::new();
    for (n, &c) in out.coords.iter().enumerate() {
        if out.lambda[n] > 0.5 {
            kept.push(c);
            latents.extend_from_slice(out.mu_at(n));
        }
    }
    SparseState::from_sorted_parts(kept, latents, k, out.resolution, out.voxel_size)
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub state: SparseState,
    /// `s^0 .. s^{T+T'}` when tracing was requested, otherwise empty.
    pub trace: Vec<SparseState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub steps: usize,
    pub mode_steps: usize,
    pub sigma: SigmaSchedule,
    pub nbhd: NeighborhoodSpec,
}

/// T stochastic transitions followed by T' mode-seeking transitions. Mode
/// seeking re-predicts (λ, μ) from the current state at each step.
pub fn generate(
    store: &ParamStore,
    kernel: &TransitionKernel,
    s0: &SparseState,
    settings: &ChainSettings,
    rng: &mut ChainRng,
    keep_trace: bool,
) -> Result<Generation> {
    if s0.is_empty() {
        return Err(Error::EmptyState);
    }
    let cond = kernel.spec().conditioned.then_some(s0);
    let mut trace = Vec::new();
    if keep_trace {
        trace.push(s0.clone());
    }
    let mut state = s0.clone();
    let total = settings.steps + settings.mode_steps;
    for t in 0..total {
        let mut out = kernel.predict(store, &state, cond, &settings.nbhd)?;
        out.source_step = t;
        state = if t < settings.steps {
            sample_transition(&out, settings.sigma.at(t), rng)
        } else {
            mode_seek_step(&out)
        };
        if state.is_empty() {
            return Err(Error::ChainDied { step: t + 1 });
        }
        if keep_trace {
            trace.push(state.clone());
        }
    }
    Ok(Generation { state, trace })
}

/// Write `step_<t>.csv` for every state of a trace.
pub fn write_trace(dir: &Path, trace: &[SparseState]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, s) in trace.iter().enumerate() {
        s.write_csv(&dir.join(format!("step_{t}.csv")))?;
    }
    Ok(())
}

pub enum InitMode<'a> {
    /// Codes drawn from N(0, sigma_init^2 I).
    Random { sigma_init: f64 },
    /// Codes from the encoder applied to `{(p, 0)}`.
    Encoded {
        autoencoder: &'a Autoencoder,
        params: &'a ParamStore,
    },
}

/// Initial state s^0 from a (partial) point cloud.
pub fn initial_state<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    resolution: u32,
    voxel_size: f64,
    latent_dim: usize,
    mode: InitMode<'_>,
    rng: &mut R,
) -> Result<SparseState> {
    if points.is_empty() {
        return Err(Error::EmptyState);
    }
    match mode {
        InitMode::Random { sigma_init } => {
            let occ = grid::voxelize(points, resolution, voxel_size, latent_dim)?;
            let latents = (0..occ.len() * latent_dim)
                .map(|_| sigma_init * rng::standard_normal(rng))
                .collect();
            occ.with_latents(latents)
        }
        InitMode::Encoded {
            autoencoder,
            params,
        } => {
            let samples: Vec<crate::autoencoder::PointSample> = points
                .iter()
                .map(|p| crate::autoencoder::PointSample { p: *p, d: 0.0 })
                .collect();
            autoencoder.encode(params, &samples, resolution, voxel_size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn small_state(k: usize, seed: u64) -> SparseState {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = BTreeMap::new();
        for _ in 0..6 {
            let c = Coord::new(r.random_range(3..9), r.random_range(3..9), r.random_range(3..9));
            cells.insert(c, (0..k).map(|_| r.random_range(-1.0..1.0)).collect());
        }
        SparseState::from_map(cells, k, 12, 1.0 / 6.0).unwrap()
    }

    fn small_kernel(k: usize, cond: bool) -> TransitionKernel {
        TransitionKernel::new(KernelSpec {
            latent_dim: k,
            conditioned: cond,
            window_radius: 1,
            hidden: vec![8],
        })
        .unwrap()
    }

    fn output(lambda: Vec<f64>, k: usize) -> TransitionOutput {
        let n = lambda.len();
        let coords = (0..n as i32).map(|i| Coord::new(i / 100, i % 100, 0)).collect();
        TransitionOutput {
            coords,
            lambda,
            mu: (0..n * k).map(|v| v as f64 * 0.01).collect(),
            latent_dim: k,
            source_step: 0,
            resolution: 0,
            voxel_size: 1.0,
        }
    }

    #[test]
    fn sigma_schedule_defaults() {
        let s = SigmaSchedule::default();
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert!((s.at(100) - 0.01).abs() < 1e-15);
        assert!((1..300).all(|t| s.at(t) <= s.at(t - 1) && s.at(t) > 0.0));
    }

    #[test]
    fn zero_params_predict_half_and_zero_mean() {
        let kern = small_kernel(3, false);
        let mut store = ParamStore::new();
        kern.init_zero(&mut store).unwrap();
        let s = small_state(3, 1);
        let nb = NeighborhoodSpec::default();
        let out = kern.predict(&store, &s, None, &nb).unwrap();
        assert_eq!(out.coords, grid::neighborhood(&s, &nb));
        assert!(out.lambda.iter().all(|l| *l == 0.5));
        assert!(out.mu.iter().all(|m| *m == 0.0));
        let empty = SparseState::empty(3, 12, 1.0 / 6.0);
        assert!(matches!(kern.predict(&store, &empty, None, &nb), Err(Error::EmptyState)));
    }

    #[test]
    fn single_cell_hand_computation() {
        // One hidden layer of width 1: h = relu(w_c * occ_center + b0),
        // logit = a * h, mu_j = m_j * h.
        let kern = TransitionKernel::new(KernelSpec {
            latent_dim: 2,
            conditioned: false,
            window_radius: 1,
            hidden: vec![1],
        })
        .unwrap();
        let mut store = ParamStore::new();
        kern.init_zero(&mut store).unwrap();
        let center_slot = kern.window().iter().position(|d| *d == Coord::default()).unwrap();
        let block = 3;
        store.values_mut("kernel.0.w").unwrap()[center_slot * block] = 2.0;
        store.values_mut("kernel.0.b").unwrap()[0] = 0.5;
        store.values_mut("kernel.1.w").unwrap().copy_from_slice(&[0.4, -1.0, 3.0]);
        let s = SparseState::from_coords([Coord::new(5, 5, 5)], 2, 12, 0.1).unwrap();
        let nb = NeighborhoodSpec::new(1, Metric::L1).unwrap();
        let out = kern.predict(&store, &s, None, &nb).unwrap();
        let c = out.coords.iter().position(|c| *c == Coord::new(5, 5, 5)).unwrap();
        let h = 2.5f64;
        assert!((out.lambda[c] - 1.0 / (1.0 + (-0.4 * h).exp())).abs() < 1e-15);
        assert_eq!(out.mu_at(c), &[-h, 3.0 * h]);
        // A face neighbor sees the occupied cell at a non-center slot: h = relu(0.5).
        let f = out.coords.iter().position(|c| *c == Coord::new(6, 5, 5)).unwrap();
        assert!((out.lambda[f] - 1.0 / (1.0 + (-0.4 * 0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn conditioning_mismatch_and_masking() {
        let kern = small_kernel(2, true);
        let mut store = ParamStore::new();
        kern.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s = small_state(2, 4);
        let nb = NeighborhoodSpec::default();
        assert!(kern.predict(&store, &s, None, &nb).is_err());
        // Zero the weights reading the cond code; an all-zero cond then only
        // matters through the occupancy bit, which an empty cond never sets.
        let block = 5;
        let n_in = kern.window().len() * block;
        {
            let w = store.values_mut("kernel.0.w").unwrap();
            let rows = w.len() / n_in;
            for o in 0..rows {
                for slot in 0..kern.window().len() {
                    for j in 1..3 {
                        w[o * n_in + slot * block + j] = 0.0;
                    }
                }
            }
        }
        let empty_cond = SparseState::empty(2, 12, 1.0 / 6.0);
        let zero_cond = SparseState::from_coords(s.coords().iter().copied(), 2, 12, 1.0 / 6.0).unwrap();
        let a = kern.predict(&store, &s, Some(&empty_cond), &nb).unwrap();
        let b = kern.predict(&store, &s, Some(&zero_cond), &nb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChainRng::new(1, 0);
        let zero = output(vec![0.0; 50], 2);
        assert!(sample_transition(&zero, 0.1, &mut rng).is_empty());
        let one = output(vec![1.0; 50], 2);
        let s = sample_transition(&one, 0.0, &mut rng);
        assert_eq!(s.len(), 50);
        assert_eq!(s.latents(), &one.mu[..]);
    }

    #[test]
    fn sampling_frequency_within_binomial_bounds() {
        let n = 10_000;
        let out = output(vec![0.3; n], 1);
        let mut rng = ChainRng::new(99, 0);
        let s = sample_transition(&out, 0.1, &mut rng);
        let rate = s.len() as f64 / n as f64;
        let bound = 3.0 * (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((rate - 0.3).abs() < bound, "rate {rate}");
    }

    #[test]
    fn mode_seek_threshold_and_determinism() {
        let out = output(vec![0.4999, 0.5001, 0.5, 1.0], 2);
        let s = mode_seek_step(&out);
        assert_eq!(s.coords(), &[out.coords[1], out.coords[3]]);
        assert_eq!(s.latent_at(0), out.mu_at(1));
        assert_eq!(mode_seek_step(&out), s);
    }

    #[test]
    fn generate_identity_and_determinism() {
        let kern = small_kernel(2, false);
        let mut store = ParamStore::new();
        kern.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s0 = small_state(2, 6);
        let mut settings = ChainSettings {
            steps: 0,
            mode_steps: 0,
            sigma: SigmaSchedule::default(),
            nbhd: NeighborhoodSpec::default(),
        };
        let g = generate(&store, &kern, &s0, &settings, &mut ChainRng::new(1, 0), true).unwrap();
        assert_eq!(g.state, s0);
        assert_eq!(g.trace.len(), 1);
        settings.steps = 3;
        settings.mode_steps = 0;
        // Bias the occupancy logit up so the chain survives.
        store.values_mut("kernel.1.b").unwrap()[0] = 1.0;
        let a = generate(&store, &kern, &s0, &settings, &mut ChainRng::new(7, 0), false);
        let b = generate(&store, &kern, &s0, &settings, &mut ChainRng::new(7, 0), false);
        assert_eq!(a.unwrap().state, b.unwrap().state);
    }

    #[test]
    fn dead_chain_is_an_error() {
        let kern = small_kernel(2, false);
        let mut store = ParamStore::new();
        kern.init_zero(&mut store).unwrap();
        store.values_mut("kernel.1.b").unwrap()[0] = -50.0;
        let s0 = small_state(2, 6);
        let settings = ChainSettings {
            steps: 2,
            mode_steps: 0,
            sigma: SigmaSchedule::default(),
            nbhd: NeighborhoodSpec::default(),
        };
        let r = generate(&store, &kern, &s0, &settings, &mut ChainRng::new(1, 0), false);
        assert!(matches!(r, Err(Error::ChainDied { step: 1 })));
    }

    #[test]
    fn random_initial_state() {
        let pts = vec![[0.01, 0.02, 0.03], [0.5, -0.5, 0.25]];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = initial_state(&pts, 16, 0.125, 4, InitMode::Random { sigma_init: 0.0 }, &mut r).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.latents().iter().all(|v| *v == 0.0));
        assert!(initial_state(&[], 16, 0.125, 4, InitMode::Random { sigma_init: 1.0 }, &mut r).is_err());
    }

    #[test]
    fn random_initial_latents_are_centered() {
        // 10^5 codes drawn with sigma_init = 1: the CLT bound 3/sqrt(n) ~ 0.0095.
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let mut pts = Vec::new();
        for i in 0..50 {
            for j in 0..50 {
                for k in 0..40 {
                    pts.push([
                        -1.0 + (i as f64 + 0.5) * 0.04,
                        -1.0 + (j as f64 + 0.5) * 0.04,
                        -1.0 + (k as f64 + 0.5) * 0.04,
                    ]);
                }
            }
        }
        let s = initial_state(&pts, 50, 0.04, 2, InitMode::Random { sigma_init: 1.0 }, &mut r).unwrap();
        assert_eq!(s.len(), 100_000);
        for d in 0..2 {
            let mean: f64 = s.iter().map(|(_, z)| z[d]).sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 0.02, "dim {d}: mean {mean}");
        }
    }
}
