//! The infusion kernel q_θ^t(s^{t+1} | s^t, x) used to emulate training
//! chains, its rate schedule, and the deterministic convergence check.
//!
//! Per cell of N(s^t):
//!
//! ```text
//! λ_q = (1 - α^t) λ_θ + α^t 1[c ∈ G_x(s^t)]
//! μ_q = (1 - α^t) μ_θ + α^t z^x_c          (z^x_c = 0 off x)
//! ```

use crate::error::{Error, Result};
use crate::grid::{self, Coord, NeighborhoodSpec, SparseState};
use crate::kernel::{self, KernelTape, SigmaSchedule, TransitionKernel, TransitionOutput};
use crate::net::ParamStore;
use crate::rng::ChainRng;

/// α^t = min(α1 t + α0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub alpha1: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha0: 0.1,
            alpha1: 0.005,
        }
    }
}

// Rates within this distance of 1 count as saturated, so that schedules like
// 0.1 + 0.005 t hit exactly 1 at t = 180 despite rounding.
const SATURATION_SLACK: f64 = 1e-12;

impl AlphaSchedule {
    pub fn new(alpha0: f64, alpha1: f64) -> Result<Self> {
        if !(alpha1 > 0.0) || !(0.0..=1.0).contains(&alpha0) {
            return Err(Error::Config(format!(
                "infusion schedule needs alpha1 > 0 and alpha0 in [0, 1], got ({alpha0}, {alpha1})"
            )));
        }
        Ok(AlphaSchedule { alpha0, alpha1 })
    }

    pub fn at(&self, t: usize) -> f64 {
        let v = self.alpha1 * t as f64 + self.alpha0;
        if v >= 1.0 - SATURATION_SLACK {
            1.0
        } else {
            v
        }
    }

    /// First step with α^t = 1.
    pub fn saturation_step(&self) -> usize {
        let guess = ((1.0 - self.alpha0) / self.alpha1).ceil().max(0.0) as usize;
        let mut t = guess.saturating_sub(1);
        while self.at(t) < 1.0 {
            t += 1;
        }
        t
    }

    /// Saturation plus four grid diagonals' worth of radius-r steps.
    pub fn default_max_steps(&self, resolution: u32, radius: u32) -> usize {
        let diag = (3f64.sqrt() * resolution as f64).ceil() as usize;
        self.saturation_step() + (4 * diag).div_ceil(radius.max(1) as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfusionOutput {
    pub coords: Vec<Coord>,
    pub lambda_q: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub latent_dim: usize,
    pub t: usize,
    pub resolution: u32,
    pub voxel_size: f64,
}

impl InfusionOutput {
    pub fn mu_at(&self, n: usize) -> &[f64] {
        &self.mu_q[n * self.latent_dim..(n + 1) * self.latent_dim]
    }
}

pub fn infusion_params(
    out: &TransitionOutput,
    state: &SparseState,
    x: &SparseState,
    alpha: f64,
    nbhd: &NeighborhoodSpec,
) -> Result<InfusionOutput> {
    if x.is_empty() {
        return Err(Error::EmptyState);
    }
    let nb = grid::neighborhood(state, nbhd);
    if nb != out.coords {
        return Err(Error::DomainMismatch(
            "transition output does not cover N(s) exactly".into(),
        ));
    }
    let targets = grid::nearest_in_set(&nb, x.coords(), nbhd.metric);
    let k = out.latent_dim;
    let mut lambda_q = Vec::with_capacity(nb.len());
    let mut mu_q = Vec::with_capacity(nb.len() * k);
    let zero = vec![0.0; k];
    // Both `nb` and `targets` are sorted, so membership is a merge walk.
    let mut ti = 0;
    for (n, &c) in nb.iter().enumerate() {
        while ti < targets.len() && targets[ti] < c {
            ti += 1;
        }
        let ind = if ti < targets.len() && targets[ti] == c { 1.0 } else { 0.0 };
        lambda_q.push((1.0 - alpha) * out.lambda[n] + alpha * ind);
        let zx = x.get(c).unwrap_or(&zero);
        for (m, z) in out.mu_at(n).iter().zip(zx) {
            mu_q.push((1.0 - alpha) * m + alpha * z);
        }
    }
    Ok(InfusionOutput {
        coords: nb,
        lambda_q,
        mu_q,
        latent_dim: k,
        t: out.source_step,
        resolution: out.resolution,
        voxel_size: out.voxel_size,
    })
}

pub fn sample_infusion(inf: &InfusionOutput, sigma: f64, rng: &mut ChainRng) -> SparseState {
    kernel::sample_cells(
        &inf.coords,
        &inf.lambda_q,
        &inf.mu_q,
        inf.latent_dim,
        sigma,
        inf.resolution,
        inf.voxel_size,
        rng,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfusionSettings {
    pub steps: usize,
    pub alpha: AlphaSchedule,
    pub sigma: SigmaSchedule,
    pub nbhd: NeighborhoodSpec,
}

/// What a training chain exposes at step `t` (before sampling s^{t+1}).
pub struct StepView<'a> {
    pub t: usize,
    pub state: &'a SparseState,
    pub transition: &'a TransitionOutput,
    pub tape: KernelTape,
    pub infusion: &'a InfusionOutput,
    pub alpha: f64,
    pub sigma: f64,
}

/// Run s^{t+1} ~ q^t(. | s^t, x) for t = 0..steps, calling `on_step` with
/// each step's predictions. Returns the final state, with its codes snapped
/// to x when the chain ends saturated on x's occupancy.
pub fn run_infusion_chain<F>(
    store: &ParamStore,
    kern: &TransitionKernel,
    s0: &SparseState,
    x: &SparseState,
    settings: &InfusionSettings,
    rng: &mut ChainRng,
    mut on_step: F,
) -> Result<SparseState>
where
    F: FnMut(StepView<'_>) -> Result<()>,
{
    if s0.is_empty() || x.is_empty() {
        return Err(Error::EmptyState);
    }
    if settings.steps == 0 {
        return Err(Error::Config("infusion chain needs at least one step".into()));
    }
    let cond = kern.spec().conditioned.then_some(s0);
    let mut state = s0.clone();
    for t in 0..settings.steps {
        let (mut out, tape) = kern.predict_with_tape(store, &state, cond, &settings.nbhd)?;
        out.source_step = t;
        let alpha = settings.alpha.at(t);
        let sigma = settings.sigma.at(t);
        let inf = infusion_params(&out, &state, x, alpha, &settings.nbhd)?;
        let next = sample_infusion(&inf, sigma, rng);
        on_step(StepView {
            t,
            state: &state,
            transition: &out,
            tape,
            infusion: &inf,
            alpha,
            sigma,
        })?;
        if next.is_empty() {
            return Err(Error::ChainDied { step: t + 1 });
        }
        state = next;
    }
    if settings.alpha.at(settings.steps - 1) == 1.0 && state.same_occupancy(x) {
        state = x.clone();
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct SequenceStep {
    pub state: SparseState,
    pub transition: TransitionOutput,
    pub infusion: InfusionOutput,
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub steps: Vec<SequenceStep>,
    pub final_state: SparseState,
    pub target: SparseState,
}

pub fn emulate_sequence(
    store: &ParamStore,
    kern: &TransitionKernel,
    s0: &SparseState,
    x: &SparseState,
    settings: &InfusionSettings,
    rng: &mut ChainRng,
) -> Result<Sequence> {
    let mut steps = Vec::with_capacity(settings.steps);
    let final_state = run_infusion_chain(store, kern, s0, x, settings, rng, |v| {
        steps.push(SequenceStep {
            state: v.state.clone(),
            transition: v.transition.clone(),
            infusion: v.infusion.clone(),
            alpha: v.alpha,
            sigma: v.sigma,
        });
        Ok(())
    })?;
    Ok(Sequence {
        steps,
        final_state,
        target: x.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Convergence {
    pub converged: bool,
    /// Absolute step index (counting from 0 before saturation) at which the
    /// occupancy first equalled x, or the step where the search stopped.
    pub t_hit: usize,
}

/// Iterate the saturated recursion s^{t+1} = G_x(s^t) from the saturation
/// step until the occupancy equals x or `max_steps` is reached.
pub fn verify_convergence(
    s0: &SparseState,
    x: &SparseState,
    nbhd: &NeighborhoodSpec,
    alpha: &AlphaSchedule,
    max_steps: usize,
) -> Result<Convergence> {
    if s0.is_empty() || x.is_empty() {
        return Err(Error::EmptyState);
    }
    let mut t = alpha.saturation_step();
    let mut occ: Vec<Coord> = s0.coords().to_vec();
    loop {
        if occ == x.coords() {
            return Ok(Convergence {
                converged: true,
                t_hit: t,
            });
        }
        if t >= max_steps {
            return Ok(Convergence {
                converged: false,
                t_hit: t,
            });
        }
        let s = SparseState::from_sorted_parts(
            occ,
            Vec::new(),
            0,
            s0.resolution(),
            s0.voxel_size(),
        );
        occ = grid::nearest_target_cells(&s, x, nbhd)?;
        t += 1;
    }
}

/// The saturated recursion's trajectory, for inspecting per-step distances.
pub fn saturated_trajectory(
    s0: &SparseState,
    x: &SparseState,
    nbhd: &NeighborhoodSpec,
    steps: usize,
) -> Result<Vec<Vec<Coord>>> {
    let mut out = vec![s0.coords().to_vec()];
    for _ in 0..steps {
        let s = SparseState::from_sorted_parts(
            out.last().unwrap().clone(),
            Vec::new(),
            0,
            s0.resolution(),
            s0.voxel_size(),
        );
        out.push(grid::nearest_target_cells(&s, x, nbhd)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Metric;
    use crate::kernel::KernelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn line(n: i32, z: i32) -> SparseState {
        SparseState::from_coords((0..n).map(|i| Coord::new(i + 5, 10, z)), 2, 40, 0.05).unwrap()
    }

    fn kern() -> (TransitionKernel, ParamStore) {
        let k = TransitionKernel::new(KernelSpec {
            latent_dim: 2,
            conditioned: false,
            window_radius: 1,
            hidden: vec![6],
        })
        .unwrap();
        let mut store = ParamStore::new();
        k.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (k, store)
    }

    fn coded_target(seed: u64) -> SparseState {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = BTreeMap::new();
        for i in 0..8 {
            cells.insert(Coord::new(5 + i, 10, 10), vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        }
        SparseState::from_map(cells, 2, 40, 0.05).unwrap()
    }

    #[test]
    fn alpha_schedule_defaults() {
        let a = AlphaSchedule::default();
        assert!((a.at(0) - 0.1).abs() < 1e-15);
        assert_eq!(a.saturation_step(), 180);
        assert_eq!(a.at(180), 1.0);
        assert!(a.at(179) < 1.0);
        assert!((1..400).all(|t| a.at(t) >= a.at(t - 1)));
        assert_eq!(AlphaSchedule::new(1.0, 0.1).unwrap().saturation_step(), 0);
        assert!(AlphaSchedule::new(0.1, 0.0).is_err());
    }

    #[test]
    fn mixture_degenerates_at_endpoints() {
        let (k, store) = kern();
        let s = SparseState::from_coords([Coord::new(6, 10, 10)], 2, 40, 0.05).unwrap();
        let x = coded_target(2);
        let nb = NeighborhoodSpec::default();
        let out = k.predict(&store, &s, None, &nb).unwrap();
        let q0 = infusion_params(&out, &s, &x, 0.0, &nb).unwrap();
        assert_eq!(q0.lambda_q, out.lambda);
        assert_eq!(q0.mu_q, out.mu);
        let q1 = infusion_params(&out, &s, &x, 1.0, &nb).unwrap();
        let g = grid::nearest_target_cells(&s, &x, &nb).unwrap();
        for (n, c) in q1.coords.iter().enumerate() {
            assert_eq!(q1.lambda_q[n], if g.contains(c) { 1.0 } else { 0.0 });
            assert_eq!(q1.mu_at(n), x.get(*c).unwrap_or(&[0.0, 0.0]));
        }
        let mut half = out.clone();
        let gi = half.coords.iter().position(|c| g.contains(c)).unwrap();
        half.lambda[gi] = 0.2;
        let qh = infusion_params(&half, &s, &x, 0.5, &nb).unwrap();
        assert!((qh.lambda_q[gi] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn domain_mismatch_is_detected() {
        let (k, store) = kern();
        let s = SparseState::from_coords([Coord::new(6, 10, 10)], 2, 40, 0.05).unwrap();
        let other = SparseState::from_coords([Coord::new(20, 10, 10)], 2, 40, 0.05).unwrap();
        let nb = NeighborhoodSpec::default();
        let out = k.predict(&store, &s, None, &nb).unwrap();
        assert!(matches!(
            infusion_params(&out, &other, &coded_target(1), 0.5, &nb),
            Err(Error::DomainMismatch(_))
        ));
    }

    #[test]
    fn saturated_step_lands_on_projection() {
        let (k, store) = kern();
        let s = SparseState::from_coords([Coord::new(6, 10, 10)], 2, 40, 0.05).unwrap();
        let x = coded_target(3);
        let nb = NeighborhoodSpec::default();
        let out = k.predict(&store, &s, None, &nb).unwrap();
        let q = infusion_params(&out, &s, &x, 1.0, &nb).unwrap();
        let next = sample_infusion(&q, 0.0, &mut ChainRng::new(4, 0));
        assert_eq!(next.coords(), &grid::nearest_target_cells(&s, &x, &nb).unwrap()[..]);
        for (c, z) in next.iter() {
            if let Some(zx) = x.get(c) {
                assert_eq!(z, zx);
            }
        }
    }

    #[test]
    fn infusion_frequencies_match_lambda_q() {
        let n = 10_000;
        let coords: Vec<Coord> = (0..n).map(|i| Coord::new(i / 100, i % 100, 0)).collect();
        let inf = InfusionOutput {
            coords,
            lambda_q: vec![0.64; n as usize],
            mu_q: vec![0.0; n as usize],
            latent_dim: 1,
            t: 0,
            resolution: 0,
            voxel_size: 1.0,
        };
        let s = sample_infusion(&inf, 0.1, &mut ChainRng::new(8, 2));
        let rate = s.len() as f64 / n as f64;
        assert!((rate - 0.64).abs() < 3.0 * (0.64f64 * 0.36 / n as f64).sqrt());
    }

    #[test]
    fn emulation_is_deterministic_and_saturated_start_projects() {
        let (k, store) = kern();
        let s0 = SparseState::from_coords([Coord::new(6, 10, 10)], 2, 40, 0.05).unwrap();
        let x = coded_target(5);
        let settings = InfusionSettings {
            steps: 6,
            alpha: AlphaSchedule::new(1.0, 0.01).unwrap(),
            sigma: SigmaSchedule::default(),
            nbhd: NeighborhoodSpec::default(),
        };
        let a = emulate_sequence(&store, &k, &s0, &x, &settings, &mut ChainRng::new(3, 0)).unwrap();
        let b = emulate_sequence(&store, &k, &s0, &x, &settings, &mut ChainRng::new(3, 0)).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(
            a.steps[1].state.coords(),
            &grid::nearest_target_cells(&s0, &x, &settings.nbhd).unwrap()[..]
        );
        // Saturated from the start, 8 cells reachable in a few steps: ends on x
        // with snapped codes.
        assert_eq!(a.final_state, x);
    }

    #[test]
    fn convergence_examples() {
        let nb = NeighborhoodSpec::default();
        let alpha = AlphaSchedule::default();
        let sat = alpha.saturation_step();
        let x = line(10, 10);
        let c = verify_convergence(&x, &x, &nb, &alpha, 1000).unwrap();
        assert_eq!(c, Convergence { converged: true, t_hit: sat });
        let s0 = SparseState::from_coords([Coord::new(5, 10, 10)], 2, 40, 0.05).unwrap();
        let c = verify_convergence(&s0, &x, &nb, &alpha, 1000).unwrap();
        assert!(c.converged);
        assert!(c.t_hit <= sat + 9usize.div_ceil(2) + 1, "{c:?}");
        let c = verify_convergence(&s0, &x, &nb, &alpha, sat + 1).unwrap();
        assert!(!c.converged);
    }

    #[test]
    fn disconnected_targets_converge() {
        let nb = NeighborhoodSpec::default();
        let alpha = AlphaSchedule::default();
        let mut cells = Vec::new();
        for d in [Coord::new(0, 0, 0), Coord::new(1, 0, 0), Coord::new(0, 1, 0), Coord::new(0, 0, 1)] {
            cells.push(Coord::new(5, 5, 5).offset(d));
            cells.push(Coord::new(25, 5, 5).offset(d));
        }
        let x = SparseState::from_coords(cells, 1, 40, 0.05).unwrap();
        let s0 = SparseState::from_coords([Coord::new(5, 5, 5)], 1, 40, 0.05).unwrap();
        let max = alpha.default_max_steps(40, 2);
        let c = verify_convergence(&s0, &x, &nb, &alpha, max).unwrap();
        assert!(c.converged);
        // The recursion keeps a representative per target cell, so distances
        // to every target cell shrink monotonically.
        let traj = saturated_trajectory(&s0, &x, &nb, 12).unwrap();
        for w in traj.windows(2) {
            for &t in x.coords() {
                let d0 = w[0].iter().map(|c| Metric::L1.distance(*c, t)).min().unwrap();
                let d1 = w[1].iter().map(|c| Metric::L1.distance(*c, t)).min().unwrap();
                assert!(d1 <= d0);
                assert!(d0 == 0 || d1 < d0);
            }
        }
    }
}
