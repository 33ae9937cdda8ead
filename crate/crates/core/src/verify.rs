//! Self-check suites behind `cgca verify`: convergence of the saturated
//! chain, closed-form KL against enumeration, the final-step identity,
//! gradient checks through the full stacks, sampling statistics, and the
//! reduction identities. Every check is deterministic given the seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Autoencoder, AutoencoderSpec, FieldMode, PointSample};
use crate::data::{make_partial, PartialSpec, ShapeKind, ToyShape};
use crate::error::Result;
use crate::grid::{self, Coord, NeighborhoodSpec, SparseState};
use crate::infusion::{self, AlphaSchedule};
use crate::kernel::{self, ChainSettings, KernelSpec, SigmaSchedule, TransitionKernel, TransitionOutput};
use crate::loss;
use crate::net::ParamStore;
use crate::rng::{self, ChainRng};

/// True when the one-sided differences around `l0` disagree, i.e. the
/// segment `[v - h, v + h]` contains a kink (ReLU, absolute value) and a
/// central difference says nothing about the derivative at `v`.
pub fn crosses_kink(lm: f64, l0: f64, lp: f64, h: f64) -> bool {
    let fwd = (lp - l0) / h;
    let bwd = (l0 - lm) / h;
    (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}/{}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.detail
        )
    }
}

pub const SUITES: [&str; 6] = ["convergence", "kl", "final", "gradients", "sampling", "reductions"];

/// Run the named suites (all when `only` is empty).
pub fn run(seed: u64, only: &[String]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for suite in SUITES {
        if !only.is_empty() && !only.iter().any(|s| s == suite) {
            continue;
        }
        match suite {
            "convergence" => out.extend(convergence(seed, 10)?),
            "kl" => out.extend(kl_factorization(seed, 100)?),
            "final" => out.extend(final_step(seed, 20)?),
            "gradients" => out.extend(gradients(seed, 5)?),
            "sampling" => out.extend(sampling(seed)?),
            _ => out.extend(reductions(seed)?),
        }
    }
    Ok(out)
}

/// Random (s^0, x) pairs per shape kind at R = 32: x is the voxelized
/// surface and s^0 either a partial scan of it or a different random shape.
pub fn convergence(seed: u64, pairs_per_kind: usize) -> Result<Vec<CheckResult>> {
    let (res, eps) = (32, 2.0 / 32.0);
    let nbhd = NeighborhoodSpec::default();
    let alpha = AlphaSchedule::default();
    let cap = alpha.default_max_steps(res, nbhd.radius);
    let mut out = Vec::new();
    for (ki, kind) in ShapeKind::ALL.iter().enumerate() {
        let mut hits = 0;
        let mut worst = 0;
        for n in 0..pairs_per_kind {
            let mut r = rng::stream(seed, (ki * 1000 + n) as u64, "verify-convergence");
            let shape = ToyShape::random(*kind, 1.0, &mut r);
            let surface = shape.sample_surface(1500, &mut r);
            let x = grid::voxelize(&surface, res, eps, 0)?;
            let s0 = if n % 2 == 0 {
                let partial = make_partial(&surface, &PartialSpec::default(), &mut r)?;
                grid::voxelize(&partial, res, eps, 0)?
            } else {
                let other = ShapeKind::ALL[r.random_range(0..ShapeKind::ALL.len())];
                let pts = ToyShape::random(other, 0.6, &mut r).sample_surface(300, &mut r);
                grid::voxelize(&pts, res, eps, 0)?
            };
            let c = infusion::verify_convergence(&s0, &x, &nbhd, &alpha, cap)?;
            if c.converged {
                hits += 1;
                worst = worst.max(c.t_hit);
            }
        }
        out.push(CheckResult::new(
            "convergence",
            kind.to_string(),
            hits == pairs_per_kind,
            format!("{hits}/{pairs_per_kind} reached x, latest at t = {worst} (bound {cap})"),
        ));
    }
    Ok(out)
}

/// Per-cell closed form against the joint KL enumerated over every
/// occupancy configuration of up to three cells.
pub fn kl_factorization(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, 0, "verify-kl");
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let cells = 1 + trial % 3;
        let k = 1 + r.random_range(0..4usize);
        let sigma = r.random_range(0.05..1.0);
        let lq: Vec<f64> = (0..cells).map(|_| r.random_range(0.0..1.0)).collect();
        let lp: Vec<f64> = (0..cells).map(|_| r.random_range(0.01..0.99)).collect();
        let mq: Vec<Vec<f64>> = (0..cells).map(|_| (0..k).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mp: Vec<Vec<f64>> = (0..cells).map(|_| (0..k).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mut closed = 0.0;
        for c in 0..cells {
            closed += loss::bernoulli_kl(lq[c], lp[c])? + lq[c] * loss::gaussian_kl_same_var(&mq[c], &mp[c], sigma)?;
        }
        let mut joint = 0.0;
        for mask in 0..(1u32 << cells) {
            let (mut q, mut p, mut gauss) = (1.0, 1.0, 0.0);
            for c in 0..cells {
                if mask >> c & 1 == 1 {
                    q *= lq[c];
                    p *= lp[c];
                    let sq: f64 = mq[c].iter().zip(&mp[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                    gauss += sq / (2.0 * sigma * sigma);
                } else {
                    q *= 1.0 - lq[c];
                    p *= 1.0 - lp[c];
                }
            }
            if q > 0.0 {
                joint += q * ((q / p).ln() + gauss);
            }
        }
        worst = worst.max((joint - closed).abs());
    }
    Ok(vec![CheckResult::new(
        "kl",
        "factorization",
        worst < 1e-10,
        format!("max |joint - factored| = {worst:.3e} over {trials} draws"),
    )])
}

fn random_output(r: &mut ChaCha8Rng, coords: Vec<Coord>, k: usize, res: u32, eps: f64) -> TransitionOutput {
    let n = coords.len();
    TransitionOutput {
        coords,
        lambda: (0..n).map(|_| r.random_range(0.05..0.95)).collect(),
        mu: (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect(),
        latent_dim: k,
        source_step: 0,
        resolution: res,
        voxel_size: eps,
    }
}

/// Final-step loss against the reweighted likelihood: identical gradients
/// and a constant offset of K/2 log(2πσ) per occupied target cell.
pub fn final_step(seed: u64, problems: usize) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, 0, "verify-final");
    let (mut worst_grad, mut worst_off): (f64, f64) = (0.0, 0.0);
    for _ in 0..problems {
        let k = 1 + r.random_range(0..5usize);
        let sigma = r.random_range(0.05..0.5);
        let coords: Vec<Coord> = (0..6).map(|i| Coord::new(i, 0, 0)).collect();
        let out = random_output(&mut r, coords.clone(), k, 8, 0.25);
        let mut x_cells = BTreeMap::new();
        for c in &coords {
            if r.random_bool(0.5) {
                x_cells.insert(*c, (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
        }
        if x_cells.is_empty() {
            x_cells.insert(coords[0], vec![0.5; k]);
        }
        let occupied = x_cells.len() as f64;
        let x = SparseState::from_map(x_cells, k, 8, 0.25)?;
        let (b, g) = loss::final_step_loss(&out, &x, 1.0, sigma, 1.0)?;
        let (nll, gn) = loss::reweighted_final_nll(&out, &x, sigma)?;
        for (a, b) in g.d_lambda.iter().zip(&gn.d_lambda).chain(g.d_mu.iter().zip(&gn.d_mu)) {
            worst_grad = worst_grad.max((a - b).abs());
        }
        let offset = (nll - b.total) / occupied;
        worst_off = worst_off.max((offset - loss::gaussian_log_normalizer(k, sigma)).abs());
    }
    Ok(vec![
        CheckResult::new(
            "final",
            "gradients",
            worst_grad < 1e-8,
            format!("max elementwise gradient gap {worst_grad:.3e}"),
        ),
        CheckResult::new(
            "final",
            "offset",
            worst_off < 1e-10,
            format!("max offset error {worst_off:.3e}"),
        ),
    ])
}

fn random_state(r: &mut ChaCha8Rng, k: usize, n: usize, res: u32, eps: f64) -> Result<SparseState> {
    let mut cells = BTreeMap::new();
    while cells.len() < n {
        let c = Coord::new(
            r.random_range(2..res as i32 - 2),
            r.random_range(2..res as i32 - 2),
            r.random_range(2..res as i32 - 2),
        );
        cells.insert(c, (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    }
    SparseState::from_map(cells, k, res, eps)
}

/// Relative central-difference error on up to `probes` parameters, skipping
/// probes that straddle a kink. Returns (worst error, probes used).
fn fd_check<F>(store: &ParamStore, seed: u64, probes: usize, mut loss_at: F) -> Result<(f64, usize)>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let h = 1e-5;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let l0 = loss_at(store)?;
    let (mut worst, mut used): (f64, usize) = (0.0, 0);
    for _ in 0..probes * 10 {
        if used == probes {
            break;
        }
        let idx = r.random_range(0..store.num_values());
        let v0 = store.flat_get(idx);
        let mut p = store.clone();
        p.flat_set(idx, v0 + h);
        let lp = loss_at(&p)?;
        p.flat_set(idx, v0 - h);
        let lm = loss_at(&p)?;
        if crosses_kink(lm, l0, lp, h) {
            continue;
        }
        used += 1;
        let fd = (lp - lm) / (2.0 * h);
        let an = store.flat_grad(idx);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Ok((worst, used))
}

/// Kernel L_t (infusion targets held fixed) and the autoencoder objective,
/// analytic gradients against central differences with h = 1e-5.
pub fn gradients(seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let nbhd = NeighborhoodSpec::default();
    let (mut worst_k, mut worst_a): (f64, f64) = (0.0, 0.0);
    let (mut used_k, mut used_a) = (0, 0);
    for s in 0..seeds as u64 {
        let mut r = rng::stream(seed, s, "verify-gradients");
        // Transition kernel with a conditioning input.
        let k = 3;
        let mut spec = KernelSpec::new(k, true);
        spec.window_radius = 1;
        spec.hidden = vec![8, 8];
        let kern = TransitionKernel::new(spec)?;
        let mut store = ParamStore::new();
        kern.init(&mut store, &mut r)?;
        for idx in 0..store.num_values() {
            let v = store.flat_get(idx) + r.random_range(-0.1..0.1);
            store.flat_set(idx, v);
        }
        let state = random_state(&mut r, k, 12, 10, 0.2)?;
        let cond = random_state(&mut r, k, 8, 10, 0.2)?;
        let x = random_state(&mut r, k, 15, 10, 0.2)?;
        let (out0, tape) = kern.predict_with_tape(&store, &state, Some(&cond), &nbhd)?;
        let inf = infusion::infusion_params(&out0, &state, &x, 0.3, &nbhd)?;
        let (gamma, sigma) = (0.5, 0.3);
        let (_, g) = loss::transition_loss(&out0, &inf, gamma, sigma)?;
        kern.backward(&mut store, &tape, &g.d_lambda, &g.d_mu)?;
        let (w, u) = fd_check(&store, seed ^ s, 20, |p| {
            let o = kern.predict(p, &state, Some(&cond), &nbhd)?;
            Ok(loss::transition_loss(&o, &inf, gamma, sigma)?.0.total)
        })?;
        worst_k = worst_k.max(w);
        used_k += u;

        // Autoencoder, both codomains.
        let mode = if s % 2 == 0 { FieldMode::Sdf } else { FieldMode::Udf };
        let ae = Autoencoder::new(AutoencoderSpec {
            latent_dim: 4,
            feature_dim: 6,
            levels: 2,
            encoder_width: 8,
            encoder_blocks: 1,
            decoder_width: 8,
            decoder_blocks: 1,
            mode,
        })?;
        let mut ap = ParamStore::new();
        ae.init(&mut ap, &mut r)?;
        for idx in 0..ap.num_values() {
            let v = ap.flat_get(idx) + r.random_range(-0.1..0.1);
            ap.flat_set(idx, v);
        }
        let shape = ToyShape::random(ShapeKind::Sphere, 1.0, &mut r);
        let surface: Vec<PointSample> = shape
            .sample_surface(80, &mut r)
            .into_iter()
            .map(|p| PointSample { p, d: 0.0 })
            .collect();
        let queries = shape.sample_query_pairs(40, 0.1, mode, &mut r)?;
        let (res, eps, beta) = (16, 0.125, 0.3);
        ae.evaluate_and_backward(&mut ap, &surface, &queries, res, eps, beta)?;
        let (w, u) = fd_check(&ap, seed ^ (s + 100), 20, |p| {
            Ok(ae.evaluate(p, &surface, &queries, res, eps, beta)?.loss.value)
        })?;
        worst_a = worst_a.max(w);
        used_a += u;
    }
    out.push(CheckResult::new(
        "gradients",
        "kernel",
        worst_k < 1e-4 && used_k > 0,
        format!("max relative error {worst_k:.3e} over {used_k} probes"),
    ));
    out.push(CheckResult::new(
        "gradients",
        "autoencoder",
        worst_a < 1e-4 && used_a > 0,
        format!("max relative error {worst_a:.3e} over {used_a} probes"),
    ));
    Ok(out)
}

/// Occupancy frequencies and latent moments of the transition sampler
/// against 3-sigma bounds.
pub fn sampling(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, 0, "verify-sampling");
    let n = 10_000;
    let k = 2;
    let coords: Vec<Coord> = (0..n as i32).map(|i| Coord::new(i / 100, i % 100, 0)).collect();
    let lam = 0.3;
    let mu = [0.5, -1.0];
    let sigma = 0.2;
    let out = TransitionOutput {
        coords,
        lambda: vec![lam; n],
        mu: mu.iter().copied().cycle().take(n * k).collect(),
        latent_dim: k,
        source_step: 0,
        resolution: 0,
        voxel_size: 0.1,
    };
    let mut crng = ChainRng::new(r.random(), 0);
    let s = kernel::sample_transition(&out, sigma, &mut crng);
    let m = s.len() as f64;
    let occ_bound = 3.0 * (n as f64 * lam * (1.0 - lam)).sqrt();
    let occ_ok = (m - n as f64 * lam).abs() <= occ_bound;
    let mut mom_ok = true;
    let mut detail = String::new();
    for j in 0..k {
        let vals: Vec<f64> = (0..s.len()).map(|i| s.latent_at(i)[j]).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        let mean_ok = (mean - mu[j]).abs() <= 3.0 * sigma / m.sqrt();
        // Var of the sample variance of a normal is 2σ⁴/(m-1).
        let var_ok = (var - sigma * sigma).abs() <= 3.0 * (2.0 * sigma.powi(4) / (m - 1.0)).sqrt();
        mom_ok &= mean_ok && var_ok;
        detail.push_str(&format!(" dim{j} mean {mean:.4} var {var:.5};"));
    }
    Ok(vec![
        CheckResult::new(
            "sampling",
            "occupancy",
            occ_ok,
            format!("{m} of {n} occupied at λ = {lam} (3σ = {occ_bound:.1})"),
        ),
        CheckResult::new("sampling", "latents", mom_ok, detail.trim().trim_end_matches(';').to_string()),
    ])
}

/// α = 0 infusion equals the transition sampler bit for bit; γ = 0 gives
/// zero μ gradients; T = T' = 0 generation returns s^0.
pub fn reductions(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, 0, "verify-reductions");
    let nbhd = NeighborhoodSpec::default();
    let k = 3;
    let mut spec = KernelSpec::new(k, false);
    spec.window_radius = 1;
    spec.hidden = vec![8];
    let kern = TransitionKernel::new(spec)?;
    let mut store = ParamStore::new();
    kern.init(&mut store, &mut r)?;
    let state = random_state(&mut r, k, 10, 12, 0.2)?;
    let x = random_state(&mut r, k, 10, 12, 0.2)?;
    let out = kern.predict(&store, &state, None, &nbhd)?;
    let inf = infusion::infusion_params(&out, &state, &x, 0.0, &nbhd)?;
    let sigma = SigmaSchedule::default().at(0);
    let a = kernel::sample_transition(&out, sigma, &mut ChainRng::new(seed, 1));
    let b = infusion::sample_infusion(&inf, sigma, &mut ChainRng::new(seed, 1));
    let alpha_zero = a == b && a.latents().iter().zip(b.latents()).all(|(p, q)| p.to_bits() == q.to_bits());

    let inf = infusion::infusion_params(&out, &state, &x, 0.5, &nbhd)?;
    let (_, g) = loss::transition_loss(&out, &inf, 0.0, sigma)?;
    let gamma_zero = g.d_mu.iter().all(|v| *v == 0.0);

    let settings = ChainSettings {
        steps: 0,
        mode_steps: 0,
        sigma: SigmaSchedule::default(),
        nbhd,
    };
    let g0 = kernel::generate(&store, &kern, &state, &settings, &mut ChainRng::new(seed, 2), false)?;
    let identity = g0.state == state;
    Ok(vec![
        CheckResult::new("reductions", "alpha-zero", alpha_zero, "infusion at α = 0 vs transition, shared stream"),
        CheckResult::new("reductions", "gamma-zero", gamma_zero, "μ gradients at γ = 0"),
        CheckResult::new("reductions", "empty-chain", identity, "T = T' = 0 generation"),
    ])
}
