//! Two-stage training: the autoencoder first, then the transition kernel on
//! infusion chains built from frozen encodings; plus checkpoint evaluation.
//!
//! Kernel training follows one chain per training shape and takes one
//! optimizer step per batch of chains. At every step the loss `L_t` is divided by the
//! neighbourhood size `|N(s^t)|`. A chain ends at the first saturated step
//! whose projection `G_x(s^t)` already has x's occupancy; that step uses the
//! final-step loss against x.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autoencoder::{Autoencoder, PointSample};
use crate::data::ShapeRecord;
use crate::error::{Error, Result};
use crate::grid::{self, NeighborhoodSpec, SparseState};
use crate::infusion::{self, AlphaSchedule, InfusionOutput};
use crate::kernel::{self, ChainSettings, InitMode, KernelTape, SigmaSchedule, TransitionKernel};
use crate::loss;
use crate::metrics::{self, Point, ReportRow};
use crate::net::{self, Adam, ParamStore};
use crate::rng::{self, ChainRng};
use crate::surface;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate at the last epoch; the rate follows a cosine from `lr`.
    pub lr_end: f64,
    pub beta: f64,
    /// Queries drawn (without replacement) per shape and step; 0 uses all.
    pub queries_per_step: usize,
    /// Shapes whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub resolution: u32,
    pub voxel_size: f64,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mae: f64,
}

/// Encoder input for a bare scan: its points at distance 0.
pub fn surface_samples(points: &[Point]) -> Vec<PointSample> {
    points.iter().map(|p| PointSample { p: *p, d: 0.0 }).collect()
}

/// Encoder input for a complete shape: surface points plus the first half
/// of its query pairs, which carry the inside/outside orientation.
pub fn shape_samples(record: &ShapeRecord) -> Vec<PointSample> {
    let mut s = surface_samples(&record.surface);
    s.extend_from_slice(&record.queries[..record.queries.len() / 2]);
    s
}

/// Decoder targets: the query pairs the encoder did not see.
pub fn target_queries(record: &ShapeRecord) -> &[PointSample] {
    &record.queries[record.queries.len() / 2..]
}

/// Cosine interpolation from `lr` at epoch 0 to `lr_end` at the last epoch.
pub fn cosine_lr(lr: f64, lr_end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let f = epoch as f64 / (epochs - 1) as f64;
    lr_end + 0.5 * (lr - lr_end) * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Step once `batch` gradients have been accumulated or at the end of the
/// epoch, averaging over the samples actually accumulated.
fn maybe_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    opt: Optimizer,
    lr: f64,
    pos: usize,
    batch: usize,
    total: usize,
) -> Result<bool> {
    let b = batch.max(1);
    if (pos + 1) % b != 0 && pos + 1 != total {
        return Ok(false);
    }
    let filled = pos % b + 1;
    if filled > 1 {
        store.scale_grads(1.0 / filled as f64);
    }
    apply_step(store, adam, opt, lr)?;
    Ok(true)
}

fn apply_step(store: &mut ParamStore, adam: &mut Adam, opt: Optimizer, lr: f64) -> Result<()> {
    match opt {
        Optimizer::Adam => adam.step(store, lr),
        Optimizer::Sgd => net::sgd_step(store, lr),
    }
}

/// Fit the encoder/decoder on the training shapes. `store` must already
/// hold initialized parameters.
pub fn train_autoencoder(
    ae: &Autoencoder,
    store: &mut ParamStore,
    records: &[&ShapeRecord],
    cfg: &AeTrainConfig,
) -> Result<Vec<AeEpochLog>> {
    if records.is_empty() || records.iter().any(|r| r.queries.len() < 2) {
        return Err(Error::EmptyQuerySet);
    }
    let inputs: Vec<Vec<PointSample>> = records.iter().map(|r| shape_samples(r)).collect();
    let mut adam = Adam::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    store.zero_grads();
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, epoch as u64, "ae-order");
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut order_rng);
        let lr = cosine_lr(cfg.lr, cfg.lr_end, epoch, cfg.epochs);
        let (mut loss_sum, mut mae_sum) = (0.0, 0.0);
        for (pos, &i) in order.iter().enumerate() {
            let q = target_queries(records[i]);
            let batch: Vec<PointSample> = if cfg.queries_per_step == 0 || cfg.queries_per_step >= q.len() {
                q.to_vec()
            } else {
                rand::seq::index::sample(&mut order_rng, q.len(), cfg.queries_per_step)
                    .into_iter()
                    .map(|n| q[n])
                    .collect()
            };
            let ev = ae.evaluate_and_backward(store, &inputs[i], &batch, cfg.resolution, cfg.voxel_size, cfg.beta)?;
            if !ev.loss.value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += ev.loss.value;
            mae_sum += ev.loss.reconstruction;
            maybe_step(store, &mut adam, cfg.optimizer, lr, pos, cfg.batch_size, order.len())?;
        }
        let n = records.len() as f64;
        log.push(AeEpochLog {
            epoch,
            loss: loss_sum / n,
            mae: mae_sum / n,
        });
    }
    if cfg.lr > 0.0 && log.len() >= 2 && log.last().unwrap().loss >= log[0].loss {
        return Err(Error::TrainingDiverged {
            first: log[0].loss,
            last: log.last().unwrap().loss,
        });
    }
    Ok(log)
}

/// Mean clamped-distance error of the decoder on the given shapes.
pub fn autoencoder_mae(
    ae: &Autoencoder,
    store: &ParamStore,
    records: &[&ShapeRecord],
    resolution: u32,
    voxel_size: f64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut acc = 0.0;
    for r in records {
        let ev = ae.evaluate(store, &shape_samples(r), target_queries(r), resolution, voxel_size, 0.0)?;
        acc += ev.loss.reconstruction;
    }
    Ok(acc / records.len() as f64)
}

pub fn write_ae_log(path: &Path, log: &[AeEpochLog]) -> Result<()> {
    let mut body = String::from("epoch,loss,mae\n");
    for r in log {
        body.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.mae));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub alpha: AlphaSchedule,
    pub sigma: SigmaSchedule,
    pub nbhd: NeighborhoodSpec,
    /// Hard cap on chain length; 0 derives it from the schedule and grid.
    pub max_steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Chains whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    /// Run a finite-difference probe of the accumulated gradient every this
    /// many epochs (0 disables).
    pub probe_every: usize,
}

impl KernelTrainConfig {
    pub fn chain_cap(&self, resolution: u32) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.alpha.default_max_steps(resolution, self.nbhd.radius)
        }
    }
}

/// One row of the kernel training log.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLogRow {
    pub epoch: usize,
    /// Optimizer step the chain contributes to.
    pub step: usize,
    pub t: usize,
    /// Σ Bernoulli KL over N(s^t), divided by |N(s^t)|.
    pub l_o: f64,
    /// Σ λ_q ||μ_q - μ_θ||² / (2σ²) over N(s^t), divided by |N(s^t)|.
    pub l_z: f64,
    /// `l_o + γ l_z`.
    pub l_t: f64,
    /// Running lower bound −Σ_{s<=t} (L_o + L_z) on unnormalized terms.
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelEpochLog {
    pub epoch: usize,
    pub mean_lt: f64,
    /// Fraction of chains that reached x's occupancy within the cap.
    pub converged: f64,
    /// Mean sequence lower bound over converged chains (NaN if none).
    pub mean_elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub epoch: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KernelTrainLog {
    pub rows: Vec<KernelLogRow>,
    pub epochs: Vec<KernelEpochLog>,
    pub probes: Vec<GradientProbe>,
}

/// Frozen encodings for one training shape.
#[derive(Debug, Clone)]
pub struct ChainPair {
    pub s0: SparseState,
    pub x: SparseState,
}

/// s^0 from the partial scan and x from the complete surface, both through
/// the frozen encoder.
pub fn encode_pair(
    ae: &Autoencoder,
    ae_params: &ParamStore,
    record: &ShapeRecord,
    resolution: u32,
    voxel_size: f64,
) -> Result<ChainPair> {
    Ok(ChainPair {
        s0: ae.encode(ae_params, &surface_samples(&record.partial), resolution, voxel_size)?,
        x: ae.encode(ae_params, &shape_samples(record), resolution, voxel_size)?,
    })
}

/// One recorded chain step with the infusion targets held fixed.
struct RecordedStep {
    state: SparseState,
    infusion: Option<InfusionOutput>,
    sigma: f64,
}

struct ChainOutcome {
    steps: Vec<RecordedStep>,
    rows: Vec<(usize, f64, f64, f64, f64)>,
    converged: bool,
    elbo: f64,
}

/// Per-step loss and gradients against fixed targets: either an infusion
/// output, or (final step) x itself.
fn step_loss(
    out: &kernel::TransitionOutput,
    infusion: Option<&InfusionOutput>,
    x: &SparseState,
    gamma: f64,
    sigma: f64,
) -> Result<(loss::LossBreakdown, loss::LossGrads)> {
    match infusion {
        Some(inf) => loss::transition_loss(out, inf, gamma, sigma),
        None => loss::final_step_loss(out, x, 1.0, sigma, gamma),
    }
}

/// Run one training chain, accumulating normalized gradients into `store`.
fn run_chain(
    store: &mut ParamStore,
    kern: &TransitionKernel,
    pair: &ChainPair,
    cfg: &KernelTrainConfig,
    cap: usize,
    rng: &mut ChainRng,
) -> Result<ChainOutcome> {
    let cond = kern.spec().conditioned.then_some(&pair.s0);
    let mut state = pair.s0.clone();
    let mut steps = Vec::new();
    let mut rows = Vec::new();
    let mut elbo = 0.0;
    let mut converged = false;
    for t in 0..cap {
        let (mut out, tape): (_, KernelTape) = kern.predict_with_tape(store, &state, cond, &cfg.nbhd)?;
        out.source_step = t;
        let alpha = cfg.alpha.at(t);
        let sigma = cfg.sigma.at(t);
        let is_final = alpha == 1.0 && {
            let proj = grid::nearest_target_cells(&state, &pair.x, &cfg.nbhd)?;
            proj == pair.x.coords()
        };
        let inf = if is_final {
            None
        } else {
            Some(infusion::infusion_params(&out, &state, &pair.x, alpha, &cfg.nbhd)?)
        };
        let (b, g) = step_loss(&out, inf.as_ref(), &pair.x, cfg.gamma, sigma)?;
        let (b1, _) = step_loss(&out, inf.as_ref(), &pair.x, 1.0, sigma)?;
        let norm = 1.0 / out.coords.len() as f64;
        let d_lambda: Vec<f64> = g.d_lambda.iter().map(|v| v * norm).collect();
        let d_mu: Vec<f64> = g.d_mu.iter().map(|v| v * norm).collect();
        kern.backward(store, &tape, &d_lambda, &d_mu)?;
        elbo -= b1.total;
        rows.push((t, b.occupancy * norm, b.latent * norm, b.total * norm, elbo));
        let next = match &inf {
            Some(i) => infusion::sample_infusion(i, sigma, rng),
            None => pair.x.clone(),
        };
        steps.push(RecordedStep {
            state: std::mem::replace(&mut state, next),
            infusion: inf,
            sigma,
        });
        if is_final {
            converged = true;
            break;
        }
        if state.is_empty() {
            return Err(Error::ChainDied { step: t + 1 });
        }
    }
    Ok(ChainOutcome {
        steps,
        rows,
        converged,
        elbo,
    })
}

/// Normalized loss of recorded steps under `store`, targets held fixed.
fn replay_loss(
    store: &ParamStore,
    kern: &TransitionKernel,
    pair: &ChainPair,
    steps: &[RecordedStep],
    cfg: &KernelTrainConfig,
) -> Result<f64> {
    let cond = kern.spec().conditioned.then_some(&pair.s0);
    let mut acc = 0.0;
    for s in steps {
        let out = kern.predict(store, &s.state, cond, &cfg.nbhd)?;
        let (b, _) = step_loss(&out, s.infusion.as_ref(), &pair.x, cfg.gamma, s.sigma)?;
        acc += b.total / out.coords.len() as f64;
    }
    Ok(acc)
}

/// Train the transition kernel; `store` must hold initialized kernel
/// parameters. The autoencoder is only read.
pub fn train_kernel(
    kern: &TransitionKernel,
    store: &mut ParamStore,
    pairs: &[ChainPair],
    cfg: &KernelTrainConfig,
) -> Result<KernelTrainLog> {
    if pairs.is_empty() {
        return Err(Error::EmptyState);
    }
    let resolution = pairs[0].x.resolution();
    let cap = cfg.chain_cap(resolution);
    let mut adam = Adam::default();
    let mut log = KernelTrainLog::default();
    let mut step = 0usize;
    store.zero_grads();
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, epoch as u64, "kernel-order");
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut lt_sum, mut lt_n, mut conv, mut elbo_sum) = (0.0, 0usize, 0usize, 0.0);
        for (pos, &i) in order.iter().enumerate() {
            let chain_id = (epoch * pairs.len() + pos) as u64;
            let mut crng = ChainRng::new(cfg.seed, chain_id);
            let outcome = run_chain(store, kern, &pairs[i], cfg, cap, &mut crng)?;
            for &(t, l_o, l_z, l_t, elbo) in &outcome.rows {
                if !l_t.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                lt_sum += l_t;
                lt_n += 1;
                log.rows.push(KernelLogRow {
                    epoch,
                    step,
                    t,
                    l_o,
                    l_z,
                    l_t,
                    elbo,
                });
            }
            if outcome.converged {
                conv += 1;
                elbo_sum += outcome.elbo;
            }
            if cfg.probe_every > 0 && epoch % cfg.probe_every == 0 && pos == 0 {
                // The first chain of an epoch starts from zero gradients.
                probe_gradient(store, kern, &pairs[i], &outcome.steps, cfg, epoch, &mut log.probes)?;
            }
            if maybe_step(store, &mut adam, cfg.optimizer, cfg.lr, pos, cfg.batch_size, order.len())? {
                step += 1;
            }
        }
        log.epochs.push(KernelEpochLog {
            epoch,
            mean_lt: lt_sum / lt_n.max(1) as f64,
            converged: conv as f64 / pairs.len() as f64,
            mean_elbo: if conv > 0 { elbo_sum / conv as f64 } else { f64::NAN },
        });
    }
    Ok(log)
}

fn probe_gradient(
    store: &ParamStore,
    kern: &TransitionKernel,
    pair: &ChainPair,
    steps: &[RecordedStep],
    cfg: &KernelTrainConfig,
    epoch: usize,
    out: &mut Vec<GradientProbe>,
) -> Result<()> {
    let mut r = rng::stream(cfg.seed, epoch as u64, "probe");
    let h = 1e-5;
    let n = store.num_values();
    let l0 = replay_loss(store, kern, pair, steps, cfg)?;
    let mut checked = 0;
    for _ in 0..100 {
        if checked == 10 {
            break;
        }
        let index = r.random_range(0..n);
        let analytic = store.flat_grad(index);
        let v0 = store.flat_get(index);
        let mut probe = store.clone();
        probe.flat_set(index, v0 + h);
        let lp = replay_loss(&probe, kern, pair, steps, cfg)?;
        probe.flat_set(index, v0 - h);
        let lm = replay_loss(&probe, kern, pair, steps, cfg)?;
        if crate::verify::crosses_kink(lm, l0, lp, h) {
            continue;
        }
        checked += 1;
        let numeric = (lp - lm) / (2.0 * h);
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        out.push(GradientProbe {
            epoch,
            index,
            analytic,
            numeric,
            passed: err < 1e-3,
        });
    }
    Ok(())
}

pub fn write_kernel_log(path: &Path, log: &KernelTrainLog) -> Result<()> {
    let mut body = String::from("epoch,step,t,L_o,L_z,L_t,elbo\n");
    for r in &log.rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.t, r.l_o, r.l_z, r.l_t, r.elbo
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// How completions are turned into point clouds for the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudSource {
    /// Centres of the occupied cells.
    Cells,
    /// Decoded field nodes within `tau` of the surface at upsampling `u`.
    Surface { upsample: u32, tau: f64 },
}

/// Where the codes of s^0 come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartCodes {
    Encoded,
    Random { sigma_init: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub completions: usize,
    pub chain: ChainSettings,
    pub seed: u64,
    pub cloud: CloudSource,
    pub start: StartCodes,
}

/// Trained models plus the grid they operate on.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub ae: &'a Autoencoder,
    pub ae_params: &'a ParamStore,
    pub kernel: &'a TransitionKernel,
    pub kernel_params: &'a ParamStore,
    pub resolution: u32,
    pub voxel_size: f64,
}

impl Pipeline<'_> {
    pub fn initial_state(&self, partial: &[Point], start: StartCodes, seed: u64, chain_base: u64) -> Result<SparseState> {
        let mut init_rng = rng::stream(seed, chain_base, "init");
        let mode = match start {
            StartCodes::Encoded => InitMode::Encoded {
                autoencoder: self.ae,
                params: self.ae_params,
            },
            StartCodes::Random { sigma_init } => InitMode::Random { sigma_init },
        };
        kernel::initial_state(
            partial,
            self.resolution,
            self.voxel_size,
            self.ae.latent_dim(),
            mode,
            &mut init_rng,
        )
    }

    /// `n` completions of `partial`, chain `i` seeded by
    /// `(seed, chain_base + i)`. A chain that dies yields s^0 unchanged.
    pub fn complete(
        &self,
        partial: &[Point],
        chain: &ChainSettings,
        start: StartCodes,
        seed: u64,
        chain_base: u64,
        n: usize,
    ) -> Result<Vec<SparseState>> {
        let s0 = self.initial_state(partial, start, seed, chain_base)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut crng = ChainRng::new(seed, chain_base + i as u64);
            match kernel::generate(self.kernel_params, self.kernel, &s0, chain, &mut crng, false) {
                Ok(g) => out.push(g.state),
                Err(Error::ChainDied { .. }) => out.push(s0.clone()),
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn cloud(&self, state: &SparseState, source: CloudSource) -> Result<Vec<Point>> {
        let centres = || state.coords().iter().map(|c| state.cell_center(*c)).collect();
        match source {
            CloudSource::Cells => Ok(centres()),
            CloudSource::Surface { upsample, tau } => {
                let field = surface::dense_query(self.ae, self.ae_params, state, upsample)?;
                let pts = surface::extract_points(&field, tau);
                // Nothing decoded near the surface: fall back to cell centres.
                Ok(if pts.is_empty() { centres() } else { pts })
            }
        }
    }
}

/// Completion metrics on the given shapes, one report row per shape.
pub fn evaluate_checkpoint(pipe: &Pipeline, records: &[&ShapeRecord], cfg: &EvalConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(records.len());
    for (n, r) in records.iter().enumerate() {
        let states = pipe.complete(&r.partial, &cfg.chain, cfg.start, cfg.seed, (n as u64) << 16, cfg.completions)?;
        let clouds: Vec<Vec<Point>> = states
            .iter()
            .map(|s| pipe.cloud(s, cfg.cloud))
            .collect::<Result<_>>()?;
        rows.push(metrics::report_row(&r.name, &r.partial, &clouds, &r.surface)?);
    }
    Ok(rows)
}
