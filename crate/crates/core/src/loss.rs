//! Closed-form training losses.
//!
//! Sign convention: everything here is a quantity to *minimize*. The per-step
//! loss `L_t` is the KL divergence between the infusion kernel and the
//! transition kernel, i.e. the negated step term of the variational lower
//! bound. The infusion side is a fixed target: gradients flow only into the
//! transition kernel's (λ_θ, μ_θ).

use crate::autoencoder::FieldMode;
use crate::error::{Error, Result};
use crate::grid::SparseState;
use crate::infusion::{InfusionOutput, Sequence};
use crate::kernel::{TransitionOutput, LAMBDA_MIN};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Σ_c KL(Ber(λ_q) || Ber(λ_θ)).
    pub occupancy: f64,
    /// Σ_c λ_q ||μ_q - μ_θ||² / (2σ²), before γ weighting.
    pub latent: f64,
    /// `occupancy + γ * latent`.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_lambda: Vec<f64>,
    pub d_mu: Vec<f64>,
}

fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / b).ln()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(LAMBDA_MIN..=1.0 - LAMBDA_MIN).contains(&p) {
        return Err(Error::DomainError(format!(
            "occupancy probability {p} outside [{LAMBDA_MIN}, 1 - {LAMBDA_MIN}]"
        )));
    }
    Ok(())
}

/// KL(Ber(q) || Ber(p)) with 0 log 0 = 0.
pub fn bernoulli_kl(q: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::DomainError(format!("q = {q} outside [0, 1]")));
    }
    check_p(p)?;
    Ok(xlogy_ratio(q, p) + xlogy_ratio(1.0 - q, 1.0 - p))
}

/// d KL(Ber(q) || Ber(p)) / dp.
pub fn bernoulli_kl_dp(q: f64, p: f64) -> f64 {
    -q / p + (1.0 - q) / (1.0 - p)
}

/// KL(N(μq, σ²I) || N(μp, σ²I)) = ||μq - μp||² / (2σ²).
pub fn gaussian_kl_same_var(mu_q: &[f64], mu_p: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma} must be positive")));
    }
    if mu_q.len() != mu_p.len() {
        return Err(Error::DomainMismatch("mean vectors differ in length".into()));
    }
    let sq: f64 = mu_q.iter().zip(mu_p).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma * sigma))
}

/// `K/2 · log(2πσ)`: the constant separating the final-step KL loss from the
/// reweighted final negative log-likelihood on an occupied target cell.
pub fn gaussian_log_normalizer(latent_dim: usize, sigma: f64) -> f64 {
    0.5 * latent_dim as f64 * (2.0 * std::f64::consts::PI * sigma).ln()
}

fn check_domains(out: &TransitionOutput, inf: &InfusionOutput) -> Result<()> {
    if out.coords != inf.coords || out.latent_dim != inf.latent_dim {
        return Err(Error::DomainMismatch(
            "transition and infusion outputs cover different cells".into(),
        ));
    }
    Ok(())
}

/// Per-cell targets (λ_q, μ_q) against the kernel output, summed.
fn kl_against_targets(
    out: &TransitionOutput,
    lambda_q: &[f64],
    mu_q: &[f64],
    gamma: f64,
    sigma: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma} must be positive")));
    }
    let k = out.latent_dim;
    let n = out.coords.len();
    let inv_var = 1.0 / (sigma * sigma);
    let mut occ = 0.0;
    let mut lat = 0.0;
    let mut d_lambda = Vec::with_capacity(n);
    let mut d_mu = Vec::with_capacity(n * k);
    for c in 0..n {
        let p = out.lambda[c];
        let q = lambda_q[c];
        occ += bernoulli_kl(q, p)?;
        d_lambda.push(bernoulli_kl_dp(q, p));
        let mp = out.mu_at(c);
        let mq = &mu_q[c * k..(c + 1) * k];
        let mut sq = 0.0;
        for j in 0..k {
            let diff = mp[j] - mq[j];
            sq += diff * diff;
            d_mu.push(gamma * q * diff * inv_var);
        }
        lat += q * sq * 0.5 * inv_var;
    }
    Ok((
        LossBreakdown {
            occupancy: occ,
            latent: lat,
            total: occ + gamma * lat,
        },
        LossGrads { d_lambda, d_mu },
    ))
}

/// L_t = Σ_c [ KL(Ber(λ_q)||Ber(λ_θ)) + γ λ_q ||μ_q − μ_θ||²/(2σ²) ] and its
/// partial derivatives with respect to λ_θ and μ_θ.
pub fn transition_loss(
    out: &TransitionOutput,
    inf: &InfusionOutput,
    gamma: f64,
    sigma: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    check_domains(out, inf)?;
    kl_against_targets(out, &inf.lambda_q, &inf.mu_q, gamma, sigma)
}

/// The last step's loss with targets (o^x_c, z^x_c) in place of the infusion
/// mixture. Only valid once the infusion rate has saturated.
pub fn final_step_loss(
    out: &TransitionOutput,
    x: &SparseState,
    alpha: f64,
    sigma: f64,
    gamma: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    if alpha < 1.0 {
        return Err(Error::NotSaturated(alpha));
    }
    if x.latent_dim() != out.latent_dim {
        return Err(Error::LatentDim {
            expected: out.latent_dim,
            got: x.latent_dim(),
        });
    }
    let k = out.latent_dim;
    let mut lambda_q = Vec::with_capacity(out.coords.len());
    let mut mu_q = Vec::with_capacity(out.coords.len() * k);
    for &c in &out.coords {
        match x.get(c) {
            Some(z) => {
                lambda_q.push(1.0);
                mu_q.extend_from_slice(z);
            }
            None => {
                lambda_q.push(0.0);
                mu_q.extend(std::iter::repeat_n(0.0, k));
            }
        }
    }
    kl_against_targets(out, &lambda_q, &mu_q, gamma, sigma)
}

/// Negative log-likelihood of x under the last transition, with the Dirac
/// mass at zero replaced by the indicator 1[z = 0]:
///
/// `-Σ_c log{ (1-λ) 1[o=0] 1[z=0] + λ 1[o=1] (2πσ)^{-K/2} exp(-||z-μ||²/(2σ²)) }`
///
/// Gradients are taken from the likelihood expression by the quotient rule.
pub fn reweighted_final_nll(
    out: &TransitionOutput,
    x: &SparseState,
    sigma: f64,
) -> Result<(f64, LossGrads)> {
    if !(sigma > 0.0) {
        return Err(Error::DomainError(format!("sigma = {sigma} must be positive")));
    }
    let k = out.latent_dim;
    let norm = (2.0 * std::f64::consts::PI * sigma).powf(-0.5 * k as f64);
    let zero = vec![0.0; k];
    let mut nll = 0.0;
    let mut d_lambda = Vec::with_capacity(out.coords.len());
    let mut d_mu = Vec::with_capacity(out.coords.len() * k);
    for (n, &c) in out.coords.iter().enumerate() {
        let lam = out.lambda[n];
        let mu = out.mu_at(n);
        let (occupied, z) = match x.get(c) {
            Some(z) => (1.0, z),
            None => (0.0, &zero[..]),
        };
        let z_is_zero = if z.iter().all(|v| *v == 0.0) { 1.0 } else { 0.0 };
        let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
        let dens = norm * (-sq / (2.0 * sigma * sigma)).exp();
        let a = (1.0 - occupied) * z_is_zero;
        let b = occupied * dens;
        let like = (1.0 - lam) * a + lam * b;
        nll -= like.ln();
        d_lambda.push(-(b - a) / like);
        for j in 0..k {
            // d dens / d mu_j = dens * (z_j - mu_j) / σ²
            let dl = lam * occupied * dens * (z[j] - mu[j]) / (sigma * sigma);
            d_mu.push(-dl / like);
        }
    }
    Ok((nll, LossGrads { d_lambda, d_mu }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderLoss {
    pub value: f64,
    pub reconstruction: f64,
    pub regularization: f64,
    pub d_decoded: Vec<f64>,
    /// Row-major `|s| x K`, matching `state.latents()`.
    pub d_latents: Vec<f64>,
}

/// The truncated target `clamp(d / ε)` in the decoder's codomain.
pub fn clamp_target(d: f64, voxel_size: f64, mode: FieldMode) -> f64 {
    let t = d / voxel_size;
    match mode {
        FieldMode::Sdf => t.clamp(-1.0, 1.0),
        FieldMode::Udf => t.clamp(0.0, 1.0),
    }
}

/// mean |d̂_q − clamp(d_q/ε)| + β mean_c ||z_c||.
pub fn autoencoder_loss(
    decoded: &[f64],
    targets: &[f64],
    state: &SparseState,
    beta: f64,
    voxel_size: f64,
    mode: FieldMode,
) -> Result<AutoencoderLoss> {
    if decoded.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if decoded.len() != targets.len() {
        return Err(Error::DomainMismatch(format!(
            "{} decoded values for {} targets",
            decoded.len(),
            targets.len()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::DomainError(format!("beta = {beta} must be non-negative")));
    }
    let nq = decoded.len() as f64;
    let mut recon = 0.0;
    let mut d_decoded = Vec::with_capacity(decoded.len());
    for (dh, d) in decoded.iter().zip(targets) {
        let r = dh - clamp_target(*d, voxel_size, mode);
        recon += r.abs();
        d_decoded.push(if r > 0.0 {
            1.0 / nq
        } else if r < 0.0 {
            -1.0 / nq
        } else {
            0.0
        });
    }
    recon /= nq;
    let k = state.latent_dim();
    let mut reg = 0.0;
    let mut d_latents = vec![0.0; state.latents().len()];
    if !state.is_empty() {
        let ns = state.len() as f64;
        for n in 0..state.len() {
            let z = state.latent_at(n);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            reg += norm;
            if norm > 0.0 {
                for j in 0..k {
                    d_latents[n * k + j] = beta * z[j] / (norm * ns);
                }
            }
        }
        reg /= ns;
    }
    Ok(AutoencoderLoss {
        value: recon + beta * reg,
        reconstruction: recon,
        regularization: reg,
        d_decoded,
        d_latents,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    /// −Σ_{t<T−1} L_t − L_{T−1}, with γ = 1 and the initial-state term
    /// excluded.
    pub bound: f64,
    /// Σ_{t<T−1} L_t (non-negative).
    pub kl_sum: f64,
    /// The final-step loss L_{T−1}.
    pub final_term: f64,
    /// Σ over occupied target cells of K/2 log(2πσ^{T−1}); the reweighted
    /// log-likelihood equals `-(final_term + normalizer)`.
    pub normalizer: f64,
}

pub fn elbo_lower_bound(seq: &Sequence) -> Result<ElboReport> {
    if !seq.final_state.same_occupancy(&seq.target) {
        return Err(Error::SequenceNotConverged);
    }
    let last = seq.steps.len().checked_sub(1).ok_or(Error::SequenceNotConverged)?;
    let mut kl_sum = 0.0;
    for step in &seq.steps[..last] {
        let (b, _) = transition_loss(&step.transition, &step.infusion, 1.0, step.sigma)?;
        kl_sum += b.total;
    }
    let fin = &seq.steps[last];
    let (b, _) = final_step_loss(&fin.transition, &seq.target, fin.alpha, fin.sigma, 1.0)?;
    let occupied = fin
        .transition
        .coords
        .iter()
        .filter(|c| seq.target.contains(**c))
        .count();
    Ok(ElboReport {
        bound: -kl_sum - b.total,
        kl_sum,
        final_term: b.total,
        normalizer: occupied as f64 * gaussian_log_normalizer(seq.target.latent_dim(), fin.sigma),
    })
}
