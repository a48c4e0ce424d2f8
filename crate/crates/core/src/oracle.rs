//! Brute-force ground truth on enumerable sequence spaces.
//!
//! Everything here is exact up to floating point: distributions are listed
//! outcome by outcome, expectations are finite sums. Monte Carlo only enters
//! where the quantity under test is itself a sampling statement (gradient
//! statistics, expected descent).

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{Generator, TokenId, TrainingExample};
use crate::precond::ENUMERATION_BUDGET;

/// A finite distribution, optionally over explicit token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedDistribution {
    pub outcomes: Vec<Vec<TokenId>>,
    pub probs: Vec<f64>,
}

impl EnumeratedDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Oracle("negative probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Oracle(format!("probabilities sum to {s}")));
        }
        Ok(Self {
            outcomes: Vec::new(),
            probs,
        })
    }

    /// `p(y | context)` for every `y ∈ V^len`, in lexicographic order of
    /// the little-endian code (first token varies fastest).
    pub fn from_model(model: &Generator, context: &[TokenId], len: usize) -> Result<Self> {
        let outcomes = enumerate_sequences(model.vocab().len(), len)?;
        let probs = outcomes
            .iter()
            .map(|y| Ok(model.sequence_log_prob(context, y)?.exp()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self { outcomes, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Every sequence of length `len` over `vocab` symbols.
pub fn enumerate_sequences(vocab: usize, len: usize) -> Result<Vec<Vec<TokenId>>> {
    let space = (0..len)
        .try_fold(1usize, |acc, _| acc.checked_mul(vocab))
        .filter(|s| *s <= ENUMERATION_BUDGET)
        .ok_or_else(|| Error::Oracle(format!("{vocab}^{len} sequences exceed the budget")))?;
    Ok((0..space)
        .map(|code| {
            let mut c = code;
            (0..len)
                .map(|_| {
                    let t = c % vocab;
                    c /= vocab;
                    t
                })
                .collect()
        })
        .collect())
}

/// `KL(q ‖ p)`; `+∞` when `q` puts mass where `p` has none.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| {
            if qi == 0.0 {
                0.0
            } else if pi == 0.0 {
                f64::INFINITY
            } else {
                qi * (qi / pi).ln()
            }
        })
        .sum()
}

/// `q(y) ∝ p₀(y) · exp(−β b(y))`, normalised in log space.
pub fn tilt(p0: &[f64], bias: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::Oracle(format!("tilt requires β ≥ 0, got {beta}")));
    }
    if p0.len() != bias.len() {
        return Err(Error::Oracle("distribution and bias differ in length".into()));
    }
    if beta == 0.0 || bias.iter().all(|&b| b == bias[0]) {
        return Ok(p0.to_vec());
    }
    let logw: Vec<f64> = p0
        .iter()
        .zip(bias)
        .map(|(&p, &b)| if p > 0.0 { p.ln() - beta * b } else { f64::NEG_INFINITY })
        .collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Oracle("distribution has no mass".into()));
    }
    let z: f64 = logw.iter().map(|l| (l - m).exp()).sum();
    Ok(logw.iter().map(|l| (l - m).exp() / z).collect())
}

pub const BETA_TOLERANCE: f64 = 1e-9;

/// Smallest `β ≥ 0` with `E_{q_β}[b] ≤ τ`, found by bisection on the
/// non-increasing map `β ↦ E_{q_β}[b]`. Returns 0 when the constraint is slack.
pub fn solve_beta(p0: &[f64], bias: &[f64], tau: f64) -> Result<f64> {
    let mean0: f64 = p0.iter().zip(bias).map(|(p, b)| p * b).sum();
    if tau >= mean0 {
        return Ok(0.0);
    }
    let min_b = p0
        .iter()
        .zip(bias)
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, b)| *b)
        .fold(f64::INFINITY, f64::min);
    if tau < min_b {
        return Err(Error::Oracle(format!(
            "τ = {tau} below the smallest attainable bias {min_b}: Q_τ is empty"
        )));
    }
    let mean_at = |beta: f64| -> Result<f64> {
        let q = tilt(p0, bias, beta)?;
        Ok(q.iter().zip(bias).map(|(q, b)| q * b).sum())
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while mean_at(hi)? > tau {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Oracle(format!(
                "τ = {tau} is only reached in the β → ∞ limit"
            )));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let m = mean_at(mid)?;
        if (m - tau).abs() <= 1e-13 {
            return Ok(mid);
        }
        if m > tau {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCertificate {
    pub beta: f64,
    pub projected: Vec<f64>,
    pub projected_mean_bias: f64,
    pub projected_kl: f64,
    pub accepted: usize,
    pub attempts: usize,
    /// `min_q KL(q‖p₀) − KL(q*‖p₀)` over the accepted feasible `q`.
    pub min_margin: f64,
}

/// Compares the tilted projection against `trials` feasible distributions
/// drawn uniformly from the simplex and kept when `E_q[b] ≤ τ`.
pub fn kl_projection_certificate<R: Rng + ?Sized>(
    p0: &[f64],
    bias: &[f64],
    tau: f64,
    trials: usize,
    rng: &mut R,
) -> Result<ProjectionCertificate> {
    let beta = solve_beta(p0, bias, tau)?;
    let projected = tilt(p0, bias, beta)?;
    let projected_kl = kl_divergence(&projected, p0);
    let projected_mean_bias = projected.iter().zip(bias).map(|(q, b)| q * b).sum();
    let mut accepted = 0;
    let mut attempts = 0;
    let mut min_margin = f64::INFINITY;
    let max_attempts = trials.saturating_mul(10_000).max(10_000);
    while accepted < trials && attempts < max_attempts {
        attempts += 1;
        let mut q: Vec<f64> = (0..p0.len()).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= s);
        let mean: f64 = q.iter().zip(bias).map(|(q, b)| q * b).sum();
        if mean > tau {
            continue;
        }
        accepted += 1;
        min_margin = min_margin.min(kl_divergence(&q, p0) - projected_kl);
    }
    Ok(ProjectionCertificate {
        beta,
        projected,
        projected_mean_bias,
        projected_kl,
        accepted,
        attempts,
        min_margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRow {
    pub scale: f64,
    pub kl: f64,
    pub quadratic: f64,
    /// `kl / quadratic`; `NaN` when both vanish.
    pub ratio: f64,
}

/// Exact `KL(p_{φ+cδ} ‖ p_φ)` against `½ (cδ)ᵀ I(φ) (cδ)` for each scale `c`,
/// with the full Fisher evaluated as `E_y[(∇ ln p_φ(y) · cδ)²]`.
pub fn kl_vs_fisher_quadratic(
    model: &Generator,
    context: &[TokenId],
    len: usize,
    direction: &[f64],
    scales: &[f64],
) -> Result<Vec<QuadraticRow>> {
    if direction.len() != model.param_count() {
        return Err(Error::Oracle("direction length differs from adapter size".into()));
    }
    let outcomes = enumerate_sequences(model.vocab().len(), len)?;
    let mut base_lp = Vec::with_capacity(outcomes.len());
    let mut proj = Vec::with_capacity(outcomes.len());
    for y in &outcomes {
        let (lp, g) = model.log_prob_gradient(&TrainingExample::new(context.to_vec(), y.clone()))?;
        base_lp.push(lp);
        proj.push(g.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>());
    }
    let phi = model.adapter().flatten();
    scales
        .iter()
        .map(|&c| {
            let mut moved = model.clone();
            let shifted: Vec<f64> = phi.iter().zip(direction).map(|(p, d)| p + c * d).collect();
            moved.adapter_mut().set_flat(&shifted)?;
            let mut kl = 0.0;
            let mut quad = 0.0;
            for (k, y) in outcomes.iter().enumerate() {
                let lq = moved.sequence_log_prob(context, y)?;
                kl += lq.exp() * (lq - base_lp[k]);
                quad += base_lp[k].exp() * (c * proj[k]).powi(2);
            }
            quad *= 0.5;
            Ok(QuadraticRow {
                scale: c,
                kl,
                quadratic: quad,
                ratio: kl / quad,
            })
        })
        .collect()
}

/// Per-example gradients `−∇ ln p(s | x)` over a uniform safe support.
#[derive(Clone, Debug)]
pub struct SafeSupport {
    pub examples: Vec<TrainingExample>,
    pub gradients: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

impl SafeSupport {
    pub fn new(model: &Generator, examples: Vec<TrainingExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Oracle("empty safe support".into()));
        }
        let mut gradients = Vec::with_capacity(examples.len());
        let mut losses = Vec::with_capacity(examples.len());
        for ex in &examples {
            let (lp, g) = model.log_prob_gradient(ex)?;
            gradients.push(g.into_iter().map(|x| -x).collect());
            losses.push(-lp);
        }
        Ok(Self {
            examples,
            gradients,
            losses,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.gradients[0].len()
    }

    /// `J(φ)`: mean negative log-likelihood over the support.
    pub fn loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.len() as f64
    }

    /// Exact `g = ∇J(φ)`.
    pub fn mean_gradient(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for gi in &self.gradients {
            for (a, b) in g.iter_mut().zip(gi) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        g
    }

    /// Per-coordinate variance of a single-draw gradient.
    pub fn gradient_variance(&self) -> Vec<f64> {
        let g = self.mean_gradient();
        let n = self.len() as f64;
        (0..self.dim())
            .map(|i| self.gradients.iter().map(|v| (v[i] - g[i]).powi(2)).sum::<f64>() / n)
            .collect()
    }

    /// `ĝ` from `m` i.i.d. draws.
    pub fn sample_gradient<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for _ in 0..m {
            let v = &self.gradients[rng.random_range(0..self.len())];
            for (a, b) in g.iter_mut().zip(v) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|x| *x /= m as f64);
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeStats {
    pub m: usize,
    /// `max_i |mean(ĝ_i) − g_i| / SE_i`.
    pub max_bias_z: f64,
    pub trace_cov: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradStatsReport {
    pub per_m: Vec<BatchSizeStats>,
    /// Least-squares slope of `ln tr Cov(ĝ)` against `ln m`.
    pub slope: f64,
}

/// Monte Carlo bias and covariance scaling of the few-sample gradient.
pub fn empirical_grad_stats<R: Rng + ?Sized>(
    support: &SafeSupport,
    batch_sizes: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<GradStatsReport> {
    if trials < 2 || batch_sizes.is_empty() {
        return Err(Error::Oracle("need at least two trials and one batch size".into()));
    }
    let g = support.mean_gradient();
    let n = g.len();
    let mut per_m = Vec::with_capacity(batch_sizes.len());
    for &m in batch_sizes {
        let mut sum = vec![0.0; n];
        let mut sumsq = vec![0.0; n];
        for _ in 0..trials {
            let gh = support.sample_gradient(m, rng);
            for i in 0..n {
                let d = gh[i] - g[i];
                sum[i] += d;
                sumsq[i] += d * d;
            }
        }
        let t = trials as f64;
        let mut max_z = 0.0f64;
        let mut trace = 0.0;
        for i in 0..n {
            let mean_dev = sum[i] / t;
            let var = ((sumsq[i] - t * mean_dev * mean_dev) / (t - 1.0)).max(0.0);
            trace += var;
            let se = (var / t).sqrt();
            let z = if se > 0.0 {
                mean_dev.abs() / se
            } else if mean_dev.abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
        per_m.push(BatchSizeStats {
            m,
            max_bias_z: max_z,
            trace_cov: trace,
        });
    }
    let pts: Vec<(f64, f64)> = per_m
        .iter()
        .filter(|s| s.trace_cov > 0.0)
        .map(|s| ((s.m as f64).ln(), s.trace_cov.ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    Ok(GradStatsReport { per_m, slope })
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub loss: f64,
    pub smoothness: f64,
    /// Right-hand side of the expected one-step bound.
    pub bound: f64,
    pub mean_next_loss: f64,
    pub next_loss_standard_error: f64,
    /// Trials where `J(φ+δ) ≤ J + gᵀδ + (L/2)‖δ‖²`.
    pub per_trial_holding: usize,
    pub trials: usize,
    pub first_order_term: f64,
    pub variance_term: f64,
}

impl DescentReport {
    pub fn per_trial_fraction(&self) -> f64 {
        self.per_trial_holding as f64 / self.trials as f64
    }

    /// Expected-loss bound within three standard errors.
    pub fn expectation_holds(&self) -> bool {
        self.mean_next_loss <= self.bound + 3.0 * self.next_loss_standard_error
    }
}

fn loss_and_grad_at(model: &Generator, support: &SafeSupport, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut m = model.clone();
    m.adapter_mut().set_flat(phi)?;
    m.loss_and_gradient(&support.examples)
}

/// Largest Hessian eigenvalue magnitude of `J` at `phi`, by power iteration
/// on central-difference Hessian-vector products.
pub fn hessian_top_eigenvalue<R: Rng + ?Sized>(
    model: &Generator,
    support: &SafeSupport,
    phi: &[f64],
    iterations: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = phi.len();
    let h = 1e-5;
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let nv = crate::optim::norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let plus: Vec<f64> = phi.iter().zip(&v).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = phi.iter().zip(&v).map(|(p, d)| p - h * d).collect();
        let (_, gp) = loss_and_grad_at(model, support, &plus)?;
        let (_, gm) = loss_and_grad_at(model, support, &minus)?;
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let norm_hv = crate::optim::norm(&hv);
        if norm_hv == 0.0 {
            return Ok(0.0);
        }
        lambda = norm_hv;
        v = hv.into_iter().map(|x| x / norm_hv).collect();
    }
    Ok(lambda)
}

/// Checks the expected one-step bound for `δ = −α P ĝ` with batch size `m`.
///
/// The smoothness constant `L` is the largest Hessian eigenvalue magnitude
/// over `φ` and `probe_points` sampled trial endpoints, each found by
/// [`hessian_top_eigenvalue`]. The variance term uses the exact single-draw
/// gradient variance of the support.
#[allow(clippy::too_many_arguments)]
pub fn descent_bound_check<R: Rng + ?Sized>(
    model: &Generator,
    support: &SafeSupport,
    precond: &[f64],
    alpha: f64,
    m: usize,
    trials: usize,
    probe_points: usize,
    rng: &mut R,
) -> Result<DescentReport> {
    if precond.len() != support.dim() {
        return Err(Error::Oracle("preconditioner length differs from adapter".into()));
    }
    let phi = model.adapter().flatten();
    let j0 = support.loss();
    let g = support.mean_gradient();
    let var = support.gradient_variance();

    let steps: Vec<Vec<f64>> = (0..trials)
        .map(|_| {
            support
                .sample_gradient(m, rng)
                .iter()
                .zip(precond)
                .map(|(gi, pi)| -alpha * pi * gi)
                .collect()
        })
        .collect();

    let mut smoothness = hessian_top_eigenvalue(model, support, &phi, 30, rng)?;
    for k in 0..probe_points.min(trials) {
        let idx = k * trials / probe_points.max(1);
        let point: Vec<f64> = phi.iter().zip(&steps[idx]).map(|(p, d)| p + d).collect();
        smoothness = smoothness.max(hessian_top_eigenvalue(model, support, &point, 30, rng)?);
    }

    let first_order: f64 = g.iter().zip(precond).map(|(gi, pi)| gi * gi * pi).sum();
    let pg_sq: f64 = g.iter().zip(precond).map(|(gi, pi)| (gi * pi).powi(2)).sum();
    let trace_term: f64 = var.iter().zip(precond).map(|(v, pi)| v * pi * pi).sum();
    let variance_term = smoothness * alpha * alpha / 2.0 * trace_term / m as f64;
    let bound = j0 - alpha * first_order + smoothness * alpha * alpha / 2.0 * pg_sq + variance_term;

    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut holding = 0;
    let mut scratch = model.clone();
    for delta in &steps {
        let next: Vec<f64> = phi.iter().zip(delta).map(|(p, d)| p + d).collect();
        scratch.adapter_mut().set_flat(&next)?;
        let j = scratch.batch_loss(&support.examples)?;
        sum += j;
        sumsq += j * j;
        let lin: f64 = g.iter().zip(delta).map(|(a, b)| a * b).sum();
        let dn: f64 = delta.iter().map(|x| x * x).sum();
        if j <= j0 + lin + smoothness / 2.0 * dn + 1e-12 {
            holding += 1;
        }
    }
    let t = trials as f64;
    let mean = sum / t;
    let var_j = ((sumsq - t * mean * mean) / (t - 1.0).max(1.0)).max(0.0);
    Ok(DescentReport {
        loss: j0,
        smoothness,
        bound,
        mean_next_loss: mean,
        next_loss_standard_error: (var_j / t).sqrt(),
        per_trial_holding: holding,
        trials,
        first_order_term: alpha * first_order,
        variance_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_beta_and_constant_bias_leave_distribution() {
        let p0 = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(tilt(&p0, &[0.3, 0.1, 0.9, 0.0], 0.0).unwrap(), p0);
        assert_eq!(tilt(&p0, &[0.7; 4], 5.0).unwrap(), p0);
    }

    #[test]
    fn two_outcome_tilt_and_inverse() {
        let q = tilt(&[0.5, 0.5], &[0.0, 1.0], 3f64.ln()).unwrap();
        assert!((q[0] - 0.75).abs() < 1e-15);
        assert!((q[1] - 0.25).abs() < 1e-15);
        let beta = solve_beta(&[0.5, 0.5], &[0.0, 1.0], 0.25).unwrap();
        assert!((beta - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn slack_and_infeasible_constraints() {
        let p0 = [0.25, 0.75];
        let b = [0.2, 0.6];
        let mean = 0.25 * 0.2 + 0.75 * 0.6;
        assert_eq!(solve_beta(&p0, &b, mean).unwrap(), 0.0);
        assert!(matches!(solve_beta(&p0, &b, 0.1), Err(Error::Oracle(_))));
    }

    #[test]
    fn tilt_preserves_support() {
        let q = tilt(&[0.0, 0.5, 0.5], &[0.0, 0.3, 1.0], 2.0).unwrap();
        assert_eq!(q[0], 0.0);
        assert!(q[1] > 0.0 && q[2] > 0.0);
    }

    #[test]
    fn projection_of_feasible_point_is_itself() {
        let p0 = vec![0.6, 0.3, 0.1];
        let b = vec![0.0, 0.5, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cert = kl_projection_certificate(&p0, &b, 0.9, 10, &mut rng).unwrap();
        assert_eq!(cert.beta, 0.0);
        assert_eq!(cert.projected_kl, 0.0);
        assert_eq!(cert.projected, p0);
        assert!(cert.min_margin >= 0.0);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0, 8.0]
            .iter()
            .map(|m| (m.ln(), (3.0 / m).ln()))
            .collect();
        assert!((least_squares_slope(&pts) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_order_and_budget() {
        let s = enumerate_sequences(3, 2).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[1], vec![1, 0]);
        assert!(enumerate_sequences(10, 7).is_err());
    }
}
