//! Privacy accounting.
//!
//! * Rényi DP of the Poisson-subsampled Gaussian mechanism, composed over
//!   rounds and converted to `(epsilon, delta)` with
//!   `epsilon = min_a [rdp(a) + ln(1/delta) / (a - 1)]`.
//! * zCDP of binary-tree aggregation with a single participation per user.
//! * The extrapolation sweep that scales users per round and noise together.
//!
//! `+inf` is used throughout as the "no privacy" sentinel (`sigma = 0`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::Mechanism;

/// Neighboring relation used for the subsampled-Gaussian bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighboring {
    /// Add or remove one user, Poisson sampling.
    AddRemovePoisson,
    /// Replace one user. Bounded conservatively by doubling the
    /// sensitivity, i.e. accounting with `sigma / 2`.
    SubstituteConservative,
}

impl Neighboring {
    fn effective_sigma(self, sigma: f64) -> f64 {
        match self {
            Neighboring::AddRemovePoisson => sigma,
            Neighboring::SubstituteConservative => sigma / 2.0,
        }
    }
}

/// Integer orders 2..=256 plus 1.25 and 1.5.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5];
    orders.extend((2..=256).map(f64::from));
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// RDP at integer order `alpha` via the binomial expansion
/// `sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 sigma^2))`, in log space.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1q = (-q).ln_1p();
    let two_s2 = 2.0 * sigma * sigma;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * log_q + (alpha - k) as f64 * log_1q + kf * (kf - 1.0) / two_s2;
        acc = log_add(acc, term);
    }
    acc
}

/// `ln E_{z ~ N(0, sigma^2)} [((1-q) + q exp((2z - 1) / (2 sigma^2)))^alpha]`
/// by composite Simpson quadrature. Valid for any real `alpha > 1`.
pub fn log_a_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_1q = (-q).ln_1p();
    let log_q = q.ln();
    let log_f = |z: f64| {
        let inner = log_add(log_1q, log_q + (2.0 * z - 1.0) / (2.0 * s2));
        log_norm - z * z / (2.0 * s2) + alpha * inner
    };
    // The integrand's mass sits between the base Gaussian (centered at 0)
    // and the tilted one (centered near alpha).
    let lo = -14.0 * sigma - 1.0;
    let hi = alpha + 14.0 * sigma + 1.0;
    let n = 40_000usize;
    let h = (hi - lo) / n as f64;
    let logs: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * (l - max).exp()
        })
        .sum();
    max + (sum * h / 3.0).ln()
}

/// Per-order RDP of one round of the subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `sigma`.
pub fn rdp_subsampled_gaussian_step(q: f64, sigma: f64, orders: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("sampling rate must be in [0, 1], got {q}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if let Some(a) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(Error::invalid(format!("RDP orders must be finite and > 1, got {a}")));
    }
    Ok(orders
        .iter()
        .map(|&alpha| {
            if q == 0.0 {
                0.0
            } else if sigma == 0.0 {
                f64::INFINITY
            } else if q == 1.0 {
                alpha / (2.0 * sigma * sigma)
            } else if alpha.fract() == 0.0 {
                log_a_int(q, sigma, alpha as u64) / (alpha - 1.0)
            } else {
                log_a_quadrature(q, sigma, alpha) / (alpha - 1.0)
            }
        })
        .map(|v| v.max(0.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    /// Order attaining the minimum, when one was used.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    eps_rdp: Vec<f64>,
    neighboring: Neighboring,
    steps: u64,
}

impl RdpAccountant {
    pub fn new(orders: Vec<f64>, neighboring: Neighboring) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::invalid("accountant needs at least one order"));
        }
        if let Some(a) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::invalid(format!("RDP orders must be finite and > 1, got {a}")));
        }
        let n = orders.len();
        Ok(Self {
            orders,
            eps_rdp: vec![0.0; n],
            neighboring,
            steps: 0,
        })
    }

    pub fn with_default_orders(neighboring: Neighboring) -> Self {
        Self::new(default_orders(), neighboring).expect("default orders are valid")
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn eps_rdp(&self) -> &[f64] {
        &self.eps_rdp
    }

    pub fn neighboring(&self) -> Neighboring {
        self.neighboring
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adds `num_steps` copies of a per-order RDP vector.
    pub fn compose(mut self, step_rdp: &[f64], num_steps: u64) -> Result<Self> {
        if step_rdp.len() != self.orders.len() {
            return Err(Error::invalid(format!(
                "step RDP has {} orders, accountant has {}",
                step_rdp.len(),
                self.orders.len()
            )));
        }
        if num_steps == 0 {
            return Ok(self);
        }
        for (acc, &r) in self.eps_rdp.iter_mut().zip(step_rdp) {
            if !(r >= 0.0) {
                return Err(Error::invalid(format!("negative or NaN RDP value {r}")));
            }
            *acc += num_steps as f64 * r;
        }
        self.steps += num_steps;
        Ok(self)
    }

    /// Composes `num_steps` subsampled-Gaussian rounds under this
    /// accountant's neighboring relation.
    pub fn compose_subsampled_gaussian(self, q: f64, sigma: f64, num_steps: u64) -> Result<Self> {
        let step = rdp_subsampled_gaussian_step(q, self.neighboring.effective_sigma(sigma), &self.orders)?;
        self.compose(&step, num_steps)
    }

    pub fn to_dp(&self, delta: f64) -> Result<DpGuarantee> {
        rdp_to_dp(&self.orders, &self.eps_rdp, self.steps, delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Classic RDP to `(epsilon, delta)` conversion. An accountant that has
/// composed nothing reports `epsilon = 0`.
pub fn rdp_to_dp(orders: &[f64], eps_rdp: &[f64], steps: u64, delta: f64) -> Result<DpGuarantee> {
    check_delta(delta)?;
    if steps == 0 || eps_rdp.iter().all(|&e| e == 0.0) {
        return Ok(DpGuarantee {
            epsilon: 0.0,
            delta,
            order: None,
        });
    }
    let log_inv_delta = -delta.ln();
    let (epsilon, order) = orders
        .iter()
        .zip(eps_rdp)
        .map(|(&a, &e)| (e + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, None), |best, (eps, a)| {
            if eps < best.0 {
                (eps, Some(a))
            } else {
                best
            }
        });
    Ok(DpGuarantee {
        epsilon: epsilon.max(0.0),
        delta,
        order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZcdpAccountant {
    pub rho: f64,
}

impl ZcdpAccountant {
    pub fn compose(self, other: ZcdpAccountant) -> Self {
        Self {
            rho: self.rho + other.rho,
        }
    }
}

/// Maximum number of tree nodes a single leaf contributes to:
/// `ceil(log2 T) + 1`.
pub fn tree_depth(total_steps: u64) -> u32 {
    if total_steps <= 1 {
        1
    } else {
        64 - (total_steps - 1).leading_zeros() + 1
    }
}

/// zCDP of tree aggregation when each user participates in at most one
/// step: `rho = depth / (2 sigma^2)`.
pub fn zcdp_tree_single_participation(total_steps: u64, sigma: f64) -> Result<ZcdpAccountant> {
    if total_steps == 0 {
        return Err(Error::invalid("tree needs at least one step"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    let rho = if sigma == 0.0 {
        f64::INFINITY
    } else {
        tree_depth(total_steps) as f64 / (2.0 * sigma * sigma)
    };
    Ok(ZcdpAccountant { rho })
}

/// `epsilon = rho + 2 sqrt(rho ln(1/delta))`.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> Result<DpGuarantee> {
    check_delta(delta)?;
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("rho must be >= 0, got {rho}")));
    }
    Ok(DpGuarantee {
        epsilon: rho + 2.0 * (rho * (-delta.ln())).sqrt(),
        delta,
        order: None,
    })
}

/// Privacy of a finished (or partial) run, under both neighboring relations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mechanism: Mechanism,
    pub rounds: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub epsilon_add_remove: f64,
    pub epsilon_substitute: f64,
    pub rho: Option<f64>,
    pub epsilon_zcdp: Option<f64>,
}

/// Reports the guarantee after `rounds` rounds. Gaussian noise uses the
/// subsampled RDP bound; tree noise uses the single-participation zCDP
/// bound (its RDP curve `alpha * rho` feeds the epsilon columns).
pub fn privacy_report(
    mechanism: Mechanism,
    sampling_rate: f64,
    noise_multiplier: f64,
    rounds: u64,
    total_rounds: u64,
    delta: f64,
) -> Result<PrivacyReport> {
    let (eps_ar, eps_sub, rho, eps_z) = match mechanism {
        Mechanism::Gaussian => {
            let ar = RdpAccountant::with_default_orders(Neighboring::AddRemovePoisson)
                .compose_subsampled_gaussian(sampling_rate, noise_multiplier, rounds)?
                .to_dp(delta)?;
            let sub = RdpAccountant::with_default_orders(Neighboring::SubstituteConservative)
                .compose_subsampled_gaussian(sampling_rate, noise_multiplier, rounds)?
                .to_dp(delta)?;
            (ar.epsilon, sub.epsilon, None, None)
        }
        Mechanism::Tree => {
            if rounds == 0 {
                (0.0, 0.0, Some(0.0), Some(0.0))
            } else {
                let rho = zcdp_tree_single_participation(total_rounds.max(rounds), noise_multiplier)?.rho;
                let eps = |rho: f64| -> Result<f64> {
                    let orders = default_orders();
                    let curve: Vec<f64> = orders.iter().map(|a| a * rho).collect();
                    Ok(rdp_to_dp(&orders, &curve, 1, delta)?.epsilon)
                };
                (eps(rho)?, eps(4.0 * rho)?, Some(rho), Some(zcdp_to_dp(rho, delta)?.epsilon))
            }
        }
    };
    Ok(PrivacyReport {
        mechanism,
        rounds,
        sampling_rate,
        noise_multiplier,
        delta,
        epsilon_add_remove: eps_ar,
        epsilon_substitute: eps_sub,
        rho,
        epsilon_zcdp: eps_z,
    })
}

/// Base run that the extrapolation sweep scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub noise_multiplier: f64,
    /// Users per round of the base run (virtual clients x users per client).
    pub users_per_round: u64,
    pub rounds: u64,
    pub total_users: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub users_per_round: u64,
    pub q: f64,
    pub sigma: f64,
    pub rounds: u64,
    pub delta: f64,
    pub epsilon_add_remove: f64,
    pub epsilon_substitute: f64,
    pub rho: f64,
    pub epsilon_zcdp: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "k,users_per_round,q,sigma,rounds,delta,epsilon_add_remove,epsilon_substitute,rho,epsilon_zcdp";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.users_per_round,
            self.q,
            self.sigma,
            self.rounds,
            self.delta,
            self.epsilon_add_remove,
            self.epsilon_substitute,
            self.rho,
            self.epsilon_zcdp
        )
    }
}

/// Scales users per round and the noise multiplier by each factor `k` and
/// accounts `rounds` steps at the resulting sampling rate.
pub fn extrapolate_sweep(base: &SweepBase, factors: &[f64]) -> Result<Vec<SweepRow>> {
    if base.total_users == 0 {
        return Err(Error::invalid("total users must be >= 1"));
    }
    check_delta(base.delta)?;
    let rows: Vec<(f64, u64, f64, f64)> = factors
        .iter()
        .map(|&k| {
            if !(k > 0.0) || !k.is_finite() {
                return Err(Error::invalid(format!("scale factor must be > 0, got {k}")));
            }
            let users = (k * base.users_per_round as f64).round() as u64;
            let q = users as f64 / base.total_users as f64;
            if q > 1.0 {
                return Err(Error::invalid(format!(
                    "k = {k}: {users} users per round exceeds {} total users",
                    base.total_users
                )));
            }
            Ok((k, users, q, k * base.noise_multiplier))
        })
        .collect::<Result<_>>()?;
    rows.into_par_iter()
        .map(|(k, users, q, sigma)| {
            let ar = RdpAccountant::with_default_orders(Neighboring::AddRemovePoisson)
                .compose_subsampled_gaussian(q, sigma, base.rounds)?
                .to_dp(base.delta)?;
            let sub = RdpAccountant::with_default_orders(Neighboring::SubstituteConservative)
                .compose_subsampled_gaussian(q, sigma, base.rounds)?
                .to_dp(base.delta)?;
            let (rho, eps_z) = if base.rounds == 0 {
                (0.0, 0.0)
            } else {
                let rho = zcdp_tree_single_participation(base.rounds, sigma)?.rho;
                (rho, zcdp_to_dp(rho, base.delta)?.epsilon)
            };
            Ok(SweepRow {
                k,
                users_per_round: users,
                q,
                sigma,
                rounds: base.rounds,
                delta: base.delta,
                epsilon_add_remove: ar.epsilon,
                epsilon_substitute: sub.epsilon,
                rho,
                epsilon_zcdp: eps_z,
            })
        })
        .collect()
}
