//! Round-delay model of collaborative inference.
//!
//! A neighbor `j` reached over an active link with capacity `C` answers
//! after `B₁/C + B₂/C + τ_P,j` milliseconds; the round completes when the
//! slowest participant has answered, and never before the inferring user's
//! own compute time `τ_P,i_t`.

use rayon::prelude::*;

use crate::network::{CapacityDistribution, NetworkSnapshot};
use crate::numerics::RngStream;
use crate::{Error, Result};

/// Trials per Monte Carlo partition; partition `i` uses seed `base + i`.
pub const MC_PARTITION: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyConfig {
    /// Per-user compute delay in ms.
    pub tau_p: Vec<f64>,
    /// Feature payload in bits.
    pub b1: u64,
    /// Response payload in bits.
    pub b2: u64,
    pub p: f64,
    pub dist: CapacityDistribution,
}

impl LatencyConfig {
    pub fn homogeneous(users: usize, tau: f64, b1: u64, b2: u64, p: f64, dist: CapacityDistribution) -> Self {
        LatencyConfig {
            tau_p: vec![tau; users],
            b1,
            b2,
            p,
            dist,
        }
    }

    pub fn users(&self) -> usize {
        self.tau_p.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_p.is_empty() {
            return Err(Error::InvalidParameter("latency: no users".into()));
        }
        if self.tau_p.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidParameter("latency: compute delays must be > 0".into()));
        }
        if self.b1 < 1 {
            return Err(Error::InvalidParameter("latency: B1 must be >= 1 bit".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidParameter(format!("latency: p = {} is not a probability", self.p)));
        }
        self.dist.validate()
    }

    fn check_user(&self, i: usize) -> Result<()> {
        if i >= self.users() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.users(),
            });
        }
        Ok(())
    }

    /// The single compute delay shared by all users, if there is one.
    pub fn homogeneous_tau(&self) -> Option<f64> {
        let t = *self.tau_p.first()?;
        self.tau_p.iter().all(|&v| v == t).then_some(t)
    }
}

/// `L · (B₁/C + B₂/C + τ_P,j)`.
pub fn link_delay(link: bool, capacity: f64, cfg: &LatencyConfig, j: usize) -> Result<f64> {
    cfg.check_user(j)?;
    if !link {
        return Ok(0.0);
    }
    if !(capacity > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "active link to user {j} has capacity {capacity}"
        )));
    }
    Ok(cfg.b1 as f64 / capacity + cfg.b2 as f64 / capacity + cfg.tau_p[j])
}

/// `Δ = max_j T_{i_t,j}`, where the inferring user's own term is its
/// compute delay.
pub fn round_delay(snapshot: &NetworkSnapshot, cfg: &LatencyConfig, i_t: usize) -> Result<f64> {
    if snapshot.users() != cfg.users() {
        return Err(Error::shape(
            format!("{} users", cfg.users()),
            format!("snapshot of {}", snapshot.users()),
        ));
    }
    cfg.check_user(i_t)?;
    let mut delay = cfg.tau_p[i_t];
    for j in (0..cfg.users()).filter(|&j| j != i_t) {
        let capacity = snapshot.capacity(i_t, j).unwrap_or(0.0);
        delay = delay.max(link_delay(snapshot.link(i_t, j), capacity, cfg, j)?);
    }
    Ok(delay)
}

/// `Pr(Δ < ε)` for i.i.d. links and capacities, with `B = B₁`.
pub fn closed_form_cdf(cfg: &LatencyConfig, i_t: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {eps} must be > 0")));
    }
    cfg.check_user(i_t)?;
    if eps <= cfg.tau_p[i_t] {
        return Ok(0.0);
    }
    let b = cfg.b1 as f64;
    let mut prob = 1.0;
    for (j, &tau) in cfg.tau_p.iter().enumerate() {
        if j == i_t {
            continue;
        }
        prob *= if eps > tau {
            1.0 - cfg.p * cfg.dist.cdf(b / (eps - tau))
        } else {
            1.0 - cfg.p
        };
    }
    Ok(prob)
}

/// `B₁/c_min + τ` for homogeneous compute delays.
pub fn t_max_bound(cfg: &LatencyConfig, c_min: f64) -> Result<f64> {
    if !(c_min > 0.0) {
        return Err(Error::InvalidParameter(format!("c_min = {c_min} must be > 0")));
    }
    let tau = cfg
        .homogeneous_tau()
        .ok_or_else(|| Error::InvalidParameter("T_max needs identical compute delays".into()))?;
    Ok(cfg.b1 as f64 / c_min + tau)
}

/// Empirical delay CDF on a grid of ε values.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDistribution {
    pub points: Vec<(f64, f64)>,
}

impl DelayDistribution {
    pub fn probabilities(&self) -> Vec<f64> {
        self.points.iter().map(|&(_, p)| p).collect()
    }
}

/// Delay of one round drawn from the link model. Only the inferring user's
/// links matter, so only those are sampled.
pub fn sample_round_delay(cfg: &LatencyConfig, i_t: usize, rng: &mut RngStream) -> f64 {
    let mut delay = cfg.tau_p[i_t];
    let (b1, b2) = (cfg.b1 as f64, cfg.b2 as f64);
    for (j, &tau) in cfg.tau_p.iter().enumerate() {
        if j != i_t && rng.bernoulli(cfg.p) {
            let c = cfg.dist.sample(rng);
            delay = delay.max(b1 / c + b2 / c + tau);
        }
    }
    delay
}

/// Fraction of `trials` simulated rounds with `Δ < ε`, for each ε in the
/// ascending `eps_grid`. Trials are split into partitions of
/// [`MC_PARTITION`]; partition `i` draws from `RngStream::new(seed + i)`,
/// so the estimate does not depend on thread scheduling.
pub fn monte_carlo_cdf(
    cfg: &LatencyConfig,
    i_t: usize,
    eps_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<DelayDistribution> {
    cfg.validate()?;
    cfg.check_user(i_t)?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    if eps_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("epsilon grid must be ascending".into()));
    }
    let partitions = trials.div_ceil(MC_PARTITION);
    let counts = (0..partitions)
        .into_par_iter()
        .map(|part| {
            let n = MC_PARTITION.min(trials - part * MC_PARTITION);
            let mut rng = RngStream::new(seed.wrapping_add(part as u64));
            // first_above[k]: trials whose delay is below eps_grid[k] but
            // not below eps_grid[k - 1]
            let mut first_above = vec![0u64; eps_grid.len() + 1];
            for _ in 0..n {
                let d = sample_round_delay(cfg, i_t, &mut rng);
                first_above[eps_grid.partition_point(|&e| e <= d)] += 1;
            }
            first_above
        })
        .reduce(
            || vec![0u64; eps_grid.len() + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut cumulative = 0u64;
    let points = eps_grid
        .iter()
        .zip(&counts)
        .map(|(&eps, &c)| {
            cumulative += c;
            (eps, cumulative as f64 / trials as f64)
        })
        .collect();
    Ok(DelayDistribution { points })
}

/// Closed-form CDF evaluated on a grid.
pub fn closed_form_curve(cfg: &LatencyConfig, i_t: usize, eps_grid: &[f64]) -> Result<DelayDistribution> {
    let points = eps_grid
        .iter()
        .map(|&e| Ok((e, closed_form_cdf(cfg, i_t, e)?)))
        .collect::<Result<_>>()?;
    Ok(DelayDistribution { points })
}

/// `points` uniform ε values from `0.9·min τ` to twice the worst-case
/// delay. Unbounded capacity families use their 0.1% quantile in place of
/// the minimum capacity.
pub fn eps_grid(cfg: &LatencyConfig, points: usize) -> Vec<f64> {
    let min_tau = cfg.tau_p.iter().copied().fold(f64::INFINITY, f64::min);
    let max_tau = cfg.tau_p.iter().copied().fold(0.0, f64::max);
    let c_low = cfg.dist.low_quantile(1e-3);
    let lo = 0.9 * min_tau;
    let hi = 2.0 * ((cfg.b1 + cfg.b2) as f64 / c_low + max_tau);
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::sample_snapshot;

    fn cfg(users: usize, b1: u64, b2: u64, p: f64) -> LatencyConfig {
        LatencyConfig::homogeneous(users, 700.0, b1, b2, p, CapacityDistribution::Rayleigh { sigma: 1.0 })
    }

    #[test]
    fn link_delay_examples() {
        let c = cfg(2, 32, 0, 0.5);
        assert_eq!(link_delay(false, 0.0, &c, 1).unwrap(), 0.0);
        assert_eq!(link_delay(true, 0.5, &c, 1).unwrap(), 764.0);
        let c = cfg(2, 128, 16, 0.5);
        assert_eq!(link_delay(true, 1.0, &c, 1).unwrap(), 844.0);
        assert!(link_delay(true, 0.0, &c, 1).is_err());
        assert!(link_delay(true, -1.0, &c, 1).is_err());
    }

    #[test]
    fn round_delay_examples() {
        let c = cfg(2, 100, 0, 1.0);
        let alone = NetworkSnapshot::from_links(2, &[]).unwrap();
        assert_eq!(round_delay(&alone, &c, 0).unwrap(), 700.0);
        let linked = NetworkSnapshot::from_links(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(round_delay(&linked, &c, 0).unwrap(), 800.0);
        let wrong = NetworkSnapshot::from_links(3, &[]).unwrap();
        assert!(round_delay(&wrong, &c, 0).is_err());
    }

    #[test]
    fn round_delay_matches_enumeration() {
        let mut c = cfg(8, 64, 8, 0.6);
        c.tau_p = vec![700.0, 650.0, 720.0, 800.0, 690.0, 710.0, 705.0, 730.0];
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let snap = sample_snapshot(8, 0.6, &c.dist, &mut rng).unwrap();
            for i_t in 0..8 {
                let mut expected = c.tau_p[i_t];
                for j in 0..8 {
                    if j != i_t {
                        if let Some(cap) = snap.capacity(i_t, j) {
                            expected = expected.max(64.0 / cap + 8.0 / cap + c.tau_p[j]);
                        }
                    }
                }
                assert_eq!(round_delay(&snap, &c, i_t).unwrap(), expected);
            }
        }
    }

    #[test]
    fn closed_form_edge_cases() {
        let c = cfg(4, 32, 0, 0.5);
        assert_eq!(closed_form_cdf(&c, 0, 700.0).unwrap(), 0.0);
        assert_eq!(closed_form_cdf(&c, 0, 10.0).unwrap(), 0.0);
        assert!(closed_form_cdf(&c, 0, 0.0).is_err());
        assert!(closed_form_cdf(&c, 0, -5.0).is_err());
        let none = cfg(4, 32, 0, 0.0);
        assert_eq!(closed_form_cdf(&none, 0, 701.0).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_heterogeneous_split() {
        // ε between τ_1 and τ_2: the slow user contributes (1 − p)
        let c = LatencyConfig {
            tau_p: vec![100.0, 200.0, 500.0],
            b1: 10,
            b2: 0,
            p: 0.3,
            dist: CapacityDistribution::Constant { value: 1.0 },
        };
        // user 1: needs 10/(300-200) = 0.1 < C=1 so F_C(0.1) = 0
        let v = closed_form_cdf(&c, 0, 300.0).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        // ε = 205: 10/5 = 2 > 1, F_C = 1 → (1 − p) twice
        let v = closed_form_cdf(&c, 0, 205.0).unwrap();
        assert!((v - 0.49).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_degenerate_cases() {
        let grid: Vec<f64> = (0..40).map(|k| 600.0 + 10.0 * k as f64).collect();
        let none = cfg(5, 32, 0, 0.0);
        let mc = monte_carlo_cdf(&none, 2, &grid, 1000, 1).unwrap();
        for (eps, p) in mc.points {
            assert_eq!(p, if eps > 700.0 { 1.0 } else { 0.0 });
        }
        let mut fixed = cfg(5, 32, 0, 1.0);
        fixed.dist = CapacityDistribution::Constant { value: 0.5 };
        let mc = monte_carlo_cdf(&fixed, 0, &grid, 1000, 1).unwrap();
        for (eps, p) in mc.points {
            assert_eq!(p, if eps > 764.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn monte_carlo_tracks_snapshot_rounds() {
        // the star sampler and full-snapshot rounds estimate the same CDF
        let c = cfg(6, 32, 0, 0.5);
        let grid = eps_grid(&c, 64);
        let trials = 20_000;
        let fast = monte_carlo_cdf(&c, 1, &grid, trials, 3).unwrap();
        let mut rng = RngStream::new(99);
        let delays: Vec<f64> = (0..trials)
            .map(|_| {
                let s = sample_snapshot(6, 0.5, &c.dist, &mut rng).unwrap();
                round_delay(&s, &c, 1).unwrap()
            })
            .collect();
        let tol = 2.0 * 3.0 * ((2.0f64 / 0.01).ln() / (2.0 * trials as f64)).sqrt();
        for (eps, p) in fast.points {
            let q = delays.iter().filter(|&&d| d < eps).count() as f64 / trials as f64;
            assert!((p - q).abs() <= tol, "eps {eps}: {p} vs {q}");
        }
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let c = cfg(4, 128, 0, 0.8);
        let grid = eps_grid(&c, 16);
        let a = monte_carlo_cdf(&c, 0, &grid, 200_000, 9).unwrap();
        let b = monte_carlo_cdf(&c, 0, &grid, 200_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn t_max_examples() {
        let c = cfg(4, 32, 0, 0.5);
        assert_eq!(t_max_bound(&c, 0.5).unwrap(), 764.0);
        assert!(t_max_bound(&c, 0.0).is_err());
        let mut het = c.clone();
        het.tau_p[1] = 10.0;
        assert!(t_max_bound(&het, 0.5).is_err());
    }

    #[test]
    fn grid_spans_plateau() {
        let c = cfg(4, 32, 0, 0.5);
        let g = eps_grid(&c, 256);
        assert_eq!(g.len(), 256);
        assert!((g[0] - 630.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
