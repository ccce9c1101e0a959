//! Device-to-device connectivity for one inference round.

use serde::{Deserialize, Serialize};

use crate::numerics::{rayleigh_cdf, rayleigh_quantile, RngStream};
use crate::{Error, Result};

/// Distribution of an active link's capacity, in bits per millisecond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CapacityDistribution {
    Rayleigh { sigma: f64 },
    /// Rayleigh conditioned on `[lo, hi]`; gives a finite worst-case delay.
    TruncatedRayleigh { sigma: f64, lo: f64, hi: f64 },
    Constant { value: f64 },
    /// Uniform choice among the listed values.
    Empirical { samples: Vec<f64> },
}

impl Default for CapacityDistribution {
    fn default() -> Self {
        CapacityDistribution::Rayleigh { sigma: 1.0 }
    }
}

impl CapacityDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            CapacityDistribution::Rayleigh { sigma } => sigma.is_finite() && *sigma > 0.0,
            CapacityDistribution::TruncatedRayleigh { sigma, lo, hi } => {
                sigma.is_finite() && *sigma > 0.0 && *lo > 0.0 && hi.is_finite() && lo < hi
            }
            CapacityDistribution::Constant { value } => value.is_finite() && *value > 0.0,
            CapacityDistribution::Empirical { samples } => {
                !samples.is_empty() && samples.iter().all(|s| s.is_finite() && *s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "capacity distribution {self:?} needs strictly positive support"
            )))
        }
    }

    /// `F_C(x) = Pr(C < x)`; zero for `x <= 0`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            CapacityDistribution::Rayleigh { sigma } => rayleigh_cdf(x, *sigma),
            CapacityDistribution::TruncatedRayleigh { sigma, lo, hi } => {
                if x <= *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    let base = rayleigh_cdf(*lo, *sigma);
                    let mass = rayleigh_cdf(*hi, *sigma) - base;
                    ((rayleigh_cdf(x, *sigma) - base) / mass).clamp(0.0, 1.0)
                }
            }
            CapacityDistribution::Constant { value } => {
                if x > *value {
                    1.0
                } else {
                    0.0
                }
            }
            CapacityDistribution::Empirical { samples } => {
                samples.iter().filter(|&&s| s < x).count() as f64 / samples.len() as f64
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            CapacityDistribution::Rayleigh { sigma } => rng.rayleigh(*sigma),
            CapacityDistribution::TruncatedRayleigh { sigma, lo, hi } => {
                let a = rayleigh_cdf(*lo, *sigma);
                let b = rayleigh_cdf(*hi, *sigma);
                let q = a + (b - a) * rng.open_uniform();
                rayleigh_quantile(q, *sigma).clamp(*lo, *hi)
            }
            CapacityDistribution::Constant { value } => *value,
            CapacityDistribution::Empirical { samples } => samples[rng.index(samples.len())],
        }
    }

    /// Smallest capacity the distribution can produce, when bounded away
    /// from zero.
    pub fn min_capacity(&self) -> Option<f64> {
        match self {
            CapacityDistribution::Rayleigh { .. } => None,
            CapacityDistribution::TruncatedRayleigh { lo, .. } => Some(*lo),
            CapacityDistribution::Constant { value } => Some(*value),
            CapacityDistribution::Empirical { samples } => samples.iter().copied().reduce(f64::min),
        }
    }

    /// Lower quantile used to size plotting grids for unbounded families.
    pub fn low_quantile(&self, q: f64) -> f64 {
        match self {
            CapacityDistribution::Rayleigh { sigma } => rayleigh_quantile(q, *sigma),
            _ => self.min_capacity().expect("bounded family"),
        }
    }
}

/// Link states and capacities of `K` users for one round.
///
/// Stored densely; the diagonal is always active and has no capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSnapshot {
    users: usize,
    links: Vec<bool>,
    capacities: Vec<f64>,
}

impl NetworkSnapshot {
    /// Builds a snapshot from explicit active pairs `(i, j, capacity)`.
    pub fn from_links(users: usize, active: &[(usize, usize, f64)]) -> Result<Self> {
        if users == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        let mut snap = NetworkSnapshot::isolated(users);
        for &(i, j, c) in active {
            if i >= users || j >= users {
                return Err(Error::IndexOutOfRange {
                    index: i.max(j),
                    len: users,
                });
            }
            if i == j {
                continue;
            }
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "link ({i},{j}) needs a positive capacity"
                )));
            }
            snap.set(i, j, c);
        }
        Ok(snap)
    }

    fn isolated(users: usize) -> Self {
        let mut links = vec![false; users * users];
        for i in 0..users {
            links[i * users + i] = true;
        }
        NetworkSnapshot {
            users,
            links,
            capacities: vec![0.0; users * users],
        }
    }

    fn set(&mut self, i: usize, j: usize, capacity: f64) {
        let k = self.users;
        self.links[i * k + j] = true;
        self.links[j * k + i] = true;
        self.capacities[i * k + j] = capacity;
        self.capacities[j * k + i] = capacity;
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn link(&self, i: usize, j: usize) -> bool {
        self.links[i * self.users + j]
    }

    /// Capacity of an active link between distinct users.
    pub fn capacity(&self, i: usize, j: usize) -> Option<f64> {
        (i != j && self.link(i, j)).then(|| self.capacities[i * self.users + j])
    }

    /// `S_i`: users with a live link to `i`, including `i`, ascending.
    pub fn active_neighbors(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.users {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.users,
            });
        }
        Ok((0..self.users).filter(|&j| self.link(i, j)).collect())
    }

    /// `i,j,link,capacity` for every unordered pair and the diagonal; the
    /// capacity field is empty where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,link,capacity\n");
        for i in 0..self.users {
            for j in i..self.users {
                let cap = self.capacity(i, j).map(|c| c.to_string()).unwrap_or_default();
                out.push_str(&format!("{i},{j},{},{cap}\n", u8::from(self.link(i, j))));
            }
        }
        out
    }
}

/// Free-standing form of [`NetworkSnapshot::active_neighbors`].
pub fn active_neighbors(snapshot: &NetworkSnapshot, i: usize) -> Result<Vec<usize>> {
    snapshot.active_neighbors(i)
}

/// Draws the upper triangle i.i.d. (link, then capacity only when the link
/// is up) and mirrors it.
pub fn sample_snapshot(
    users: usize,
    p: f64,
    dist: &CapacityDistribution,
    rng: &mut RngStream,
) -> Result<NetworkSnapshot> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p = {p} is not a probability")));
    }
    if users == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    dist.validate()?;
    let mut snap = NetworkSnapshot::isolated(users);
    for i in 0..users {
        for j in i + 1..users {
            if rng.bernoulli(p) {
                let c = dist.sample(rng);
                snap.set(i, j, c);
            }
        }
    }
    Ok(snap)
}
