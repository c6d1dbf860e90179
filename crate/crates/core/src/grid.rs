//! Index arithmetic for the age-period table.
//!
//! All indexes in this module are 1-based, so `i` runs over `1..=ages`,
//! `j` over `1..=periods` and the cohort `k = j - i + ages` over
//! `1..=cohorts`. Storage code converts to 0-based offsets at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};

/// Dimensions and noise settings of a simulated age-period table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of age groups `I`.
    pub ages: usize,
    /// Number of period groups `J`.
    pub periods: usize,
    /// Number of cohort groups `K = I + J - 1`.
    pub cohorts: usize,
    /// Observations per (age, period) cell.
    pub replicates: usize,
    /// Standard deviation of the observation noise.
    pub noise_sd: f64,
}

impl GridSpec {
    pub fn new(ages: usize, periods: usize, replicates: usize, noise_sd: f64) -> Result<Self> {
        let spec = GridSpec {
            ages,
            periods,
            cohorts: (ages + periods).saturating_sub(1),
            replicates,
            noise_sd,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ages < 2 || self.periods < 2 {
            return Err(ApcError::domain(format!(
                "need at least 2 ages and 2 periods, got I={} J={}",
                self.ages, self.periods
            )));
        }
        if self.cohorts != self.ages + self.periods - 1 {
            return Err(ApcError::domain(format!(
                "cohort count {} != I + J - 1 = {}",
                self.cohorts,
                self.ages + self.periods - 1
            )));
        }
        if self.replicates < 1 {
            return Err(ApcError::domain("replicates per cell must be >= 1"));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(ApcError::domain(format!(
                "noise sd must be positive and finite, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    /// Total observation count `I * J * T`.
    pub fn n_obs(&self) -> usize {
        self.ages * self.periods * self.replicates
    }

    pub fn n_cells(&self) -> usize {
        self.ages * self.periods
    }

    /// Number of effect columns `I + J + K`.
    pub fn n_effects(&self) -> usize {
        self.ages + self.periods + self.cohorts
    }

    pub fn cohort_of(&self, i: usize, j: usize) -> Result<usize> {
        if j > self.periods {
            return Err(ApcError::domain(format!(
                "period index {j} outside 1..={}",
                self.periods
            )));
        }
        cohort_index(i, j, self.ages)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            ages: 10,
            periods: 10,
            cohorts: 19,
            replicates: 10,
            noise_sd: 0.1,
        }
    }
}

/// Cohort index `k = j - i + I` for age `i` and period `j` (1-based).
pub fn cohort_index(i: usize, j: usize, ages: usize) -> Result<usize> {
    if i < 1 || i > ages {
        return Err(ApcError::domain(format!("age index {i} outside 1..={ages}")));
    }
    if j < 1 {
        return Err(ApcError::domain(format!("period index {j} must be >= 1")));
    }
    Ok(j + ages - i)
}

/// The centered indexes `v = index - (n + 1) / 2` for each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringIndexes {
    pub age: Vec<f64>,
    pub period: Vec<f64>,
    pub cohort: Vec<f64>,
}

impl CenteringIndexes {
    pub fn new(spec: &GridSpec) -> Self {
        CenteringIndexes {
            age: centered(spec.ages),
            period: centered(spec.periods),
            cohort: centered(spec.cohorts),
        }
    }

    /// The null vector of the dummy design, `(vA, -vP, vC)` stacked.
    pub fn null_vector(&self) -> Vec<f64> {
        self.age
            .iter()
            .copied()
            .chain(self.period.iter().map(|v| -v))
            .chain(self.cohort.iter().copied())
            .collect()
    }

    /// `ΣvA² + ΣvP² + ΣvC²`.
    pub fn total_weight(&self) -> f64 {
        [&self.age, &self.period, &self.cohort]
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

pub fn centering_indexes(spec: &GridSpec) -> CenteringIndexes {
    CenteringIndexes::new(spec)
}

/// Centered index vector of length `n`.
pub fn centered(n: usize) -> Vec<f64> {
    let mid = (n as f64 + 1.0) / 2.0;
    (1..=n).map(|i| i as f64 - mid).collect()
}

/// Sum of squared centering indexes for `n` groups: `n(n+1)(n-1)/12`.
pub fn index_weight_sum(n: usize) -> f64 {
    let n = n as f64;
    n * (n + 1.0) * (n - 1.0) / 12.0
}

/// Excess of the cohort/period index-weight ratio over the random-walk
/// ratio `(K-1)/(J-1)`, evaluated in closed form.
pub fn weight_gap(ages: usize, periods: usize) -> Result<f64> {
    if ages < 2 || periods < 2 {
        return Err(ApcError::domain(format!(
            "weight gap needs I, J >= 2, got I={ages} J={periods}"
        )));
    }
    let i = ages as f64;
    let j = periods as f64;
    let k = i + j - 1.0;
    Ok((k - 1.0) * (2.0 * j + i) * (i - 1.0) / (j * (j + 1.0) * (j - 1.0)))
}

/// The two index-weight ratios compared by [`weight_gap`]:
/// `(ΣvC²/ΣvP², (K-1)/(J-1))`.
pub fn weight_ratios(ages: usize, periods: usize) -> (f64, f64) {
    let cohorts = ages + periods - 1;
    (
        index_weight_sum(cohorts) / index_weight_sum(periods),
        (cohorts as f64 - 1.0) / (periods as f64 - 1.0),
    )
}
