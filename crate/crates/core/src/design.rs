//! Dummy-coded design matrix and cell summaries.

use ndarray::{Array1, Array2};

use crate::datagen::Dataset;
use crate::error::{ApcError, Result};
use crate::grid::CenteringIndexes;

/// Full dummy coding with column blocks age (I), period (J), cohort (K).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    pub ages: usize,
    pub periods: usize,
    pub cohorts: usize,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.ages + self.periods + self.cohorts
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    /// `X · u` for a stacked coefficient vector.
    pub fn apply(&self, u: &[f64]) -> Result<Array1<f64>> {
        if u.len() != self.ncols() {
            return Err(ApcError::domain(format!(
                "vector length {} != {} columns",
                u.len(),
                self.ncols()
            )));
        }
        Ok(self.x.dot(&Array1::from(u.to_vec())))
    }

    /// Residual of the null-vector identity, `max |X · (vA, -vP, vC)|`.
    pub fn null_residual(&self, v: &CenteringIndexes) -> f64 {
        self.apply(&v.null_vector())
            .map(|r| r.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
            .unwrap_or(f64::INFINITY)
    }
}

pub fn build_design(data: &Dataset) -> DesignMatrix {
    let spec = &data.spec;
    let (ages, periods, cohorts) = (spec.ages, spec.periods, spec.cohorts);
    let mut x = Array2::zeros((data.len(), ages + periods + cohorts));
    for (n, r) in data.rows.iter().enumerate() {
        x[[n, r.i - 1]] = 1.0;
        x[[n, ages + r.j - 1]] = 1.0;
        x[[n, ages + periods + r.k - 1]] = 1.0;
    }
    DesignMatrix {
        x,
        ages,
        periods,
        cohorts,
    }
}

/// Mean observation per (age, period) cell as an `I × J` matrix.
pub fn cell_means(data: &Dataset) -> Result<Array2<f64>> {
    let spec = &data.spec;
    let mut sum = Array2::<f64>::zeros((spec.ages, spec.periods));
    let mut count = Array2::<usize>::zeros((spec.ages, spec.periods));
    for r in &data.rows {
        if r.i < 1 || r.i > spec.ages || r.j < 1 || r.j > spec.periods {
            return Err(ApcError::domain(format!("row cell ({}, {}) outside table", r.i, r.j)));
        }
        sum[[r.i - 1, r.j - 1]] += r.y;
        count[[r.i - 1, r.j - 1]] += 1;
    }
    if let Some(((i, j), _)) = count.indexed_iter().find(|(_, &c)| c == 0) {
        return Err(ApcError::domain(format!("cell (i={}, j={}) is empty", i + 1, j + 1)));
    }
    Ok(ndarray::Zip::from(&sum)
        .and(&count)
        .map_collect(|&s, &c| s / c as f64))
}
