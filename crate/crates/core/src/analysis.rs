//! Linear/nonlinear decomposition of effect estimates, the scalar bias `s`
//! along the unidentified direction, and the case × model grid.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{artificial_effects, generate_case, CaseSpec, EffectSet};
use crate::error::Result;
use crate::grid::{CenteringIndexes, GridSpec};
use crate::inference::{fit, FitConfig, FitResult};
use crate::models::ModelKind;

/// Each effect block split as `slope · v + nonlinear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Regression slopes on the centering index: age, period, cohort.
    pub slope: [f64; 3],
    /// Residuals orthogonal to the centering index, per block.
    pub nonlinear: [Vec<f64>; 3],
}

impl Decomposition {
    /// Rebuilds the effect blocks (intercept 0).
    pub fn recompose(&self, v: &CenteringIndexes) -> EffectSet {
        let build = |f: usize, v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&self.nonlinear[f])
                .map(|(v, nl)| self.slope[f] * v + nl)
                .collect()
        };
        EffectSet {
            intercept: 0.0,
            age: build(0, &v.age),
            period: build(1, &v.period),
            cohort: build(2, &v.cohort),
        }
    }

    /// Largest absolute difference between two sets of nonlinear residuals.
    pub fn nonlinear_gap(&self, other: &Decomposition) -> f64 {
        self.nonlinear
            .iter()
            .zip(&other.nonlinear)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn decompose(effects: &EffectSet, v: &CenteringIndexes) -> Result<Decomposition> {
    let spec_dims = [v.age.len(), v.period.len(), v.cohort.len()];
    let got = [effects.age.len(), effects.period.len(), effects.cohort.len()];
    if spec_dims != got {
        return Err(crate::error::ApcError::domain(format!(
            "effect lengths {got:?} do not match centering indexes {spec_dims:?}"
        )));
    }
    let mut slope = [0.0; 3];
    let mut nonlinear: [Vec<f64>; 3] = Default::default();
    for (f, (b, v)) in effects.blocks().into_iter().zip([&v.age, &v.period, &v.cohort]).enumerate() {
        let s = dot(b, v) / dot(v, v);
        slope[f] = s;
        nonlinear[f] = b.iter().zip(v.iter()).map(|(b, v)| b - s * v).collect();
    }
    Ok(Decomposition { slope, nonlinear })
}

/// Least-squares coefficient of `estimate - truth` on `(vA, -vP, vC)`.
pub fn bias_s(estimate: &EffectSet, truth: &EffectSet, v: &CenteringIndexes) -> f64 {
    let diff = |a: &[f64], b: &[f64], v: &[f64]| -> f64 {
        a.iter().zip(b).zip(v).map(|((a, b), v)| (a - b) * v).sum()
    };
    let num = diff(&estimate.age, &truth.age, &v.age) - diff(&estimate.period, &truth.period, &v.period)
        + diff(&estimate.cohort, &truth.cohort, &v.cohort);
    num / v.total_weight()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    A,
    B,
    C,
    D,
    E,
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Grade::A => "A",
            Grade::B => "B",
            Grade::C => "C",
            Grade::D => "D",
            Grade::E => "E",
        };
        f.write_str(c)
    }
}

/// Letter grade of `|s|`; each boundary belongs to the worse grade.
pub fn grade(s: f64) -> Grade {
    let a = s.abs();
    if a < 0.02 {
        Grade::A
    } else if a < 0.04 {
        Grade::B
    } else if a < 0.06 {
        Grade::C
    } else if a < 0.08 {
        Grade::D
    } else {
        Grade::E
    }
}

/// Convergence summary carried into each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub sigma_hat: f64,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub case_id: usize,
    pub signs: String,
    pub model: ModelKind,
    pub s: f64,
    pub grade: Grade,
    pub decomposition: Decomposition,
    /// Largest gap between estimated and true nonlinear residuals.
    pub nonlinear_error: f64,
    pub estimate: EffectSet,
    pub fit_meta: FitMeta,
}

impl BiasReport {
    pub fn from_fit(case: &CaseSpec, truth: &EffectSet, fit: &FitResult, v: &CenteringIndexes) -> Result<Self> {
        let s = bias_s(&fit.point, truth, v);
        let decomposition = decompose(&fit.point, v)?;
        let truth_dec = decompose(truth, v)?;
        Ok(BiasReport {
            case_id: case.id,
            signs: case.label(),
            model: fit.kind,
            s,
            grade: grade(s),
            nonlinear_error: decomposition.nonlinear_gap(&truth_dec),
            decomposition,
            estimate: fit.point.clone(),
            fit_meta: FitMeta {
                converged: fit.converged,
                max_rhat: fit.max_rhat(),
                sigma_hat: fit.sigma_hat,
                divergences: fit.diagnostics.divergences,
            },
        })
    }
}

/// Seed of the dataset generated for a case inside a grid run.
pub fn case_seed(master_seed: u64, case_id: usize) -> u64 {
    master_seed.wrapping_add(case_id as u64)
}

/// Fits every (case, model) pair and grades the bias of each fit.
///
/// Case data are drawn with seed `cfg.seed + case_id`; all models of a case
/// see the same dataset. Reports come back in (case, model) order.
pub fn run_grid(
    spec: &GridSpec,
    cases: &[CaseSpec],
    models: &[ModelKind],
    cfg: &FitConfig,
) -> Result<Vec<BiasReport>> {
    cfg.validate()?;
    let v = CenteringIndexes::new(spec);
    let data: Vec<_> = cases
        .iter()
        .map(|case| generate_case(case, spec, case_seed(cfg.seed, case.id)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, ModelKind)> = (0..cases.len())
        .flat_map(|c| models.iter().map(move |&m| (c, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(c, kind)| {
            let (truth, dataset) = &data[c];
            let result = fit(kind, dataset, cfg)?;
            debug_assert_eq!(truth, &artificial_effects(&cases[c], spec));
            BiasReport::from_fit(&cases[c], truth, &result, &v)
        })
        .collect()
}
