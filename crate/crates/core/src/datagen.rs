//! Artificial effect parameters, the 13 linear-component cases, and
//! simulated observations.
//!
//! Each non-zero factor carries a linear slope along its centering index and
//! an alternating `cos(πi)` component of the same sign. Observations are
//! drawn with a ChaCha20 stream seeded from a `u64`, so a dataset is
//! reproducible on every platform.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ApcError, Result};
use crate::grid::{centered, CenteringIndexes, GridSpec};

pub const DEFAULT_SLOPE: f64 = 0.1;
pub const DEFAULT_NONLINEAR: f64 = 0.05;

/// Sign pattern of the linear components in one simulated case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    /// Position in the canonical 13-case list, or 0 for a custom pattern.
    pub id: usize,
    /// Signs for age, period and cohort, each in {-1, 0, 1}.
    pub signs: [i8; 3],
    pub slope_mag: f64,
    pub nl_mag: f64,
}

const CASE_SIGNS: [[i8; 3]; 13] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
    [0, 1, -1],
    [-1, 0, 1],
    [-1, 1, 0],
    [1, 1, -1],
    [1, 1, 1],
    [-1, 1, 1],
    [1, -1, 1],
];

impl CaseSpec {
    pub fn custom(signs: [i8; 3], slope_mag: f64, nl_mag: f64) -> Result<Self> {
        let case = CaseSpec {
            id: 0,
            signs,
            slope_mag,
            nl_mag,
        };
        case.validate()?;
        Ok(case)
    }

    /// Case `id` (1..=13) of the canonical list.
    pub fn canonical(id: usize, slope_mag: f64, nl_mag: f64) -> Result<Self> {
        if !(1..=13).contains(&id) {
            return Err(ApcError::domain(format!("case id {id} outside 1..=13")));
        }
        let mut case = CaseSpec::custom(CASE_SIGNS[id - 1], slope_mag, nl_mag)?;
        case.id = id;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signs.iter().any(|s| !(-1..=1).contains(s)) {
            return Err(ApcError::domain(format!("signs must be in {{-1,0,1}}: {:?}", self.signs)));
        }
        if self.signs == [0, 0, 0] {
            return Err(ApcError::domain("at least one factor needs a linear component"));
        }
        if !(self.slope_mag > 0.0) || !(self.nl_mag >= 0.0) {
            return Err(ApcError::domain(format!(
                "need slope > 0 and nonlinear magnitude >= 0, got {} and {}",
                self.slope_mag, self.nl_mag
            )));
        }
        Ok(())
    }

    pub fn negated(&self) -> CaseSpec {
        CaseSpec {
            id: 0,
            signs: self.signs.map(|s| -s),
            ..*self
        }
    }

    /// Sign pattern as written in the results table, e.g. `-0+`.
    pub fn label(&self) -> String {
        self.signs
            .iter()
            .map(|s| match s {
                1 => '+',
                -1 => '-',
                _ => '0',
            })
            .collect()
    }
}

impl fmt::Display for CaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case {} ({})", self.id, self.label())
    }
}

/// The 13 canonical cases in table order.
pub fn enumerate_cases(slope_mag: f64, nl_mag: f64) -> Result<Vec<CaseSpec>> {
    (1..=13)
        .map(|id| CaseSpec::canonical(id, slope_mag, nl_mag))
        .collect()
}

/// Intercept plus age, period and cohort effect vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSet {
    pub intercept: f64,
    pub age: Vec<f64>,
    pub period: Vec<f64>,
    pub cohort: Vec<f64>,
}

impl EffectSet {
    pub fn zeros(spec: &GridSpec) -> Self {
        EffectSet {
            intercept: 0.0,
            age: vec![0.0; spec.ages],
            period: vec![0.0; spec.periods],
            cohort: vec![0.0; spec.cohorts],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [&self.age, &self.period, &self.cohort]
    }

    pub fn check_dims(&self, spec: &GridSpec) -> Result<()> {
        let got = [self.age.len(), self.period.len(), self.cohort.len()];
        let want = [spec.ages, spec.periods, spec.cohorts];
        if got != want {
            return Err(ApcError::domain(format!(
                "effect lengths {got:?} do not match grid {want:?}"
            )));
        }
        Ok(())
    }

    /// Expected value of cell `(i, j, k)`, 1-based.
    #[inline]
    pub fn cell_mean(&self, i: usize, j: usize, k: usize) -> f64 {
        self.intercept + self.age[i - 1] + self.period[j - 1] + self.cohort[k - 1]
    }

    /// Moves each block mean into the intercept so every block sums to zero.
    pub fn centered(&self) -> EffectSet {
        let mut out = self.clone();
        for block in [&mut out.age, &mut out.period, &mut out.cohort] {
            let mean = block.iter().sum::<f64>() / block.len() as f64;
            block.iter_mut().for_each(|b| *b -= mean);
            out.intercept += mean;
        }
        out
    }

    /// Largest absolute block sum.
    pub fn max_block_sum(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|b| b.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Adds `t * (vA, -vP, vC)`, the direction the likelihood cannot see.
    pub fn gauge_shift(&self, t: f64, v: &CenteringIndexes) -> EffectSet {
        let shift = |b: &[f64], v: &[f64], sign: f64| -> Vec<f64> {
            b.iter().zip(v).map(|(b, v)| b + sign * t * v).collect()
        };
        EffectSet {
            intercept: self.intercept,
            age: shift(&self.age, &v.age, 1.0),
            period: shift(&self.period, &v.period, -1.0),
            cohort: shift(&self.cohort, &v.cohort, 1.0),
        }
    }

    /// Effects stacked as `(age, period, cohort)`, intercept excluded.
    pub fn stacked(&self) -> Vec<f64> {
        self.age
            .iter()
            .chain(&self.period)
            .chain(&self.cohort)
            .copied()
            .collect()
    }
}

fn artificial_block(n: usize, sign: i8, slope_mag: f64, nl_mag: f64) -> Vec<f64> {
    let slope = f64::from(sign) * slope_mag;
    let amp = f64::from(sign) * nl_mag;
    let nf = n as f64;
    // nonzero only for odd n, where the alternating terms do not cancel
    let offset = -(amp / (2.0 * nf)) * ((PI * nf).cos() - 1.0);
    centered(n)
        .into_iter()
        .enumerate()
        .map(|(idx, v)| offset + slope * v + amp * (PI * (idx + 1) as f64).cos())
        .collect()
}

/// True effect parameters for a case on the given grid (intercept 0).
pub fn artificial_effects(case: &CaseSpec, spec: &GridSpec) -> EffectSet {
    let [sa, sp, sc] = case.signs;
    EffectSet {
        intercept: 0.0,
        age: artificial_block(spec.ages, sa, case.slope_mag, case.nl_mag),
        period: artificial_block(spec.periods, sp, case.slope_mag, case.nl_mag),
        cohort: artificial_block(spec.cohorts, sc, case.slope_mag, case.nl_mag),
    }
}

/// One observation; indexes are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Case(CaseSpec),
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub rows: Vec<Observation>,
    pub seed: Option<u64>,
    pub source: DataSource,
}

/// Draws `replicates` noisy observations per cell around `beta`.
///
/// Rows are ordered with age varying fastest, then period, then replicate.
pub fn generate_dataset(beta: &EffectSet, spec: &GridSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    beta.check_dims(spec)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(spec.n_obs());
    for _ in 0..spec.replicates {
        for j in 1..=spec.periods {
            for i in 1..=spec.ages {
                let k = spec.cohort_of(i, j)?;
                let z: f64 = StandardNormal.sample(&mut rng);
                rows.push(Observation {
                    i,
                    j,
                    k,
                    y: beta.cell_mean(i, j, k) + spec.noise_sd * z,
                });
            }
        }
    }
    Ok(Dataset {
        spec: *spec,
        rows,
        seed: Some(seed),
        source: DataSource::External,
    })
}

/// Generates the dataset for a canonical or custom case.
pub fn generate_case(case: &CaseSpec, spec: &GridSpec, seed: u64) -> Result<(EffectSet, Dataset)> {
    case.validate()?;
    let beta = artificial_effects(case, spec);
    let mut data = generate_dataset(&beta, spec, seed)?;
    data.source = DataSource::Case(*case);
    Ok((beta, data))
}

impl Dataset {
    /// Builds a dataset from rows, checking the complete-table layout.
    pub fn from_rows(spec: GridSpec, rows: Vec<Observation>) -> Result<Dataset> {
        let data = Dataset {
            spec,
            rows,
            seed: None,
            source: DataSource::External,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        if self.rows.len() != spec.n_obs() {
            return Err(ApcError::Validation(format!(
                "expected {} rows, found {}",
                spec.n_obs(),
                self.rows.len()
            )));
        }
        let mut counts = vec![0usize; spec.n_cells()];
        for (n, row) in self.rows.iter().enumerate() {
            if row.i < 1 || row.i > spec.ages || row.j < 1 || row.j > spec.periods {
                return Err(ApcError::Validation(format!(
                    "row {}: cell ({}, {}) outside the {}x{} table",
                    n + 1,
                    row.i,
                    row.j,
                    spec.ages,
                    spec.periods
                )));
            }
            if row.k != row.j + spec.ages - row.i {
                return Err(ApcError::Validation(format!(
                    "row {}: cohort {} inconsistent with i={} j={}",
                    n + 1,
                    row.k,
                    row.i,
                    row.j
                )));
            }
            if !row.y.is_finite() {
                return Err(ApcError::Validation(format!("row {}: non-finite y", n + 1)));
            }
            counts[(row.j - 1) * spec.ages + row.i - 1] += 1;
        }
        if let Some(pos) = counts.iter().position(|&c| c != spec.replicates) {
            return Err(ApcError::Validation(format!(
                "cell (i={}, j={}) has {} observations, expected {}",
                pos % spec.ages + 1,
                pos / spec.ages + 1,
                counts[pos],
                spec.replicates
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes the `i,j,k,y` CSV. `y` uses the shortest round-tripping
    /// decimal form so a written file reloads bit-for-bit.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let map = |e: csv::Error| ApcError::Validation(e.to_string());
        wtr.write_record(["i", "j", "k", "y"]).map_err(map)?;
        for row in &self.rows {
            wtr.write_record([
                row.i.to_string(),
                row.j.to_string(),
                row.k.to_string(),
                format!("{:?}", row.y),
            ])
            .map_err(map)?;
        }
        wtr.flush().map_err(|e| ApcError::io("<csv>", e))?;
        Ok(())
    }

    /// Reads an `i,j,k,y` CSV. Table dimensions are inferred from the
    /// largest indexes; `noise_sd` is taken from `spec_hint` when given and
    /// otherwise estimated from the within-cell spread.
    pub fn read_csv<R: Read>(input: R, spec_hint: Option<GridSpec>) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = rdr
            .headers()
            .map_err(|e| ApcError::Parse { row: 0, message: e.to_string() })?
            .clone();
        let names: Vec<&str> = headers.iter().map(str::trim).collect();
        if names != ["i", "j", "k", "y"] {
            return Err(ApcError::Parse {
                row: 0,
                message: format!("expected header i,j,k,y, found {}", names.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (n, record) in rdr.records().enumerate() {
            let row = n + 1;
            let record = record.map_err(|e| ApcError::Parse { row, message: e.to_string() })?;
            if record.len() != 4 {
                return Err(ApcError::Parse {
                    row,
                    message: format!("expected 4 fields, found {}", record.len()),
                });
            }
            let idx = |f: usize| -> Result<usize> {
                record[f].trim().parse::<usize>().map_err(|e| ApcError::Parse {
                    row,
                    message: format!("field {}: {e}", names[f]),
                })
            };
            let y = record[3].trim().parse::<f64>().map_err(|e| ApcError::Parse {
                row,
                message: format!("field y: {e}"),
            })?;
            rows.push(Observation {
                i: idx(0)?,
                j: idx(1)?,
                k: idx(2)?,
                y,
            });
        }
        let ages = rows.iter().map(|r| r.i).max().unwrap_or(0);
        let periods = rows.iter().map(|r| r.j).max().unwrap_or(0);
        if ages < 2 || periods < 2 || rows.len() % (ages * periods) != 0 {
            return Err(ApcError::Validation(format!(
                "{} rows do not form a complete table of {ages} ages x {periods} periods",
                rows.len()
            )));
        }
        let replicates = rows.len() / (ages * periods);
        let spec = match spec_hint {
            Some(hint) => {
                if (hint.ages, hint.periods, hint.replicates) != (ages, periods, replicates) {
                    return Err(ApcError::Validation(format!(
                        "CSV layout {ages}x{periods}x{replicates} disagrees with metadata {}x{}x{}",
                        hint.ages, hint.periods, hint.replicates
                    )));
                }
                hint
            }
            None => GridSpec::new(ages, periods, replicates, pooled_within_sd(&rows, ages))
                .map_err(|e| ApcError::Validation(e.to_string()))?,
        };
        Dataset::from_rows(spec, rows)
    }
}

/// Pooled within-cell standard deviation, or 1.0 when it is undefined.
fn pooled_within_sd(rows: &[Observation], ages: usize) -> f64 {
    let periods = rows.iter().map(|r| r.j).max().unwrap_or(0);
    let cells = ages * periods;
    let mut sum = vec![0.0; cells];
    let mut count = vec![0usize; cells];
    for r in rows {
        let c = (r.j - 1) * ages + r.i - 1;
        sum[c] += r.y;
        count[c] += 1;
    }
    let ss: f64 = rows
        .iter()
        .map(|r| {
            let c = (r.j - 1) * ages + r.i - 1;
            (r.y - sum[c] / count[c] as f64).powi(2)
        })
        .sum();
    let dof = rows.len().saturating_sub(cells);
    let sd = (ss / dof.max(1) as f64).sqrt();
    if dof > 0 && sd > 0.0 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}
