//! Likelihood, the three regularizing priors, and the non-centered
//! parameterization used for optimization and sampling.
//!
//! The sampler and optimizer work on a flat unconstrained vector laid out as
//!
//! ```text
//! [intercept, log σ, hyper..., std_age..., std_period..., std_cohort...]
//! ```
//!
//! where `hyper` is one log-scale coordinate per prior scale (three for the
//! random effects and random walk models, one shared `λ` for ridge). Effects
//! are rebuilt from the standard-normal `std` blocks: scaled directly for
//! RE/RR, or as scaled adjacent differences anchored to sum to zero for RW.
//! All log densities omit their normalizing constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::Decomposition;
use crate::datagen::{Dataset, EffectSet, Observation};
use crate::error::{ApcError, Result};
use crate::grid::{index_weight_sum, GridSpec};

/// Lower bound added to the random-effects prior scales.
pub const DEFAULT_SIGMA_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "re")]
    RandomEffects,
    #[serde(rename = "rr")]
    RidgeRegression,
    #[serde(rename = "rw")]
    RandomWalk,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::RandomEffects,
        ModelKind::RidgeRegression,
        ModelKind::RandomWalk,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            ModelKind::RandomEffects => "re",
            ModelKind::RidgeRegression => "rr",
            ModelKind::RandomWalk => "rw",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ModelKind {
    type Err = ApcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "re" | "random-effects" => Ok(ModelKind::RandomEffects),
            "rr" | "ridge" => Ok(ModelKind::RidgeRegression),
            "rw" | "random-walk" => Ok(ModelKind::RandomWalk),
            other => Err(ApcError::domain(format!("unknown model '{other}' (expected re, rr, rw)"))),
        }
    }
}

/// Prior scales: one per factor, or a single shared `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hyper {
    PerFactor([f64; 3]),
    Shared(f64),
}

impl Hyper {
    pub fn scales(&self) -> [f64; 3] {
        match *self {
            Hyper::PerFactor(s) => s,
            Hyper::Shared(l) => [l; 3],
        }
    }

    fn check(&self) -> Result<[f64; 3]> {
        let s = self.scales();
        if s.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(ApcError::domain(format!("prior scales must be positive, got {s:?}")));
        }
        Ok(s)
    }

    fn check_for(&self, kind: ModelKind) -> Result<[f64; 3]> {
        let s = self.check()?;
        if kind == ModelKind::RidgeRegression && (s[0] != s[1] || s[1] != s[2]) {
            return Err(ApcError::domain(format!(
                "ridge regression needs one shared scale, got {s:?}"
            )));
        }
        Ok(s)
    }
}

/// Unconstrained coordinates of one model, unpacked into named blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconstrainedParams {
    pub intercept: f64,
    pub log_sigma: f64,
    /// Log-scale prior hyperparameters (for RE, the log of the scale above the floor).
    pub hyper: Vec<f64>,
    pub std_age: Vec<f64>,
    pub std_period: Vec<f64>,
    pub std_cohort: Vec<f64>,
}

/// A model kind bound to grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub ages: usize,
    pub periods: usize,
    pub cohorts: usize,
    pub sigma_floor: f64,
}

impl Model {
    pub fn new(kind: ModelKind, spec: &GridSpec) -> Self {
        Model {
            kind,
            ages: spec.ages,
            periods: spec.periods,
            cohorts: spec.cohorts,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn with_sigma_floor(mut self, floor: f64) -> Self {
        self.sigma_floor = floor;
        self
    }

    pub fn n_hyper(&self) -> usize {
        match self.kind {
            ModelKind::RidgeRegression => 1,
            _ => 3,
        }
    }

    pub fn std_lens(&self) -> [usize; 3] {
        match self.kind {
            ModelKind::RandomWalk => [self.ages - 1, self.periods - 1, self.cohorts - 1],
            _ => [self.ages, self.periods, self.cohorts],
        }
    }

    pub fn effect_lens(&self) -> [usize; 3] {
        [self.ages, self.periods, self.cohorts]
    }

    /// Offset of the first `std` coordinate in the flat vector.
    pub fn std_offset(&self) -> usize {
        2 + self.n_hyper()
    }

    pub fn dim(&self) -> usize {
        self.std_offset() + self.std_lens().iter().sum::<usize>()
    }

    pub fn hyper_names(&self) -> &'static [&'static str] {
        match self.kind {
            ModelKind::RidgeRegression => &["lambda"],
            _ => &["sigma_A", "sigma_P", "sigma_C"],
        }
    }

    pub fn zeros(&self) -> UnconstrainedParams {
        let [a, p, c] = self.std_lens();
        UnconstrainedParams {
            intercept: 0.0,
            log_sigma: 0.0,
            hyper: vec![0.0; self.n_hyper()],
            std_age: vec![0.0; a],
            std_period: vec![0.0; p],
            std_cohort: vec![0.0; c],
        }
    }

    pub fn check(&self, u: &UnconstrainedParams) -> Result<()> {
        let got = [
            u.hyper.len(),
            u.std_age.len(),
            u.std_period.len(),
            u.std_cohort.len(),
        ];
        let [a, p, c] = self.std_lens();
        let want = [self.n_hyper(), a, p, c];
        if got != want {
            return Err(ApcError::domain(format!(
                "{} parameter block lengths {got:?}, expected {want:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn pack(&self, u: &UnconstrainedParams) -> Result<Vec<f64>> {
        self.check(u)?;
        let mut x = Vec::with_capacity(self.dim());
        x.push(u.intercept);
        x.push(u.log_sigma);
        x.extend(&u.hyper);
        x.extend(&u.std_age);
        x.extend(&u.std_period);
        x.extend(&u.std_cohort);
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<UnconstrainedParams> {
        if x.len() != self.dim() {
            return Err(ApcError::domain(format!(
                "flat vector has length {}, {} model needs {}",
                x.len(),
                self.kind,
                self.dim()
            )));
        }
        let h = self.n_hyper();
        let [a, p, _] = self.std_lens();
        let s = self.std_offset();
        Ok(UnconstrainedParams {
            intercept: x[0],
            log_sigma: x[1],
            hyper: x[2..2 + h].to_vec(),
            std_age: x[s..s + a].to_vec(),
            std_period: x[s + a..s + a + p].to_vec(),
            std_cohort: x[s + a + p..].to_vec(),
        })
    }

    /// Maps a log-scale hyper coordinate to its prior scale.
    #[inline]
    fn scale_of(&self, h: f64) -> f64 {
        match self.kind {
            ModelKind::RandomEffects => self.sigma_floor + h.exp(),
            _ => h.exp(),
        }
    }

    /// Prior scales implied by the hyper coordinates.
    pub fn hyper_scales(&self, hyper: &[f64]) -> Hyper {
        match self.kind {
            ModelKind::RidgeRegression => Hyper::Shared(self.scale_of(hyper[0])),
            _ => Hyper::PerFactor([
                self.scale_of(hyper[0]),
                self.scale_of(hyper[1]),
                self.scale_of(hyper[2]),
            ]),
        }
    }

    /// Rebuilds effect vectors from unconstrained coordinates.
    ///
    /// RW output sums to zero per block by construction; RE/RR output does not.
    pub fn transform(&self, u: &UnconstrainedParams) -> Result<EffectSet> {
        self.check(u)?;
        let scales = self.hyper_scales(&u.hyper).scales();
        let stds = [&u.std_age, &u.std_period, &u.std_cohort];
        let mut blocks: [Vec<f64>; 3] = Default::default();
        for f in 0..3 {
            blocks[f] = match self.kind {
                ModelKind::RandomWalk => {
                    let d: Vec<f64> = stds[f].iter().map(|z| scales[f] * z).collect();
                    walk_from_differences(&d)
                }
                _ => stds[f].iter().map(|z| scales[f] * z).collect(),
            };
        }
        let [age, period, cohort] = blocks;
        Ok(EffectSet {
            intercept: u.intercept,
            age,
            period,
            cohort,
        })
    }

    /// Residual standard deviation `exp(log σ)`.
    pub fn sigma(&self, u: &UnconstrainedParams) -> f64 {
        u.log_sigma.exp()
    }
}

/// Levels from adjacent differences, with the first level chosen so the
/// block sums to zero: `b1 = -(1/n) Σ (n - a) d_a`, `b_i = b1 + Σ_{a<i} d_a`.
pub fn walk_from_differences(d: &[f64]) -> Vec<f64> {
    let n = d.len() + 1;
    let nf = n as f64;
    let first = -d
        .iter()
        .enumerate()
        .map(|(a, da)| (nf - (a + 1) as f64) * da)
        .sum::<f64>()
        / nf;
    let mut out = Vec::with_capacity(n);
    let mut level = first;
    out.push(level);
    for da in d {
        level += da;
        out.push(level);
    }
    out
}

/// Pulls a gradient with respect to walk levels back to the differences.
fn walk_gradient(g_levels: &[f64], g_diff: &mut [f64]) {
    let n = g_levels.len();
    let nf = n as f64;
    let total: f64 = g_levels.iter().sum();
    let mut suffix = 0.0;
    for a in (1..n).rev() {
        suffix += g_levels[a];
        // d_{a} (0-based a-1) enters every level from index a onward
        g_diff[a - 1] = suffix - (nf - a as f64) / nf * total;
    }
}

pub fn transform(model: &Model, u: &UnconstrainedParams) -> Result<EffectSet> {
    model.transform(u)
}

/// Gaussian log likelihood without its constant:
/// `-N log σ - Σ (y - μ)² / (2σ²)`.
pub fn log_likelihood(effects: &EffectSet, sigma: f64, data: &Dataset) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(ApcError::domain(format!("sigma must be positive, got {sigma}")));
    }
    effects.check_dims(&data.spec)?;
    Ok(log_likelihood_rows(effects, sigma, &data.rows))
}

pub(crate) fn log_likelihood_rows(effects: &EffectSet, sigma: f64, rows: &[Observation]) -> f64 {
    let rss: f64 = rows
        .iter()
        .map(|r| (r.y - effects.cell_mean(r.i, r.j, r.k)).powi(2))
        .sum();
    -(rows.len() as f64) * sigma.ln() - rss / (2.0 * sigma * sigma)
}

fn sum_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sum_sq_diff(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
}

/// Log prior of the effects under a model, constants omitted.
pub fn log_prior(kind: ModelKind, effects: &EffectSet, hyper: &Hyper) -> Result<f64> {
    let scales = hyper.check_for(kind)?;
    let mut total = 0.0;
    for (block, sd) in effects.blocks().iter().zip(scales) {
        let n = block.len() as f64;
        total += match kind {
            ModelKind::RandomWalk => -(n - 1.0) * sd.ln() - sum_sq_diff(block) / (2.0 * sd * sd),
            _ => -n * sd.ln() - sum_sq(block) / (2.0 * sd * sd),
        };
    }
    Ok(total)
}

/// The same log prior evaluated from a linear/nonlinear split of the
/// effects, after moving them by `s` along `(vA, -vP, vC)`.
///
/// RE/RR use `Σb² = t² Σv² + Σ nl²`; RW uses
/// `Σ(Δb)² = t²(n-1) + 2t(nl_n - nl_1) + Σ(Δnl)²`, where `t` is the block
/// slope plus `s` (minus `s` for period).
pub fn log_prior_decomposed(
    kind: ModelKind,
    decomposition: &Decomposition,
    s: f64,
    hyper: &Hyper,
) -> Result<f64> {
    let scales = hyper.check_for(kind)?;
    let signs = [1.0, -1.0, 1.0];
    let mut total = 0.0;
    for f in 0..3 {
        let nl = &decomposition.nonlinear[f];
        let n = nl.len();
        let nf = n as f64;
        let t = decomposition.slope[f] + signs[f] * s;
        let sd = scales[f];
        total += match kind {
            ModelKind::RandomWalk => {
                let cross = 2.0 * t * (nl[n - 1] - nl[0]);
                -(nf - 1.0) * sd.ln() - (t * t * (nf - 1.0) + cross + sum_sq_diff(nl)) / (2.0 * sd * sd)
            }
            _ => -nf * sd.ln() - (t * t * index_weight_sum(n) + sum_sq(nl)) / (2.0 * sd * sd),
        };
    }
    Ok(total)
}

/// Per-cell sufficient statistics of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CellStats {
    /// Cell `c = (j-1)·I + (i-1)` → (age, period, cohort) 0-based offsets.
    pub(crate) index: Vec<[usize; 3]>,
    pub(crate) count: Vec<f64>,
    pub(crate) mean: Vec<f64>,
    pub(crate) within_ss: f64,
    pub(crate) n_obs: f64,
}

impl CellStats {
    fn new(model: &Model, rows: &[Observation]) -> Result<Self> {
        let ages = model.ages;
        let cells = ages * model.periods;
        let mut count = vec![0.0; cells];
        let mut sum = vec![0.0; cells];
        for r in rows {
            if r.i < 1 || r.i > ages || r.j < 1 || r.j > model.periods || r.k != r.j + ages - r.i {
                return Err(ApcError::domain(format!(
                    "observation ({}, {}, {}) does not fit the {}x{} table",
                    r.i, r.j, r.k, ages, model.periods
                )));
            }
            let c = (r.j - 1) * ages + r.i - 1;
            count[c] += 1.0;
            sum[c] += r.y;
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
            .collect();
        let within_ss = rows
            .iter()
            .map(|r| (r.y - mean[(r.j - 1) * ages + r.i - 1]).powi(2))
            .sum();
        let index = (0..cells)
            .map(|c| {
                let (i, j) = (c % ages, c / ages);
                [i, j, j + ages - 1 - i]
            })
            .collect();
        Ok(CellStats {
            index,
            count,
            mean,
            within_ss,
            n_obs: rows.len() as f64,
        })
    }
}

/// Log posterior density over the flat unconstrained vector.
///
/// Includes the standard-normal prior on every `std` coordinate, the
/// Gaussian likelihood, and the log-Jacobian of each log-scale coordinate
/// (flat priors on σ and on the prior scales).
#[derive(Debug, Clone)]
pub struct Posterior {
    pub model: Model,
    stats: CellStats,
}

impl Posterior {
    pub fn new(model: Model, data: &Dataset) -> Result<Self> {
        if (data.spec.ages, data.spec.periods) != (model.ages, model.periods) {
            return Err(ApcError::domain("dataset dimensions do not match the model"));
        }
        Self::from_rows(model, &data.rows)
    }

    pub fn from_rows(model: Model, rows: &[Observation]) -> Result<Self> {
        Ok(Posterior {
            stats: CellStats::new(&model, rows)?,
            model,
        })
    }

    /// The prior alone (no observations).
    pub fn prior_only(model: Model) -> Self {
        Self::from_rows(model, &[]).expect("empty data always fits")
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub(crate) fn stats(&self) -> &CellStats {
        &self.stats
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; x.len()];
        self.eval(x, &mut scratch, false)
    }

    /// Log density, writing its gradient into `grad`.
    pub fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, grad, true)
    }

    fn eval(&self, x: &[f64], grad: &mut [f64], want_grad: bool) -> f64 {
        let m = &self.model;
        debug_assert_eq!(x.len(), m.dim());
        let nh = m.n_hyper();
        let so = m.std_offset();
        let lens = m.std_lens();
        let elens = m.effect_lens();
        let walk = m.kind == ModelKind::RandomWalk;

        let mut lp = 0.0;
        // hyper scales and their Jacobians
        let mut scale = [0.0; 3];
        let mut dscale = [0.0; 3];
        for h in 0..nh {
            let e = x[2 + h].exp();
            lp += x[2 + h];
            let sc = m.scale_of(x[2 + h]);
            if nh == 1 {
                scale = [sc; 3];
                dscale = [e; 3];
            } else {
                scale[h] = sc;
                dscale[h] = e;
            }
        }

        // std prior
        let std = &x[so..];
        lp -= 0.5 * sum_sq(std);

        // effects, then their gradient, in one buffer laid out per block
        let total: usize = elens.iter().sum();
        let starts = [0, elens[0], elens[0] + elens[1]];
        let mut buf = vec![0.0; 2 * total];
        let (effects, g_eff) = buf.split_at_mut(total);
        let mut off = 0;
        for f in 0..3 {
            let z = &std[off..off + lens[f]];
            let out = &mut effects[starts[f]..starts[f] + elens[f]];
            if walk {
                let n = elens[f] as f64;
                let mut level = 0.0;
                let mut weighted = 0.0;
                for (a, zv) in z.iter().enumerate() {
                    level += scale[f] * zv;
                    out[a + 1] = level;
                    weighted += (n - (a + 1) as f64) * scale[f] * zv;
                }
                let first = -weighted / n;
                out.iter_mut().for_each(|b| *b += first);
            } else {
                out.iter_mut().zip(z).for_each(|(b, zv)| *b = scale[f] * zv);
            }
            off += lens[f];
        }

        // likelihood via cell sufficient statistics
        let st = &self.stats;
        let log_sigma = x[1];
        let inv_var = (-2.0 * log_sigma).exp();
        let b0 = x[0];
        let mut g_b0 = 0.0;
        let mut between = 0.0;
        for (c, idx) in st.index.iter().enumerate() {
            let n = st.count[c];
            if n == 0.0 {
                continue;
            }
            let (ia, ip, ic) = (idx[0], starts[1] + idx[1], starts[2] + idx[2]);
            let mu = b0 + effects[ia] + effects[ip] + effects[ic];
            let r = st.mean[c] - mu;
            between += n * r * r;
            if want_grad {
                let g = n * r * inv_var;
                g_b0 += g;
                g_eff[ia] += g;
                g_eff[ip] += g;
                g_eff[ic] += g;
            }
        }
        let rss = st.within_ss + between;
        lp += -st.n_obs * log_sigma - 0.5 * rss * inv_var;
        // Jacobian of σ = exp(log σ)
        lp += log_sigma;

        if want_grad {
            grad.iter_mut().for_each(|g| *g = 0.0);
            grad[0] = g_b0;
            grad[1] = -st.n_obs + rss * inv_var + 1.0;
            let mut off = 0;
            for f in 0..3 {
                let z = &std[off..off + lens[f]];
                let g_level = &g_eff[starts[f]..starts[f] + elens[f]];
                let g_std = &mut grad[so + off..so + off + lens[f]];
                if walk {
                    walk_gradient(g_level, g_std);
                } else {
                    g_std.copy_from_slice(g_level);
                }
                let mut dot = 0.0;
                for (g, zv) in g_std.iter_mut().zip(z) {
                    dot += *g * zv;
                    *g = scale[f] * *g - zv;
                }
                let h = if nh == 1 { 0 } else { f };
                grad[2 + h] += dot * dscale[f];
                off += lens[f];
            }
            for h in 0..nh {
                grad[2 + h] += 1.0;
            }
        }
        lp
    }
}

/// Log posterior at unpacked coordinates.
pub fn log_posterior(model: &Model, u: &UnconstrainedParams, data: &Dataset) -> Result<f64> {
    let post = Posterior::new(*model, data)?;
    Ok(post.log_density(&model.pack(u)?))
}

/// Analytic gradient of [`log_posterior`] in flat-vector order.
pub fn grad_log_posterior(model: &Model, u: &UnconstrainedParams, data: &Dataset) -> Result<Vec<f64>> {
    let post = Posterior::new(*model, data)?;
    let x = model.pack(u)?;
    let mut g = vec![0.0; x.len()];
    post.log_density_grad(&x, &mut g);
    Ok(g)
}
