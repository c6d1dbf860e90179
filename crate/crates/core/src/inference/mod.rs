//! Point estimation (MAP) and posterior sampling (NUTS) for the three models.

pub mod diagnostics;
pub mod lbfgs;
pub mod marginal;
pub mod nuts;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, EffectSet};
use crate::error::{ApcError, Result};
use crate::models::{Model, ModelKind, Posterior, DEFAULT_SIGMA_FLOOR};

pub use diagnostics::{median, rhat};
use lbfgs::{maximize, LbfgsOptions};
use marginal::MarginalProblem;
use nuts::{run_chain, ChainFailure, NutsOptions};

/// How a description of `FitResult::point` reports the sum-to-zero centering.
pub const CENTERING_NOTE: &str = "block means moved into the intercept after fitting";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Mcmc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Map => "map",
            Method::Mcmc => "mcmc",
        })
    }
}

impl FromStr for Method {
    type Err = ApcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "map" => Ok(Method::Map),
            "mcmc" => Ok(Method::Mcmc),
            other => Err(ApcError::domain(format!("unknown method '{other}' (expected map or mcmc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub method: Method,
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    /// Multistart count for MAP.
    pub restarts: usize,
    /// Floor added to the random-effects prior scales.
    pub sigma_floor: f64,
    pub rhat_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: Method::Mcmc,
            chains: 4,
            iterations: 6000,
            warmup: 1000,
            thin: 5,
            seed: 1234,
            restarts: 8,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            rhat_threshold: 1.05,
        }
    }
}

impl FitConfig {
    pub fn map() -> Self {
        FitConfig {
            method: Method::Map,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ApcError::Validation(m));
        if self.chains < 1 {
            return fail("chains must be at least 1".into());
        }
        if self.warmup >= self.iterations {
            return fail(format!(
                "warmup ({}) must be below iterations ({})",
                self.warmup, self.iterations
            ));
        }
        if self.thin < 1 {
            return fail("thin must be at least 1".into());
        }
        if self.restarts < 1 {
            return fail("restarts must be at least 1".into());
        }
        if !(self.sigma_floor >= 0.0 && self.sigma_floor.is_finite()) {
            return fail(format!("sigma_floor must be finite and non-negative, got {}", self.sigma_floor));
        }
        if !(self.rhat_threshold > 1.0) {
            return fail(format!("rhat_threshold must exceed 1, got {}", self.rhat_threshold));
        }
        Ok(())
    }
}

/// Optimizer or sampler bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Post-warmup divergent transitions, summed over chains.
    pub divergences: usize,
    /// Attempts used per chain (MCMC) or restarts run (MAP).
    pub attempts: Vec<usize>,
    /// Chains that never produced usable draws.
    pub failed_chains: usize,
    pub step_sizes: Vec<f64>,
    pub mean_accept: Vec<f64>,
    pub max_depth_hits: usize,
    pub draws_per_chain: usize,
    /// MAP: marginal log posterior of the scale coordinates at the optimum.
    pub marginal_log_posterior: Option<f64>,
    /// MAP: L-BFGS iterations of the winning restart.
    pub iterations: Option<usize>,
    pub grad_norm: Option<f64>,
    /// MAP: how many restarts met the gradient tolerance.
    pub restarts_converged: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: ModelKind,
    pub method: Method,
    /// MAP optimum or posterior medians, each block summing to zero.
    pub point: EffectSet,
    pub sigma_hat: f64,
    pub hyper_hat: BTreeMap<String, f64>,
    /// Split-chain R-hat per reported quantity (MCMC only).
    pub rhat: Option<BTreeMap<String, f64>>,
    /// Log posterior at the optimum (MAP) or at the coordinate-wise median
    /// of the unconstrained draws (MCMC).
    pub log_posterior_at_point: f64,
    pub converged: bool,
    pub centering: String,
    pub diagnostics: FitDiagnostics,
    /// Flat unconstrained vector of the MAP optimum.
    pub unconstrained: Option<Vec<f64>>,
}

impl FitResult {
    /// Largest R-hat; non-finite entries count as `+∞`.
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat.as_ref().map(|r| {
            r.values()
                .map(|v| if v.is_nan() { f64::INFINITY } else { *v })
                .fold(f64::NEG_INFINITY, f64::max)
        })
    }
}

pub fn fit(kind: ModelKind, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    match cfg.method {
        Method::Map => map_fit(kind, data, cfg),
        Method::Mcmc => mcmc_fit(kind, data, cfg),
    }
}

fn posterior(kind: ModelKind, data: &Dataset, cfg: &FitConfig) -> Result<Posterior> {
    cfg.validate()?;
    data.validate()?;
    let model = Model::new(kind, &data.spec).with_sigma_floor(cfg.sigma_floor);
    Posterior::new(model, data)
}

fn hyper_map(model: &Model, hyper: &[f64]) -> BTreeMap<String, f64> {
    let scales = model.hyper_scales(hyper).scales();
    model
        .hyper_names()
        .iter()
        .zip(scales)
        .map(|(n, s)| (n.to_string(), s))
        .collect()
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Empirical-Bayes MAP: maximizes the marginal posterior of `(log σ, hyper)`
/// from `restarts` random starts, then returns the conditional mode of the
/// effects at the best scales.
pub fn map_fit(kind: ModelKind, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let post = posterior(kind, data, cfg)?;
    let model = post.model;
    let problem = MarginalProblem::new(&post);
    let init = Normal::new(0.0, 0.5).expect("valid normal");
    let opts = LbfgsOptions::default();

    let mut best: Option<(lbfgs::LbfgsOutcome, marginal::Conditional)> = None;
    let mut n_converged = 0;
    for r in 0..cfg.restarts {
        let mut rng = chain_rng(cfg.seed, r as u64);
        let theta0: Vec<f64> = (0..problem.dim()).map(|_| init.sample(&mut rng)).collect();
        let objective = |theta: &[f64], g: &mut [f64]| match problem.evaluate(theta) {
            Some(c) => {
                g.copy_from_slice(&c.grad);
                c.marginal
            }
            None => f64::NAN,
        };
        let out = maximize(objective, &theta0, &opts);
        let Some(cond) = problem.evaluate(&out.x) else {
            continue;
        };
        n_converged += out.converged() as usize;
        let better = match &best {
            None => true,
            // converged restarts first, then the higher objective
            Some((b, _)) => (out.converged(), out.value) > (b.converged(), b.value),
        };
        if better {
            best = Some((out, cond));
        }
    }

    let diagnostics_base = FitDiagnostics {
        attempts: vec![cfg.restarts],
        restarts_converged: Some(n_converged),
        ..Default::default()
    };
    let Some((out, cond)) = best else {
        // every restart failed numerically: report the prior mode, unconverged
        let x = vec![0.0; model.dim()];
        let u = model.unpack(&x)?;
        return Ok(FitResult {
            kind,
            method: Method::Map,
            point: model.transform(&u)?.centered(),
            sigma_hat: model.sigma(&u),
            hyper_hat: hyper_map(&model, &u.hyper),
            rhat: None,
            log_posterior_at_point: post.log_density(&x),
            converged: false,
            centering: CENTERING_NOTE.into(),
            diagnostics: diagnostics_base,
            unconstrained: Some(x),
        });
    };
    let u = model.unpack(&cond.x)?;
    Ok(FitResult {
        kind,
        method: Method::Map,
        point: model.transform(&u)?.centered(),
        sigma_hat: model.sigma(&u),
        hyper_hat: hyper_map(&model, &u.hyper),
        rhat: None,
        log_posterior_at_point: cond.log_posterior,
        converged: out.converged(),
        centering: CENTERING_NOTE.into(),
        diagnostics: FitDiagnostics {
            marginal_log_posterior: Some(cond.marginal),
            iterations: Some(out.iterations),
            grad_norm: Some(out.grad_norm),
            ..diagnostics_base
        },
        unconstrained: Some(cond.x),
    })
}

/// Target acceptance rates of successive attempts at one chain.
const ATTEMPT_TARGETS: [f64; 3] = [0.9, 0.95, 0.99];
/// Post-warmup divergence fraction that triggers a retry.
const MAX_DIVERGENT_FRACTION: f64 = 0.01;
/// Half-width of the uniform jitter around the MAP starting point.
const INIT_JITTER: f64 = 0.5;
/// Starting coordinates are clamped to this magnitude before jittering.
const INIT_CLAMP: f64 = 5.0;

struct ChainRun {
    draws: Vec<Vec<f64>>,
    divergences: usize,
    attempts: usize,
    step_size: f64,
    mean_accept: f64,
    max_depth_hits: usize,
    ok: bool,
}

/// Chains start from the MAP optimum plus uniform jitter, or uniformly in
/// (-2, 2) when there is no usable optimum.
fn initial_point(center: Option<&[f64]>, dim: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    match center {
        Some(x) => x
            .iter()
            .map(|v| v.clamp(-INIT_CLAMP, INIT_CLAMP) + rng.random_range(-INIT_JITTER..INIT_JITTER))
            .collect(),
        None => (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn sample_chain(post: &Posterior, cfg: &FitConfig, center: Option<&[f64]>, chain: usize) -> ChainRun {
    let samples = cfg.iterations - cfg.warmup;
    let mut last: Option<ChainRun> = None;
    for (attempt, &target_accept) in ATTEMPT_TARGETS.iter().enumerate() {
        let mut rng = chain_rng(cfg.seed, (chain * 16 + attempt) as u64);
        let init = initial_point(center, post.dim(), &mut rng);
        let opts = NutsOptions {
            target_accept,
            ..Default::default()
        };
        match run_chain(post, init, cfg.warmup, samples, cfg.thin, &opts, &mut rng) {
            Ok(out) => {
                let ok = (out.divergences as f64) <= MAX_DIVERGENT_FRACTION * samples as f64;
                let run = ChainRun {
                    draws: out.draws,
                    divergences: out.divergences,
                    attempts: attempt + 1,
                    step_size: out.step_size,
                    mean_accept: out.mean_accept,
                    max_depth_hits: out.max_depth_hits,
                    ok,
                };
                if ok {
                    return run;
                }
                last = Some(run);
            }
            Err(ChainFailure::BadInit) | Err(ChainFailure::StepSize(_)) => {}
        }
    }
    last.unwrap_or(ChainRun {
        draws: Vec::new(),
        divergences: 0,
        attempts: ATTEMPT_TARGETS.len(),
        step_size: f64::NAN,
        mean_accept: f64::NAN,
        max_depth_hits: 0,
        ok: false,
    })
}

/// Names of the reported quantities, in summary order.
fn summary_names(model: &Model) -> Vec<String> {
    let mut names = vec!["b0".to_string(), "sigma".to_string()];
    names.extend(model.hyper_names().iter().map(|s| s.to_string()));
    for (tag, n) in ["A", "P", "C"].iter().zip(model.effect_lens()) {
        names.extend((1..=n).map(|i| format!("b_{tag}[{i}]")));
    }
    names
}

/// Reported quantities of one draw: centered effects, σ and prior scales.
fn summarize_draw(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let u = model.unpack(x)?;
    let eff = model.transform(&u)?.centered();
    let mut out = vec![eff.intercept, model.sigma(&u)];
    out.extend(model.hyper_scales(&u.hyper).scales().iter().take(model.n_hyper()));
    out.extend(eff.stacked());
    Ok(out)
}

/// NUTS on the full posterior with `chains` independent chains run in
/// parallel; the point estimate is the vector of posterior medians.
///
/// Chains start around the MAP optimum: the random effects posterior can be
/// multimodal, and chains started far apart settle in different modes.
pub fn mcmc_fit(kind: ModelKind, data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let post = posterior(kind, data, cfg)?;
    let model = post.model;
    let start = map_fit(kind, data, cfg)?;
    let center = start
        .unconstrained
        .filter(|x| start.converged && x.iter().all(|v| v.is_finite()));
    let runs: Vec<ChainRun> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| sample_chain(&post, cfg, center.as_deref(), c))
        .collect();

    let names = summary_names(&model);
    let usable: Vec<&ChainRun> = runs.iter().filter(|r| !r.draws.is_empty()).collect();
    let per_draw: Vec<Vec<Vec<f64>>> = usable
        .iter()
        .map(|r| r.draws.iter().map(|x| summarize_draw(&model, x)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let mut diagnostics = FitDiagnostics {
        divergences: runs.iter().map(|r| r.divergences).sum(),
        attempts: runs.iter().map(|r| r.attempts).collect(),
        failed_chains: runs.iter().filter(|r| r.draws.is_empty()).count(),
        step_sizes: runs.iter().map(|r| r.step_size).collect(),
        mean_accept: runs.iter().map(|r| r.mean_accept).collect(),
        max_depth_hits: runs.iter().map(|r| r.max_depth_hits).sum(),
        draws_per_chain: usable.first().map_or(0, |r| r.draws.len()),
        ..Default::default()
    };

    if per_draw.is_empty() {
        let x = vec![0.0; model.dim()];
        let u = model.unpack(&x)?;
        diagnostics.draws_per_chain = 0;
        return Ok(FitResult {
            kind,
            method: Method::Mcmc,
            point: model.transform(&u)?.centered(),
            sigma_hat: f64::NAN,
            hyper_hat: BTreeMap::new(),
            rhat: Some(names.into_iter().map(|n| (n, f64::NAN)).collect()),
            log_posterior_at_point: f64::NAN,
            converged: false,
            centering: CENTERING_NOTE.into(),
            diagnostics,
            unconstrained: None,
        });
    }

    let column = |q: usize| -> Vec<Vec<f64>> {
        per_draw
            .iter()
            .map(|chain| chain.iter().map(|d| d[q]).collect())
            .collect()
    };
    let mut medians = Vec::with_capacity(names.len());
    let mut rhats = BTreeMap::new();
    for (q, name) in names.iter().enumerate() {
        let chains = column(q);
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        medians.push(median(&pooled));
        rhats.insert(name.clone(), rhat(&chains));
    }

    let nh = model.n_hyper();
    let [a, p, _] = model.effect_lens();
    let e0 = 2 + nh;
    let point = EffectSet {
        intercept: medians[0],
        age: medians[e0..e0 + a].to_vec(),
        period: medians[e0 + a..e0 + a + p].to_vec(),
        cohort: medians[e0 + a + p..].to_vec(),
    }
    .centered();
    let hyper_hat = model
        .hyper_names()
        .iter()
        .zip(&medians[2..2 + nh])
        .map(|(n, v)| (n.to_string(), *v))
        .collect();

    let dim = model.dim();
    let u_median: Vec<f64> = (0..dim)
        .map(|i| {
            let vals: Vec<f64> = usable.iter().flat_map(|r| r.draws.iter().map(move |x| x[i])).collect();
            median(&vals)
        })
        .collect();

    let mut result = FitResult {
        kind,
        method: Method::Mcmc,
        point,
        sigma_hat: medians[1],
        hyper_hat,
        rhat: Some(rhats),
        log_posterior_at_point: post.log_density(&u_median),
        converged: false,
        centering: CENTERING_NOTE.into(),
        diagnostics,
        unconstrained: None,
    };
    let all_ok = runs.iter().all(|r| r.ok);
    result.converged = all_ok && result.max_rhat().is_some_and(|r| r < cfg.rhat_threshold);
    Ok(result)
}
