//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr (uncaptured) and the test fails if any criterion fails.
//!
//! The grid criteria (6, 8, 9) share two full MCMC grid runs, so this target
//! takes several minutes on a single core.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use apcsim::cli::{cmd_grid, GridArgs, GridReport};
use apcsim::datagen::{artificial_effects, generate_case, CaseSpec, EffectSet};
use apcsim::grid::{weight_gap, GridSpec};
use apcsim::inference::{mcmc_fit, FitConfig};
use apcsim::models::{
    grad_log_posterior, log_posterior, log_prior, log_prior_decomposed, Hyper, Model, ModelKind,
};
use apcsim::{bias_s, decompose, CenteringIndexes};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, out: &Outcome) {
    let line = format!(
        "criterion {id} [{}] {name}: {}\n",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail
    );
    // Bypass the test harness capture so the lines always show up.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------- oracles

fn centered(n: usize) -> Vec<f64> {
    let mid = (n as f64 + 1.0) / 2.0;
    (1..=n).map(|i| i as f64 - mid).collect()
}

fn sum_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Slope on the centered index and the orthogonal residual.
fn split(b: &[f64]) -> (f64, Vec<f64>) {
    let v = centered(b.len());
    let t = b.iter().zip(&v).map(|(b, v)| b * v).sum::<f64>() / sum_sq(&v);
    (t, b.iter().zip(&v).map(|(b, v)| b - t * v).collect())
}

/// Direct log prior, constants dropped.
fn prior_oracle(kind: ModelKind, e: &EffectSet, sd: [f64; 3]) -> f64 {
    [&e.age, &e.period, &e.cohort]
        .iter()
        .zip(sd)
        .map(|(b, sd)| {
            let n = b.len() as f64;
            match kind {
                ModelKind::RandomWalk => {
                    let ss: f64 = b.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
                    -(n - 1.0) * sd.ln() - ss / (2.0 * sd * sd)
                }
                _ => -n * sd.ln() - sum_sq(b) / (2.0 * sd * sd),
            }
        })
        .sum()
}

fn shifted(e: &EffectSet, s: f64) -> EffectSet {
    let mv = |b: &[f64], sign: f64| -> Vec<f64> {
        b.iter().zip(centered(b.len())).map(|(b, v)| b + sign * s * v).collect()
    };
    EffectSet {
        intercept: e.intercept,
        age: mv(&e.age, 1.0),
        period: mv(&e.period, -1.0),
        cohort: mv(&e.cohort, 1.0),
    }
}

/// f(s) = squared distance between the estimate and the truth moved by s.
fn bias_objective(est: &EffectSet, truth: &EffectSet, s: f64) -> f64 {
    let t = shifted(truth, s);
    [(&est.age, &t.age), (&est.period, &t.period), (&est.cohort, &t.cohort)]
        .iter()
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum()
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-11 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

fn random_effects(rng: &mut ChaCha8Rng, spec: &GridSpec) -> EffectSet {
    let n = Normal::new(0.0, 0.5).unwrap();
    let mut draw = |k: usize| (0..k).map(|_| n.sample(rng)).collect::<Vec<_>>();
    EffectSet {
        intercept: 0.0,
        age: draw(spec.ages),
        period: draw(spec.periods),
        cohort: draw(spec.cohorts),
    }
}

fn case8() -> CaseSpec {
    CaseSpec::canonical(8, 0.1, 0.05).unwrap()
}

// ------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    for i in 2..=30usize {
        for j in 2..=30usize {
            let k = i + j - 1;
            let direct = sum_sq(&centered(k)) / sum_sq(&centered(j)) - (k as f64 - 1.0) / (j as f64 - 1.0);
            let closed = weight_gap(i, j).unwrap();
            worst = worst.max((closed - direct).abs() / direct.abs());
            min_gap = min_gap.min(closed);
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-9 && min_gap > 0.0 && el < Duration::from_secs(1),
        detail: format!("max rel err {worst:.2e}, min gap {min_gap:.4}, {el:?}"),
    }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let spec = GridSpec::default();
    let v = CenteringIndexes::new(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for kind in ModelKind::ALL {
        for _ in 0..100 {
            let e = random_effects(&mut rng, &spec);
            let hyper = match kind {
                ModelKind::RidgeRegression => Hyper::Shared(rng.random_range(0.05..2.0)),
                _ => Hyper::PerFactor([
                    rng.random_range(0.05..2.0),
                    rng.random_range(0.05..2.0),
                    rng.random_range(0.05..2.0),
                ]),
            };
            let s = rng.random_range(-0.5..0.5);
            let direct = prior_oracle(kind, &shifted(&e, s), hyper.scales());
            let lib_direct = log_prior(kind, &shifted(&e, s), &hyper).unwrap();
            let dec = decompose(&e, &v).unwrap();
            let rewritten = log_prior_decomposed(kind, &dec, s, &hyper).unwrap();
            for x in [lib_direct, rewritten] {
                worst = worst.max((x - direct).abs() / direct.abs().max(1e-300));
            }
        }
    }
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-9 && el < Duration::from_secs(1),
        detail: format!("max rel err {worst:.2e} over 300 sets, {el:?}"),
    }
}

fn criterion_3() -> Outcome {
    let spec = GridSpec::default();
    let (_, data) = generate_case(&case8(), &spec, 1234).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for kind in ModelKind::ALL {
        let model = Model::new(kind, &spec);
        for _ in 0..20 {
            let mut x: Vec<f64> = (0..model.dim()).map(|_| n01.sample(&mut rng)).collect();
            x[0] *= 0.5;
            x[1] = rng.random_range(-2.5..0.0);
            for h in &mut x[2..model.std_offset()] {
                *h = rng.random_range(-3.0..0.5);
            }
            let u = model.unpack(&x).unwrap();
            let g = grad_log_posterior(&model, &u, &data).unwrap();
            for d in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fp = log_posterior(&model, &model.unpack(&xp).unwrap(), &data).unwrap();
                let fm = log_posterior(&model, &model.unpack(&xm).unwrap(), &data).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((g[d] - fd).abs() / fd.abs().max(g[d].abs()).max(1.0));
            }
        }
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("max rel err {worst:.2e} over 60 points"),
    }
}

fn criterion_4() -> Outcome {
    let spec = GridSpec::default();
    let v = CenteringIndexes::new(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let est = random_effects(&mut rng, &spec);
        let truth = random_effects(&mut rng, &spec);
        let numeric = golden_min(|s| bias_objective(&est, &truth, s), -10.0, 10.0);
        worst = worst.max((bias_s(&est, &truth, &v) - numeric).abs());
    }
    let truth = artificial_effects(&case8(), &spec);
    let s = bias_s(&shifted(&truth, 0.1), &truth, &v);
    Outcome {
        pass: worst <= 1e-6 && s == 0.1,
        detail: format!("max |closed - numeric| {worst:.2e}; gauge shift s = {s:?}"),
    }
}

fn criterion_5() -> Outcome {
    let beta = artificial_effects(&case8(), &GridSpec::default());
    let age = [0.5, 0.3, 0.3, 0.1, 0.1, -0.1, -0.1, -0.3, -0.3, -0.5];
    let cohort = [
        -0.95, -0.75, -0.75, -0.55, -0.55, -0.35, -0.35, -0.15, -0.15, 0.05, 0.05, 0.25, 0.25, 0.45,
        0.45, 0.65, 0.65, 0.85, 0.85,
    ];
    let r2 = |x: f64| (x * 100.0).round() / 100.0;
    let same = |got: &[f64], want: &[f64]| {
        got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (r2(*g) - w).abs() < 1e-12)
    };
    let pass = same(&beta.age, &age) && same(&beta.period, &[0.0; 10]) && same(&beta.cohort, &cohort);
    Outcome {
        pass,
        detail: format!(
            "age {:?}, cohort ends {:.2}/{:.2}",
            beta.age.iter().map(|x| r2(*x)).collect::<Vec<_>>(),
            beta.cohort[0],
            beta.cohort[18]
        ),
    }
}

/// Published sign of the RE bias per case.
fn re_sign(case_id: usize) -> Option<f64> {
    match case_id {
        3 | 5 | 6 | 8 | 11 | 13 => Some(-1.0),
        7 | 10 => Some(1.0),
        _ => None,
    }
}

fn criterion_6(grid: &GridReport, elapsed: Duration) -> Outcome {
    let spec = GridSpec::default();
    let v = CenteringIndexes::new(&spec);
    let mut failures = Vec::new();
    for r in &grid.reports {
        let case = CaseSpec::canonical(r.case_id, 0.1, 0.05).unwrap();
        let s = bias_s(&r.estimate, &artificial_effects(&case, &spec), &v);
        let tag = format!("case {} {} s={s:+.3}", r.case_id, r.model.code());
        if r.model == ModelKind::RandomWalk && r.case_id <= 9 && s.abs() > 0.04 {
            failures.push(tag.clone());
        }
        if r.model == ModelKind::RandomEffects {
            if let Some(sign) = re_sign(r.case_id) {
                if s.abs() < 0.08 || s.signum() != sign {
                    failures.push(tag.clone());
                }
            }
        }
        if r.case_id == 13 && (s + 0.10).abs() > 0.03 {
            failures.push(tag);
        }
    }
    let pass = failures.is_empty() && grid.reports.len() == 39 && elapsed < Duration::from_secs(15 * 60);
    Outcome {
        pass,
        detail: format!(
            "{} fits in {:.0?}; violations: {}",
            grid.reports.len(),
            elapsed,
            if failures.is_empty() { "none".to_string() } else { failures.join(", ") }
        ),
    }
}

/// Published posterior medians of the case-8 RW cohort effects.
const RW_COHORT_MEDIANS: [f64; 19] = [
    -0.97, -0.74, -0.75, -0.56, -0.55, -0.34, -0.35, -0.17, -0.15, 0.05, 0.04, 0.26, 0.28, 0.47,
    0.46, 0.66, 0.68, 0.81, 0.88,
];

fn criterion_7() -> Outcome {
    let spec = GridSpec::default();
    let (_, data) = generate_case(&case8(), &spec, 1234).unwrap();
    let fit = mcmc_fit(ModelKind::RandomWalk, &data, &FitConfig::default()).unwrap();
    let cohort_err = fit
        .point
        .cohort
        .iter()
        .zip(RW_COHORT_MEDIANS)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let period_max = fit.point.period.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let rhat = fit.max_rhat().unwrap_or(f64::INFINITY);
    Outcome {
        pass: fit.point.cohort.len() == 19 && cohort_err <= 0.07 && period_max <= 0.05 && rhat < 1.05,
        detail: format!(
            "max cohort dev {cohort_err:.3}, max |period| {period_max:.3}, max rhat {rhat:.4}"
        ),
    }
}

fn criterion_8(grid: &GridReport) -> Outcome {
    let spec = GridSpec::default();
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    for r in grid.reports.iter().filter(|r| r.fit_meta.converged) {
        converged += 1;
        let truth = artificial_effects(&CaseSpec::canonical(r.case_id, 0.1, 0.05).unwrap(), &spec);
        for (est, tru) in [
            (&r.estimate.age, &truth.age),
            (&r.estimate.period, &truth.period),
            (&r.estimate.cohort, &truth.cohort),
        ] {
            let (_, a) = split(est);
            let (_, b) = split(tru);
            worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
    }
    Outcome {
        pass: converged > 0 && worst <= 0.05,
        detail: format!("{converged}/{} fits converged, max nonlinear gap {worst:.4}", grid.reports.len()),
    }
}

fn criterion_9(runs: &[(Vec<u8>, Vec<u8>)]) -> Outcome {
    let pass = runs.len() == 2 && runs[0] == runs[1] && !runs[0].0.is_empty();
    Outcome {
        pass,
        detail: format!(
            "json {} bytes, csv {} bytes, identical: {}",
            runs[0].0.len(),
            runs[0].1.len(),
            pass
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut all = true;
    let mut run = |id: u32, name: &str, out: Outcome| {
        report(id, name, &out);
        all &= out.pass;
    };
    run(1, "weight gap closed form", criterion_1());
    run(2, "prior rewrite equivalence", criterion_2());
    run(3, "gradient vs finite differences", criterion_3());
    run(4, "bias closed form", criterion_4());
    run(5, "case-8 artificial parameters", criterion_5());
    run(7, "case-8 RW posterior summary", criterion_7());

    // Same arguments both times (the output path is part of the manifest),
    // bytes captured after each run.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.json");
    let mut outputs = Vec::new();
    let mut grid = None;
    let mut elapsed = Duration::ZERO;
    for _ in 0..2 {
        let t = Instant::now();
        let report = cmd_grid(&GridArgs::defaults(FitConfig::default(), out.clone())).unwrap();
        if grid.is_none() {
            elapsed = t.elapsed();
            grid = Some(report);
        }
        outputs.push((
            std::fs::read(&out).unwrap(),
            std::fs::read(out.with_extension("csv")).unwrap(),
        ));
    }
    let grid = grid.unwrap();
    run(6, "bias grid qualitative reproduction", criterion_6(&grid, elapsed));
    run(8, "nonlinear part recovery", criterion_8(&grid));
    run(9, "grid determinism", criterion_9(&outputs));
    assert!(all, "one or more acceptance criteria failed");
}
