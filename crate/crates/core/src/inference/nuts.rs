//! No-U-turn Hamiltonian sampler with multinomial trajectory sampling,
//! a diagonal metric and windowed warmup adaptation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A differentiable log density over `R^d`.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Returns the log density and writes its gradient.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for crate::models::Posterior {
    fn dim(&self) -> usize {
        crate::models::Posterior::dim(self)
    }
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        crate::models::Posterior::log_density_grad(self, x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Diagonal,
    Dense,
}

#[derive(Debug, Clone, Copy)]
pub struct NutsOptions {
    pub max_depth: usize,
    pub target_accept: f64,
    /// Energy error beyond which a trajectory is declared divergent.
    pub max_delta_h: f64,
    pub metric: MetricKind,
}

impl Default for NutsOptions {
    fn default() -> Self {
        NutsOptions {
            max_depth: 10,
            target_accept: 0.9,
            max_delta_h: 1000.0,
            metric: MetricKind::Diagonal,
        }
    }
}

/// Inverse mass matrix: the (estimated) posterior covariance.
#[derive(Debug, Clone)]
enum Metric {
    Diagonal(Vec<f64>),
    /// Row-major covariance with its lower Cholesky factor.
    Dense { cov: Vec<f64>, chol: Vec<f64>, d: usize },
}

impl Metric {
    fn unit(kind: MetricKind, d: usize) -> Self {
        match kind {
            MetricKind::Diagonal => Metric::Diagonal(vec![1.0; d]),
            MetricKind::Dense => {
                let mut eye = vec![0.0; d * d];
                (0..d).for_each(|i| eye[i * d + i] = 1.0);
                Metric::Dense {
                    cov: eye.clone(),
                    chol: eye,
                    d,
                }
            }
        }
    }

    fn dense(cov: Vec<f64>, d: usize) -> Option<Self> {
        let m = DMatrix::from_row_slice(d, d, &cov);
        let l = m.cholesky()?.l();
        let chol = (0..d * d).map(|k| l[(k / d, k % d)]).collect();
        Some(Metric::Dense { cov, chol, d })
    }

    /// `M⁻¹ p`.
    fn sharp(&self, p: &[f64], out: &mut [f64]) {
        match self {
            Metric::Diagonal(m) => out.iter_mut().zip(p.iter().zip(m)).for_each(|(o, (p, m))| *o = p * m),
            Metric::Dense { cov, d, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = cov[i * d..(i + 1) * d].iter().zip(p).map(|(c, p)| c * p).sum();
                }
            }
        }
    }

    /// Draws `p ~ Normal(0, M)` from standard normals `z` (overwritten).
    fn momentum(&self, z: &mut [f64]) {
        match self {
            Metric::Diagonal(m) => z.iter_mut().zip(m).for_each(|(z, m)| *z /= m.sqrt()),
            Metric::Dense { chol, d, .. } => {
                // back-substitute Lᵀ p = z
                let d = *d;
                for i in (0..d).rev() {
                    let mut s = z[i];
                    for k in i + 1..d {
                        s -= chol[k * d + i] * z[k];
                    }
                    z[i] = s / chol[i * d + i];
                }
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        match self {
            Metric::Diagonal(m) => m.clone(),
            Metric::Dense { cov, d, .. } => (0..*d).map(|i| cov[i * d + i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Kept post-warmup draws.
    pub draws: Vec<Vec<f64>>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    /// Diagonal of the adapted inverse metric.
    pub inv_metric: Vec<f64>,
    pub mean_accept: f64,
    pub max_depth_hits: usize,
    pub leapfrogs: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChainFailure {
    #[error("log density is not finite at the initial point")]
    BadInit,
    #[error("step size search failed ({0})")]
    StepSize(f64),
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct Hamiltonian<'a, T: LogDensity> {
    target: &'a T,
    metric: Metric,
    leapfrogs: u64,
    scratch: Vec<f64>,
}

impl<T: LogDensity> Hamiltonian<'_, T> {
    fn kinetic(&mut self, p: &[f64]) -> f64 {
        self.metric.sharp(p, &mut self.scratch);
        0.5 * p.iter().zip(&self.scratch).map(|(p, v)| p * v).sum::<f64>()
    }

    fn energy(&mut self, z: &Point) -> f64 {
        let h = -z.lp + self.kinetic(&z.p);
        if h.is_finite() {
            h
        } else {
            f64::INFINITY
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        self.metric.sharp(p, &mut out);
        out
    }

    fn sample_momentum<R: Rng>(&self, z: &mut Point, rng: &mut R) {
        z.p.iter_mut().for_each(|p| *p = StandardNormal.sample(rng));
        self.metric.momentum(&mut z.p);
    }

    fn leapfrog(&mut self, z: &mut Point, eps: f64) {
        self.leapfrogs += 1;
        let half = 0.5 * eps;
        z.p.iter_mut().zip(&z.grad).for_each(|(p, g)| *p += half * g);
        self.metric.sharp(&z.p, &mut self.scratch);
        z.q.iter_mut().zip(&self.scratch).for_each(|(q, v)| *q += eps * v);
        z.lp = self.target.log_density_grad(&z.q, &mut z.grad);
        if !z.lp.is_finite() || !z.grad.iter().all(|g| g.is_finite()) {
            z.lp = f64::NEG_INFINITY;
            return;
        }
        z.p.iter_mut().zip(&z.grad).for_each(|(p, g)| *p += half * g);
    }
}

/// Momentum bookkeeping of a contiguous trajectory segment, in the order
/// it was generated.
struct Span {
    rho: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    sharp_beg: Vec<f64>,
    sharp_end: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rho = rho_a + rho_b` never needs to be materialized for the test.
fn no_u_turn(sharp_a: &[f64], sharp_b: &[f64], rho_a: &[f64], rho_b: &[f64]) -> bool {
    dot(sharp_a, rho_a) + dot(sharp_a, rho_b) > 0.0 && dot(sharp_b, rho_a) + dot(sharp_b, rho_b) > 0.0
}

/// Generalized U-turn test on `first ++ second`, plus the two checks that
/// straddle the join.
fn span_persists(first: &Span, second: &Span) -> bool {
    no_u_turn(&first.sharp_beg, &second.sharp_end, &first.rho, &second.rho)
        && no_u_turn(&first.sharp_beg, &second.sharp_beg, &first.rho, &second.p_beg)
        && no_u_turn(&first.sharp_end, &second.sharp_end, &second.rho, &first.p_end)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Subtree {
    span: Span,
    proposal: Point,
    log_weight: f64,
}

struct TreeStats {
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
}

/// Builds a subtree of `2^depth` leapfrog steps continuing from `edge`,
/// which is advanced to the new trajectory end. `None` marks an invalid
/// subtree (divergence or internal U-turn).
#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogDensity, R: Rng>(
    ham: &mut Hamiltonian<'_, T>,
    edge: &mut Point,
    depth: usize,
    eps: f64,
    h0: f64,
    max_delta_h: f64,
    stats: &mut TreeStats,
    rng: &mut R,
) -> Option<Subtree> {
    if depth == 0 {
        ham.leapfrog(edge, eps);
        stats.n_leapfrog += 1;
        let h = ham.energy(edge);
        if h - h0 > max_delta_h || !h.is_finite() {
            stats.divergent = true;
            return None;
        }
        stats.sum_accept += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
        let sharp = ham.p_sharp(&edge.p);
        return Some(Subtree {
            span: Span {
                rho: edge.p.clone(),
                p_beg: edge.p.clone(),
                p_end: edge.p.clone(),
                sharp_beg: sharp.clone(),
                sharp_end: sharp,
            },
            proposal: edge.clone(),
            log_weight: h0 - h,
        });
    }
    let first = build_tree(ham, edge, depth - 1, eps, h0, max_delta_h, stats, rng)?;
    let second = build_tree(ham, edge, depth - 1, eps, h0, max_delta_h, stats, rng)?;
    let log_weight = log_sum_exp(first.log_weight, second.log_weight);
    if !span_persists(&first.span, &second.span) {
        return None;
    }
    let mut rho = first.span.rho;
    rho.iter_mut().zip(&second.span.rho).for_each(|(a, b)| *a += b);
    let take_second = rng.random::<f64>() < (second.log_weight - log_weight).exp();
    let proposal = if take_second { second.proposal } else { first.proposal };
    Some(Subtree {
        span: Span {
            rho,
            p_beg: first.span.p_beg,
            p_end: second.span.p_end,
            sharp_beg: first.span.sharp_beg,
            sharp_end: second.span.sharp_end,
        },
        proposal,
        log_weight,
    })
}

struct Transition {
    accept: f64,
    divergent: bool,
    depth: usize,
}

fn transition<T: LogDensity, R: Rng>(
    ham: &mut Hamiltonian<'_, T>,
    z: &mut Point,
    eps: f64,
    opts: &NutsOptions,
    rng: &mut R,
) -> Transition {
    ham.sample_momentum(z, rng);
    let h0 = ham.energy(z);
    let sharp = ham.p_sharp(&z.p);
    // whole trajectory, backward end to forward end
    let mut tree = Span {
        rho: z.p.clone(),
        p_beg: z.p.clone(),
        p_end: z.p.clone(),
        sharp_beg: sharp.clone(),
        sharp_end: sharp,
    };
    let mut bck = z.clone();
    let mut fwd = z.clone();
    let mut sample = z.clone();
    let mut log_weight = 0.0;
    let mut stats = TreeStats {
        sum_accept: 0.0,
        n_leapfrog: 0,
        divergent: false,
    };
    let mut depth = 0;
    while depth < opts.max_depth {
        let forward = rng.random::<f64>() < 0.5;
        let sub = if forward {
            build_tree(ham, &mut fwd, depth, eps, h0, opts.max_delta_h, &mut stats, rng)
        } else {
            build_tree(ham, &mut bck, depth, -eps, h0, opts.max_delta_h, &mut stats, rng)
        };
        let Some(sub) = sub else { break };
        depth += 1;
        if sub.log_weight > log_weight || rng.random::<f64>() < (sub.log_weight - log_weight).exp() {
            sample = sub.proposal;
        }
        log_weight = log_sum_exp(log_weight, sub.log_weight);
        if !forward {
            // view the old tree from its forward end so it joins `sub` at the back
            std::mem::swap(&mut tree.p_beg, &mut tree.p_end);
            std::mem::swap(&mut tree.sharp_beg, &mut tree.sharp_end);
        }
        let persist = span_persists(&tree, &sub.span);
        tree.p_end = sub.span.p_end;
        tree.sharp_end = sub.span.sharp_end;
        tree.rho.iter_mut().zip(&sub.span.rho).for_each(|(a, b)| *a += b);
        if !forward {
            std::mem::swap(&mut tree.p_beg, &mut tree.p_end);
            std::mem::swap(&mut tree.sharp_beg, &mut tree.sharp_end);
        }
        if !persist {
            break;
        }
    }
    let accept = if stats.n_leapfrog > 0 {
        stats.sum_accept / stats.n_leapfrog as f64
    } else {
        0.0
    };
    *z = sample;
    Transition {
        accept,
        divergent: stats.divergent,
        depth,
    }
}

/// Doubling/halving search for a step size with one-step acceptance near 0.8.
fn init_step_size<T: LogDensity, R: Rng>(
    ham: &mut Hamiltonian<'_, T>,
    z: &Point,
    mut eps: f64,
    rng: &mut R,
) -> Result<f64, ChainFailure> {
    let target = 0.8f64.ln();
    let trial = |eps: f64, rng: &mut R, ham: &mut Hamiltonian<'_, T>| {
        let mut w = z.clone();
        ham.sample_momentum(&mut w, rng);
        let h0 = ham.energy(&w);
        ham.leapfrog(&mut w, eps);
        let dh = h0 - ham.energy(&w);
        if dh.is_nan() {
            f64::NEG_INFINITY
        } else {
            dh
        }
    };
    let direction = if trial(eps, rng, ham) > target { 1 } else { -1 };
    for _ in 0..200 {
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(eps > 1e-300 && eps < 1e7) {
            return Err(ChainFailure::StepSize(eps));
        }
        let dh = trial(eps, rng, ham);
        if (direction == 1 && !(dh > target)) || (direction == -1 && !(dh < target)) {
            return Ok(eps);
        }
    }
    Err(ChainFailure::StepSize(eps))
}

/// Nesterov dual averaging of log step size.
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows that
/// estimate the metric, and a fast terminal buffer.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_end: usize,
    counter: usize,
    adapt_metric: bool,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        let adapt_metric = warmup >= 20;
        if init_buffer + term_buffer + base > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - (init_buffer + term_buffer);
        }
        Windows {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_end: (init_buffer + base).saturating_sub(1),
            counter: 0,
            adapt_metric,
        }
    }

    fn in_window(&self) -> bool {
        self.adapt_metric
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn at_window_end(&self) -> bool {
        self.adapt_metric && self.counter == self.next_end && self.counter != self.warmup
    }

    fn advance_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_end = self.counter + self.window_size;
        if self.next_end != last && self.next_end + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_end = last;
        }
    }
}

/// Running mean and (co)variance (Welford).
struct Welford {
    n: f64,
    dense: bool,
    mean: Vec<f64>,
    /// Row-major co-moment matrix, or just its diagonal.
    m2: Vec<f64>,
    delta: Vec<f64>,
}

impl Welford {
    fn new(d: usize, kind: MetricKind) -> Self {
        let dense = kind == MetricKind::Dense;
        Welford {
            n: 0.0,
            dense,
            mean: vec![0.0; d],
            m2: vec![0.0; if dense { d * d } else { d }],
            delta: vec![0.0; d],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        let d = x.len();
        for i in 0..d {
            self.delta[i] = x[i] - self.mean[i];
            self.mean[i] += self.delta[i] / self.n;
        }
        if self.dense {
            for i in 0..d {
                let after = x[i] - self.mean[i];
                for j in 0..d {
                    self.m2[i * d + j] += after * self.delta[j];
                }
            }
        } else {
            for i in 0..d {
                self.m2[i] += self.delta[i] * (x[i] - self.mean[i]);
            }
        }
    }

    /// Sample (co)variance shrunk toward `1e-3 I`.
    fn regularized_metric(&self) -> Option<Metric> {
        let n = self.n;
        let d = self.mean.len();
        let w = n / (n + 5.0);
        let shrink = 1e-3 * (5.0 / (n + 5.0));
        if self.dense {
            let mut cov: Vec<f64> = self.m2.iter().map(|s| w * s / (n - 1.0)).collect();
            // symmetrize away rounding
            for i in 0..d {
                for j in 0..i {
                    let avg = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                    cov[i * d + j] = avg;
                    cov[j * d + i] = avg;
                }
                cov[i * d + i] += shrink;
            }
            Metric::dense(cov, d)
        } else {
            Some(Metric::Diagonal(
                self.m2.iter().map(|s| w * (s / (n - 1.0)) + shrink).collect(),
            ))
        }
    }
}

/// Runs one chain: `warmup` adaptive iterations, then `samples` iterations
/// of which every `thin`-th is kept.
pub fn run_chain<T: LogDensity, R: Rng>(
    target: &T,
    init: Vec<f64>,
    warmup: usize,
    samples: usize,
    thin: usize,
    opts: &NutsOptions,
    rng: &mut R,
) -> Result<ChainOutput, ChainFailure> {
    let d = target.dim();
    let mut ham = Hamiltonian {
        target,
        metric: Metric::unit(opts.metric, d),
        leapfrogs: 0,
        scratch: vec![0.0; d],
    };
    let mut grad = vec![0.0; d];
    let lp = target.log_density_grad(&init, &mut grad);
    if !lp.is_finite() || !grad.iter().all(|g| g.is_finite()) {
        return Err(ChainFailure::BadInit);
    }
    let mut z = Point {
        q: init,
        p: vec![0.0; d],
        grad,
        lp,
    };

    let mut eps = init_step_size(&mut ham, &z, 1.0, rng)?;
    let mut da = DualAveraging::new(eps, opts.target_accept);
    let mut windows = Windows::new(warmup);
    let mut welford = Welford::new(d, opts.metric);
    let mut warmup_divergences = 0;

    for _ in 0..warmup {
        let t = transition(&mut ham, &mut z, eps, opts, rng);
        warmup_divergences += t.divergent as usize;
        eps = da.update(t.accept);
        if windows.in_window() {
            welford.add(&z.q);
        }
        if windows.at_window_end() {
            windows.advance_window();
            if let Some(m) = welford.regularized_metric() {
                ham.metric = m;
            }
            welford = Welford::new(d, opts.metric);
            eps = init_step_size(&mut ham, &z, eps, rng)?;
            da = DualAveraging::new(eps, opts.target_accept);
        }
        windows.counter += 1;
    }
    if warmup > 0 {
        eps = da.final_step();
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ChainFailure::StepSize(eps));
    }

    let mut draws = Vec::with_capacity(samples / thin + 1);
    let mut divergences = 0;
    let mut sum_accept = 0.0;
    let mut max_depth_hits = 0;
    for it in 0..samples {
        let t = transition(&mut ham, &mut z, eps, opts, rng);
        divergences += t.divergent as usize;
        sum_accept += t.accept;
        max_depth_hits += (t.depth >= opts.max_depth) as usize;
        if (it + 1) % thin == 0 {
            draws.push(z.q.clone());
        }
    }
    Ok(ChainOutput {
        draws,
        divergences,
        warmup_divergences,
        step_size: eps,
        inv_metric: ham.metric.diagonal(),
        mean_accept: if samples > 0 { sum_accept / samples as f64 } else { f64::NAN },
        max_depth_hits,
        leapfrogs: ham.leapfrogs,
    })
}
