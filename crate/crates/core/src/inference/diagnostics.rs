//! Convergence diagnostics and draw summaries.

/// Split-chain potential scale reduction factor.
///
/// Each chain is cut into two halves (a trailing odd draw is dropped) and the
/// classic between/within variance ratio is computed over the halves.
/// Returns `+∞` when the within-half variance is zero and `NaN` when there
/// are no chains or fewer than four draws per chain.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let min_len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.is_empty() || min_len < 4 {
        return f64::NAN;
    }
    let half = min_len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[half..2 * half]);
    }
    let n = half as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let within = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let between = n * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if within <= 0.0 {
        return f64::INFINITY;
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Median by sorting a copy; the mean of the two central values for even length.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
