//! Small numeric helpers shared by the fitting, balance and estimation code.

/// Logistic function, evaluated without overflow for large |eta|.
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let t = eta.exp();
        t / (1.0 + t)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ln(1 + e^x)
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the n - 1 denominator; zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(values: &[f64]) -> f64 {
    sample_variance(values).sqrt()
}

/// Weighted mean computed around a shift so that a constant input returns
/// exactly that constant. Returns `None` when the total weight is zero.
pub fn weighted_mean<I>(pairs: I) -> Option<f64>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut shift = None;
    let mut total = 0.0;
    let mut acc = 0.0;
    for (value, weight) in pairs {
        let s = *shift.get_or_insert(value);
        total += weight;
        acc += weight * (value - s);
    }
    match shift {
        Some(s) if total > 0.0 => Some(s + acc / total),
        _ => None,
    }
}

/// Weighted quantile with midpoint plotting positions: a unit of mass `w_i`
/// sits at cumulative position `C_i - w_i / 2`, and quantiles between
/// positions are linearly interpolated. Zero-weight entries are ignored.
pub fn weighted_quantile(values: &[f64], weights: &[f64], prob: f64) -> Option<f64> {
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, w)| (*v, *w))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut cum = 0.0;
    let positions: Vec<f64> = pairs
        .iter()
        .map(|(_, w)| {
            let pos = (cum + w / 2.0) / total;
            cum += w;
            pos
        })
        .collect();
    if prob <= positions[0] {
        return Some(pairs[0].0);
    }
    let last = pairs.len() - 1;
    if prob >= positions[last] {
        return Some(pairs[last].0);
    }
    let k = positions.partition_point(|p| *p <= prob);
    let (p0, p1) = (positions[k - 1], positions[k]);
    let (v0, v1) = (pairs[k - 1].0, pairs[k].0);
    if p1 <= p0 {
        return Some(v1);
    }
    Some(v0 + (prob - p0) / (p1 - p0) * (v1 - v0))
}

/// Bins formed from empirical quantiles of a score in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBins {
    /// Bin edges; the first is 0 and the last is 1. Bin `j` is `(edges[j], edges[j+1]]`.
    pub edges: Vec<f64>,
    /// Bin index per input value.
    pub assignment: Vec<usize>,
    /// True when tied quantiles forced fewer bins than requested.
    pub merged: bool,
}

impl QuantileBins {
    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }
}

pub fn quantile_bins(scores: &[f64], n_bins: usize) -> QuantileBins {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let max = sorted.last().copied().unwrap_or(1.0);
    let mut cuts: Vec<f64> = Vec::with_capacity(n_bins.saturating_sub(1));
    for k in 1..n_bins {
        // inverse empirical CDF at k / n_bins
        let idx = ((k * n).div_ceil(n_bins)).max(1) - 1;
        let c = sorted[idx.min(n.saturating_sub(1))];
        if c < max && cuts.last().is_none_or(|last| c > *last) {
            cuts.push(c);
        }
    }
    let merged = cuts.len() + 1 < n_bins;
    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(0.0);
    edges.extend_from_slice(&cuts);
    edges.push(1.0);
    let assignment = scores
        .iter()
        .map(|s| cuts.partition_point(|c| c < s))
        .collect();
    QuantileBins {
        edges,
        assignment,
        merged,
    }
}
