//! Evaluation metrics: total variation distance, convergence series,
//! visibility histograms, and sandwich-bound verification over traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::EdgeDistribution;
use crate::optimizer::expected_visibility;
use crate::simulator::Trace;
use crate::visibility::VisibilityMap;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("support mismatch: {0} vs {1} entries")]
    SupportMismatch(usize, usize),
    #[error("distribution does not sum to 1 (got {0})")]
    NotNormalized(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Total variation distance ½ Σ |μ(x) − ν(x)| between two distributions on
/// the same index space.
pub fn total_variation(mu: &[f64], nu: &[f64]) -> Result<f64, MetricsError> {
    if mu.len() != nu.len() {
        return Err(MetricsError::SupportMismatch(mu.len(), nu.len()));
    }
    for dist in [mu, nu] {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MetricsError::NotNormalized(total));
        }
    }
    let tv = 0.5 * mu.iter().zip(nu).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    /// (step, tv) pairs with strictly increasing steps.
    pub checkpoints: Vec<(usize, f64)>,
}

/// TV between the empirical edge distribution of the first t steps and
/// `target`, checkpointed on a geometric stride (default factor 1.1). The
/// final step is always included.
pub fn convergence_series(
    trace: &Trace,
    target: &EdgeDistribution,
    stride_factor: f64,
) -> Result<ConvergenceSeries, MetricsError> {
    if stride_factor <= 1.0 {
        return Err(MetricsError::InvalidArgument(format!(
            "stride factor must exceed 1 (got {stride_factor})"
        )));
    }
    if trace.step_log.len() != trace.n_agents * trace.steps {
        return Err(MetricsError::InvalidArgument("trace step log is incomplete".into()));
    }
    let mut counts = vec![0u64; target.0.len()];
    let mut freqs = vec![0.0; target.0.len()];
    let mut checkpoints = Vec::new();
    let mut next = 1usize;
    for step in 0..trace.steps {
        for a in 0..trace.n_agents {
            let e = trace.step_log[step * trace.n_agents + a];
            if e.index() >= counts.len() {
                return Err(MetricsError::SupportMismatch(counts.len(), e.index() + 1));
            }
            counts[e.index()] += 1;
        }
        let t = step + 1;
        if t == next || t == trace.steps {
            let total = (t * trace.n_agents) as f64;
            for (f, &c) in freqs.iter_mut().zip(&counts) {
                *f = c as f64 / total;
            }
            checkpoints.push((t, total_variation(&freqs, &target.0)?));
            while next <= t {
                next = ((next as f64 * stride_factor).ceil() as usize).max(next + 1);
            }
        }
    }
    Ok(ConvergenceSeries { checkpoints })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisibilityHistogram {
    pub bins: Vec<HistogramBin>,
}

/// Histogram of per-node visibility counts, aggregated across runs as mean
/// plus a min/max band. Bins span [0, max observed count] uniformly.
pub fn visibility_histogram(
    traces: &[Trace],
    bins: usize,
) -> Result<VisibilityHistogram, MetricsError> {
    if traces.is_empty() || bins == 0 {
        return Err(MetricsError::InvalidArgument("need at least one trace and one bin".into()));
    }
    let top = traces
        .iter()
        .flat_map(|t| t.node_visibility_counts.iter())
        .fold(0.0f64, |m, &c| m.max(c));
    let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
    let per_run: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let mut h = vec![0.0; bins];
            for &c in &t.node_visibility_counts {
                let b = ((c / width) as usize).min(bins - 1);
                h[b] += 1.0;
            }
            h
        })
        .collect();
    let runs = per_run.len() as f64;
    let bins_out = (0..bins)
        .map(|b| {
            let vals = per_run.iter().map(|h| h[b]);
            HistogramBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                mean: vals.clone().sum::<f64>() / runs,
                min: vals.clone().fold(f64::INFINITY, f64::min),
                max: vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(VisibilityHistogram { bins: bins_out })
}

/// Spread summary used for the histogram-shape comparison: interquartile
/// range over median of per-node visibility counts.
pub fn iqr_over_median(counts: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = counts.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
    let q = |f: f64| -> f64 {
        let idx = f * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (idx - lo as f64)
    };
    let median = q(0.5);
    if median == 0.0 {
        return f64::INFINITY;
    }
    (q(0.75) - q(0.25)) / median
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeBoundReport {
    pub node: usize,
    /// T Σ_e P(e) V_s(e)(w)
    pub lower: f64,
    pub observed: f64,
    /// nT Σ_e P(e) V_s(e)(w)
    pub upper: f64,
    /// accumulated pairwise product term Σ_{i<j} Σ_t 𝒳ⁱ𝒳ʲ
    pub cross_term: f64,
    /// 4σ binomial band applied on both sides
    pub band: f64,
    /// nodes with expected union counts below 10 are not judged
    pub excluded: bool,
    pub violation: bool,
}

/// Evaluates the sandwich inequalities and the cross-term identity per node
/// against the empirical edge distribution of the trace.
pub fn theorem1_bound_report(trace: &Trace, vis: &VisibilityMap) -> Vec<NodeBoundReport> {
    let p = crate::simulator::empirical_edge_distribution(trace);
    let a = expected_visibility(&p, vis);
    let n = trace.n_agents as f64;
    let steps = trace.steps as f64;
    a.iter()
        .enumerate()
        .map(|(w, &q)| {
            let lower = steps * q;
            let upper = n * steps * q;
            let observed = trace.node_visibility_counts[w];
            let cross_term = trace.cross_term_counts[w];
            // band on the per-agent Bernoulli sum (n·steps trials at rate q)
            let band = 4.0 * (n * steps * q * (1.0 - q).max(0.0)).sqrt();
            let excluded = upper < 10.0;
            // sandwich: T·ΣPV ≤ observed ≤ nT·ΣPV, plus the inclusion-
            // exclusion lower bound nT·ΣPV ≤ observed + cross terms
            let violation = !excluded
                && (observed < lower - band
                    || observed > upper + band
                    || observed + cross_term < upper - band);
            NodeBoundReport { node: w, lower, observed, upper, cross_term, band, excluded, violation }
        })
        .collect()
}
