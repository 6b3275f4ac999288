//! Significance machinery: pooled-variance two-sample t-test and the
//! Benjamini-Hochberg step-up procedure over the resulting p-values.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    /// Set when the pooled variance was zero and the p-value was pinned.
    pub degenerate: bool,
}

/// Student's t-test with pooled variance, df = n_a + n_b - 2, two-sided
/// p-value. Zero pooled variance yields t = 0, p = 1 for equal means and
/// p = 0 (flagged) for distinct means.
pub fn two_sample_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<TTestResult> {
    let (n_a, n_b) = (sample_a.len(), sample_b.len());
    if n_a < 2 || n_b < 2 {
        return Err(Error::contract(format!(
            "t-test needs both samples of size >= 2, got {n_a} and {n_b}"
        )));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (mean_a, mean_b) = (mean(sample_a), mean(sample_b));
    let ss = |s: &[f64], m: f64| s.iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
    let df = (n_a + n_b - 2) as f64;
    let pooled_var = (ss(sample_a, mean_a) + ss(sample_b, mean_b)) / df;

    if pooled_var == 0.0 {
        return Ok(if mean_a == mean_b {
            TTestResult { t: 0.0, p: 1.0, degenerate: false }
        } else {
            TTestResult {
                t: if mean_a > mean_b { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                degenerate: true,
            }
        });
    }

    let se = (pooled_var * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    let t = (mean_a - mean_b) / se;
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::contract(format!("t distribution: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTestResult {
        t,
        p,
        degenerate: false,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BhOutcome {
    pub q: f64,
    /// Largest rank k (1-based) with p_(k) <= k q / n; 0 when none qualifies.
    pub cutoff_rank: usize,
    /// p_(k*), the rejection cutoff; 0 when nothing is rejected.
    pub cutoff_p: f64,
    /// Reject flag per input hypothesis, in input order.
    pub reject: Vec<bool>,
}

/// Benjamini-Hochberg step-up: sort p ascending, find the last rank k with
/// p_(k) <= k q / n, and reject every hypothesis with p <= p_(k).
pub fn bh_correction(p_values: &[f64], q: f64) -> Result<BhOutcome> {
    if !(0.0 < q && q < 1.0) {
        return Err(Error::contract(format!("Q must lie in (0, 1), got {q}")));
    }
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!("p-value {bad} outside [0, 1]")));
    }
    let n = p_values.len();
    if n == 0 {
        return Err(Error::contract("empty p-value list"));
    }

    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cutoff_rank = 0;
    for (i, &p) in sorted.iter().enumerate() {
        let rank = i + 1;
        if p <= rank as f64 * q / n as f64 {
            cutoff_rank = rank;
        }
    }
    let cutoff_p = if cutoff_rank == 0 { 0.0 } else { sorted[cutoff_rank - 1] };
    let reject = p_values
        .iter()
        .map(|&p| cutoff_rank > 0 && p <= cutoff_p)
        .collect();
    Ok(BhOutcome {
        q,
        cutoff_rank,
        cutoff_p,
        reject,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonResult {
    pub name: String,
    pub t: f64,
    pub p: f64,
    pub reject: bool,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SignificanceReport {
    pub q: f64,
    pub cutoff_rank: usize,
    pub cutoff_p: f64,
    pub comparisons: Vec<ComparisonResult>,
}

/// t-test the reference sample against every named comparison, then apply
/// BH correction across the resulting p-values.
pub fn significance_report(
    reference: &[f64],
    comparisons: &[(String, Vec<f64>)],
    q: f64,
) -> Result<SignificanceReport> {
    if comparisons.is_empty() {
        return Err(Error::contract("no comparisons supplied"));
    }
    let tests: Vec<TTestResult> = comparisons
        .iter()
        .map(|(_, sample)| two_sample_t_test(reference, sample))
        .collect::<Result<_>>()?;
    let p_values: Vec<f64> = tests.iter().map(|t| t.p).collect();
    let bh = bh_correction(&p_values, q)?;
    let results = comparisons
        .iter()
        .zip(&tests)
        .zip(&bh.reject)
        .map(|(((name, _), test), &reject)| ComparisonResult {
            name: name.clone(),
            t: test.t,
            p: test.p,
            reject,
            degenerate: test.degenerate,
        })
        .collect();
    Ok(SignificanceReport {
        q,
        cutoff_rank: bh.cutoff_rank,
        cutoff_p: bh.cutoff_p,
        comparisons: results,
    })
}
