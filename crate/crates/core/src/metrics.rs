//! Agreement statistics between registration estimates: frame and angle
//! differences, Lin's concordance correlation, Spearman's rank correlation,
//! the Wilcoxon signed-rank test and the Williams index with a bootstrap
//! confidence interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("ranks have zero variance")]
    ZeroVariance,
    #[error("empty input")]
    EmptyInput,
    #[error("{0} non-zero differences are too many to enumerate")]
    TooLargeForExact(usize),
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn frame_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>, MetricsError> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect())
}

/// Circular absolute difference in `[0, 180]` degrees.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

pub fn angle_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>, MetricsError> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| angle_difference(x, y)).collect())
}

/// Signed circular difference `b - a` in `(-180, 180]`.
fn signed_angle(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Moves each `b` onto the branch nearest its `a`, so that 359 vs 1 compares as 359 vs 361.
pub fn align_angles(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| x + signed_angle(x, y)).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population moments: (mean x, mean y, var x, var y, cov).
fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let n = x.len() as f64;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    (mx, my, vx / n, vy / n, cxy / n)
}

/// Lin's concordance correlation coefficient with population moments.
/// Two identical constant series score 1.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    same_len(x, y)?;
    if x.len() < 2 {
        return Err(MetricsError::TooFewSamples { got: x.len(), min: 2 });
    }
    let (mx, my, vx, vy, cxy) = moments(x, y);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cxy / denom)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    same_len(x, y)?;
    if x.len() < 2 {
        return Err(MetricsError::TooFewSamples { got: x.len(), min: 2 });
    }
    let (_, _, vx, vy, cxy) = moments(x, y);
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((cxy / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && x[order[end]] == x[order[k]] {
            end += 1;
        }
        let rank = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = rank;
        }
        k = end;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    same_len(x, y)?;
    if x.len() < 2 {
        return Err(MetricsError::TooFewSamples { got: x.len(), min: 2 });
    }
    pearson(&midranks(x), &midranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
    /// Every difference was zero; `p_value` is 1.
    pub all_zero: bool,
}

/// Largest sample size tested by full enumeration of sign assignments.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Largest sample size [`wilcoxon_exact`] accepts.
pub const WILCOXON_ENUMERATION_LIMIT: usize = 22;

/// Non-zero differences and their doubled midranks (integers).
fn signed_ranks(d1: &[f64], d2: &[f64]) -> Result<(Vec<f64>, Vec<u64>), MetricsError> {
    same_len(d1, d2)?;
    if d1.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let diffs: Vec<f64> = d1
        .iter()
        .zip(d2)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let doubled = midranks(&abs).into_iter().map(|r| (2.0 * r).round() as u64).collect();
    Ok((diffs, doubled))
}

fn all_zero_result() -> WilcoxonResult {
    WilcoxonResult {
        w_plus: 0.0,
        n: 0,
        p_value: 1.0,
        method: WilcoxonMethod::Exact,
        all_zero: true,
    }
}

/// Two-sided exact p value by enumerating all `2^n` sign assignments.
pub fn wilcoxon_exact(d1: &[f64], d2: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (diffs, ranks2) = signed_ranks(d1, d2)?;
    let n = diffs.len();
    if n == 0 {
        return Ok(all_zero_result());
    }
    if n > WILCOXON_ENUMERATION_LIMIT {
        return Err(MetricsError::TooLargeForExact(n));
    }
    let total: u64 = ranks2.iter().sum();
    let observed: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let dev = |w: u64| (2 * w).abs_diff(total);
    let threshold = dev(observed);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let w: u64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks2[k]).sum();
        if dev(w) >= threshold {
            extreme += 1;
        }
    }
    Ok(WilcoxonResult {
        w_plus: observed as f64 / 2.0,
        n,
        p_value: (extreme as f64 / (1u64 << n) as f64).min(1.0),
        method: WilcoxonMethod::Exact,
        all_zero: false,
    })
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal(d1: &[f64], d2: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (diffs, ranks2) = signed_ranks(d1, d2)?;
    let n = diffs.len();
    if n == 0 {
        return Ok(all_zero_result());
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r as f64 / 2.0)
        .sum();
    let nf = n as f64;
    let expected = nf * (nf + 1.0) / 4.0;

    let mut sorted = ranks2.clone();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let end = sorted[k..].iter().take_while(|&&r| r == sorted[k]).count() + k;
        let t = (end - k) as f64;
        tie_term += t * t * t - t;
        k = end;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var > 0.0 {
        let z = ((w_plus - expected).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    } else {
        1.0
    };
    Ok(WilcoxonResult {
        w_plus,
        n,
        p_value,
        method: WilcoxonMethod::Normal,
        all_zero: false,
    })
}

/// Paired two-sided signed-rank test on `d1 - d2`: exact up to
/// [`WILCOXON_EXACT_MAX`] non-zero differences, normal approximation beyond.
pub fn wilcoxon_signed_rank(d1: &[f64], d2: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (diffs, _) = signed_ranks(d1, d2)?;
    if diffs.len() <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(d1, d2)
    } else {
        wilcoxon_normal(d1, d2)
    }
}

/// Linear interpolation between closest ranks, position `p (n - 1)` in the sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range.
pub fn summarize(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disagreement {
    #[default]
    Mean,
    Median,
}

impl Disagreement {
    fn of(self, values: &[f64]) -> f64 {
        match self {
            Disagreement::Mean => mean(values),
            Disagreement::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                quantile_sorted(&v, 0.5)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilliamsConfig {
    pub disagreement: Disagreement,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for WilliamsConfig {
    fn default() -> Self {
        WilliamsConfig {
            disagreement: Disagreement::Mean,
            resamples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilliamsIndex {
    /// `None` when a disagreement is zero.
    pub index: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub zero_disagreement: bool,
    /// Bootstrap resamples that produced a finite index.
    pub resamples_used: usize,
}

/// `0.5 (1/D01 + 1/D02) / (1/D12)`; `None` when any disagreement is zero.
pub fn williams_ratio(d01: f64, d02: f64, d12: f64) -> Option<f64> {
    (d01 > 0.0 && d02 > 0.0 && d12 > 0.0).then(|| 0.5 * (1.0 / d01 + 1.0 / d02) / (1.0 / d12))
}

/// Williams index of a model against two observers, with a percentile
/// bootstrap 95% interval over cases. Resample `r` draws from its own
/// ChaCha8 stream `r` under the configured seed.
pub fn williams_index(
    d_model_a1: &[f64],
    d_model_a2: &[f64],
    d_a1_a2: &[f64],
    cfg: &WilliamsConfig,
) -> Result<WilliamsIndex, MetricsError> {
    same_len(d_model_a1, d_model_a2)?;
    same_len(d_model_a1, d_a1_a2)?;
    let n = d_model_a1.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { got: n, min: 2 });
    }
    let agg = cfg.disagreement;
    let index = williams_ratio(agg.of(d_model_a1), agg.of(d_model_a2), agg.of(d_a1_a2));
    let Some(index) = index else {
        return Ok(WilliamsIndex {
            index: None,
            ci_low: None,
            ci_high: None,
            zero_disagreement: true,
            resamples_used: 0,
        });
    };

    let mut boot: Vec<f64> = (0..cfg.resamples as u64)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let take = |v: &[f64]| picks.iter().map(|&i| v[i]).collect::<Vec<_>>();
            williams_ratio(
                agg.of(&take(d_model_a1)),
                agg.of(&take(d_model_a2)),
                agg.of(&take(d_a1_a2)),
            )
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = if boot.is_empty() {
        (None, None)
    } else {
        (
            Some(quantile_sorted(&boot, 0.025)),
            Some(quantile_sorted(&boot, 0.975)),
        )
    };
    Ok(WilliamsIndex {
        index: Some(index),
        ci_low,
        ci_high,
        zero_disagreement: false,
        resamples_used: boot.len(),
    })
}

/// Reduces per-frame values to one value per vessel; `groups[k]` labels value `k`.
/// Vessels appear in order of first occurrence.
pub fn aggregate_per_vessel(values: &[f64], groups: &[usize], how: Disagreement) -> Result<Vec<f64>, MetricsError> {
    if values.len() != groups.len() {
        return Err(MetricsError::LengthMismatch(values.len(), groups.len()));
    }
    let mut labels: Vec<usize> = Vec::new();
    for &g in groups {
        if !labels.contains(&g) {
            labels.push(g);
        }
    }
    Ok(labels
        .iter()
        .map(|&g| {
            let member: Vec<f64> = values
                .iter()
                .zip(groups)
                .filter(|(_, &h)| h == g)
                .map(|(&v, _)| v)
                .collect();
            how.of(&member)
        })
        .collect())
}

/// Per-frame registration estimate: fractional OCT frame and rotation in degrees
/// for each IVUS end-diastolic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEstimate {
    #[serde(alias = "true_mapping")]
    pub full_mapping: Vec<f64>,
    #[serde(alias = "true_rotation")]
    pub per_frame_rotation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAgreement {
    pub frame_diff_median: f64,
    pub frame_diff_iqr: f64,
    pub angle_diff_median: f64,
    pub angle_diff_iqr: f64,
    pub frame_ccc: f64,
    pub frame_spearman_r: Option<f64>,
    pub angle_ccc: f64,
    pub angle_spearman_r: Option<f64>,
}

fn check_estimate(e: &RegistrationEstimate) -> Result<(), MetricsError> {
    same_len(&e.full_mapping, &e.per_frame_rotation)
}

pub fn pairwise_agreement(
    a: &RegistrationEstimate,
    b: &RegistrationEstimate,
) -> Result<PairwiseAgreement, MetricsError> {
    check_estimate(a)?;
    check_estimate(b)?;
    let fd = frame_differences(&a.full_mapping, &b.full_mapping)?;
    let ad = angle_differences(&a.per_frame_rotation, &b.per_frame_rotation)?;
    let (frame_diff_median, frame_diff_iqr) = summarize(&fd)?;
    let (angle_diff_median, angle_diff_iqr) = summarize(&ad)?;
    let b_angles = align_angles(&a.per_frame_rotation, &b.per_frame_rotation);
    Ok(PairwiseAgreement {
        frame_diff_median,
        frame_diff_iqr,
        angle_diff_median,
        angle_diff_iqr,
        frame_ccc: ccc(&a.full_mapping, &b.full_mapping)?,
        frame_spearman_r: spearman(&a.full_mapping, &b.full_mapping).ok(),
        angle_ccc: ccc(&a.per_frame_rotation, &b_angles)?,
        angle_spearman_r: spearman(&a.per_frame_rotation, &b_angles).ok(),
    })
}

/// Model-versus-observers comparison in the layout of a co-registration results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub model_vs_a1: PairwiseAgreement,
    pub model_vs_a2: PairwiseAgreement,
    pub a1_vs_a2: PairwiseAgreement,
    pub frame_williams: WilliamsIndex,
    pub angle_williams: WilliamsIndex,
    /// Signed-rank tests of model-vs-observer differences against inter-observer differences.
    pub frame_wilcoxon_a1: WilcoxonResult,
    pub frame_wilcoxon_a2: WilcoxonResult,
    pub angle_wilcoxon_a1: WilcoxonResult,
    pub angle_wilcoxon_a2: WilcoxonResult,
}

pub fn agreement_report(
    model: &RegistrationEstimate,
    a1: &RegistrationEstimate,
    a2: &RegistrationEstimate,
    cfg: &WilliamsConfig,
) -> Result<AgreementReport, MetricsError> {
    let fd = |x: &RegistrationEstimate, y: &RegistrationEstimate| {
        frame_differences(&x.full_mapping, &y.full_mapping)
    };
    let ad = |x: &RegistrationEstimate, y: &RegistrationEstimate| {
        angle_differences(&x.per_frame_rotation, &y.per_frame_rotation)
    };
    let (f01, f02, f12) = (fd(model, a1)?, fd(model, a2)?, fd(a1, a2)?);
    let (g01, g02, g12) = (ad(model, a1)?, ad(model, a2)?, ad(a1, a2)?);
    Ok(AgreementReport {
        model_vs_a1: pairwise_agreement(model, a1)?,
        model_vs_a2: pairwise_agreement(model, a2)?,
        a1_vs_a2: pairwise_agreement(a1, a2)?,
        frame_williams: williams_index(&f01, &f02, &f12, cfg)?,
        angle_williams: williams_index(&g01, &g02, &g12, cfg)?,
        frame_wilcoxon_a1: wilcoxon_signed_rank(&f01, &f12)?,
        frame_wilcoxon_a2: wilcoxon_signed_rank(&f02, &f12)?,
        angle_wilcoxon_a1: wilcoxon_signed_rank(&g01, &g12)?,
        angle_wilcoxon_a2: wilcoxon_signed_rank(&g02, &g12)?,
    })
}
