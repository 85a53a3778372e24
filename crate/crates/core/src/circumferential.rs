//! Circumferential registration: anchor selection, the rotation cost matrix
//! built from weighted circular normalized cross-correlation, the regularized
//! rotation path, and interpolation of the anchor rotations to every frame.
//!
//! Rotation convention: a rotation of `s` bins (`2s` degrees) means the OCT
//! frame is displaced counterclockwise, i.e. OCT bin `b + s` shows what IVUS
//! bin `b` shows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtw::Grid;
use crate::features::{sorted_sum, CircProfile};

/// Channel weights: side branch, calcium, lumen eccentricity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct CircWeights {
    pub side_branch: f64,
    pub calcium: f64,
    pub eccentricity: f64,
}

impl Default for CircWeights {
    fn default() -> Self {
        CircWeights {
            side_branch: 1.0,
            calcium: 1.0,
            eccentricity: 0.1,
        }
    }
}

impl From<[f64; 3]> for CircWeights {
    fn from(w: [f64; 3]) -> Self {
        CircWeights {
            side_branch: w[0],
            calcium: w[1],
            eccentricity: w[2],
        }
    }
}

impl From<CircWeights> for [f64; 3] {
    fn from(w: CircWeights) -> Self {
        [w.side_branch, w.calcium, w.eccentricity]
    }
}

impl CircWeights {
    pub fn is_valid(&self) -> bool {
        let w: [f64; 3] = (*self).into();
        w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().any(|v| *v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub ivus_frame: usize,
    pub oct_frame: usize,
    pub has_side_branch: bool,
    /// Smaller of the two frames' calcium fractions.
    pub calcium_fraction: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CircError {
    #[error("no frame pair carries a side branch or calcium")]
    NoAnchors,
}

/// Keeps the mapped pairs where either frame shows a side branch, or both
/// frames carry calcium on at least `calcium_threshold` of the circumference.
///
/// `ivus_frames[k]` is the IVUS frame whose OCT position is `mapping[k]`; the
/// OCT partner is the nearest OCT frame.
pub fn select_anchors(
    ivus_frames: &[usize],
    mapping: &[f64],
    ivus_profiles: &[CircProfile],
    oct_profiles: &[CircProfile],
    calcium_threshold: f64,
) -> Result<Vec<AnchorPair>, CircError> {
    let last_oct = oct_profiles.len().saturating_sub(1);
    let mut anchors: Vec<AnchorPair> = ivus_frames
        .iter()
        .zip(mapping)
        .filter_map(|(&ivus_frame, &oct_pos)| {
            let oct_frame = (oct_pos.round().max(0.0) as usize).min(last_oct);
            let a = &ivus_profiles[ivus_frame];
            let b = &oct_profiles[oct_frame];
            let has_side_branch = a.has_side_branch() || b.has_side_branch();
            let calcium_fraction = a.calcium_fraction().min(b.calcium_fraction());
            (has_side_branch || calcium_fraction >= calcium_threshold).then_some(AnchorPair {
                ivus_frame,
                oct_frame,
                has_side_branch,
                calcium_fraction,
            })
        })
        .collect();
    anchors.sort_by_key(|a| a.ivus_frame);
    if anchors.is_empty() {
        return Err(CircError::NoAnchors);
    }
    Ok(anchors)
}

/// Zero-mean, unit-variance copy of a channel; `None` when the channel is flat.
fn standardize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = sorted_sum(v) / n;
    let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let var = sorted_sum(&centered.iter().map(|x| x * x).collect::<Vec<_>>()) / n;
    if !(var > 1e-12) {
        return None;
    }
    let sd = var.sqrt();
    Some(centered.into_iter().map(|x| x / sd).collect())
}

/// Normalized circular cross-correlation of two channels of equal length:
/// `out[s] = mean_k a[k] * b[k + s]`.
pub fn circular_ncc(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    assert_eq!(n, b.len(), "channel length mismatch");
    let (Some(a), Some(b)) = (standardize(a), standardize(b)) else {
        return vec![0.0; n];
    };
    (0..n)
        .map(|s| {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[k] * b[(k + s) % n];
            }
            (acc / n as f64).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Weighted mean of the per-channel correlations of `ivus` against `oct`
/// rotated by each shift. Flat channels contribute zero.
pub fn weighted_circular_ncc(ivus: &CircProfile, oct: &CircProfile, w: &CircWeights) -> Vec<f64> {
    let n = ivus.side_branch.len();
    let total = w.side_branch + w.calcium + w.eccentricity;
    let mut out = vec![0.0; n];
    for (weight, a, b) in [
        (w.side_branch, &ivus.side_branch, &oct.side_branch),
        (w.calcium, &ivus.calcium, &oct.calcium),
        (w.eccentricity, &ivus.radius_centered, &oct.radius_centered),
    ] {
        if weight == 0.0 {
            continue;
        }
        for (o, c) in out.iter_mut().zip(circular_ncc(a, b)) {
            *o += weight * c;
        }
    }
    out.into_iter()
        .map(|v| (v / total).clamp(-1.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationCostMatrix {
    /// One row per anchor, one column per rotation bin.
    pub values: Grid,
    pub zeroed_rows: Vec<usize>,
}

/// Whether an anchor's row keeps its data term.
pub fn anchor_has_signal(anchor: &AnchorPair, calcium_threshold: f64, strict_side_branch: bool) -> bool {
    if strict_side_branch {
        anchor.has_side_branch
    } else {
        anchor.has_side_branch || anchor.calcium_fraction >= calcium_threshold
    }
}

pub fn rotation_cost_matrix(
    anchors: &[AnchorPair],
    ivus_profiles: &[CircProfile],
    oct_profiles: &[CircProfile],
    w: &CircWeights,
    calcium_threshold: f64,
    strict_side_branch: bool,
) -> RotationCostMatrix {
    let n_bins = ivus_profiles.first().map_or(0, |p| p.side_branch.len());
    let rows: Vec<Option<Vec<f64>>> = anchors
        .par_iter()
        .map(|a| {
            anchor_has_signal(a, calcium_threshold, strict_side_branch).then(|| {
                weighted_circular_ncc(&ivus_profiles[a.ivus_frame], &oct_profiles[a.oct_frame], w)
            })
        })
        .collect();
    let zeroed_rows = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| i)
        .collect();
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| r.unwrap_or_else(|| vec![0.0; n_bins]))
        .collect();
    RotationCostMatrix {
        values: Grid::from_rows(&rows),
        zeroed_rows,
    }
}

/// Circular distance between two bins on a ring of `n` bins.
#[inline]
pub fn circular_bin_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

/// Parameters of the rotation path search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    /// Weight of the squared angular change (in bins) between consecutive anchors.
    pub lambda: f64,
    /// Hard cap on the rotation rate between consecutive anchors.
    pub delta_max_deg_per_mm: f64,
}

/// Largest allowed bin change between anchors `gap_mm` apart.
pub fn max_step_bins(delta_max_deg_per_mm: f64, gap_mm: f64, n_bins: usize) -> usize {
    let bin_deg = 360.0 / n_bins as f64;
    let cap = delta_max_deg_per_mm * gap_mm.abs() / bin_deg;
    if cap.is_finite() {
        // tolerate representation error so that e.g. 30 deg/mm * 0.4 mm allows 6 bins
        (cap + 1e-9).floor().min(n_bins as f64) as usize
    } else {
        n_bins
    }
}

/// Rotation bin per anchor maximizing `sum_a R[a][t_a] - lambda * sum_a d(t_a, t_{a-1})^2`
/// subject to `d(t_a, t_{a-1}) * bin_deg <= delta_max * gap_a`.
///
/// The last row takes its best bin (smallest index on ties); earlier rows are
/// recovered backwards, preferring the smaller angular change, then the
/// smaller bin index.
pub fn rotation_path(r: &Grid, params: PathParams, positions_mm: &[f64]) -> Vec<usize> {
    let (rows, n) = (r.rows(), r.cols());
    if rows == 0 {
        return Vec::new();
    }
    assert_eq!(positions_mm.len(), rows, "one position per anchor");

    let mut score: Vec<Vec<f64>> = Vec::with_capacity(rows);
    score.push(r.row(0).to_vec());
    for a in 1..rows {
        let cap = max_step_bins(params.delta_max_deg_per_mm, positions_mm[a] - positions_mm[a - 1], n);
        let prev = &score[a - 1];
        let row: Vec<f64> = (0..n)
            .map(|t| {
                let best = best_predecessor(prev, t, cap, params.lambda).1;
                r.get(a, t) + best
            })
            .collect();
        score.push(row);
    }

    let mut path = vec![0; rows];
    let last = &score[rows - 1];
    let mut t = 0;
    for (bin, &v) in last.iter().enumerate() {
        if v > last[t] {
            t = bin;
        }
    }
    path[rows - 1] = t;
    for a in (1..rows).rev() {
        let cap = max_step_bins(params.delta_max_deg_per_mm, positions_mm[a] - positions_mm[a - 1], n);
        t = best_predecessor(&score[a - 1], t, cap, params.lambda).0;
        path[a - 1] = t;
    }
    path
}

/// Best bin of the previous row for current bin `t`, with its penalized score.
fn best_predecessor(prev: &[f64], t: usize, cap: usize, lambda: f64) -> (usize, f64) {
    let n = prev.len();
    let mut best: Option<(usize, usize, f64)> = None;
    for p in 0..n {
        let d = circular_bin_distance(p, t, n);
        if d > cap {
            continue;
        }
        let v = prev[p] - lambda * (d * d) as f64;
        let better = match best {
            None => true,
            Some((bp, bd, bv)) => v > bv || (v == bv && (d < bd || (d == bd && p < bp))),
        };
        if better {
            best = Some((p, d, v));
        }
    }
    let (p, _, v) = best.expect("zero change is always feasible");
    (p, v)
}

/// Maps each consecutive difference into (-180, 180].
fn wrap_signed(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Linear interpolation of anchor rotations (degrees) by IVUS frame, after
/// unwrapping; frames outside the anchor range take the nearest anchor.
/// Results are reduced into `[0, 360)`.
pub fn interpolate_rotations(anchor_frames: &[usize], anchor_deg: &[f64], frames: &[usize]) -> Vec<f64> {
    assert_eq!(anchor_frames.len(), anchor_deg.len());
    if anchor_frames.is_empty() {
        return vec![0.0; frames.len()];
    }
    let mut unwrapped = Vec::with_capacity(anchor_deg.len());
    unwrapped.push(anchor_deg[0]);
    for k in 1..anchor_deg.len() {
        let prev = unwrapped[k - 1];
        unwrapped.push(prev + wrap_signed(anchor_deg[k] - anchor_deg[k - 1]));
    }
    let knots: Vec<(f64, f64)> = anchor_frames
        .iter()
        .map(|&f| f as f64)
        .zip(unwrapped)
        .collect();
    frames
        .iter()
        .map(|&f| {
            let v = crate::dtw::interpolate_knots(&knots, f as f64).rem_euclid(360.0);
            if v >= 360.0 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(sb: &[f64], ca: &[f64], rad: &[f64]) -> CircProfile {
        CircProfile {
            side_branch: sb.to_vec(),
            calcium: ca.to_vec(),
            radius_centered: rad.to_vec(),
        }
    }

    fn bumpy(n: usize, seed: f64) -> CircProfile {
        let sb: Vec<f64> = (0..n).map(|b| if (10..25).contains(&b) { 0.3 } else { 0.0 }).collect();
        let ca: Vec<f64> = (0..n).map(|b| if (60..95).contains(&b) { 1.0 } else { 0.0 }).collect();
        let rad: Vec<f64> = (0..n)
            .map(|b| (b as f64 * 0.035 + seed).cos() * 0.2 + (b as f64 * 0.011).sin() * 0.05)
            .collect();
        profile(&sb, &ca, &rad)
    }

    #[test]
    fn self_correlation_peaks_at_zero() {
        let p = bumpy(180, 0.3);
        let row = weighted_circular_ncc(&p, &p, &CircWeights::default());
        assert!((row[0] - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(argmax(&row), 0);
    }

    #[test]
    fn rotated_copy_peaks_at_shift() {
        let p = bumpy(180, 0.1);
        let q = p.rotated(45);
        let row = weighted_circular_ncc(&p, &q, &CircWeights::default());
        assert_eq!(argmax(&row), 45);
        assert!((row[45] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_channels_give_zero() {
        let p = profile(&[0.0; 180], &[1.0; 180], &[0.0; 180]);
        let row = weighted_circular_ncc(&p, &p, &CircWeights::default());
        assert_eq!(row, vec![0.0; 180]);
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    fn anchor(ivus: usize, sb: bool, ca: f64) -> AnchorPair {
        AnchorPair {
            ivus_frame: ivus,
            oct_frame: ivus,
            has_side_branch: sb,
            calcium_fraction: ca,
        }
    }

    #[test]
    fn anchor_selection_rules() {
        let empty = profile(&[0.0; 180], &[0.0; 180], &[0.0; 180]);
        let mut with_sb = empty.clone();
        with_sb.side_branch[3] = 0.2;
        let mut calc = empty.clone();
        for b in 0..20 {
            calc.calcium[b] = 1.0;
        }
        let ivus = vec![with_sb.clone(), empty.clone(), calc.clone(), calc.clone()];
        let oct = vec![with_sb, empty.clone(), calc, empty];
        let anchors = select_anchors(&[0, 1, 2, 3], &[0.0, 1.0, 2.0, 3.0], &ivus, &oct, 0.05).unwrap();
        assert_eq!(anchors.len(), 2);
        assert!(anchors[0].has_side_branch);
        assert_eq!(anchors[1].ivus_frame, 2);
        assert!((anchors[1].calcium_fraction - 20.0 / 180.0).abs() < 1e-15);

        let flat = vec![profile(&[0.0; 180], &[0.0; 180], &[0.0; 180]); 2];
        assert_eq!(
            select_anchors(&[0, 1], &[0.0, 1.0], &flat, &flat, 0.05),
            Err(CircError::NoAnchors)
        );
    }

    #[test]
    fn oct_partner_is_nearest_frame() {
        let mut p = profile(&[0.0; 180], &[0.0; 180], &[0.0; 180]);
        p.side_branch[0] = 0.1;
        let ivus = vec![p.clone(); 2];
        let oct = vec![p; 4];
        let anchors = select_anchors(&[0, 1], &[0.4, 2.6], &ivus, &oct, 0.05).unwrap();
        assert_eq!(anchors[0].oct_frame, 0);
        assert_eq!(anchors[1].oct_frame, 3);
    }

    #[test]
    fn cost_matrix_zeroes_rows_without_signal() {
        let p = bumpy(180, 0.2);
        let profiles = vec![p.clone(), p.clone(), p];
        let anchors = [anchor(0, true, 0.0), anchor(1, false, 0.2), anchor(2, false, 0.01)];
        let m = rotation_cost_matrix(&anchors, &profiles, &profiles, &CircWeights::default(), 0.05, false);
        assert_eq!(m.values.cols(), 180);
        assert_eq!(m.zeroed_rows, vec![2]);
        assert_eq!(argmax(m.values.row(0)), 0);
        assert!(m.values.row(2).iter().all(|&v| v == 0.0));

        let strict = rotation_cost_matrix(&anchors, &profiles, &profiles, &CircWeights::default(), 0.05, true);
        assert_eq!(strict.zeroed_rows, vec![1, 2]);
    }

    #[test]
    fn single_row_path_is_argmax() {
        let r = Grid::from_rows(&[vec![0.1, 0.5, 0.9, 0.9, 0.2]]);
        let params = PathParams {
            lambda: 0.5,
            delta_max_deg_per_mm: 30.0,
        };
        assert_eq!(rotation_path(&r, params, &[0.0]), vec![2]);
    }

    #[test]
    fn unregularized_path_is_rowwise_argmax() {
        let r = Grid::from_rows(&[vec![0.1, 0.8, 0.0, 0.3], vec![0.0, 0.1, 0.2, 0.9]]);
        let params = PathParams {
            lambda: 0.0,
            delta_max_deg_per_mm: f64::INFINITY,
        };
        assert_eq!(rotation_path(&r, params, &[0.0, 1.0]), vec![1, 3]);
    }

    #[test]
    fn rate_cap_is_enforced() {
        // 12 bins of 30 deg; 30 deg/mm over 1 mm allows one bin of change
        let r = Grid::from_rows(&[
            {
                let mut v = vec![0.0; 12];
                v[0] = 1.0;
                v
            },
            {
                let mut v = vec![0.0; 12];
                v[6] = 1.0;
                v
            },
        ]);
        let params = PathParams {
            lambda: 0.0,
            delta_max_deg_per_mm: 30.0,
        };
        let path = rotation_path(&r, params, &[0.0, 1.0]);
        assert!(circular_bin_distance(path[0], path[1], 12) <= 1);
        assert_eq!(max_step_bins(30.0, 0.4, 180), 6);
    }

    #[test]
    fn rotation_interpolation_examples() {
        assert_eq!(interpolate_rotations(&[0, 10], &[0.0, 20.0], &[5]), vec![10.0]);
        let mid = interpolate_rotations(&[0, 10], &[350.0, 10.0], &[5])[0];
        assert!(mid.abs() < 1e-12 || (mid - 360.0).abs() < 1e-12);
        assert_eq!(mid, 0.0);
        assert_eq!(
            interpolate_rotations(&[4, 10], &[30.0, 50.0], &[0, 12]),
            vec![30.0, 50.0]
        );
        assert_eq!(interpolate_rotations(&[], &[], &[0, 1]), vec![0.0, 0.0]);
    }

    #[test]
    fn bin_distance_wraps() {
        assert_eq!(circular_bin_distance(1, 179, 180), 2);
        assert_eq!(circular_bin_distance(0, 90, 180), 90);
        assert_eq!(circular_bin_distance(11, 0, 12), 1);
    }
}
