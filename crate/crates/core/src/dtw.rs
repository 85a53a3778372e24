//! Feature-weighted dynamic time warping between the downsampled IVUS and OCT
//! sequences, and conversion of the warp path into a fractional frame mapping.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{LongFeatureSequence, N_LONG_FEATURES};

/// Per-feature weights: lumen area, side branch area, calcium degree, normalized position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct LongWeights {
    pub lumen: f64,
    pub side_branch: f64,
    pub calcium: f64,
    pub position: f64,
}

impl Default for LongWeights {
    fn default() -> Self {
        LongWeights {
            lumen: 0.3,
            side_branch: 1.5,
            calcium: 0.1,
            position: 2.5,
        }
    }
}

impl From<[f64; 4]> for LongWeights {
    fn from(w: [f64; 4]) -> Self {
        LongWeights {
            lumen: w[0],
            side_branch: w[1],
            calcium: w[2],
            position: w[3],
        }
    }
}

impl From<LongWeights> for [f64; 4] {
    fn from(w: LongWeights) -> Self {
        w.as_array()
    }
}

impl LongWeights {
    pub fn as_array(&self) -> [f64; N_LONG_FEATURES] {
        [self.lumen, self.side_branch, self.calcium, self.position]
    }

    pub fn is_valid(&self) -> bool {
        let w = self.as_array();
        w.iter().all(|v| v.is_finite() && *v >= 0.0) && w.iter().any(|v| *v > 0.0)
    }

    pub fn scaled(&self, c: f64) -> LongWeights {
        self.as_array().map(|w| w * c).into()
    }
}

/// Dense row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn from_rows(rows: &[Vec<f64>]) -> Grid {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Grid {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Grid {
        assert_eq!(values.len(), rows * cols);
        Grid { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major CSV with 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:.8e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Pairwise frame distances `D`.
pub type DistanceMatrix = Grid;
/// Cumulative alignment costs `C`.
pub type CostMatrix = Grid;

/// `D[i][j] = sqrt(sum_k w_k (x_ik - y_jk)^2)`.
pub fn distance_matrix(
    x: &LongFeatureSequence,
    y: &LongFeatureSequence,
    w: &LongWeights,
) -> DistanceMatrix {
    let w = w.as_array();
    let ys: Vec<_> = y.vectors.iter().map(|v| v.to_array()).collect();
    let values: Vec<f64> = x
        .vectors
        .par_iter()
        .flat_map_iter(|xv| {
            let xv = xv.to_array();
            ys.iter().map(move |yv| {
                let mut acc = 0.0;
                for k in 0..N_LONG_FEATURES {
                    let d = xv[k] - yv[k];
                    acc += w[k] * d * d;
                }
                acc.sqrt()
            })
        })
        .collect();
    Grid::from_vec(x.len(), y.len(), values)
}

/// Fills the cumulative cost matrix. Edge cells accumulate along the edge.
pub fn dtw_cost(d: &DistanceMatrix) -> CostMatrix {
    let (n, m) = (d.rows(), d.cols());
    let mut c = vec![0.0_f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => c[j - 1],
                (_, 0) => c[(i - 1) * m],
                _ => c[(i - 1) * m + j]
                    .min(c[i * m + j - 1])
                    .min(c[(i - 1) * m + j - 1]),
            };
            c[i * m + j] = d.get(i, j) + best;
        }
    }
    Grid::from_vec(n, m, c)
}

/// Traces the optimal path from the last cell back to `(0, 0)`, returned in
/// forward order. Ties prefer the diagonal, then up (`i - 1`), then left (`j - 1`).
pub fn backtrace(c: &CostMatrix, d: &DistanceMatrix) -> Vec<(usize, usize)> {
    debug_assert_eq!((c.rows(), c.cols()), (d.rows(), d.cols()));
    let (mut i, mut j) = (c.rows() - 1, c.cols() - 1);
    let mut path = vec![(i, j)];
    while (i, j) != (0, 0) {
        (i, j) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = c.get(i - 1, j - 1);
                let up = c.get(i - 1, j);
                let left = c.get(i, j - 1);
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Sum of `D` along `path`, accumulated in path order.
pub fn path_cost(d: &DistanceMatrix, path: &[(usize, usize)]) -> f64 {
    path.iter().fold(0.0, |acc, &(i, j)| d.get(i, j) + acc)
}

/// Knots of the piecewise-linear IVUS-to-OCT frame map.
///
/// Path pairs are lifted to source frame positions. An IVUS frame with several
/// OCT partners collapses to the mean OCT position; a run of IVUS frames that
/// share one OCT position then collapses to its mean IVUS position.
pub fn mapping_knots(
    path: &[(usize, usize)],
    ivus_src: &[usize],
    oct_src: &[usize],
) -> Vec<(f64, f64)> {
    let mut per_ivus: Vec<(f64, f64)> = Vec::new();
    let mut k = 0;
    while k < path.len() {
        let i = path[k].0;
        let start = k;
        while k < path.len() && path[k].0 == i {
            k += 1;
        }
        let partners = &path[start..k];
        let mean = partners.iter().map(|&(_, j)| oct_src[j] as f64).sum::<f64>()
            / partners.len() as f64;
        per_ivus.push((ivus_src[i] as f64, mean));
    }

    let mut knots = Vec::with_capacity(per_ivus.len());
    let mut k = 0;
    while k < per_ivus.len() {
        let oct = per_ivus[k].1;
        let start = k;
        while k < per_ivus.len() && per_ivus[k].1 == oct {
            k += 1;
        }
        let run = &per_ivus[start..k];
        let ivus = run.iter().map(|&(x, _)| x).sum::<f64>() / run.len() as f64;
        knots.push((ivus, oct));
    }
    knots
}

/// Evaluates a piecewise-linear map through `knots` (sorted by x), holding the
/// end values outside the knot range.
pub fn interpolate_knots(knots: &[(f64, f64)], x: f64) -> f64 {
    let Some(&(x0, y0)) = knots.first() else {
        return f64::NAN;
    };
    if x <= x0 {
        return y0;
    }
    let &(xn, yn) = knots.last().unwrap();
    if x >= xn {
        return yn;
    }
    let hi = knots.partition_point(|&(kx, _)| kx <= x);
    let (xa, ya) = knots[hi - 1];
    let (xb, yb) = knots[hi];
    if x == xa {
        return ya;
    }
    ya + (yb - ya) * (x - xa) / (xb - xa)
}

/// Fractional OCT frame position for every IVUS frame in `ivus_src`.
pub fn interpolate_path(
    path: &[(usize, usize)],
    ivus_src: &[usize],
    oct_src: &[usize],
) -> Vec<f64> {
    let knots = mapping_knots(path, ivus_src, oct_src);
    ivus_src
        .iter()
        .map(|&f| interpolate_knots(&knots, f as f64))
        .collect()
}

/// Output of [`align`].
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalAlignment {
    pub distance: DistanceMatrix,
    pub cost: CostMatrix,
    pub path: Vec<(usize, usize)>,
    pub full_mapping: Vec<f64>,
}

pub fn align(x: &LongFeatureSequence, y: &LongFeatureSequence, w: &LongWeights) -> LongitudinalAlignment {
    let distance = distance_matrix(x, y, w);
    let cost = dtw_cost(&distance);
    let path = backtrace(&cost, &distance);
    let full_mapping = interpolate_path(&path, &x.source_frame_indices, &y.source_frame_indices);
    LongitudinalAlignment {
        distance,
        cost,
        path,
        full_mapping,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LongFeatureVector;
    use crate::pullback::Modality;

    fn seq(rows: &[[f64; 4]]) -> LongFeatureSequence {
        LongFeatureSequence {
            modality: Modality::Ivus,
            vectors: rows.iter().map(|&r| LongFeatureVector::from_array(r)).collect(),
            source_frame_indices: (0..rows.len()).collect(),
        }
    }

    #[test]
    fn weighted_distance_examples() {
        let same = seq(&[[0.5, 0.0, 0.0, 0.2]]);
        assert_eq!(distance_matrix(&same, &same, &LongWeights::default()).get(0, 0), 0.0);

        let x = seq(&[[1.0, 1.0, 1.0, 1.0]]);
        let y = seq(&[[0.0, 0.0, 0.0, 0.0]]);
        let unit = LongWeights::from([1.0; 4]);
        assert_eq!(distance_matrix(&x, &y, &unit).get(0, 0), 2.0);
        let d = distance_matrix(&x, &y, &LongWeights::default()).get(0, 0);
        assert!((d - 4.4f64.sqrt()).abs() < 1e-15);
        assert!((d - 2.0976).abs() < 1e-4);
    }

    #[test]
    fn cost_recurrence_by_hand() {
        let zeros = Grid::from_rows(&[vec![0.0; 3], vec![0.0; 3]]);
        assert!(dtw_cost(&zeros).values().iter().all(|&v| v == 0.0));

        let d = Grid::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(dtw_cost(&d), Grid::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));

        // first row and column accumulate
        let d = Grid::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 1.0, 1.0]]);
        let c = dtw_cost(&d);
        assert_eq!(c, Grid::from_rows(&[vec![1.0, 3.0, 6.0], vec![5.0, 2.0, 3.0]]));
        assert_eq!(backtrace(&c, &d), vec![(0, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn zero_diagonal_gives_diagonal_path() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 }).collect())
            .collect();
        let d = Grid::from_rows(&rows);
        let c = dtw_cost(&d);
        let path = backtrace(&c, &d);
        assert_eq!(path, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(c.get(n - 1, n - 1), 0.0);
    }

    #[test]
    fn ties_prefer_diagonal_then_up() {
        let d = Grid::from_rows(&vec![vec![0.0; 3]; 3]);
        let c = dtw_cost(&d);
        assert_eq!(backtrace(&c, &d), vec![(0, 0), (1, 1), (2, 2)]);
        let d = Grid::from_rows(&vec![vec![0.0; 2]; 3]);
        let c = dtw_cost(&d);
        assert_eq!(backtrace(&c, &d), vec![(0, 0), (1, 0), (2, 1)]);
    }

    #[test]
    fn degenerate_single_row_or_column() {
        let d = Grid::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let c = dtw_cost(&d);
        assert_eq!(backtrace(&c, &d), vec![(0, 0), (0, 1), (0, 2)]);
        let d = Grid::from_rows(&[vec![1.0], vec![2.0]]);
        let c = dtw_cost(&d);
        assert_eq!(backtrace(&c, &d), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn mapping_examples() {
        let id = [0, 1, 2];
        assert_eq!(interpolate_path(&[(0, 0), (1, 1), (2, 2)], &id, &id), vec![0.0, 1.0, 2.0]);
        assert_eq!(interpolate_path(&[(0, 0), (0, 1), (1, 2)], &[0, 1], &id), vec![0.5, 2.0]);
        assert_eq!(
            interpolate_path(&[(0, 0), (1, 1), (2, 2)], &id, &[0, 2, 4]),
            vec![0.0, 2.0, 4.0]
        );
    }

    #[test]
    fn shared_oct_partner_is_spread_between_knots() {
        // IVUS 1 and 2 both land on OCT 2: knot at IVUS 1.5
        let path = [(0, 0), (1, 1), (2, 1), (3, 2)];
        let map = interpolate_path(&path, &[0, 1, 2, 3], &[0, 2, 4]);
        assert_eq!(knots_of(&path), vec![(0.0, 0.0), (1.5, 2.0), (3.0, 4.0)]);
        assert!((map[1] - 2.0 * 1.0 / 1.5).abs() < 1e-12);
        assert!((map[2] - (2.0 + 2.0 * 0.5 / 1.5)).abs() < 1e-12);
        assert!(map.windows(2).all(|w| w[0] <= w[1]));
    }

    fn knots_of(path: &[(usize, usize)]) -> Vec<(f64, f64)> {
        mapping_knots(path, &[0, 1, 2, 3], &[0, 2, 4])
    }

    #[test]
    fn interpolation_holds_ends() {
        let knots = [(1.0, 3.0), (3.0, 7.0)];
        assert_eq!(interpolate_knots(&knots, 0.0), 3.0);
        assert_eq!(interpolate_knots(&knots, 2.0), 5.0);
        assert_eq!(interpolate_knots(&knots, 9.0), 7.0);
    }

    #[test]
    fn csv_dump_uses_nine_significant_digits() {
        let g = Grid::from_rows(&[vec![1.0, 2.0 / 3.0], vec![0.0, 12345.678901]]);
        let mut out = Vec::new();
        g.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "1.00000000e0,6.66666667e-1\n0.00000000e0,1.23456789e4\n"
        );
    }
}
