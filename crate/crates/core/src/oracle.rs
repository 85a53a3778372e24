//! Exhaustive reference solvers for the two dynamic programs, usable on small
//! instances only. They enumerate every candidate instead of recursing on
//! sub-problems, so agreement with the fast solvers is meaningful.

use thiserror::Error;

use crate::circumferential::{circular_bin_distance, max_step_bins, PathParams};
use crate::dtw::Grid;

pub const MAX_DTW_SIDE: usize = 8;
pub const MAX_ROTATION_ROWS: usize = 5;
pub const MAX_ROTATION_BINS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("instance {rows}x{cols} exceeds the enumeration limit {max_rows}x{max_cols}")]
    InstanceTooLarge {
        rows: usize,
        cols: usize,
        max_rows: usize,
        max_cols: usize,
    },
}

/// Backward step preference used to order equal-cost paths: diagonal, up, left.
fn step_rank(from: (usize, usize), to: (usize, usize)) -> u8 {
    match (to.0 - from.0, to.1 - from.1) {
        (1, 1) => 0,
        (1, 0) => 1,
        _ => 2,
    }
}

/// Whether `a` is preferred over `b` among equal-cost paths: compare step
/// kinds walking backwards from the end.
fn prefer_backwards(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
    let sa = a.windows(2).rev().map(|w| step_rank(w[0], w[1]));
    let sb = b.windows(2).rev().map(|w| step_rank(w[0], w[1]));
    for (x, y) in sa.zip(sb) {
        if x != y {
            return x < y;
        }
    }
    false
}

struct PathSearch<'a> {
    d: &'a Grid,
    stack: Vec<(usize, usize)>,
    best: Option<(f64, Vec<(usize, usize)>)>,
}

impl PathSearch<'_> {
    fn visit(&mut self, i: usize, j: usize, acc: f64) {
        let acc = self.d.get(i, j) + acc;
        self.stack.push((i, j));
        let (n, m) = (self.d.rows(), self.d.cols());
        if (i, j) == (n - 1, m - 1) {
            let replace = match &self.best {
                None => true,
                Some((cost, path)) => {
                    acc < *cost || (acc == *cost && prefer_backwards(&self.stack, path))
                }
            };
            if replace {
                self.best = Some((acc, self.stack.clone()));
            }
        } else {
            if i + 1 < n && j + 1 < m {
                self.visit(i + 1, j + 1, acc);
            }
            if i + 1 < n {
                self.visit(i + 1, j, acc);
            }
            if j + 1 < m {
                self.visit(i, j + 1, acc);
            }
        }
        self.stack.pop();
    }
}

/// Minimum cost over all monotone paths from `(0, 0)` to `(n-1, m-1)`, with
/// ties resolved like [`crate::dtw::backtrace`].
pub fn brute_force_dtw(d: &Grid) -> Result<(f64, Vec<(usize, usize)>), OracleError> {
    let (n, m) = (d.rows(), d.cols());
    if n > MAX_DTW_SIDE || m > MAX_DTW_SIDE || n == 0 || m == 0 {
        return Err(OracleError::InstanceTooLarge {
            rows: n,
            cols: m,
            max_rows: MAX_DTW_SIDE,
            max_cols: MAX_DTW_SIDE,
        });
    }
    let mut search = PathSearch {
        d,
        stack: Vec::with_capacity(n + m),
        best: None,
    };
    search.visit(0, 0, 0.0);
    Ok(search.best.expect("at least one path exists"))
}

/// Objective of a rotation tuple, accumulated row by row.
fn rotation_objective(r: &Grid, lambda: f64, tuple: &[usize]) -> f64 {
    let n = r.cols();
    let mut total = r.get(0, tuple[0]);
    for a in 1..tuple.len() {
        let d = circular_bin_distance(tuple[a], tuple[a - 1], n);
        total = r.get(a, tuple[a]) + (total - lambda * (d * d) as f64);
    }
    total
}

/// Ordering among equal-objective tuples: smaller last bin, then walking
/// backwards smaller change to the next anchor, then smaller bin.
fn prefer_tuple(a: &[usize], b: &[usize], n: usize) -> bool {
    let last = a.len() - 1;
    if a[last] != b[last] {
        return a[last] < b[last];
    }
    for k in (0..last).rev() {
        let da = circular_bin_distance(a[k], a[k + 1], n);
        let db = circular_bin_distance(b[k], b[k + 1], n);
        if da != db {
            return da < db;
        }
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

/// Exhaustive search over all feasible rotation tuples.
pub fn brute_force_rotation(
    r: &Grid,
    params: PathParams,
    positions_mm: &[f64],
) -> Result<Vec<usize>, OracleError> {
    let (rows, n) = (r.rows(), r.cols());
    if rows > MAX_ROTATION_ROWS || n > MAX_ROTATION_BINS || rows == 0 || n == 0 {
        return Err(OracleError::InstanceTooLarge {
            rows,
            cols: n,
            max_rows: MAX_ROTATION_ROWS,
            max_cols: MAX_ROTATION_BINS,
        });
    }
    let caps: Vec<usize> = (1..rows)
        .map(|a| max_step_bins(params.delta_max_deg_per_mm, positions_mm[a] - positions_mm[a - 1], n))
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut tuple = vec![0usize; rows];
    let total = n.pow(rows as u32);
    for code in 0..total {
        let mut c = code;
        for t in tuple.iter_mut() {
            *t = c % n;
            c /= n;
        }
        let feasible = (1..rows).all(|a| circular_bin_distance(tuple[a], tuple[a - 1], n) <= caps[a - 1]);
        if !feasible {
            continue;
        }
        let v = rotation_objective(r, params.lambda, &tuple);
        let replace = match &best {
            None => true,
            Some((bv, bt)) => v > *bv || (v == *bv && prefer_tuple(&tuple, bt, n)),
        };
        if replace {
            best = Some((v, tuple.clone()));
        }
    }
    Ok(best.expect("the constant tuple is always feasible").1)
}
