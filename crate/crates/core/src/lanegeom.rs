//! Lane curves in normalized image space, least-squares curve fitting and
//! minimum-cost bipartite assignment between predicted and reference lanes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cost assigned to a prediction/reference pair whose row ranges never overlap.
pub const DEFAULT_NO_OVERLAP_PENALTY: f64 = 10.0;

/// Allowed horizontal band for sampled lane positions (normalized units).
pub const OFF_IMAGE_BAND: (f64, f64) = (-0.5, 1.5);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaneGeomError {
    #[error("need at least {needed} points for a degree-{degree} fit, got {got}")]
    InsufficientPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("degenerate design matrix for degree-{degree} fit")]
    Degenerate { degree: usize },
    #[error("unsupported fit degree {0} (expected 1, 2 or 3)")]
    UnsupportedDegree(usize),
    #[error("cost matrix rows have inconsistent lengths")]
    Ragged,
    #[error("cost matrix entry ({row}, {col}) is {value}; entries must be finite and non-negative")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("invalid lane curve: {0}")]
    InvalidCurve(String),
}

pub type Result<T> = std::result::Result<T, LaneGeomError>;

/// Cubic lane model `x(y) = c3*y^3 + c2*y^2 + c1*y + c0` in normalized image
/// coordinates with y growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneCurve {
    /// `[c3, c2, c1, c0]`.
    pub coeffs: [f64; 4],
    /// `(y_top, y_bottom)`.
    pub y_range: (f64, f64),
    pub score: f64,
}

impl LaneCurve {
    pub fn new(coeffs: [f64; 4], y_range: (f64, f64), score: f64) -> Self {
        Self {
            coeffs,
            y_range,
            score,
        }
    }

    /// Vertical line `x = x0` over the whole image height.
    pub fn constant(x0: f64) -> Self {
        Self::new([0.0, 0.0, 0.0, x0], (0.0, 1.0), 1.0)
    }

    pub fn eval(&self, y: f64) -> f64 {
        let [c3, c2, c1, c0] = self.coeffs;
        ((c3 * y + c2) * y + c1) * y + c0
    }

    pub fn contains_row(&self, y: f64) -> bool {
        y >= self.y_range.0 && y <= self.y_range.1
    }

    pub fn validate(&self) -> Result<()> {
        let (top, bottom) = self.y_range;
        if !(top.is_finite() && bottom.is_finite() && 0.0 <= top && top < bottom && bottom <= 1.0) {
            return Err(LaneGeomError::InvalidCurve(format!(
                "y_range ({top}, {bottom}) must satisfy 0 <= top < bottom <= 1"
            )));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(LaneGeomError::InvalidCurve("non-finite coefficient".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(LaneGeomError::InvalidCurve(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        let (lo, hi) = OFF_IMAGE_BAND;
        for k in 0..=16 {
            let y = top + (bottom - top) * k as f64 / 16.0;
            let x = self.eval(y);
            if !(lo..=hi).contains(&x) {
                return Err(LaneGeomError::InvalidCurve(format!(
                    "x({y}) = {x} outside the off-image band"
                )));
            }
        }
        Ok(())
    }
}

/// `n` evenly spaced rows covering `[lo, hi]` inclusive.
pub fn even_rows(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Evaluates the curve at every row inside its range. Rows outside the
/// range are skipped; output is ordered by ascending y.
pub fn sample_curve(curve: &LaneCurve, rows: &[f64]) -> Vec<(f64, f64)> {
    let mut ys: Vec<f64> = rows
        .iter()
        .copied()
        .filter(|&y| curve.contains_row(y))
        .collect();
    ys.sort_by(f64::total_cmp);
    ys.into_iter().map(|y| (curve.eval(y), y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit {
    pub curve: LaneCurve,
    pub residual_rms: f64,
}

/// Least-squares polynomial fit of x as a function of y (Householder QR).
pub fn fit_curve(points: &[(f64, f64)], degree: usize) -> Result<CurveFit> {
    if !(1..=3).contains(&degree) {
        return Err(LaneGeomError::UnsupportedDegree(degree));
    }
    let cols = degree + 1;
    if points.len() < cols {
        return Err(LaneGeomError::InsufficientPoints {
            degree,
            needed: cols,
            got: points.len(),
        });
    }

    let n = points.len();
    let design = DMatrix::from_fn(n, cols, |i, j| points[i].1.powi(j as i32));
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.0));

    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..cols)
        .map(|j| design.column(j).norm())
        .fold(0.0_f64, f64::max);
    let rank_tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    if (0..cols).any(|j| r[(j, j)].abs() <= rank_tol) {
        return Err(LaneGeomError::Degenerate { degree });
    }
    let mut qtb = rhs.clone();
    qr.q_tr_mul(&mut qtb);
    let sol = r
        .solve_upper_triangular(&qtb.rows(0, cols).into_owned())
        .ok_or(LaneGeomError::Degenerate { degree })?;

    let mut coeffs = [0.0; 4];
    for (j, c) in sol.iter().enumerate() {
        coeffs[3 - j] = *c;
    }
    let (y_min, y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let curve = LaneCurve::new(coeffs, (y_min, y_max), 1.0);
    let sse: f64 = points.iter().map(|&(x, y)| (curve.eval(y) - x).powi(2)).sum();
    Ok(CurveFit {
        curve,
        residual_rms: (sse / n as f64).sqrt(),
    })
}

/// Dense rectangular matrix of non-negative finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(LaneGeomError::Ragged);
        }
        for (k, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(LaneGeomError::InvalidCost {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value,
                });
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LaneGeomError::Ragged);
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment for `n <= m` over the given row and column
/// subsets (potential-based shortest augmenting path, O(n^2 m)).
/// Returns the column chosen for each listed row.
fn solve_subset(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| costs.get(rows[i - 1], cols[j - 1]);

    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Optimal cost of matching `min(|rows|, |cols|)` pairs among the subsets.
fn optimal_cost(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.len() <= cols.len() {
        let chosen = solve_subset(costs, rows, cols);
        rows.iter().zip(&chosen).map(|(&r, &c)| costs.get(r, c)).sum()
    } else {
        let transposed = transpose(costs);
        let chosen = solve_subset(&transposed, cols, rows);
        cols.iter().zip(&chosen).map(|(&c, &r)| costs.get(r, c)).sum()
    }
}

fn transpose(costs: &CostMatrix) -> CostMatrix {
    let mut values = Vec::with_capacity(costs.values.len());
    for c in 0..costs.cols {
        for r in 0..costs.rows {
            values.push(costs.get(r, c));
        }
    }
    CostMatrix {
        rows: costs.cols,
        cols: costs.rows,
        values,
    }
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// Among optimal assignments (totals equal up to a relative 1e-9), the
/// lexicographically smallest sorted pair list is returned.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let all_rows: Vec<usize> = (0..costs.rows).collect();
    let all_cols: Vec<usize> = (0..costs.cols).collect();
    let k = costs.rows.min(costs.cols);
    if k == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let best = optimal_cost(costs, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    // Fix pairs row by row, always taking the smallest column (or skipping
    // the row when rows outnumber columns) that still admits an optimum.
    let mut pairs = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut free_cols = all_cols;
    for r in 0..costs.rows {
        if pairs.len() == k {
            break;
        }
        let later_rows: Vec<usize> = (r + 1..costs.rows).collect();
        let mut chosen = None;
        for (idx, &c) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols
                .iter()
                .copied()
                .filter(|&cc| cc != c)
                .collect();
            let need = k - pairs.len() - 1;
            if later_rows.len().min(rest_cols.len()) < need {
                continue;
            }
            let rest = if need == 0 {
                0.0
            } else {
                optimal_cost(costs, &later_rows, &rest_cols)
            };
            if fixed_cost + costs.get(r, c) + rest <= best + tol {
                chosen = Some(idx);
                break;
            }
        }
        match chosen {
            Some(idx) => {
                let c = free_cols.remove(idx);
                fixed_cost += costs.get(r, c);
                pairs.push((r, c));
            }
            None => {
                // Only reachable when this row can be left unassigned.
                debug_assert!(costs.rows > costs.cols);
            }
        }
    }
    debug_assert_eq!(pairs.len(), k);
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Assignment { pairs, total_cost }
}

/// `cost(i, j)` = mean |x_pred - x_gt| over rows inside both curves' ranges,
/// or `penalty` when no row is shared.
pub fn lane_assignment_costs(
    preds: &[LaneCurve],
    gts: &[LaneCurve],
    rows: &[f64],
    penalty: f64,
) -> CostMatrix {
    let mut values = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for g in gts {
            let (sum, count) = rows
                .iter()
                .filter(|&&y| p.contains_row(y) && g.contains_row(y))
                .fold((0.0, 0usize), |(s, n), &y| {
                    (s + (p.eval(y) - g.eval(y)).abs(), n + 1)
                });
            let cost = if count == 0 { penalty } else { sum / count as f64 };
            values.push(if cost.is_finite() { cost } else { penalty });
        }
    }
    CostMatrix {
        rows: preds.len(),
        cols: gts.len(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_examples() {
        let line = LaneCurve::new([0.0, 0.0, 1.0, 0.0], (0.0, 1.0), 1.0);
        assert_eq!(sample_curve(&line, &[0.5]), vec![(0.5, 0.5)]);
        let flat = LaneCurve::constant(0.3);
        assert!(sample_curve(&flat, &[0.1, 0.7]).iter().all(|p| p.0 == 0.3));
        let cubic = LaneCurve::new([1.0, 0.0, 0.0, 0.0], (0.0, 1.0), 1.0);
        assert_eq!(sample_curve(&cubic, &[0.5]), vec![(0.125, 0.5)]);
    }

    #[test]
    fn sampling_skips_out_of_range_rows_and_sorts() {
        let c = LaneCurve::new([0.0, 0.0, 0.0, 0.4], (0.2, 0.6), 1.0);
        let s = sample_curve(&c, &[0.9, 0.5, 0.1, 0.3]);
        assert_eq!(s, vec![(0.4, 0.3), (0.4, 0.5)]);
        assert!(sample_curve(&c, &[0.7]).is_empty());
    }

    #[test]
    fn exact_linear_fit() {
        let pts: Vec<_> = (0..6)
            .map(|k| {
                let y = 0.1 + 0.15 * k as f64;
                (0.2 + 0.5 * y, y)
            })
            .collect();
        let fit = fit_curve(&pts, 1).unwrap();
        let [c3, c2, c1, c0] = fit.curve.coeffs;
        assert_eq!((c3, c2), (0.0, 0.0));
        assert!((c1 - 0.5).abs() < 1e-9 && (c0 - 0.2).abs() < 1e-9);
        assert!(fit.residual_rms < 1e-12);
        assert_eq!(fit.curve.y_range, (0.1, 0.1 + 0.15 * 5.0));
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_curve(&[(0.1, 0.1), (0.2, 0.2)], 3),
            Err(LaneGeomError::InsufficientPoints { .. })
        ));
        let same_y = [(0.1, 0.5), (0.2, 0.5), (0.3, 0.5)];
        assert!(matches!(fit_curve(&same_y, 1), Err(LaneGeomError::Degenerate { .. })));
        let two_rows = [(0.1, 0.2), (0.2, 0.2), (0.3, 0.8), (0.4, 0.8)];
        assert!(matches!(fit_curve(&two_rows, 3), Err(LaneGeomError::Degenerate { .. })));
    }

    #[test]
    fn hungarian_zero_diagonal() {
        let m = CostMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let a = hungarian(&m);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn hungarian_three_by_three() {
        let m = CostMatrix::from_rows(&[
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ])
        .unwrap();
        let a = hungarian(&m);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn hungarian_tie_break_is_lexicographic() {
        let ones = CostMatrix::from_rows(&[vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(hungarian(&ones).pairs, vec![(0, 0), (1, 1)]);
        let tall = CostMatrix::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(hungarian(&tall).pairs, vec![(0, 0)]);
        let tall = CostMatrix::from_rows(&[vec![3.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(hungarian(&tall).pairs, vec![(1, 0)]);
    }

    #[test]
    fn hungarian_empty_sides() {
        let m = CostMatrix::new(0, 3, vec![]).unwrap();
        assert!(hungarian(&m).pairs.is_empty());
        let m = CostMatrix::new(2, 0, vec![]).unwrap();
        assert!(hungarian(&m).pairs.is_empty());
    }

    #[test]
    fn cost_matrix_rejects_bad_entries() {
        assert!(CostMatrix::from_rows(&[vec![1.0, -0.5]]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn assignment_cost_examples() {
        let rows = even_rows(0.0, 1.0, 20);
        let lanes = vec![LaneCurve::constant(0.2), LaneCurve::constant(0.5)];
        let m = lane_assignment_costs(&lanes, &lanes, &rows, DEFAULT_NO_OVERLAP_PENALTY);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert!((m.get(0, 1) - 0.3).abs() < 1e-12);

        let top = LaneCurve::new([0.0, 0.0, 0.0, 0.2], (0.0, 0.3), 1.0);
        let bottom = LaneCurve::new([0.0, 0.0, 0.0, 0.2], (0.6, 1.0), 1.0);
        let m = lane_assignment_costs(&[top], &[bottom], &rows, DEFAULT_NO_OVERLAP_PENALTY);
        assert_eq!(m.get(0, 0), 10.0);
    }

    #[test]
    fn curve_validation() {
        assert!(LaneCurve::constant(0.3).validate().is_ok());
        assert!(LaneCurve::new([0.0, 0.0, 0.0, 0.3], (0.5, 0.5), 1.0).validate().is_err());
        assert!(LaneCurve::new([0.0, 0.0, 0.0, 1.8], (0.0, 1.0), 1.0).validate().is_err());
        assert!(LaneCurve::new([0.0, 0.0, 0.0, 0.3], (0.0, 1.0), 1.2).validate().is_err());
    }
}
