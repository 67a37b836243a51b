//! Exact minimum-cost bipartite assignment.

use crate::error::{Error, Result};

/// Dense `rows x cols` cost matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "cost_matrix",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// A one-to-one assignment of `min(rows, cols)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query, ground truth)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Sum of the matched costs, accumulated in pair order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.at(q, g)).sum()
    }
}

/// Minimum-total-cost assignment covering `min(Q, G)` pairs.
///
/// Rectangular inputs are padded to square with a sentinel cost larger than
/// any real entry; pairs touching padding are dropped from the result.
pub fn hungarian_match(cost: &CostMatrix) -> Result<MatchResult> {
    if let Some(i) = cost.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "cost[{}][{}] = {}",
            i / cost.cols.max(1),
            i % cost.cols.max(1),
            cost.data[i]
        )));
    }
    let n = cost.rows.max(cost.cols);
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(MatchResult { pairs: Vec::new() });
    }
    let sentinel = cost.data.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1.0;
    let mut square = vec![sentinel; n * n];
    for r in 0..cost.rows {
        square[r * n..r * n + cost.cols].copy_from_slice(&cost.data[r * cost.cols..(r + 1) * cost.cols]);
    }
    let col_of_row = solve_square(&square, n);
    let pairs = col_of_row
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < cost.rows && c < cost.cols)
        .collect();
    Ok(MatchResult { pairs })
}

// Shortest augmenting path with row/column potentials, O(n^3).
// Index 0 is a virtual column used as the augmentation root.
fn solve_square(a: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    col_of_row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> CostMatrix {
        CostMatrix::new(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one() {
        let c = m(1, 1, &[3.5]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total(&c), 3.5);
    }

    #[test]
    fn two_by_two_diagonal() {
        let c = m(2, 2, &[1., 2., 2., 1.]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total(&c), 2.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let tall = m(3, 1, &[5., 1., 3.]);
        assert_eq!(hungarian_match(&tall).unwrap().pairs, vec![(1, 0)]);
        let wide = m(1, 3, &[5., 1., 3.]);
        assert_eq!(hungarian_match(&wide).unwrap().pairs, vec![(0, 1)]);
    }

    #[test]
    fn negative_costs() {
        let c = m(2, 3, &[-1., -5., 0., -4., -6., 2.]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.total(&c), -9.0);
    }

    #[test]
    fn empty_sides() {
        assert!(hungarian_match(&CostMatrix::zeros(0, 4)).unwrap().pairs.is_empty());
        assert!(hungarian_match(&CostMatrix::zeros(3, 0)).unwrap().pairs.is_empty());
    }

    #[test]
    fn nan_rejected() {
        let c = m(2, 2, &[1., f64::NAN, 0., 0.]);
        assert!(matches!(hungarian_match(&c), Err(Error::NonFinite(_))));
    }
}
