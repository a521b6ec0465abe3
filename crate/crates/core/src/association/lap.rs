//! Exact rectangular linear assignment by shortest augmenting paths with
//! dual potentials (Hungarian method).

use crate::error::{Error, Result};

/// Dense cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("cost matrix contains NaN".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Assigns every column a distinct row at minimum total cost.
///
/// Returns the row chosen for each column. Requires `rows >= cols`; infinite
/// entries are forbidden assignments.
pub fn solve_assignment(costs: &CostMatrix) -> Result<Vec<usize>> {
    let (rows, cols) = (costs.rows, costs.cols);
    if cols == 0 {
        return Ok(Vec::new());
    }
    if rows < cols {
        return Err(Error::AssociationInfeasible { target: rows });
    }
    for c in 0..cols {
        if (0..rows).all(|r| costs.get(r, c).is_infinite()) {
            return Err(Error::AssociationInfeasible { target: c });
        }
    }
    // Forbidden entries get a finite cost larger than any feasible total, so
    // they are only used when no feasible assignment exists.
    let finite_sum: f64 = costs.values.iter().filter(|v| v.is_finite()).map(|v| v.abs()).sum();
    let big = (finite_sum + 1.0) * (cols as f64 + 1.0);
    let a = |c: usize, r: usize| {
        let v = costs.get(r, c);
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    // Columns are the side assigned in full (n), rows the larger side (m).
    let (n, m) = (cols, rows);
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
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    for (c, &r) in out.iter().enumerate() {
        if costs.get(r, c).is_infinite() {
            return Err(Error::AssociationInfeasible { target: c });
        }
    }
    Ok(out)
}

/// Minimum-cost matching between rows and columns of any shape.
/// Returns `(row, col)` pairs, `min(rows, cols)` of them, sorted by row.
pub fn min_cost_matching(costs: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    let mut pairs: Vec<(usize, usize)> = if costs.rows >= costs.cols {
        solve_assignment(costs)?
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    } else {
        solve_assignment(&costs.transpose())?
            .into_iter()
            .enumerate()
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn total_cost(costs: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(c, &r)| costs.get(r, c)).sum()
}
