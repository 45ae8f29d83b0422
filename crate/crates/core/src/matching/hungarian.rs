//! Minimum-cost injective assignment of rows to columns.

use crate::error::{Error, Result};

/// Row-major `rows × cols` cost matrix; rows are targets, columns queries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "cost matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `sigma[q]` is the query assigned to target `q`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    pub sigma: Vec<usize>,
}

impl Assignment {
    pub fn total(&self, costs: &CostMatrix) -> f64 {
        self.sigma
            .iter()
            .enumerate()
            .map(|(r, &c)| costs.at(r, c))
            .sum()
    }

    /// Target matched to each query, if any.
    pub fn inverse(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for (t, &q) in self.sigma.iter().enumerate() {
            out[q] = Some(t);
        }
        out
    }
}

/// Optimal assignment, ties resolved toward the lexicographically smallest
/// `sigma`.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    if costs.rows > costs.cols {
        return Err(Error::TooManyTargets {
            rows: costs.rows,
            cols: costs.cols,
        });
    }
    if let Some(i) = costs.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost {
            row: i / costs.cols,
            col: i % costs.cols,
        });
    }
    if costs.rows == 0 {
        return Ok(Assignment::default());
    }
    let all_rows: Vec<usize> = (0..costs.rows).collect();
    let all_cols: Vec<usize> = (0..costs.cols).collect();
    let (best, _) = solve(costs, &all_rows, &all_cols);
    let scale: f64 = costs.data.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let tol = 1e-12 * scale * costs.rows as f64;

    let mut sigma = Vec::with_capacity(costs.rows);
    let mut free = all_cols;
    let mut fixed = 0.0;
    for r in 0..costs.rows {
        let rest: Vec<usize> = (r + 1..costs.rows).collect();
        let mut chosen = None;
        for (slot, &c) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let (sub, _) = solve(costs, &rest, &others);
            if fixed + costs.at(r, c) + sub <= best + tol {
                chosen = Some(slot);
                break;
            }
        }
        // Rounding can in principle reject every column; fall back to the
        // optimal solution of the remaining subproblem.
        let slot = match chosen {
            Some(s) => s,
            None => {
                let rows: Vec<usize> = (r..costs.rows).collect();
                let (_, assign) = solve(costs, &rows, &free);
                free.iter()
                    .position(|&c| c == assign[0])
                    .expect("column is free")
            }
        };
        let c = free.remove(slot);
        fixed += costs.at(r, c);
        sigma.push(c);
    }
    Ok(Assignment { sigma })
}

/// Shortest augmenting path with potentials on the sub-matrix
/// `rows × cols`; returns the optimum and the chosen column per row.
fn solve(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| costs.at(rows[i - 1], cols[j - 1]);
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
                    let cur = a(i0, j) - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| costs.at(rows[i], c))
        .sum();
    (total, assign)
}
