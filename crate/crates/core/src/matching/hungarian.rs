//! Minimum-cost assignment by the Hungarian method with dual potentials.
//!
//! Rectangular problems are padded to square with a constant larger than
//! every real entry; pairs that touch padding are dropped afterwards.

use super::{Assignment, CostMatrix};
use crate::error::{Error, Result};

/// Solves a square problem, returning the column assigned to each row.
/// O(n³) shortest augmenting path formulation.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            col_of_row[owner[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Minimum-total-cost injection of the smaller side of `costs` into the
/// larger. Pairs are reported through the matrix labels, sorted by object.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let (m, k) = costs.costs.dim();
    if let Some(((r, c), v)) = costs.costs.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerics(format!("cost[{r}, {c}] = {v} is not finite")));
    }
    if m == 0 || k == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let n = m.max(k);
    let pad = costs.costs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 1.0;
    let col_of_row = solve_square(n, |r, c| if r < m && c < k { costs.costs[[r, c]] } else { pad });
    let local: Vec<(usize, usize)> = col_of_row
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < m && c < k)
        .collect();
    Ok(costs.assignment_from_local(&local))
}
