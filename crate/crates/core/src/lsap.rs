//! Exact linear sum assignment.
//!
//! [`solve_lsap`] finds a permutation minimizing (or maximizing) the total
//! cost of a square matrix in O(n^3) via shortest augmenting paths with
//! dual potentials. Ties are resolved deterministically: among assignments
//! whose total equals the optimum exactly, the lexicographically smallest
//! permutation is returned. That refinement runs on the tight-edge graph of
//! the dual solution and is only accepted when its objective matches the
//! primal optimum bit for bit, so it can never trade optimality for order.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the column matched to row `i`.
    pub perm: Vec<usize>,
    /// Total cost under the original (un-negated) matrix.
    pub objective: f64,
}

pub fn solve_lsap(cost: &[Vec<f64>], maximize: bool) -> Result<Assignment> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(CoreError::InvalidArgument {
                op: "solve_lsap",
                detail: format!("row {} has {} entries in a {}-row matrix", i, row.len(), n),
            });
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument {
                op: "solve_lsap",
                detail: format!("non-finite cost {} in row {}", v, i),
            });
        }
    }
    if n == 0 {
        return Ok(Assignment {
            perm: vec![],
            objective: 0.0,
        });
    }

    // Work on a minimization copy.
    let sign = if maximize { -1.0 } else { 1.0 };
    let a: Vec<Vec<f64>> = cost
        .iter()
        .map(|row| row.iter().map(|&v| sign * v).collect())
        .collect();

    let (perm, u, v) = jv_min(&a);
    let objective = |p: &[usize]| -> f64 {
        p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    };
    let base_obj = objective(&perm);

    // Lexicographic refinement over exactly-optimal assignments. Tight
    // edges have zero reduced cost; the tolerance only widens the candidate
    // set, the exact objective comparison below keeps it honest.
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = 1e-9 * (1.0 + scale);
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (a[i][j] - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();
    if let Some(lex) = lex_smallest_perfect_matching(&tight, n) {
        if objective(&lex) == base_obj {
            return Ok(Assignment {
                perm: lex,
                objective: base_obj,
            });
        }
    }
    Ok(Assignment {
        perm,
        objective: base_obj,
    })
}

/// Shortest-augmenting-path assignment on a minimization matrix. Returns
/// the row-to-column permutation and the final dual potentials `(u, v)`.
fn jv_min(a: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = a.len();
    // 1-indexed arrays with column 0 as the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (0 = none)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    (perm, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching in a bipartite graph given
/// as per-row candidate columns (ascending). Greedy: fix the smallest
/// feasible column per row, feasibility checked by augmenting-path
/// matching on the remaining rows.
fn lex_smallest_perfect_matching(adj: &[Vec<usize>], n: usize) -> Option<Vec<usize>> {
    // A perfect matching must exist at all before refining greedily.
    if max_matching(adj, n, &[]) != n {
        return None;
    }
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(n);
    let mut used_cols = vec![false; n];
    for i in 0..n {
        let mut chosen = None;
        for &j in &adj[i] {
            if used_cols[j] {
                continue;
            }
            fixed.push((i, j));
            used_cols[j] = true;
            // The remaining rows must still be matchable into free columns.
            let rest_rows: Vec<usize> = (i + 1..n).collect();
            if matching_covers(adj, &rest_rows, &used_cols) {
                chosen = Some(j);
                break;
            }
            fixed.pop();
            used_cols[j] = false;
        }
        chosen?;
    }
    let mut perm = vec![0usize; n];
    for (i, j) in fixed {
        perm[i] = j;
    }
    Some(perm)
}

/// Checks that every row in `rows` can be matched simultaneously into
/// columns not yet marked used.
fn matching_covers(adj: &[Vec<usize>], rows: &[usize], used_cols: &[bool]) -> bool {
    let n = used_cols.len();
    let mut col_owner = vec![usize::MAX; n];
    for &r in rows {
        let mut visited = vec![false; n];
        if !augment(adj, r, used_cols, &mut visited, &mut col_owner) {
            return false;
        }
    }
    true
}

fn max_matching(adj: &[Vec<usize>], n: usize, _unused: &[usize]) -> usize {
    let used_cols = vec![false; n];
    let mut col_owner = vec![usize::MAX; n];
    let mut matched = 0;
    for r in 0..n {
        let mut visited = vec![false; n];
        if augment(adj, r, &used_cols, &mut visited, &mut col_owner) {
            matched += 1;
        }
    }
    matched
}

fn augment(
    adj: &[Vec<usize>],
    row: usize,
    used_cols: &[bool],
    visited: &mut [bool],
    col_owner: &mut [usize],
) -> bool {
    for &j in &adj[row] {
        if used_cols[j] || visited[j] {
            continue;
        }
        visited[j] = true;
        if col_owner[j] == usize::MAX || augment(adj, col_owner[j], used_cols, visited, col_owner) {
            col_owner[j] = row;
            return true;
        }
    }
    false
}
