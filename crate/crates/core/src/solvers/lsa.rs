use crate::error::{ensure, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

/// Result of a rectangular assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    /// Column chosen for each row; `None` for unmatched rows of a tall matrix.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: T,
    /// Dual potentials `u` (rows) and `v` (columns) with
    /// `cost[i][j] - u[i] - v[j] >= 0` and equality on matched pairs.
    pub row_duals: Vec<T>,
    pub col_duals: Vec<T>,
}

impl<T: Scalar> Assignment<T> {
    /// Matched `(row, col)` pairs in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
            .collect()
    }

    /// Value of the dual objective; equals `total_cost` at the optimum.
    pub fn dual_value(&self) -> T {
        self.row_duals.iter().copied().sum::<T>() + self.col_duals.iter().copied().sum::<T>()
    }
}

/// Minimum-cost injective assignment of `min(r, c)` pairs.
///
/// Shortest augmenting path with Dijkstra-like label updates (Crouse 2016,
/// the Jonker-Volgenant family). Tall matrices are solved transposed.
pub fn linear_sum_assignment<T: Scalar>(cost: &Matrix<T>) -> Result<Assignment<T>> {
    let (r, c) = cost.shape();
    ensure!(r >= 1 && c >= 1, InvalidArgument, "empty {r}x{c} cost matrix");
    ensure!(cost.is_finite(), InvalidArgument, "cost matrix has non-finite entries");
    if r > c {
        let t = solve_wide(&cost.transpose());
        let mut row_to_col = vec![None; r];
        for (col, row) in t.row_to_col.iter().enumerate() {
            if let Some(row) = row {
                row_to_col[*row] = Some(col);
            }
        }
        return Ok(Assignment {
            row_to_col,
            total_cost: t.total_cost,
            row_duals: t.col_duals,
            col_duals: t.row_duals,
        });
    }
    Ok(solve_wide(cost))
}

fn solve_wide<T: Scalar>(cost: &Matrix<T>) -> Assignment<T> {
    let (nr, nc) = cost.shape();
    let inf = T::infinity();
    let mut u = vec![T::zero(); nr];
    let mut v = vec![T::zero(); nc];
    let mut spc = vec![inf; nc];
    let mut path = vec![usize::MAX; nc];
    let mut col4row = vec![usize::MAX; nr];
    let mut row4col = vec![usize::MAX; nc];
    let mut sr = vec![false; nr];
    let mut sc = vec![false; nc];
    let mut remaining = vec![0usize; nc];

    for cur in 0..nr {
        // shortest augmenting path from `cur` to a free column
        let mut min_val = T::zero();
        let mut num_remaining = nc;
        for (it, slot) in remaining.iter_mut().enumerate() {
            *slot = nc - it - 1;
        }
        sr.fill(false);
        sc.fill(false);
        spc.fill(inf);
        let mut sink = usize::MAX;
        let mut i = cur;
        while sink == usize::MAX {
            let mut index = usize::MAX;
            let mut lowest = inf;
            sr[i] = true;
            let row = cost.row(i);
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let reduced = min_val + row[j] - u[i] - v[j];
                if reduced < spc[j] {
                    path[j] = i;
                    spc[j] = reduced;
                }
                if spc[j] < lowest || (spc[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = spc[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == usize::MAX {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur] += min_val;
        for ii in 0..nr {
            if sr[ii] && ii != cur {
                u[ii] += min_val - spc[col4row[ii]];
            }
        }
        for j in 0..nc {
            if sc[j] {
                v[j] -= min_val - spc[j];
            }
        }
        let mut j = sink;
        loop {
            let ii = path[j];
            row4col[j] = ii;
            std::mem::swap(&mut col4row[ii], &mut j);
            if ii == cur {
                break;
            }
        }
    }

    let total_cost = (0..nr).map(|i| cost[(i, col4row[i])]).sum();
    Assignment {
        row_to_col: col4row.into_iter().map(Some).collect(),
        total_cost,
        row_duals: u,
        col_duals: v,
    }
}
