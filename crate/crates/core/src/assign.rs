//! Maximum-weight bipartite assignment with forbidden pairs.

use ndarray::Array2;

/// Maximum-total-score partial assignment over `scores` (rows × cols).
/// Entries that are `-inf`, NaN or non-positive are never matched, since
/// leaving a pair unmatched scores zero. Returns `(row, col)` pairs sorted by row.
pub fn max_weight_assignment(scores: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = scores.dim();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let k = n.max(m);
    let weight = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            let s = scores[[i, j]];
            if s.is_finite() && s > 0.0 {
                return s;
            }
        }
        0.0
    };
    let cost = Array2::from_shape_fn((k, k), |(i, j)| -weight(i, j));
    let col_of_row = hungarian_min(&cost);
    let mut out: Vec<(usize, usize)> = col_of_row
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| weight(i, j) > 0.0)
        .collect();
    out.sort_unstable();
    out
}

/// Square min-cost assignment (shortest augmenting paths with potentials).
/// Returns the column assigned to each row.
pub fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays; index 0 is the virtual source column
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
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
    use ndarray::array;

    #[test]
    fn single_pair() {
        assert_eq!(max_weight_assignment(&array![[2.5]]), vec![(0, 0)]);
    }

    #[test]
    fn forbidden_off_diagonal() {
        let e = array![[2.0, f64::NEG_INFINITY], [f64::NEG_INFINITY, 2.1]];
        assert_eq!(max_weight_assignment(&e), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn all_forbidden_matches_nothing() {
        let e = Array2::from_elem((2, 3), f64::NEG_INFINITY);
        assert!(max_weight_assignment(&e).is_empty());
    }

    #[test]
    fn rectangular_prefers_best_column() {
        let e = array![[1.9, 2.9, 2.0]];
        assert_eq!(max_weight_assignment(&e), vec![(0, 1)]);
    }

    #[test]
    fn classic_min_cost() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let a = hungarian_min(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        assert_eq!(total, 5.0);
    }
}
