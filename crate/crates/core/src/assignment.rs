//! Minimum-cost perfect matching on a square cost matrix (Hungarian method
//! with row/column potentials, O(n³)).

/// Returns `assign` with `assign[row] = column` and the total cost.
/// `cost` is row-major `n×n`.
pub fn solve(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free); column 0 is a sentinel.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum();
    (assign, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn go(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    go(cost, n, row + 1, used, acc + cost[row * n + c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = RngStream::new(11, "assignment");
        for trial in 0..200 {
            let n = 1 + trial % 7;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.uniform(0.0, 10.0).round() as f64).collect();
            let (assign, total) = solve(&cost, n);
            let mut cols = assign.clone();
            cols.sort_unstable();
            assert_eq!(cols, (0..n).collect::<Vec<_>>());
            assert!((total - brute_force(&cost, n)).abs() < 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn recovers_hidden_permutation() {
        let perm = [3usize, 0, 4, 1, 2];
        let mut cost = vec![1.0; 25];
        for (r, &c) in perm.iter().enumerate() {
            cost[r * 5 + c] = 0.0;
        }
        assert_eq!(solve(&cost, 5).0, perm);
    }

    #[test]
    fn never_worse_than_identity() {
        let mut rng = RngStream::new(3, "assignment/identity");
        for _ in 0..50 {
            let n = 12;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.normal() as f64).collect();
            let identity: f64 = (0..n).map(|i| cost[i * n + i]).sum();
            assert!(solve(&cost, n).1 <= identity + 1e-12);
        }
    }
}
