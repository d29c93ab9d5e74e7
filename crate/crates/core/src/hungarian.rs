//! Rectangular minimum-cost assignment (shortest augmenting paths with
//! potentials).

use crate::error::{KdsmError, Result};

/// Assigns each of the `rows` rows of the row-major `cost` matrix to a
/// distinct column, minimizing total cost. Requires `rows <= cols`. Returns
/// the column chosen for each row.
pub fn solve(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if cost.len() != rows * cols {
        return Err(KdsmError::Dimension {
            op: "assignment",
            lhs: vec![rows, cols],
            rhs: vec![cost.len()],
        });
    }
    if rows > cols {
        return Err(KdsmError::Config(format!(
            "cannot assign {rows} rows to {cols} distinct columns"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(KdsmError::Numeric("non-finite assignment cost".into()));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; index 0 is the virtual start
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut out = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[r * cols + c] + rec(cost, rows, cols, r + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, rows, cols, 0, &mut vec![false; cols])
    }

    #[test]
    fn small_worked_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve(&cost, 3, 3).unwrap();
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn matches_brute_force_on_rectangles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(rows..=6);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
            let a = solve(&cost, rows, cols).unwrap();
            let mut seen = a.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), rows);
            let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
            assert!((total - brute(&cost, rows, cols)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_rows() {
        assert!(solve(&[0.0; 6], 3, 2).is_err());
        assert_eq!(solve(&[], 0, 4).unwrap(), Vec::<usize>::new());
    }
}
