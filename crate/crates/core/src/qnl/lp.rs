//! Dense primal simplex for `max c·x  s.t.  A x <= b, x >= 0` with `b >= 0`,
//! so the all-slack basis is feasible and no phase one is needed.

const EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    pub x: Vec<f64>,
    /// Shadow price of each row.
    pub duals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpError {
    Unbounded,
    /// A row has a negative right-hand side.
    Infeasible,
}

/// Solves with Bland's rule, which cannot cycle on degenerate problems.
pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<LpSolution, LpError> {
    let m = a.len();
    let n = c.len();
    if b.iter().any(|v| *v < -EPS) {
        return Err(LpError::Infeasible);
    }
    let width = n + m;
    let mut t: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![0.0; width + 1];
            r[..n].copy_from_slice(row);
            r[n + i] = 1.0;
            r[width] = b[i].max(0.0);
            r
        })
        .collect();
    let mut z = vec![0.0; width + 1];
    for j in 0..n {
        z[j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..width).collect();

    while let Some(enter) = (0..width).find(|&j| z[j] < -EPS) {
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][enter] > EPS {
                let ratio = t[i][width] / t[i][enter];
                let take = match leave {
                    None => true,
                    Some(l) => ratio < best - EPS || (ratio <= best + EPS && basis[i] < basis[l]),
                };
                if take {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(r) = leave else {
            return Err(LpError::Unbounded);
        };
        let p = t[r][enter];
        for v in t[r].iter_mut() {
            *v /= p;
        }
        let pivot = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r && row[enter].abs() > 0.0 {
                let f = row[enter];
                for (v, pv) in row.iter_mut().zip(&pivot) {
                    *v -= f * pv;
                }
            }
        }
        let f = z[enter];
        for (v, pv) in z.iter_mut().zip(&pivot) {
            *v -= f * pv;
        }
        basis[r] = enter;
    }

    let mut x = vec![0.0; n];
    for (i, &j) in basis.iter().enumerate() {
        if j < n {
            x[j] = t[i][width];
        }
    }
    Ok(LpSolution {
        objective: z[width],
        x,
        duals: z[n..width].to_vec(),
    })
}
