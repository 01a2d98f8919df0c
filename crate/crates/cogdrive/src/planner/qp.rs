//! Dense convex QP solver for the planner's control-space subproblems.
//!
//! Minimizes `0.5 x' H x + g' x` subject to `G x <= h` with `H` positive
//! definite, by an active-set method: repeatedly solve the equality-
//! constrained problem on the working set, drop constraints with negative
//! multipliers, and add the most violated one. Problems here are small
//! (tens of variables, hundreds of constraints), so each iteration refactors
//! from scratch.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per inequality row (zero when inactive).
    pub lambda: DVector<f64>,
    pub status: QpStatus,
}

const FEAS_TOL: f64 = 1e-8;
/// Multipliers beyond this signal an inconsistent (infeasible) working set:
/// physical multipliers stay many orders of magnitude smaller.
const LAMBDA_BLOWUP: f64 = 1e9;

/// Solve `min 0.5 x'Hx + g'x  s.t.  G x <= h` from a cold start.
#[cfg_attr(not(test), allow(dead_code))]
pub fn solve_qp(
    h_mat: &DMatrix<f64>,
    g: &DVector<f64>,
    g_ineq: &DMatrix<f64>,
    h_ineq: &DVector<f64>,
    max_iter: usize,
) -> QpSolution {
    solve_qp_warm(h_mat, g, g_ineq, h_ineq, max_iter, &[])
}

/// [`solve_qp`] seeded with a guess for the optimal active set (row indices).
/// A good guess (e.g. the previous SQP iteration's active set) collapses the
/// add/drop loop to a handful of steps; a bad one only costs the initial
/// equality solve, after which the method proceeds as from a cold start.
pub fn solve_qp_warm(
    h_mat: &DMatrix<f64>,
    g: &DVector<f64>,
    g_ineq: &DMatrix<f64>,
    h_ineq: &DVector<f64>,
    max_iter: usize,
    warm: &[usize],
) -> QpSolution {
    let n = g.len();
    let m = h_ineq.len();
    debug_assert_eq!(h_mat.nrows(), n);
    debug_assert_eq!(g_ineq.nrows(), m);

    let chol = match Cholesky::new(h_mat.clone()) {
        Some(c) => c,
        // H must be PD by construction; treat numerical failure as infeasible
        None => {
            return QpSolution {
                x: DVector::zeros(n),
                lambda: DVector::zeros(m),
                status: QpStatus::Infeasible,
            }
        }
    };
    let hinv_g = chol.solve(g);

    let mut active: Vec<usize> = Vec::new();
    // cached H^{-1} n_i and contiguous n_i per active row, so each EQP only
    // needs the k x k Schur system instead of k fresh back-solves
    let mut hn: Vec<DVector<f64>> = Vec::new();
    let mut nrow: Vec<DVector<f64>> = Vec::new();
    let mut x = -hinv_g.clone();
    let mut lam_active: Vec<f64> = Vec::new();

    // seed the working set from the warm guess; any failure (dependent or
    // inconsistent rows) simply falls back to the cold start above
    if !warm.is_empty() {
        for &i in warm {
            if i < m && !active.contains(&i) {
                active.push(i);
                let nt = g_ineq.row(i).transpose();
                hn.push(chol.solve(&nt));
                nrow.push(nt);
            }
        }
        match solve_eqp(h_ineq, &active, &nrow, &hn, &hinv_g) {
            Some((xx, ll)) if ll.iter().all(|l| l.abs() <= LAMBDA_BLOWUP) => {
                x = xx;
                lam_active = ll;
            }
            _ => {
                active.clear();
                hn.clear();
                nrow.clear();
            }
        }
    }

    for _iter in 0..max_iter {
        // drop the most negative multiplier, if any
        if let Some((pos, _)) = lam_active
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < -FEAS_TOL)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            active.remove(pos);
            hn.remove(pos);
            nrow.remove(pos);
            match solve_eqp(h_ineq, &active, &nrow, &hn, &hinv_g) {
                Some((xx, ll)) => {
                    x = xx;
                    lam_active = ll;
                }
                None => {
                    return finish(QpStatus::Infeasible, x, &active, &lam_active, m);
                }
            }
            if lam_active.iter().any(|l| l.abs() > LAMBDA_BLOWUP) {
                return finish(QpStatus::Infeasible, x, &active, &lam_active, m);
            }
            continue;
        }

        // most violated inactive constraint
        let gx = g_ineq * &x;
        let mut worst = FEAS_TOL;
        let mut worst_i = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let v = gx[i] - h_ineq[i];
            if v > worst {
                worst = v;
                worst_i = Some(i);
            }
        }
        let Some(p) = worst_i else {
            return finish(QpStatus::Optimal, x, &active, &lam_active, m);
        };

        active.push(p);
        let nt = g_ineq.row(p).transpose();
        hn.push(chol.solve(&nt));
        nrow.push(nt);
        match solve_eqp(h_ineq, &active, &nrow, &hn, &hinv_g) {
            Some((xx, ll)) => {
                x = xx;
                lam_active = ll;
            }
            None => {
                return finish(QpStatus::Infeasible, x, &active, &lam_active, m);
            }
        }
        if lam_active.iter().any(|l| l.abs() > LAMBDA_BLOWUP) {
            return finish(QpStatus::Infeasible, x, &active, &lam_active, m);
        }
    }
    finish(QpStatus::MaxIter, x, &active, &lam_active, m)
}

fn finish(
    status: QpStatus,
    x: DVector<f64>,
    active: &[usize],
    lam_active: &[f64],
    m: usize,
) -> QpSolution {
    let mut lambda = DVector::zeros(m);
    for (&i, &l) in active.iter().zip(lam_active) {
        lambda[i] = l.max(0.0);
    }
    QpSolution { x, lambda, status }
}

/// Equality-constrained subproblem on the working set via block elimination:
/// `x = -H^{-1}(g + N' l)`, `l = -(N H^{-1} N')^{-1} (h_W + N H^{-1} g)`.
fn solve_eqp(
    h_ineq: &DVector<f64>,
    active: &[usize],
    nrow: &[DVector<f64>],
    hn: &[DVector<f64>],
    hinv_g: &DVector<f64>,
) -> Option<(DVector<f64>, Vec<f64>)> {
    if active.is_empty() {
        return Some((-hinv_g.clone(), Vec::new()));
    }
    let k = active.len();
    // Schur system N H^{-1} N' from the cached H^{-1} n_c columns
    let mut kkt = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (r, &i) in active.iter().enumerate() {
        let row = &nrow[r];
        for (c, col) in hn.iter().enumerate() {
            kkt[(r, c)] = row.dot(col);
        }
        rhs[r] = -(h_ineq[i] + row.dot(hinv_g));
    }
    let lam = match kkt.clone().lu().solve(&rhs) {
        Some(l) if (&kkt * &l - &rhs).norm() <= 1e-8 * (1.0 + rhs.norm()) => l,
        // dependent working-set rows: fall back to a lightly regularized
        // solve; truly inconsistent systems push the multipliers to
        // astronomically large values, which the caller detects
        _ => {
            let mut reg = kkt.clone();
            for i in 0..k {
                reg[(i, i)] += 1e-11;
            }
            reg.lu().solve(&rhs)?
        }
    };
    let mut x = -hinv_g.clone();
    for (c, col) in hn.iter().enumerate() {
        x.axpy(-lam[c], col, 1.0);
    }
    Some((x, lam.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn unconstrained_minimum() {
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-2.0, -4.0]);
        let sol = solve_qp(&h, &g, &DMatrix::zeros(0, 2), &DVector::zeros(0), 50);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn single_active_constraint() {
        // min (x-1)^2 + (y-2)^2 s.t. y <= 1 -> (1, 1), lambda = 2
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-2.0, -4.0]);
        let gi = dm(1, 2, &[0.0, 1.0]);
        let hi = DVector::from_row_slice(&[1.0]);
        let sol = solve_qp(&h, &g, &gi, &hi, 50);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] - 1.0).abs() < 1e-10);
        assert!((sol.lambda[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn inactive_constraint_has_zero_multiplier() {
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-2.0, -4.0]);
        let gi = dm(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let hi = DVector::from_row_slice(&[10.0, 1.5]);
        let sol = solve_qp(&h, &g, &gi, &hi, 50);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.lambda[0], 0.0);
        // complementary slackness
        for i in 0..2 {
            let slack = hi[i] - gi.row(i).dot(&sol.x.transpose());
            assert!(sol.lambda[i] * slack < 1e-8);
        }
    }

    #[test]
    fn corner_solution_with_two_constraints() {
        // min x^2 + y^2 s.t. -x <= -1, -y <= -1 -> (1,1)
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::zeros(2);
        let gi = dm(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let hi = DVector::from_row_slice(&[-1.0, -1.0]);
        let sol = solve_qp(&h, &g, &gi, &hi, 50);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10 && (sol.x[1] - 1.0).abs() < 1e-10);
        assert!(sol.lambda[0] > 0.0 && sol.lambda[1] > 0.0);
    }

    #[test]
    fn inconsistent_constraints_detected() {
        // x <= -1 and -x <= -2 (i.e. x >= 2): empty feasible set
        let h = dm(1, 1, &[2.0]);
        let g = DVector::zeros(1);
        let gi = dm(2, 1, &[1.0, -1.0]);
        let hi = DVector::from_row_slice(&[-1.0, -2.0]);
        let sol = solve_qp(&h, &g, &gi, &hi, 50);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn degenerate_duplicate_rows_ok() {
        // duplicated constraint rows must not break the solve
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_row_slice(&[-2.0, -4.0]);
        let gi = dm(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let hi = DVector::from_row_slice(&[1.0, 1.0]);
        let sol = solve_qp(&h, &g, &gi, &hi, 50);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[1] - 1.0).abs() < 1e-9);
    }
}
