//! Euclidean projection onto `{x : <x, r_i> >= 0}` for at most three rows.
//!
//! The primal `min 1/2 |x - g|^2 s.t. R x >= 0` has the dual
//! `min_{l >= 0} 1/2 l' (R R') l + l' (R g)` with `x = g + R' l`. With three
//! rows there are only eight active sets, so every one is solved directly
//! and the KKT point of least displacement is returned.

use log::warn;

use super::{ConstraintKind, ContinualError, GradientConstraintSet};

pub const MAX_ROWS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub value: Vec<f64>,
    /// Rows whose multiplier is positive at the solution.
    pub active: Vec<ConstraintKind>,
    /// All-zero rows ignored during the solve.
    pub dropped: Vec<ConstraintKind>,
    /// `g` already satisfied every row and was returned untouched.
    pub unchanged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `m x = rhs` for `n <= 3` by Gaussian elimination with partial
/// pivoting. `None` when a pivot vanishes relative to the matrix scale.
fn solve_small(mut m: [[f64; MAX_ROWS]; MAX_ROWS], mut rhs: [f64; MAX_ROWS], n: usize) -> Option<[f64; MAX_ROWS]> {
    let scale = (0..n).map(|i| m[i][i].abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; MAX_ROWS];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Some(x)
}

pub fn qp_project(g: &[f64], set: &GradientConstraintSet) -> Result<Projection, ContinualError> {
    if set.is_empty() {
        return Err(ContinualError::NoConstraints);
    }
    if g.len() != set.dim() {
        return Err(ContinualError::DimensionMismatch {
            expected: set.dim(),
            actual: g.len(),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(ContinualError::NonFiniteGradient);
    }

    let mut rows: Vec<(ConstraintKind, &[f64])> = Vec::with_capacity(MAX_ROWS);
    let mut dropped = Vec::new();
    for (kind, row) in set.rows() {
        if row.iter().all(|&v| v == 0.0) {
            warn!("dropping all-zero {kind:?} constraint row");
            dropped.push(kind);
        } else {
            rows.push((kind, row));
        }
    }

    let dots: Vec<f64> = rows.iter().map(|(_, r)| dot(g, r)).collect();
    if dots.iter().all(|&d| d >= 0.0) {
        return Ok(Projection {
            value: g.to_vec(),
            active: Vec::new(),
            dropped,
            unchanged: true,
        });
    }

    let n = rows.len();
    let mut gram = [[0.0; MAX_ROWS]; MAX_ROWS];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(rows[i].1, rows[j].1);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let g_norm = dot(g, g).sqrt();
    let row_norms: Vec<f64> = (0..n).map(|i| gram[i][i].sqrt()).collect();

    let mut best: Option<(f64, [f64; MAX_ROWS])> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = idx.len();
        let mut sub = [[0.0; MAX_ROWS]; MAX_ROWS];
        let mut rhs = [0.0; MAX_ROWS];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub[a][b] = gram[i][j];
            }
            rhs[a] = -dots[i];
        }
        let Some(sol) = solve_small(sub, rhs, k) else {
            continue;
        };
        let mut lambda = [0.0; MAX_ROWS];
        let mut dual_ok = true;
        for (a, &i) in idx.iter().enumerate() {
            // multipliers are in units of |g| / |r_i|
            if sol[a] < -1e-12 * g_norm / row_norms[i] {
                dual_ok = false;
            }
            lambda[i] = sol[a].max(0.0);
        }
        if !dual_ok {
            continue;
        }
        // slack of every row at x = g + R' lambda, evaluated in the dual;
        // near-parallel rows give large multipliers, so the rounding
        // allowance grows with the magnitude of the summed terms
        let primal_ok = (0..n).all(|j| {
            let terms = (0..n).map(|i| lambda[i] * gram[i][j]);
            let magnitude = dots[j].abs() + terms.clone().map(f64::abs).sum::<f64>();
            let slack = dots[j] + terms.sum::<f64>();
            slack >= -1e-12 * g_norm * row_norms[j] - 64.0 * f64::EPSILON * magnitude
        });
        if !primal_ok {
            continue;
        }
        let displacement: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| lambda[i] * lambda[j] * gram[i][j])
            .sum();
        if best.map_or(true, |(d, _)| displacement < d) {
            best = Some((displacement, lambda));
        }
    }

    let (_, lambda) = best.ok_or(ContinualError::NoFeasibleSubset)?;
    let mut value = g.to_vec();
    for (i, (_, row)) in rows.iter().enumerate() {
        if lambda[i] != 0.0 {
            for (v, r) in value.iter_mut().zip(row.iter()) {
                *v += lambda[i] * r;
            }
        }
    }
    Ok(Projection {
        value,
        active: (0..n).filter(|&i| lambda[i] > 0.0).map(|i| rows[i].0).collect(),
        dropped,
        unchanged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> GradientConstraintSet {
        let mut s = GradientConstraintSet::new(rows[0].len());
        for (kind, row) in ConstraintKind::ALL.iter().zip(rows) {
            s.set_f64(*kind, row.to_vec()).unwrap();
        }
        s
    }

    #[test]
    fn near_parallel_rows_in_the_plane_project_to_the_origin() {
        let g = [1.3373704342256478, 0.0];
        let r1: &[f64] = &[-0.371589248472454, -0.6517399052451098];
        let r2: &[f64] = &[1.0770895826526445, 1.8917305444974424];
        let r3: &[f64] = &[1.5328433002617843, 0.0];
        let p = qp_project(&g, &set(&[r1, r2, r3])).unwrap();
        assert!(p.value.iter().all(|v| v.abs() < 1e-9), "{:?}", p.value);
    }

    #[test]
    fn feasible_input_is_returned_bit_identical() {
        let g = [1.0, 0.0];
        let p = qp_project(&g, &set(&[&[0.0, 1.0]])).unwrap();
        assert!(p.unchanged);
        assert_eq!(p.value, g.to_vec());
    }

    #[test]
    fn single_row_matches_closed_form() {
        let g = [1.0, 0.0];
        let row = [-1.0, 1.0];
        let p = qp_project(&g, &set(&[&row])).unwrap();
        assert_eq!(p.value, vec![0.5, 0.5]);
        assert_eq!(dot(&p.value, &row), 0.0);
        assert_eq!(p.active, vec![ConstraintKind::Previous]);
    }

    #[test]
    fn zero_rows_are_dropped() {
        let g = [1.0, -1.0];
        let p = qp_project(&g, &set(&[&[0.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(p.dropped, vec![ConstraintKind::Previous]);
        assert_eq!(p.value, vec![1.0, 0.0]);
        let only_zero = qp_project(&g, &set(&[&[0.0, 0.0]])).unwrap();
        assert!(only_zero.unchanged);
    }

    #[test]
    fn duplicate_rows_do_not_break_the_solve() {
        let g = [1.0, 0.0, 0.0];
        let r = [-1.0, 1.0, 0.0];
        let p = qp_project(&g, &set(&[&r, &r])).unwrap();
        assert!((p.value[0] - 0.5).abs() < 1e-15 && (p.value[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(
            qp_project(&[1.0], &GradientConstraintSet::new(1)),
            Err(ContinualError::NoConstraints)
        );
        assert!(matches!(
            qp_project(&[1.0, 2.0, 3.0], &set(&[&[1.0, 0.0]])),
            Err(ContinualError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_conflicting_rows_hit_the_vertex() {
        // g points out of both half-spaces; the projection is the apex.
        let g = [-1.0, -1.0];
        let p = qp_project(&g, &set(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(p.value, vec![0.0, 0.0]);
        assert_eq!(p.active.len(), 2);
    }
}
