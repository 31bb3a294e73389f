//! Dense linear-algebra helpers shared by the solvers.
//!
//! Everything here works on dynamically sized `nalgebra` matrices. The
//! systems in this crate are desk scale (a few hundred unknowns at most),
//! so factorization-based solves with explicit conditioning diagnostics are
//! preferred over iterative methods.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest absolute entry; the `‖·‖_∞` used for all convergence tests.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &mut Mat) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub fn symmetrized(m: &Mat) -> Mat {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

pub fn is_symmetric(m: &Mat, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    max_abs(&(m - m.transpose())) <= rel_tol * scale
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn complex_eigenvalues(m: &Mat) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

/// Smallest singular value and 2-norm condition number.
pub fn conditioning(m: &Mat) -> (f64, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (f64::INFINITY, 1.0);
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    (min, cond)
}

/// Condition number of a symmetric positive definite matrix from its spectrum.
pub fn spd_condition(m: &Mat) -> f64 {
    let vals = sym_eigenvalues(m);
    match (vals.first(), vals.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Result of a linear solve together with the conditioning of the operator.
#[derive(Debug, Clone)]
pub struct CheckedSolve {
    pub solution: Mat,
    pub sigma_min: f64,
    pub cond: f64,
}

/// Solves `a x = b`, refusing when `cond(a)` exceeds `cond_cap`.
///
/// Returns the conditioning in the error case too so callers can report it.
pub fn solve_checked(a: &Mat, b: &Mat, cond_cap: f64) -> Result<CheckedSolve, (f64, f64)> {
    let (sigma_min, cond) = conditioning(a);
    if !(cond <= cond_cap) {
        return Err((sigma_min, cond));
    }
    let solution = a.clone().lu().solve(b).ok_or((sigma_min, cond))?;
    Ok(CheckedSolve { solution, sigma_min, cond })
}

/// Factor `l` with `l lᵀ = cov` from the symmetric eigendecomposition.
///
/// Eigenvalues below `clip` (including small negative round-off) are set to 0.
pub fn psd_factor(cov: &Mat, clip: f64) -> Mat {
    let n = cov.nrows();
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrized(cov));
    let mut l = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = if lambda > clip { lambda.sqrt() } else { 0.0 };
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Rank of `m` with singular values counted above `rel_tol · σ_max`.
pub fn complex_rank(m: &DMatrix<Complex<f64>>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

pub fn add_block(target: &mut Mat, row: usize, col: usize, block: &Mat) {
    let mut view = target.view_mut((row, col), (block.nrows(), block.ncols()));
    view += block;
}

pub fn set_block(target: &mut Mat, row: usize, col: usize, block: &Mat) {
    target
        .view_mut((row, col), (block.nrows(), block.ncols()))
        .copy_from(block);
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        set_block(&mut out, r, c, b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn vec_concat(parts: &[&Vector]) -> Vector {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_reconstructs_and_clips() {
        let cov = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let l = psd_factor(&cov, 1e-12);
        assert!(max_abs(&(&l * l.transpose() - &cov)) < 1e-12);

        let singular = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&singular, 1e-12);
        assert!(max_abs(&(&l * l.transpose() - &singular)) < 1e-12);
    }

    #[test]
    fn conditioning_of_singular_matrix_is_infinite() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (smin, cond) = conditioning(&m);
        assert!(smin < 1e-15);
        assert!(cond > 1e15);
        assert!(solve_checked(&m, &Mat::identity(2, 2), 1e10).is_err());
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let m = Mat::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&m) - 0.5).abs() < 1e-12);
        assert_eq!(spectral_radius(&Mat::zeros(0, 0)), 0.0);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert!((loglog_slope(&x, &y) + 1.5).abs() < 1e-12);
    }
}
