//! Dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Columns of `vectors` follow the same order.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

pub fn sym_eigen_desc(m: &Matrix) -> SortedEigen {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    SortedEigen { values, vectors }
}

/// Reconstruct `V diag(f(λ)) Vᵀ`.
pub fn reconstruct(e: &SortedEigen, f: impl Fn(f64) -> f64) -> Matrix {
    let mut scaled = e.vectors.clone();
    for (j, &lam) in e.values.iter().enumerate() {
        let s = f(lam);
        scaled.column_mut(j).scale_mut(s);
    }
    let mut out = &scaled * e.vectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().singular_values().iter().fold(0.0_f64, |acc, v| acc.max(*v))
}

pub fn spectral_radius(m: &Matrix) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

pub fn trace(m: &Matrix) -> f64 {
    m.diagonal().sum()
}

/// Symmetric PSD square root and inverse square root, or `None` when the
/// smallest eigenvalue is not strictly positive.
pub fn sym_sqrt_and_inv_sqrt(m: &Matrix) -> Option<(Matrix, Matrix)> {
    let e = sym_eigen_desc(m);
    let min = *e.values.last()?;
    let max = e.values[0];
    if !(min > max.abs() * 1e-14) {
        return None;
    }
    Some((reconstruct(&e, f64::sqrt), reconstruct(&e, |l| 1.0 / l.sqrt())))
}

/// Column-major `vec`.
pub fn vec_of(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v)
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Plain nested-row representation used by the serde-facing configs.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<Matrix> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(Matrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Small fixed-storage routines for the r×r matrices in the inner loops
/// (simulation substeps and likelihood terms), row-major flat slices.
pub(crate) mod small {
    /// In-place lower Cholesky. Returns false if a pivot is not positive.
    pub fn cholesky(a: &[f64], l: &mut [f64], n: usize) -> bool {
        l.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return false;
            }
            let ljj = d.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        true
    }

    /// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
    /// `vals` receives eigenvalues, `vecs` (row-major) eigenvectors in columns.
    pub fn jacobi_eigen(a: &[f64], vals: &mut [f64], vecs: &mut [f64], work: &mut [f64], n: usize) {
        work[..n * n].copy_from_slice(&a[..n * n]);
        for i in 0..n {
            for j in 0..n {
                vecs[i * n + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        for _sweep in 0..64 {
            let mut off = 0.0;
            let mut diag = 0.0;
            for i in 0..n {
                diag += work[i * n + i] * work[i * n + i];
                for j in (i + 1)..n {
                    off += work[i * n + j] * work[i * n + j];
                }
            }
            if off <= 1e-30 * diag.max(1e-300) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = work[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = work[p * n + p];
                    let aqq = work[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = work[k * n + p];
                        let akq = work[k * n + q];
                        work[k * n + p] = c * akp - s * akq;
                        work[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = work[p * n + k];
                        let aqk = work[q * n + k];
                        work[p * n + k] = c * apk - s * aqk;
                        work[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = vecs[k * n + p];
                        let vkq = vecs[k * n + q];
                        vecs[k * n + p] = c * vkp - s * vkq;
                        vecs[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        for i in 0..n {
            vals[i] = work[i * n + i];
        }
    }

    /// out = a * b * aᵀ for square n×n matrices.
    /// Inverse of L Lᵀ from its lower Cholesky factor `l` (row-major).
    pub fn cholesky_inverse(l: &[f64], out: &mut [f64], linv: &mut [f64], n: usize) {
        linv.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            linv[i * n + i] = 1.0 / l[i * n + i];
            for j in 0..i {
                let mut s = 0.0;
                for k in j..i {
                    s += l[i * n + k] * linv[k * n + j];
                }
                linv[i * n + j] = -s / l[i * n + i];
            }
        }
        // (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += linv[k * n + i] * linv[k * n + j];
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
    }

    pub fn sandwich(a: &[f64], b: &[f64], out: &mut [f64], tmp: &mut [f64], n: usize) {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[k * n + j];
                }
                tmp[i * n + j] = s;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += tmp[i * n + k] * a[j * n + k];
                }
                out[i * n + j] = s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_eigen_is_descending_and_reconstructs() {
        let m = Matrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let e = sym_eigen_desc(&m);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let back = reconstruct(&e, |l| l);
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let m = Matrix::from_row_slice(3, 3, &[4.0, 1.0, -2.0, 1.0, 2.0, 0.3, -2.0, 0.3, 5.0]);
        let flat: Vec<f64> = (0..9).map(|k| m[(k / 3, k % 3)]).collect();
        let mut vals = [0.0; 3];
        let mut vecs = [0.0; 9];
        let mut work = [0.0; 9];
        small::jacobi_eigen(&flat, &mut vals, &mut vecs, &mut work, 3);
        let mut v = vals.to_vec();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let e = sym_eigen_desc(&m);
        for (a, b) in v.iter().zip(e.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_cholesky_rejects_indefinite() {
        let mut l = [0.0; 4];
        assert!(small::cholesky(&[1.0, 0.5, 0.5, 1.0], &mut l, 2));
        assert!(!small::cholesky(&[1.0, 2.0, 2.0, 1.0], &mut l, 2));
    }

    #[test]
    fn small_cholesky_inverse() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let mut l = [0.0; 9];
        let (mut inv, mut tmp) = ([0.0; 9], [0.0; 9]);
        assert!(small::cholesky(&a, &mut l, 3));
        small::cholesky_inverse(&l, &mut inv, &mut tmp, 3);
        let expected = Matrix::from_row_slice(3, 3, &a).try_inverse().unwrap();
        assert!((Matrix::from_row_slice(3, 3, &inv) - expected).amax() < 1e-14);
    }
}
