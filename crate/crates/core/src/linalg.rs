//! Small dense linear-algebra helpers shared by the model, certificate and
//! solver code. Everything here works on `nalgebra` dynamic matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn sym_max_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Largest singular value, from the eigenvalues of the smaller Gram matrix.
///
/// The SVD routine loses several digits when singular values repeat (as they
/// do after clipping), so the symmetric eigensolver is used instead.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() < m.ncols() { m * m.transpose() } else { m.transpose() * m };
    sym_max_eig(&gram).max(0.0).sqrt()
}

/// Spectral radius via the (possibly complex) eigenvalues of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .fold(0.0, |acc: f64, z| acc.max(z.norm()))
}

/// Zero every entry strictly above the diagonal.
pub fn mask_lower(m: &mut DMatrix<f64>) {
    let (r, c) = m.shape();
    for j in 0..c {
        for i in 0..j.min(r) {
            m[(i, j)] = 0.0;
        }
    }
}

pub fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    let (r, c) = m.shape();
    (0..c).all(|j| (0..j.min(r)).all(|i| m[(i, j)] == 0.0))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrize(m).cholesky().map(|c| c.l())
}

/// Lower-triangular `L` with `L Lᵀ` equal to the nearest PSD matrix to `m`
/// (eigenvalues clipped at `floor`).
pub fn psd_lower_factor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if let Some(l) = cholesky_lower(m) {
        if floor <= 0.0 || sym_min_eig(m) >= floor {
            return l;
        }
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&v| v.max(floor)));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    cholesky_lower(&rebuilt).unwrap_or_else(|| semidefinite_cholesky(&rebuilt))
}

/// Cholesky that skips numerically zero pivots, for singular PSD input.
fn semidefinite_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let tol = 1e-13 * m.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / pivot;
        }
    }
    l
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Row-major matrix with declared shape, the on-disk representation used by
/// every file format in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        MatrixRecord { shape: [r, c], data }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>, String> {
        let [r, c] = self.shape;
        if r * c != self.data.len() {
            return Err(format!(
                "declared shape {r}x{c} but {} values present",
                self.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(r, c, &self.data))
    }
}

/// `#[serde(with = "matrix_serde")]` for a single matrix.
pub mod matrix_serde {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        rec.to_matrix().map_err(serde::de::Error::custom)
    }
}

/// `#[serde(with = "matrix_vec_serde")]` for a list of matrices.
pub mod matrix_vec_serde {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let recs: Vec<MatrixRecord> = ms.iter().map(MatrixRecord::from).collect();
        recs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let recs = Vec::<MatrixRecord>::deserialize(d)?;
        recs.iter()
            .map(|r| r.to_matrix().map_err(serde::de::Error::custom))
            .collect()
    }
}

/// `#[serde(with = "vector_vec_serde")]` for a list of vectors (plain arrays).
pub mod vector_vec_serde {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let raw = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(raw.into_iter().map(DVector::from_vec).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_and_check_lower() {
        let mut m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!(!is_lower_triangular(&m));
        mask_lower(&mut m);
        assert!(is_lower_triangular(&m));
        assert_eq!(m[(2, 0)], 7.0);
        assert_eq!(m[(0, 2)], 0.0);
    }

    #[test]
    fn psd_factor_reproduces_pd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let l = psd_lower_factor(&m, 0.0);
        assert!(is_lower_triangular(&l));
        assert!((&l * l.transpose() - &m).abs().max() < 1e-12);
    }

    #[test]
    fn psd_factor_clips_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let l = psd_lower_factor(&m, 0.0);
        let r = &l * l.transpose();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(r[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn psd_factor_rank_one_projection() {
        // eigenvalues 2 and −1 along rotated axes: the projection is 2·v vᵀ
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let w = DVector::from_vec(vec![-0.8, 0.6]);
        let m = &v * v.transpose() * 2.0 - &w * w.transpose();
        let l = psd_lower_factor(&m, 0.0);
        assert!(is_lower_triangular(&l));
        assert!((&l * l.transpose() - &v * v.transpose() * 2.0).abs().max() < 1e-10);
    }

    #[test]
    fn record_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rec = MatrixRecord::from(&m);
        assert_eq!(rec.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(rec.to_matrix().unwrap(), m);
        let bad = MatrixRecord { shape: [2, 2], data: vec![1.0] };
        assert!(bad.to_matrix().is_err());
    }

    #[test]
    fn norms_of_example_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 1.0, 0.0, 0.8]);
        assert!((spectral_norm(&a) - 1.4434).abs() < 1e-4);
        assert!((spectral_radius(&a) - 0.8).abs() < 1e-6);
    }
}
