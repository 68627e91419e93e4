use nalgebra::{DMatrix, DVector};

use super::GpError;

const BLOCK: usize = 64;

/// Cholesky factor `L` of a symmetric positive definite matrix together with
/// `L^-1`, computed by recursive blocking so the bulk of the work is matrix
/// products.
#[derive(Debug, Clone)]
pub(crate) struct Factor {
    pub l: DMatrix<f64>,
    pub linv: DMatrix<f64>,
}

fn factor(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n <= BLOCK {
        let l = m.clone().cholesky()?.unpack();
        let linv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
        return Some((l, linv));
    }
    let h = n / 2;
    let (l11, i11) = factor(&m.view((0, 0), (h, h)).into_owned())?;
    let l21 = m.view((h, 0), (n - h, h)) * i11.transpose();
    let s = m.view((h, h), (n - h, n - h)) - &l21 * l21.transpose();
    let (l22, i22) = factor(&s)?;
    let i21 = -(&i22 * &l21) * &i11;
    let mut l = DMatrix::zeros(n, n);
    let mut linv = DMatrix::zeros(n, n);
    l.view_mut((0, 0), (h, h)).copy_from(&l11);
    l.view_mut((h, 0), (n - h, h)).copy_from(&l21);
    l.view_mut((h, h), (n - h, n - h)).copy_from(&l22);
    linv.view_mut((0, 0), (h, h)).copy_from(&i11);
    linv.view_mut((h, 0), (n - h, h)).copy_from(&i21);
    linv.view_mut((h, h), (n - h, n - h)).copy_from(&i22);
    Some((l, linv))
}

impl Factor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self, GpError> {
        let (l, linv) = factor(m).ok_or(GpError::NotPositiveDefinite)?;
        if !l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(GpError::NotPositiveDefinite);
        }
        Ok(Factor { l, linv })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.linv.transpose() * &self.linv
    }

    /// `L^-1 b`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.linv * b
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.linv.transpose() * (&self.linv * b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.linv.transpose() * (&self.linv * b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_factor_matches_reference() {
        for n in [1, 5, 64, 65, 130, 203] {
            let a = DMatrix::from_fn(n, n, |i, j| (((i * 31 + j * 17) % 23) as f64 - 11.0) / 7.0);
            let m = &a * a.transpose() + DMatrix::identity(n, n);
            let f = Factor::new(&m).unwrap();
            let reference = m.clone().cholesky().unwrap();
            assert!((&f.l - reference.l()).amax() < 1e-9);
            assert!((f.inverse() * &m - DMatrix::identity(n, n)).amax() < 1e-8);
            assert!(
                (f.log_det() - 2.0 * reference.l().diagonal().map(|v| v.ln()).sum()).abs() < 1e-9
            );
        }
        assert!(Factor::new(&DMatrix::from_element(3, 3, 1.0)).is_err());
    }
}
