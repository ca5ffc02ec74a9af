//! Covariate design matrices.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number of `XᵀX` above which the design is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// An `n × p` covariate matrix together with `Ω = Σ xᵢxᵢᵀ` and its inverse.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    omega: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn omega_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    /// `e_jᵀ Ω⁻¹ e_j`, the variance multiplier of coefficient `j`.
    pub fn coeff_scale(&self, j: usize) -> f64 {
        self.omega_inv[(j, j)]
    }

    /// Design with subject `i` removed.
    pub fn without_subject(&self, i: usize) -> Result<DesignMatrix> {
        fit_design(self.x.clone().remove_row(i))
    }
}

/// Builds `Ω = XᵀX` and its inverse, rejecting rank-deficient designs.
pub fn fit_design(x: DMatrix<f64>) -> Result<DesignMatrix> {
    let (n, p) = x.shape();
    if p == 0 || n <= p {
        return Err(Error::InvalidArgument(format!(
            "design must have n > p >= 1, got n={n}, p={p}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "design contains non-finite entries".into(),
        ));
    }
    let omega = x.transpose() * &x;
    let eig = omega.clone().symmetric_eigen();
    let (mut imin, mut imax) = (0, 0);
    for k in 0..p {
        if eig.eigenvalues[k] < eig.eigenvalues[imin] {
            imin = k;
        }
        if eig.eigenvalues[k] > eig.eigenvalues[imax] {
            imax = k;
        }
    }
    let (lmin, lmax) = (eig.eigenvalues[imin], eig.eigenvalues[imax]);
    let condition = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    if condition > MAX_CONDITION {
        let v = eig.eigenvectors.column(imin);
        let vmax = v.amax();
        let columns = (0..p).filter(|&k| v[k].abs() >= 0.1 * vmax).collect();
        return Err(Error::SingularDesign { condition, columns });
    }
    let chol = omega.clone().cholesky().ok_or(Error::SingularDesign {
        condition,
        columns: (0..p).collect(),
    })?;
    let inv = chol.inverse();
    let omega_inv = (&inv + inv.transpose()) * 0.5;
    Ok(DesignMatrix {
        x,
        omega,
        omega_inv,
    })
}

/// Unit basis vector `e_j` of length `p` (`j` is zero-based).
pub fn coeff_selector(j: usize, p: usize) -> Result<DVector<f64>> {
    if j >= p {
        return Err(Error::InvalidArgument(format!(
            "coefficient index {j} out of range for p={p}"
        )));
    }
    let mut e = DVector::zeros(p);
    e[j] = 1.0;
    Ok(e)
}

/// Reads a covariate CSV: a header row naming the columns, then one numeric
/// row per subject. Column order defines the coefficient order.
pub fn read_covariates_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != names.len() {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    record.len(),
                    names.len()
                ),
            });
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Format {
                path: path.to_owned(),
                message: format!("row {}: `{field}` is not a number", line + 1),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((
        names.clone(),
        DMatrix::from_row_slice(rows, names.len(), &values),
    ))
}
