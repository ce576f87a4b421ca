//! Covariance matrices and the parametric observation-error models.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Relative pivot threshold below which a Cholesky factorisation is declared failed.
pub const CHOLESKY_REL_TOL: f64 = 1e-12;

/// Default SOAR length scale of the shallow-water observation errors.
pub const SW_LENGTH_SCALE: f64 = 10.0;

/// Overall prefactor applied to the shallow-water R.
pub const SW_R_PREFACTOR: f64 = 1e-6;

/// Admissible range of the shallow-water marginal variances.
pub const SW_D_RANGE: (f64, f64) = (1.0, 1000.0);

/// Admissible range of the shallow-water kernel shape parameter.
pub const SW_SHAPE_RANGE: (f64, f64) = (1.0, 5.0);

/// Upper bound of the Lorenz error amplitude.
pub const LORENZ_VR_MAX: f64 = 100.0;

/// Lower-triangular Cholesky factor of a symmetric matrix.
///
/// Fails when a pivot drops below `CHOLESKY_REL_TOL` times the largest diagonal entry.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims(n, m.ncols()));
    }
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0_f64, f64::max);
    let tol = CHOLESKY_REL_TOL * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { row: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub(crate) fn forward_substitute(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub(crate) fn backward_substitute(l: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = y.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Symmetric positive-definite matrix together with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    data: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Validates exact symmetry and positive definiteness.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let n = data.nrows();
        if data.ncols() != n {
            return Err(Error::dims(n, data.ncols()));
        }
        if n == 0 {
            return Err(Error::EmptyInput("covariance matrix"));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if data[(i, j)] != data[(j, i)] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        let chol = cholesky_lower(&data)?;
        Ok(Self { data, chol })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    /// `s · I`; panics if `s` is not positive.
    pub fn scaled_identity(n: usize, s: f64) -> Self {
        assert!(s > 0.0, "scaled_identity needs a positive scale");
        Self {
            data: DMatrix::identity(n, n) * s,
            chol: DMatrix::identity(n, n) * s.sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Lower-triangular factor `L` with `L Lᵀ = C`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    /// `s · C` for `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!("covariance scale must be positive, got {s}")));
        }
        Ok(Self {
            data: &self.data * s,
            chol: &self.chol * s.sqrt(),
        })
    }

    /// `C⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::dims(self.dim(), b.len()));
        }
        Ok(backward_substitute(&self.chol, &forward_substitute(&self.chol, b)))
    }

    /// `vᵀ C⁻¹ v`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::dims(self.dim(), v.len()));
        }
        Ok(forward_substitute(&self.chol, v).norm_squared())
    }
}

/// Lorenz observation-error parameters: three correlations and an amplitude.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LorenzRParams {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub v_r: f64,
}

impl LorenzRParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.r0, self.r1, self.r2, self.v_r]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::dims(4, v.len()));
        }
        Ok(Self {
            r0: v[0],
            r1: v[1],
            r2: v[2],
            v_r: v[3],
        })
    }

    /// Range check only; positive definiteness is checked on construction of the matrix.
    pub fn in_range(&self) -> bool {
        [self.r0, self.r1, self.r2].iter().all(|r| r.abs() < 1.0) && self.v_r > 0.0 && self.v_r <= LORENZ_VR_MAX
    }
}

/// Shallow-water observation-error parameters: per-cell variances and the kernel shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwRParams {
    pub d: Vec<f64>,
    pub r: f64,
}

impl SwRParams {
    /// Side length of the square observation lattice.
    pub fn side(&self) -> Result<usize> {
        let side = (self.d.len() as f64).sqrt().round() as usize;
        if side * side != self.d.len() || side == 0 {
            return Err(Error::Domain(format!(
                "variance vector of length {} is not a square lattice",
                self.d.len()
            )));
        }
        Ok(side)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.d.clone();
        v.push(self.r);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::dims(2, v.len()));
        }
        let (d, r) = v.split_at(v.len() - 1);
        Ok(Self { d: d.to_vec(), r: r[0] })
    }

    pub fn in_range(&self) -> bool {
        let (dl, dh) = SW_D_RANGE;
        let (rl, rh) = SW_SHAPE_RANGE;
        self.d.iter().all(|&d| (dl..=dh).contains(&d)) && (rl..=rh).contains(&self.r)
    }

    pub fn sample(side: usize, rng: &mut RandomSource) -> Self {
        let d = (0..side * side)
            .map(|_| rng.uniform(SW_D_RANGE.0, SW_D_RANGE.1))
            .collect();
        let r = rng.uniform(SW_SHAPE_RANGE.0, SW_SHAPE_RANGE.1);
        Self { d, r }
    }
}

/// `v_R · [[1, r0, r1], [r0, 1, r2], [r1, r2, 1]]`.
pub fn spd_from_lorenz_params(p: &LorenzRParams) -> Result<CovarianceMatrix> {
    if !(p.v_r > 0.0) || !p.v_r.is_finite() {
        return Err(Error::Domain(format!("v_R must be positive, got {}", p.v_r)));
    }
    let v = p.v_r;
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(3, 3, &[
        v,        v * p.r0, v * p.r1,
        v * p.r0, v,        v * p.r2,
        v * p.r1, v * p.r2, v,
    ]);
    CovarianceMatrix::new(m)
}

/// Random SPD correlation matrix of size `n`: `G = A Aᵀ + n I`, normalised to unit diagonal.
pub fn random_correlation(n: usize, rng: &mut RandomSource) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let g = &a * a.transpose() + DMatrix::identity(n, n) * n as f64;
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)].sqrt()).collect();
    let mut c = DMatrix::from_fn(n, n, |i, j| g[(i, j)] / (d[i] * d[j]));
    for i in 0..n {
        c[(i, i)] = 1.0;
        for j in 0..i {
            c[(i, j)] = c[(j, i)];
        }
    }
    c
}

pub fn sample_lorenz_r_params(rng: &mut RandomSource) -> LorenzRParams {
    let c = random_correlation(3, rng);
    // 100·(1 − u) keeps v_R strictly positive.
    let v_r = LORENZ_VR_MAX * (1.0 - rng.uniform(0.0, 1.0));
    LorenzRParams {
        r0: c[(0, 1)],
        r1: c[(0, 2)],
        r2: c[(1, 2)],
        v_r,
    }
}

/// Second-order auto-regressive (Balgovind) correlation `(1 + d/L) e^{-d/L}`.
pub fn soar(d: f64, length: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("SOAR distance must be non-negative, got {d}")));
    }
    if !(length > 0.0) {
        return Err(Error::Domain(format!("SOAR length must be positive, got {length}")));
    }
    let x = d / length;
    Ok((1.0 + x) * (-x).exp())
}

/// Euclidean distance between two cells of a `side × side` lattice (row-major indices).
pub fn lattice_distance(side: usize, i: usize, j: usize) -> f64 {
    let (ri, ci) = ((i / side) as f64, (i % side) as f64);
    let (rj, cj) = ((j / side) as f64, (j % side) as f64);
    ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt()
}

/// `R[i][j] = 1e-6 · √D_i √D_j · soar(r · dist(i, j), L_R)` on the square observation lattice.
pub fn build_sw_covariance(p: &SwRParams, length: f64) -> Result<CovarianceMatrix> {
    let side = p.side()?;
    if p.d.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Domain("marginal variances must be positive".into()));
    }
    if !(p.r > 0.0) {
        return Err(Error::Domain(format!("kernel shape must be positive, got {}", p.r)));
    }
    let n = side * side;
    let sd: Vec<f64> = p.d.iter().map(|d| d.sqrt()).collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = SW_R_PREFACTOR * p.d[i];
        for j in 0..i {
            let v = SW_R_PREFACTOR * sd[i] * sd[j] * soar(p.r * lattice_distance(side, i, j), length)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    CovarianceMatrix::new(m)
}

/// `mean + L z` with `z` standard normal.
pub fn sample_mvn(mean: &DVector<f64>, c: &CovarianceMatrix, rng: &mut RandomSource) -> Result<DVector<f64>> {
    if mean.len() != c.dim() {
        return Err(Error::dims(c.dim(), mean.len()));
    }
    Ok(mean + draw_correlated(c, rng))
}

/// Zero-mean draw `L z`.
pub fn draw_correlated(c: &CovarianceMatrix, rng: &mut RandomSource) -> DVector<f64> {
    let n = c.dim();
    let z = DVector::from_fn(n, |_, _| rng.normal());
    let l = c.cholesky();
    DVector::from_fn(n, |i, _| (0..=i).map(|k| l[(i, k)] * z[k]).sum())
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims(n, m.ncols()));
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = m[(i, i)];
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Hybrid blend `(1 − μ) M + μ (Tr M / n) I`; the trace is unchanged.
pub fn hybrid_regularize(m: &DMatrix<f64>, mu: f64) -> Result<CovarianceMatrix> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims(n, m.ncols()));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Domain(format!("hybrid weight must lie in (0,1), got {mu}")));
    }
    let c = m.trace() / n as f64;
    let mut out = m * (1.0 - mu);
    for i in 0..n {
        out[(i, i)] += mu * c;
    }
    CovarianceMatrix::new(out)
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Projects a symmetric matrix onto the SPD cone by flooring its eigenvalues at `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> Result<CovarianceMatrix> {
    let s = symmetrize(m)?;
    let eig = s.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    CovarianceMatrix::new(symmetrize(&rebuilt)?)
}
