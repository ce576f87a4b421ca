//! BLUE analysis and the stochastic ensemble Kalman cycle.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covmat::{backward_substitute, cholesky_lower, draw_correlated, forward_substitute, CovarianceMatrix};
use crate::dynmodels::Dynamics;
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Relative ridge added to a rank-deficient ensemble covariance.
pub const ENSEMBLE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub total: f64,
    pub background: f64,
    pub observation: f64,
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub xa: DVector<f64>,
    /// Kalman gain, `n × m`.
    pub gain: DMatrix<f64>,
    /// Analysis error covariance `(I − K H) B`.
    pub analysis_cov: DMatrix<f64>,
}

/// Background and analysis residuals in observation space at one analysis time.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationRecord {
    pub t: usize,
    /// `y − H x_b`
    pub d_b: DVector<f64>,
    /// `y − H x_a`
    pub d_a: DVector<f64>,
}

fn check_square(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::dims(n, m.nrows()));
    }
    Ok(())
}

/// 3D-Var cost `½‖x − x_b‖²_{B⁻¹} + ½‖y − Hx‖²_{R⁻¹}`.
pub fn cost_j(
    x: &DVector<f64>,
    xb: &DVector<f64>,
    y: &DVector<f64>,
    b: &CovarianceMatrix,
    r: &CovarianceMatrix,
    h: &DMatrix<f64>,
) -> Result<CostTerms> {
    if h.ncols() != x.len() || xb.len() != x.len() || b.dim() != x.len() {
        return Err(Error::dims(x.len(), h.ncols()));
    }
    if h.nrows() != y.len() || r.dim() != y.len() {
        return Err(Error::dims(y.len(), h.nrows()));
    }
    let background = 0.5 * b.inv_quad(&(x - xb))?;
    let observation = 0.5 * r.inv_quad(&(y - h * x))?;
    Ok(CostTerms {
        total: background + observation,
        background,
        observation,
    })
}

/// Cholesky-factored innovation covariance `S = H B Hᵀ + R`.
struct InnovationCov {
    l: DMatrix<f64>,
}

impl InnovationCov {
    fn new(hbht: &DMatrix<f64>, r: &CovarianceMatrix) -> Result<Self> {
        let mut s = hbht + r.matrix();
        let m = s.nrows();
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        let l = cholesky_lower(&s).map_err(|e| Error::SingularMatrix(format!("innovation covariance: {e}")))?;
        Ok(Self { l })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        backward_substitute(&self.l, &forward_substitute(&self.l, b))
    }

    /// `X S⁻¹` for `X` with `m` columns.
    fn right_solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..x.nrows() {
            let row = DVector::from_iterator(x.ncols(), x.row(i).iter().copied());
            out.set_row(i, &self.solve(&row).transpose());
        }
        out
    }
}

/// `K = B Hᵀ (H B Hᵀ + R)⁻¹`, without forming an explicit inverse.
pub fn kalman_gain(b: &DMatrix<f64>, r: &CovarianceMatrix, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(b, h.ncols())?;
    if r.dim() != h.nrows() {
        return Err(Error::dims(h.nrows(), r.dim()));
    }
    let bht = b * h.transpose();
    let s = InnovationCov::new(&(h * &bht), r)?;
    Ok(s.right_solve(&bht))
}

/// Best linear unbiased estimate for a linear observation operator.
pub fn blue_analysis(
    xb: &DVector<f64>,
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    r: &CovarianceMatrix,
    h: &DMatrix<f64>,
) -> Result<AnalysisResult> {
    if xb.len() != h.ncols() {
        return Err(Error::dims(h.ncols(), xb.len()));
    }
    if y.len() != h.nrows() {
        return Err(Error::dims(h.nrows(), y.len()));
    }
    let gain = kalman_gain(b, r, h)?;
    let xa = xb + &gain * (y - h * xb);
    let n = xb.len();
    let analysis_cov = (DMatrix::identity(n, n) - &gain * h) * b;
    Ok(AnalysisResult { xa, gain, analysis_cov })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::EnsembleTooSmall(members.len()));
        }
        let n = members[0].len();
        if let Some(bad) = members.iter().find(|m| m.len() != n) {
            return Err(Error::dims(n, bad.len()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    /// Member mean of the leading `n` components.
    pub fn mean_leading(&self, n: usize) -> DVector<f64> {
        let mut mean = DVector::zeros(n);
        for m in &self.members {
            mean += m.rows(0, n);
        }
        mean / self.size() as f64
    }

    pub fn mean(&self) -> DVector<f64> {
        self.mean_leading(self.dim())
    }

    /// `n × M` anomaly matrix of the leading `n` components.
    fn anomalies(&self, n: usize) -> DMatrix<f64> {
        let mean = self.mean_leading(n);
        let mut x = DMatrix::zeros(n, self.size());
        for (j, m) in self.members.iter().enumerate() {
            x.set_column(j, &(m.rows(0, n) - &mean));
        }
        x
    }
}

/// Unbiased sample covariance `(1/(M−1)) Σ (x⁽ⁱ⁾ − x̄)(x⁽ⁱ⁾ − x̄)ᵀ` (positive semi-definite).
pub fn ensemble_covariance(e: &Ensemble) -> DMatrix<f64> {
    ensemble_covariance_leading(e, e.dim())
}

pub fn ensemble_covariance_leading(e: &Ensemble, n: usize) -> DMatrix<f64> {
    let x = e.anomalies(n);
    let b = &x * x.transpose() / (e.size() - 1) as f64;
    crate::covmat::symmetrize(&b).expect("square by construction")
}

/// Ridge `δ` added to the ensemble covariance: `1e-8 · Tr(B)/n` when `M < n`, else 0.
pub fn ensemble_ridge(trace: f64, n: usize, members: usize) -> f64 {
    if members < n {
        ENSEMBLE_RIDGE * trace / n as f64
    } else {
        0.0
    }
}

/// Which residual enters the DI01 observation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JoResidual {
    /// `y − H x_a`: the residual for which `E[2 J_o] = Tr(I − H K)` holds.
    #[default]
    Analysis,
    /// `y − H x_b`.
    Background,
}

/// Per-analysis quantities used by the tuning algorithms.
#[derive(Debug, Clone)]
pub struct AnalysisDiagnostics {
    pub record: InnovationRecord,
    /// `J_b(x_a)`
    pub jb: f64,
    /// `J_o`, per the configured residual.
    pub jo: f64,
    pub trace_kh: f64,
    pub trace_i_minus_hk: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CycleOptions {
    /// Leading components of each member that are analysed.
    pub analysis_dim: usize,
    /// Multiplier applied to the (ridged) ensemble B.
    pub b_scale: f64,
    pub jo_residual: JoResidual,
}

impl CycleOptions {
    pub fn new(analysis_dim: usize) -> Self {
        Self {
            analysis_dim,
            b_scale: 1.0,
            jo_residual: JoResidual::Analysis,
        }
    }
}

fn diagnose_with(
    s: &InnovationCov,
    d_b: DVector<f64>,
    hbht: &DMatrix<f64>,
    r: &CovarianceMatrix,
    jo_residual: JoResidual,
    t: usize,
) -> Result<AnalysisDiagnostics> {
    // With w = S⁻¹ d_b: x_a − x_b = B Hᵀ w, so J_b = ½ wᵀ H B Hᵀ w and y − H x_a = R w.
    let w = s.solve(&d_b);
    let d_a = r.matrix() * &w;
    let jb = 0.5 * w.dot(&(hbht * &w));
    let jo = match jo_residual {
        JoResidual::Analysis => 0.5 * w.dot(&d_a),
        JoResidual::Background => 0.5 * r.inv_quad(&d_b)?,
    };
    // Tr(HK) = Tr(H B Hᵀ S⁻¹)
    let trace_kh = s.right_solve(hbht).trace();
    let m = d_b.len() as f64;
    Ok(AnalysisDiagnostics {
        record: InnovationRecord { t, d_b, d_a },
        jb,
        jo,
        trace_kh,
        trace_i_minus_hk: m - trace_kh,
    })
}

/// Tuning diagnostics of a BLUE analysis given the background innovation `y − H x_b`
/// and the observation-space background covariance `H B Hᵀ`.
pub fn diagnose_innovation(
    d_b: DVector<f64>,
    hbht: &DMatrix<f64>,
    r: &CovarianceMatrix,
    jo_residual: JoResidual,
    t: usize,
) -> Result<AnalysisDiagnostics> {
    if d_b.len() != r.dim() || hbht.nrows() != r.dim() {
        return Err(Error::dims(r.dim(), d_b.len()));
    }
    let s = InnovationCov::new(hbht, r)?;
    diagnose_with(&s, d_b, hbht, r, jo_residual, t)
}

/// One stochastic EnKF analysis with perturbed observations.
pub fn enda_cycle(
    e: &Ensemble,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &DMatrix<f64>,
    rng: &mut RandomSource,
) -> Result<Ensemble> {
    Ok(enda_cycle_diagnosed(e, y, r, h, rng, &CycleOptions::new(e.dim()), 0)?.0)
}

/// EnKF analysis that also returns the tuning diagnostics at time `t`.
///
/// The gain is built from ensemble anomalies: with `X` the `n × M` anomaly
/// matrix and `δ` the ridge, `B Hᵀ = X (HX)ᵀ/(M−1) + δ Hᵀ`, which equals the
/// explicit `ensemble_covariance + δ I` route.
pub fn enda_cycle_diagnosed(
    e: &Ensemble,
    y: &DVector<f64>,
    r: &CovarianceMatrix,
    h: &DMatrix<f64>,
    rng: &mut RandomSource,
    opts: &CycleOptions,
    t: usize,
) -> Result<(Ensemble, AnalysisDiagnostics)> {
    let n = opts.analysis_dim;
    if n > e.dim() || h.ncols() != n {
        return Err(Error::dims(n, h.ncols()));
    }
    if y.len() != h.nrows() || r.dim() != h.nrows() {
        return Err(Error::dims(h.nrows(), y.len()));
    }
    let big_m = e.size();
    let x = e.anomalies(n);
    let hx = h * &x;
    let denom = (big_m - 1) as f64;
    let ridge = ensemble_ridge(x.norm_squared() / denom, n, big_m);
    let scale = opts.b_scale;

    let mut bht = &x * hx.transpose() / denom;
    let mut hbht = &hx * hx.transpose() / denom;
    if ridge > 0.0 {
        bht += h.transpose() * ridge;
        hbht += h * h.transpose() * ridge;
    }
    bht *= scale;
    hbht *= scale;

    let s = InnovationCov::new(&hbht, r)?;
    let gain = s.right_solve(&bht);
    let d_b = y - h * e.mean_leading(n);
    let diag = diagnose_with(&s, d_b, &hbht, r, opts.jo_residual, t)?;

    let mut members = Vec::with_capacity(big_m);
    for xb in e.members() {
        let eta = draw_correlated(r, rng);
        let innov = y + eta - h * xb.rows(0, n);
        let mut xa = xb.clone();
        let inc = &gain * innov;
        xa.rows_mut(0, n).add_assign(&inc);
        members.push(xa);
    }
    Ok((Ensemble { members }, diag))
}

/// Adds `N(0, Q)` noise to each member's analysed components once, then runs the
/// model `steps` times. `observe(k, ensemble)` sees the ensemble after step `k` (1-based).
pub fn propagate_ensemble_with<F>(
    e: &Ensemble,
    model: &dyn Dynamics,
    q: Option<&CovarianceMatrix>,
    steps: usize,
    rng: &mut RandomSource,
    mut observe: F,
) -> Result<Ensemble>
where
    F: FnMut(usize, &Ensemble),
{
    if steps == 0 {
        return Err(Error::Domain("propagation needs at least one step".into()));
    }
    let mut members = e.members.clone();
    if let Some(q) = q {
        let n = q.dim();
        if n > e.dim() {
            return Err(Error::dims(e.dim(), n));
        }
        for m in members.iter_mut() {
            let noise = draw_correlated(q, rng);
            m.rows_mut(0, n).add_assign(&noise);
        }
    }
    let mut ens = Ensemble { members };
    for k in 1..=steps {
        ens.members = ens
            .members
            .par_iter()
            .map(|x| model.step(x))
            .collect::<Result<Vec<_>>>()?;
        observe(k, &ens);
    }
    Ok(ens)
}

pub fn propagate_ensemble(
    e: &Ensemble,
    model: &dyn Dynamics,
    q: &CovarianceMatrix,
    steps: usize,
    rng: &mut RandomSource,
) -> Result<Ensemble> {
    propagate_ensemble_with(e, model, Some(q), steps, rng, |_, _| {})
}
