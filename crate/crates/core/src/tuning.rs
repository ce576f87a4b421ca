//! Posterior covariance tuning: DI01 trace-ratio scaling and the D05 residual iteration.
//!
//! Both algorithms repeatedly re-run an assimilation with updated matrices. The
//! assimilation itself is abstracted by [`AssimilationWindow`] so the same code
//! drives a static linear-Gaussian problem and the ensemble twin experiments.

use nalgebra::{DMatrix, DVector};

use crate::assim::{cost_j, diagnose_innovation, AnalysisDiagnostics, InnovationRecord, JoResidual};
use crate::covmat::{floor_eigenvalues, frobenius_distance, hybrid_regularize, symmetrize, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Traces below this are treated as degenerate.
pub const TRACE_FLOOR: f64 = 1e-12;

/// Default hybrid regularisation weight.
pub const DEFAULT_MU: f64 = 0.2;

/// An assimilation problem that can be re-run with different error covariances.
pub trait AssimilationWindow {
    fn obs_dim(&self) -> usize;

    /// Runs every analysis of the window with background covariance scaled by
    /// `b_scale` and observation covariance `r`.
    fn run(&self, b_scale: f64, r: &CovarianceMatrix, jo: JoResidual) -> Result<Vec<AnalysisDiagnostics>>;
}

/// `(s_b, s_o)` for a single BLUE analysis.
///
/// `s_b = 2 J_b(x_a) / Tr(K H)` and `s_o = 2 J_o / Tr(I − H K)`, where the
/// residual inside `J_o` is selected by `jo`.
#[allow(clippy::too_many_arguments)]
pub fn di01_scalings(
    xa: &DVector<f64>,
    xb: &DVector<f64>,
    y: &DVector<f64>,
    b: &CovarianceMatrix,
    r: &CovarianceMatrix,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
    jo: JoResidual,
) -> Result<(f64, f64)> {
    if k.nrows() != h.ncols() || k.ncols() != h.nrows() {
        return Err(Error::dims(h.ncols(), k.nrows()));
    }
    let at_analysis = cost_j(xa, xb, y, b, r, h)?;
    let jo_value = match jo {
        JoResidual::Analysis => at_analysis.observation,
        JoResidual::Background => 0.5 * r.inv_quad(&(y - h * xb))?,
    };
    let trace_kh = (k * h).trace();
    let m = h.nrows();
    let trace_i_hk = (DMatrix::identity(m, m) - h * k).trace();
    for tr in [trace_kh, trace_i_hk] {
        if tr.abs() < TRACE_FLOOR {
            return Err(Error::DegenerateTrace(tr));
        }
    }
    Ok((2.0 * at_analysis.background / trace_kh, 2.0 * jo_value / trace_i_hk))
}

/// Window-averaged scalings: ratio of summed `2J` to summed traces.
pub fn di01_scalings_from(diags: &[AnalysisDiagnostics]) -> Result<(f64, f64)> {
    if diags.is_empty() {
        return Err(Error::EmptyInput("analysis diagnostics"));
    }
    let (mut jb, mut jo, mut tkh, mut tihk) = (0.0, 0.0, 0.0, 0.0);
    for d in diags {
        jb += d.jb;
        jo += d.jo;
        tkh += d.trace_kh;
        tihk += d.trace_i_minus_hk;
    }
    for tr in [tkh, tihk] {
        if tr.abs() < TRACE_FLOOR {
            return Err(Error::DegenerateTrace(tr));
        }
    }
    Ok((2.0 * jb / tkh, 2.0 * jo / tihk))
}

#[derive(Debug, Clone)]
pub struct Di01State {
    pub q: usize,
    pub s_b: f64,
    pub s_o: f64,
    /// Cumulative multiplier of the background covariance after this iteration.
    pub b_scale: f64,
    pub r: CovarianceMatrix,
}

#[derive(Debug, Clone)]
pub struct Di01Outcome {
    pub b_scale: f64,
    pub r: CovarianceMatrix,
    pub trace: Vec<Di01State>,
}

/// `B_{q+1} = s_b B_q`, `R_{q+1} = s_o R_q` for `q_max` iterations.
///
/// A scaling that is zero or not finite (a degenerate window) leaves its matrix unchanged.
pub fn di01_tune(
    window: &dyn AssimilationWindow,
    r0: &CovarianceMatrix,
    q_max: usize,
    jo: JoResidual,
) -> Result<Di01Outcome> {
    if q_max == 0 {
        return Err(Error::Config("DI01 needs at least one iteration".into()));
    }
    let mut b_scale = 1.0;
    let mut r = r0.clone();
    let mut trace = Vec::with_capacity(q_max);
    for q in 1..=q_max {
        let diags = window.run(b_scale, &r, jo)?;
        let (s_b, s_o) = di01_scalings_from(&diags)?;
        if s_b > 0.0 && s_b.is_finite() {
            b_scale *= s_b;
        }
        if s_o > 0.0 && s_o.is_finite() {
            r = r.scaled(s_o)?;
        }
        trace.push(Di01State {
            q,
            s_b,
            s_o,
            b_scale,
            r: r.clone(),
        });
    }
    Ok(Di01Outcome { b_scale, r, trace })
}

/// `(1/N) Σ d_a d_bᵀ`; generally not symmetric.
pub fn d05_expectation(records: &[InnovationRecord]) -> Result<DMatrix<f64>> {
    let first = records.first().ok_or(Error::EmptyInput("innovation records"))?;
    let m = first.d_b.len();
    let mut acc = DMatrix::zeros(m, m);
    for rec in records {
        if rec.d_a.len() != m || rec.d_b.len() != m {
            return Err(Error::dims(m, rec.d_a.len()));
        }
        acc.ger(1.0, &rec.d_a, &rec.d_b, 1.0);
    }
    Ok(acc / records.len() as f64)
}

/// `‖R − E[d_a d_bᵀ]‖_F`.
pub fn d05_indicator(r: &DMatrix<f64>, records: &[InnovationRecord]) -> Result<f64> {
    frobenius_distance(r, &d05_expectation(records)?)
}

#[derive(Debug, Clone)]
pub struct D05Iteration {
    pub q: usize,
    /// Indicator of the matrix used during this iteration's assimilation.
    pub indicator: f64,
    pub trace_before_regularization: f64,
    pub trace_after_regularization: f64,
}

#[derive(Debug, Clone)]
pub struct D05State {
    pub q: usize,
    pub r: CovarianceMatrix,
    pub indicator: f64,
    pub history: Vec<D05Iteration>,
}

/// D05 fixed-point iteration with symmetrisation and hybrid regularisation.
pub fn d05_iterate(r0: &CovarianceMatrix, window: &dyn AssimilationWindow, q_max: usize, mu: f64) -> Result<D05State> {
    Ok(d05_run(r0, window, q_max, mu, None)?.0)
}

/// [`d05_iterate`] that, when regularisation cannot restore positive definiteness,
/// projects the symmetrised estimate by flooring its eigenvalues at `floor_rel · Tr/m`.
/// Also returns the number of such fallbacks.
pub fn d05_iterate_with_fallback(
    r0: &CovarianceMatrix,
    window: &dyn AssimilationWindow,
    q_max: usize,
    mu: f64,
    floor_rel: f64,
) -> Result<(D05State, usize)> {
    d05_run(r0, window, q_max, mu, Some(floor_rel))
}

fn d05_run(
    r0: &CovarianceMatrix,
    window: &dyn AssimilationWindow,
    q_max: usize,
    mu: f64,
    floor_rel: Option<f64>,
) -> Result<(D05State, usize)> {
    if q_max == 0 {
        return Err(Error::Config("D05 needs at least one iteration".into()));
    }
    let mut r = r0.clone();
    let mut history = Vec::with_capacity(q_max);
    let mut indicator = f64::NAN;
    let mut fallbacks = 0;
    for q in 1..=q_max {
        let diags = window.run(1.0, &r, JoResidual::Analysis)?;
        let records: Vec<InnovationRecord> = diags.into_iter().map(|d| d.record).collect();
        let expectation = d05_expectation(&records)?;
        indicator = frobenius_distance(r.matrix(), &expectation)?;
        let sym = symmetrize(&expectation)?;
        let before = sym.trace();
        r = match (hybrid_regularize(&sym, mu), floor_rel) {
            (Ok(next), _) => next,
            (Err(e), None) => {
                return Err(Error::RegularizationFailed {
                    iteration: q,
                    source: Box::new(e),
                })
            }
            (Err(e), Some(rel)) => {
                log::warn!("D05 iteration {q}: {e}; flooring eigenvalues");
                fallbacks += 1;
                let floor = rel * (before.abs() / sym.nrows() as f64).max(f64::MIN_POSITIVE);
                floor_eigenvalues(&sym, floor).map_err(|e| Error::RegularizationFailed {
                    iteration: q,
                    source: Box::new(e),
                })?
            }
        };
        history.push(D05Iteration {
            q,
            indicator,
            trace_before_regularization: before,
            trace_after_regularization: r.trace(),
        });
    }
    Ok((
        D05State {
            q: q_max,
            r,
            indicator,
            history,
        },
        fallbacks,
    ))
}

/// A static linear-Gaussian problem: independent draws of `(x_b, y)` around a zero truth
/// with known `B`, `H` and true `R`.
#[derive(Debug, Clone)]
pub struct LinearGaussianWindow {
    pub hbht: DMatrix<f64>,
    pub innovations: Vec<DVector<f64>>,
}

impl LinearGaussianWindow {
    /// Draws `n` innovations `y − H x_b` with `x_b ~ N(0, B)` and `y ~ N(0, R_true)`.
    pub fn sample(
        b: &CovarianceMatrix,
        r_true: &CovarianceMatrix,
        h: &DMatrix<f64>,
        n: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if h.ncols() != b.dim() || h.nrows() != r_true.dim() {
            return Err(Error::dims(b.dim(), h.ncols()));
        }
        let zero_x = DVector::zeros(b.dim());
        let zero_y = DVector::zeros(r_true.dim());
        let mut innovations = Vec::with_capacity(n);
        for _ in 0..n {
            let xb = crate::covmat::sample_mvn(&zero_x, b, rng)?;
            let y = crate::covmat::sample_mvn(&zero_y, r_true, rng)?;
            innovations.push(y - h * xb);
        }
        let hbht = symmetrize(&(h * b.matrix() * h.transpose()))?;
        Ok(Self { hbht, innovations })
    }

    /// Keeps only the first `n` draws.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            hbht: self.hbht.clone(),
            innovations: self.innovations.iter().take(n).cloned().collect(),
        }
    }
}

impl AssimilationWindow for LinearGaussianWindow {
    fn obs_dim(&self) -> usize {
        self.hbht.nrows()
    }

    fn run(&self, b_scale: f64, r: &CovarianceMatrix, jo: JoResidual) -> Result<Vec<AnalysisDiagnostics>> {
        let hbht = &self.hbht * b_scale;
        self.innovations
            .iter()
            .enumerate()
            .map(|(t, d)| diagnose_innovation(d.clone(), &hbht, r, jo, t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assim::blue_analysis;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn di01_scalar_by_hand() {
        let one = CovarianceMatrix::identity(1);
        let h = scalar(1.0);
        let xb = DVector::zeros(1);
        let y = DVector::from_element(1, 2.0);
        let a = blue_analysis(&xb, &y, one.matrix(), &one, &h).unwrap();
        let (sb, so) = di01_scalings(&a.xa, &xb, &y, &one, &one, &h, &a.gain, JoResidual::Background).unwrap();
        assert!((sb - 2.0).abs() < 1e-14);
        assert!((so - 8.0).abs() < 1e-14);
        let (sb, so) = di01_scalings(&a.xa, &xb, &y, &one, &one, &h, &a.gain, JoResidual::Analysis).unwrap();
        assert!((sb - 2.0).abs() < 1e-14);
        assert!((so - 2.0).abs() < 1e-14);
    }

    #[test]
    fn di01_zero_innovation_gives_zero_so() {
        let one = CovarianceMatrix::identity(1);
        let h = scalar(1.0);
        let xb = DVector::from_element(1, 3.0);
        let y = &h * &xb;
        let a = blue_analysis(&xb, &y, one.matrix(), &one, &h).unwrap();
        let (_, so) = di01_scalings(&a.xa, &xb, &y, &one, &one, &h, &a.gain, JoResidual::Background).unwrap();
        assert_eq!(so, 0.0);
    }

    #[test]
    fn di01_degenerate_trace() {
        let one = CovarianceMatrix::identity(1);
        let h = scalar(1.0);
        let x = DVector::zeros(1);
        let k = scalar(0.0);
        assert!(matches!(
            di01_scalings(&x, &x, &x, &one, &one, &h, &k, JoResidual::Analysis),
            Err(Error::DegenerateTrace(_))
        ));
    }

    #[test]
    fn window_diagnostics_match_explicit_blue() {
        let mut rng = RandomSource::new(3);
        let b = crate::covmat::spd_from_lorenz_params(&crate::covmat::LorenzRParams {
            r0: 0.3,
            r1: 0.1,
            r2: -0.2,
            v_r: 2.0,
        })
        .unwrap();
        let r = crate::covmat::spd_from_lorenz_params(&crate::covmat::LorenzRParams {
            r0: -0.4,
            r1: 0.2,
            r2: 0.5,
            v_r: 5.0,
        })
        .unwrap();
        let h = crate::dynmodels::ObservationOperator::lorenz().dense();
        let xb = DVector::from_fn(3, |_, _| rng.normal());
        let y = DVector::from_fn(3, |_, _| 2.0 * rng.normal());
        let a = blue_analysis(&xb, &y, b.matrix(), &r, &h).unwrap();
        let (sb, so) = di01_scalings(&a.xa, &xb, &y, &b, &r, &h, &a.gain, JoResidual::Analysis).unwrap();
        let window = LinearGaussianWindow {
            hbht: symmetrize(&(&h * b.matrix() * h.transpose())).unwrap(),
            innovations: vec![&y - &h * &xb],
        };
        let d = window.run(1.0, &r, JoResidual::Analysis).unwrap();
        let (wb, wo) = di01_scalings_from(&d).unwrap();
        assert!((sb - wb).abs() < 1e-9 * sb.abs().max(1.0));
        assert!((so - wo).abs() < 1e-9 * so.abs().max(1.0));
        assert!((&d[0].record.d_a - (&y - &h * &a.xa)).amax() < 1e-10);
    }

    #[test]
    fn di01_single_iteration_contract_and_structure() {
        let mut rng = RandomSource::new(9);
        let b = CovarianceMatrix::identity(3);
        let r_true = crate::covmat::spd_from_lorenz_params(&crate::covmat::LorenzRParams {
            r0: 0.5,
            r1: 0.2,
            r2: 0.1,
            v_r: 3.0,
        })
        .unwrap();
        let h = crate::dynmodels::ObservationOperator::lorenz().dense();
        let w = LinearGaussianWindow::sample(&b, &r_true, &h, 200, &mut rng).unwrap();
        let out = di01_tune(&w, &r_true.scaled(10.0).unwrap(), 1, JoResidual::Analysis).unwrap();
        assert_eq!(out.trace.len(), 1);
        let ratio = out.r.matrix() / out.r.trace();
        let ratio0 = r_true.matrix() / r_true.trace();
        assert!((ratio - ratio0).amax() < 1e-12);
    }

    #[test]
    fn d05_expectation_examples() {
        let rec = InnovationRecord {
            t: 0,
            d_a: DVector::from_vec(vec![1.0, 0.0]),
            d_b: DVector::from_vec(vec![0.0, 1.0]),
        };
        assert_eq!(
            d05_expectation(&[rec]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        );
        assert!(matches!(d05_expectation(&[]), Err(Error::EmptyInput(_))));

        let mut rng = RandomSource::new(2);
        let recs: Vec<InnovationRecord> = (0..20)
            .map(|t| {
                let d = DVector::from_fn(3, |_, _| rng.normal());
                InnovationRecord {
                    t,
                    d_a: d.clone(),
                    d_b: d,
                }
            })
            .collect();
        let e = d05_expectation(&recs).unwrap();
        assert_eq!(e, e.transpose());
        assert!(e.clone().symmetric_eigen().eigenvalues.min() >= -1e-12);
    }

    #[test]
    fn d05_expectation_matches_double_loop() {
        let mut rng = RandomSource::new(12);
        let recs: Vec<InnovationRecord> = (0..15)
            .map(|t| InnovationRecord {
                t,
                d_a: DVector::from_fn(4, |_, _| rng.normal()),
                d_b: DVector::from_fn(4, |_, _| rng.normal()),
            })
            .collect();
        let e = d05_expectation(&recs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for r in &recs {
                    s += r.d_a[i] * r.d_b[j];
                }
                assert!((e[(i, j)] - s / 15.0).abs() < 1e-12);
            }
        }
        assert_eq!(d05_indicator(&e, &recs).unwrap(), 0.0);
    }

    #[test]
    fn d05_single_pass_and_trace_preserved() {
        let mut rng = RandomSource::new(4);
        let b = CovarianceMatrix::identity(3);
        let r_true = CovarianceMatrix::scaled_identity(3, 2.0);
        let h = crate::dynmodels::ObservationOperator::lorenz().dense();
        let w = LinearGaussianWindow::sample(&b, &r_true, &h, 500, &mut rng).unwrap();
        let st = d05_iterate(&r_true, &w, 1, DEFAULT_MU).unwrap();
        assert_eq!(st.history.len(), 1);
        let it = &st.history[0];
        assert!(
            (it.trace_after_regularization - it.trace_before_regularization).abs()
                <= 1e-12 * it.trace_before_regularization
        );
    }

    fn toy(n: usize, seed: u64) -> (CovarianceMatrix, LinearGaussianWindow) {
        let mut rng = RandomSource::new(seed);
        let b = crate::covmat::spd_from_lorenz_params(&crate::covmat::LorenzRParams {
            r0: 0.4,
            r1: -0.1,
            r2: 0.2,
            v_r: 1.5,
        })
        .unwrap();
        let r_true = crate::covmat::spd_from_lorenz_params(&crate::covmat::LorenzRParams {
            r0: 0.3,
            r1: 0.5,
            r2: -0.2,
            v_r: 4.0,
        })
        .unwrap();
        let h = crate::dynmodels::ObservationOperator::lorenz().dense();
        let w = LinearGaussianWindow::sample(&b, &r_true, &h, n, &mut rng).unwrap();
        (r_true, w)
    }

    #[test]
    fn di01_exact_matrices_stay_near_one() {
        let (r_true, w) = toy(10_000, 21);
        let out = di01_tune(&w, &r_true, 3, JoResidual::Analysis).unwrap();
        for st in &out.trace {
            assert!((0.8..=1.25).contains(&st.s_b), "s_b {}", st.s_b);
            assert!((0.8..=1.25).contains(&st.s_o), "s_o {}", st.s_o);
        }
    }

    #[test]
    fn di01_recovers_overscaled_r() {
        let (r_true, w) = toy(1_000, 22);
        // Joint B/R rescaling approaches the truth slowly: two iterations only halve
        // the excess, eight land within 30%.
        let out = di01_tune(&w, &r_true.scaled(10.0).unwrap(), 8, JoResidual::Analysis).unwrap();
        let ratio: Vec<f64> = out.trace.iter().map(|s| s.r.trace() / r_true.trace()).collect();
        assert!(ratio[1] < 2.5, "{ratio:?}");
        assert!(ratio.windows(2).all(|p| p[1] < p[0]), "{ratio:?}");
        assert!((ratio[7] - 1.0).abs() < 0.3, "{ratio:?}");
    }

    #[test]
    fn d05_statistics_on_synthetic_stream() {
        let (r_true, w) = toy(10_000, 23);
        let recs: Vec<InnovationRecord> = w
            .run(1.0, &r_true, JoResidual::Analysis)
            .unwrap()
            .into_iter()
            .map(|d| d.record)
            .collect();
        let norm = r_true.matrix().norm();
        let exact = d05_indicator(r_true.matrix(), &recs).unwrap();
        assert!(exact < 0.1 * norm, "{exact} vs {norm}");

        let doubled = r_true.scaled(2.0).unwrap();
        let recs2: Vec<InnovationRecord> = w
            .run(1.0, &doubled, JoResidual::Analysis)
            .unwrap()
            .into_iter()
            .map(|d| d.record)
            .collect();
        assert!(d05_indicator(doubled.matrix(), &recs2).unwrap() > exact);

        let mut prev = f64::INFINITY;
        for n in [100, 1_000, 10_000] {
            let v = d05_indicator(r_true.matrix(), &recs[..n]).unwrap();
            assert!(v < prev, "indicator {v} at {n} not below {prev}");
            prev = v;
        }
    }

    #[test]
    fn d05_contracts_from_overscaled_start() {
        let (r_true, w) = toy(10_000, 24);
        let start = r_true.scaled(5.0).unwrap();
        let d0 = frobenius_distance(start.matrix(), r_true.matrix()).unwrap();
        let st = d05_iterate(&start, &w, 3, DEFAULT_MU).unwrap();
        let d3 = frobenius_distance(st.r.matrix(), r_true.matrix()).unwrap();
        assert!(d3 < d0 / 2.0, "{d3} vs {d0}");
    }

    #[test]
    fn d05_near_fixed_point_from_truth() {
        let (r_true, w) = toy(10_000, 25);
        // Tiny mu isolates sampling drift from the shrinkage bias of the regularisation.
        let mut r = r_true.clone();
        let mut dist = Vec::new();
        for _ in 0..3 {
            r = d05_iterate(&r, &w, 1, 1e-9).unwrap().r;
            dist.push(frobenius_distance(r.matrix(), r_true.matrix()).unwrap());
        }
        assert!(dist[2] <= 2.0 * dist[0], "{dist:?}");
    }

    struct FixedRecords(Vec<InnovationRecord>);

    impl AssimilationWindow for FixedRecords {
        fn obs_dim(&self) -> usize {
            2
        }

        fn run(&self, _: f64, _: &CovarianceMatrix, _: JoResidual) -> Result<Vec<AnalysisDiagnostics>> {
            Ok(self
                .0
                .iter()
                .map(|r| AnalysisDiagnostics {
                    record: r.clone(),
                    jb: 0.0,
                    jo: 0.0,
                    trace_kh: 1.0,
                    trace_i_minus_hk: 1.0,
                })
                .collect())
        }
    }

    #[test]
    fn d05_failure_reports_iteration_or_falls_back() {
        // E[d_a d_bᵀ] = diag(3, −1): indefinite even after regularisation.
        let w = FixedRecords(vec![
            InnovationRecord {
                t: 0,
                d_a: DVector::from_vec(vec![3.0, 0.0]),
                d_b: DVector::from_vec(vec![1.0, 0.0]),
            },
            InnovationRecord {
                t: 1,
                d_a: DVector::from_vec(vec![0.0, -1.0]),
                d_b: DVector::from_vec(vec![0.0, 1.0]),
            },
        ]);
        let r0 = CovarianceMatrix::identity(2);
        match d05_iterate(&r0, &w, 2, DEFAULT_MU) {
            Err(Error::RegularizationFailed { iteration: 1, .. }) => {}
            other => panic!("expected failure at iteration 1, got {other:?}"),
        }
        let (st, n) = d05_iterate_with_fallback(&r0, &w, 2, DEFAULT_MU, 1e-6).unwrap();
        assert_eq!(n, 2);
        assert!(st.r.matrix().clone().symmetric_eigen().eigenvalues.min() > 0.0);
    }
}
