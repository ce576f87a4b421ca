//! Twin experiments comparing ways of specifying the observation-error covariance.
//!
//! Each example draws a true `R`, simulates observations of the fixed true
//! trajectory, obtains a working `R` by the method under test and then runs the
//! ensemble assimilation over the whole horizon. Metrics are computed from the
//! background ensembles against the truth.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::assim::{
    enda_cycle_diagnosed, propagate_ensemble_with, AnalysisDiagnostics, CycleOptions, Ensemble, JoResidual,
};
use crate::covmat::CovarianceMatrix;
use crate::datagen::{series_rows, GenConfig, ProblemKind, SampleGenerator};
use crate::dynmodels::{run_trajectory, sw_init, Dynamics, LorenzParams, SwInit, SwParams};
use crate::error::{Error, Result};
use crate::lstmnet::{predict_covariance, TrainedModel};
use crate::rng::RandomSource;
use crate::tuning::{d05_iterate_with_fallback, di01_tune, AssimilationWindow};

/// Relative eigenvalue floor used when D05 regularisation fails.
pub const D05_FALLBACK_FLOOR: f64 = 1e-6;

/// The Lorenz model-noise covariance.
pub fn lorenz_q() -> CovarianceMatrix {
    CovarianceMatrix::new(DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.2, 0.0, 0.2, 1.0, 0.2, 0.0, 0.2, 1.0],
    ))
    .expect("constant SPD matrix")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TrueR,
    Lstm,
    Di01,
    D05,
    /// No assimilation at all.
    Free,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::TrueR => "true",
            Method::Lstm => "lstm",
            Method::Di01 => "di01",
            Method::D05 => "d05",
            Method::Free => "free",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" | "true_r" | "true-r" => Ok(Method::TrueR),
            "lstm" => Ok(Method::Lstm),
            "di01" => Ok(Method::Di01),
            "d05" => Ok(Method::D05),
            "free" => Ok(Method::Free),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinConfig {
    pub kind: ProblemKind,
    pub method: Method,
    /// Number of independent examples `N`.
    pub examples: usize,
    /// Ensemble size `M`.
    pub ensemble: usize,
    /// Steps between analyses.
    pub cadence: usize,
    /// Number of model steps `T`.
    pub horizon: usize,
    pub q_di01: usize,
    pub q_d05: usize,
    pub mu: f64,
    pub jo_residual: JoResidual,
    pub seed: u64,
    /// Variance of the initial ensemble perturbation of each analysed component.
    pub init_spread: f64,
    /// Multiplier of the model-noise covariance (Lorenz Q, or the identity for shallow water).
    pub q_scale: f64,
    /// Multiplier applied to every drawn true `R`.
    pub r_scale: f64,
    pub lorenz: LorenzParams,
    pub sw: SwParams,
    pub sw_truth: SwInit,
    /// Initial condition of the shallow-water background.
    pub sw_background: SwInit,
}

impl TwinConfig {
    pub fn lorenz(method: Method) -> Self {
        Self {
            kind: ProblemKind::Lorenz,
            method,
            examples: 50,
            ensemble: 100,
            cadence: 10,
            horizon: 1000,
            q_di01: 2,
            q_d05: 3,
            mu: crate::tuning::DEFAULT_MU,
            jo_residual: JoResidual::Analysis,
            seed: 0,
            init_spread: 0.05,
            q_scale: 1.0,
            r_scale: 1.0,
            lorenz: LorenzParams::default(),
            sw: SwParams::default(),
            sw_truth: SwInit::default(),
            sw_background: SwInit::default(),
        }
    }

    pub fn shallow_water(method: Method) -> Self {
        Self {
            kind: ProblemKind::ShallowWater,
            examples: 5,
            cadence: 100,
            // Same ratios to the mean observation-error variance (1e-6 · 500.5) as the Lorenz setup.
            init_spread: 5e-7,
            q_scale: 1e-5,
            sw_background: SwInit {
                bump_h: 0.12,
                ..SwInit::default()
            },
            ..Self::lorenz(method)
        }
    }

    pub fn for_kind(kind: ProblemKind, method: Method) -> Self {
        match kind {
            ProblemKind::Lorenz => Self::lorenz(method),
            ProblemKind::ShallowWater => Self::shallow_water(method),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples == 0 || self.horizon == 0 || self.cadence == 0 {
            return Err(Error::Config("examples, horizon and cadence must be positive".into()));
        }
        if !self.horizon.is_multiple_of(self.cadence) {
            return Err(Error::Config(format!(
                "cadence {} does not divide horizon {}",
                self.cadence, self.horizon
            )));
        }
        if self.ensemble < 2 {
            return Err(Error::EnsembleTooSmall(self.ensemble));
        }
        if self.q_di01 == 0 || self.q_d05 == 0 {
            return Err(Error::Config("tuner iteration counts must be positive".into()));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Config(format!("mu must lie in (0,1), got {}", self.mu)));
        }
        if !(self.init_spread >= 0.0 && self.q_scale >= 0.0 && self.r_scale > 0.0) {
            return Err(Error::Config("spreads and scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            kind: self.kind,
            steps: self.horizon,
            lorenz: self.lorenz,
            sw: self.sw,
            sw_init: self.sw_truth,
        }
    }

    /// Everything except the method; two configs with equal keys are paired.
    fn pairing_key(&self) -> TwinConfig {
        Self {
            method: Method::TrueR,
            ..self.clone()
        }
    }
}

/// `sqrt(Σ_m (x_{m,i} − x_i)²)` for each of the first `n` components.
pub fn member_error_norms(e: &Ensemble, truth: &DVector<f64>, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for m in e.members() {
        for i in 0..n {
            let d = m[i] - truth[i];
            acc[i] += d * d;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

/// Per-example error norms over time, the raw material of both metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleErrors {
    pub vars: usize,
    /// `norms[t * vars + i]`.
    pub norms: Vec<f64>,
    /// `‖x_i‖₂` of the true series of each variable.
    pub truth_norms: Vec<f64>,
}

impl ExampleErrors {
    pub fn steps(&self) -> usize {
        self.norms.len() / self.vars
    }

    fn from_members(members: &[Vec<DVector<f64>>], truth: &[DVector<f64>]) -> Result<Self> {
        if members.len() != truth.len() || truth.is_empty() {
            return Err(Error::dims(truth.len(), members.len()));
        }
        let vars = truth[0].len();
        let mut norms = Vec::with_capacity(truth.len() * vars);
        for (ms, x) in members.iter().zip(truth) {
            if x.len() != vars || ms.iter().any(|m| m.len() < vars) {
                return Err(Error::dims(vars, x.len()));
            }
            let mut acc = vec![0.0; vars];
            for m in ms {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += (m[i] - x[i]).powi(2);
                }
            }
            norms.extend(acc.into_iter().map(f64::sqrt));
        }
        Ok(Self {
            vars,
            norms,
            truth_norms: truth_norms(truth, vars),
        })
    }
}

fn truth_norms(truth: &[DVector<f64>], vars: usize) -> Vec<f64> {
    (0..vars)
        .map(|i| truth.iter().map(|x| x[i] * x[i]).sum::<f64>().sqrt())
        .collect()
}

fn check_examples(errors: &[ExampleErrors]) -> Result<(usize, usize)> {
    let first = errors.first().ok_or(Error::EmptyInput("examples"))?;
    let (vars, steps) = (first.vars, first.steps());
    for e in errors {
        if e.vars != vars || e.steps() != steps || e.truth_norms.len() != vars {
            return Err(Error::dims(vars * steps, e.norms.len()));
        }
    }
    Ok((vars, steps))
}

/// `ε_std_mse[i][t]`: example average of the member error norm scaled by `‖x_i‖₂`.
pub fn std_mse_from(errors: &[ExampleErrors]) -> Result<Vec<Vec<f64>>> {
    let (vars, steps) = check_examples(errors)?;
    let mut out = vec![vec![0.0; steps]; vars];
    for e in errors {
        for i in 0..vars {
            if e.truth_norms[i] == 0.0 {
                return Err(Error::ZeroNorm(i));
            }
            for t in 0..steps {
                out[i][t] += e.norms[t * vars + i] / e.truth_norms[i];
            }
        }
    }
    let n = errors.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(out)
}

/// `ε_mse[i]`: example average of the time-averaged member error norm.
pub fn mse_from(errors: &[ExampleErrors]) -> Result<Vec<f64>> {
    let (vars, steps) = check_examples(errors)?;
    let mut out = vec![0.0; vars];
    for e in errors {
        for t in 0..steps {
            for (i, o) in out.iter_mut().enumerate() {
                *o += e.norms[t * vars + i];
            }
        }
    }
    let denom = (errors.len() * steps) as f64;
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// `runs[j][t]` holds the background members of example `j` at time `t`, `truth[j][t]` the true state.
pub fn epsilon_std_mse(runs: &[Vec<Vec<DVector<f64>>>], truth: &[Vec<DVector<f64>>]) -> Result<Vec<Vec<f64>>> {
    if runs.len() != truth.len() {
        return Err(Error::dims(truth.len(), runs.len()));
    }
    let errors = runs
        .iter()
        .zip(truth)
        .map(|(r, x)| ExampleErrors::from_members(r, x))
        .collect::<Result<Vec<_>>>()?;
    std_mse_from(&errors)
}

pub fn epsilon_mse(runs: &[Vec<Vec<DVector<f64>>>], truth: &[Vec<DVector<f64>>]) -> Result<Vec<f64>> {
    if runs.len() != truth.len() {
        return Err(Error::dims(truth.len(), runs.len()));
    }
    let errors = runs
        .iter()
        .zip(truth)
        .map(|(r, x)| ExampleErrors::from_members(r, x))
        .collect::<Result<Vec<_>>>()?;
    mse_from(&errors)
}

/// 64-bit FNV-1a over the bit patterns of `values`, folded into `state`.
pub fn fnv1a(state: u64, values: &[f64]) -> u64 {
    let mut h = state;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Data shared by every example of one configuration.
pub struct TwinSetup {
    pub config: TwinConfig,
    pub generator: SampleGenerator,
    pub model: Box<dyn Dynamics>,
    pub truth: Vec<DVector<f64>>,
    pub h: DMatrix<f64>,
    pub q: Option<CovarianceMatrix>,
    /// State the background ensemble is drawn around.
    pub background_start: DVector<f64>,
    pub analysis_dim: usize,
}

impl TwinSetup {
    pub fn new(config: &TwinConfig) -> Result<Self> {
        config.validate()?;
        let gen_cfg = config.gen_config();
        let generator = SampleGenerator::new(gen_cfg.clone())?;
        let model = gen_cfg.model();
        let truth = run_trajectory(model.as_ref(), &gen_cfg.initial_state()?, config.horizon)?;
        let h = gen_cfg.observation_operator()?.dense();
        let analysis_dim = model.analysis_dim();
        let (q, background_start) = match config.kind {
            ProblemKind::Lorenz => (
                lorenz_q().scaled(config.q_scale.max(f64::MIN_POSITIVE))?,
                truth[0].clone(),
            ),
            ProblemKind::ShallowWater => (
                CovarianceMatrix::scaled_identity(analysis_dim, config.q_scale.max(f64::MIN_POSITIVE)),
                sw_init(&config.sw, &config.sw_background)?.to_state(),
            ),
        };
        let q = if config.q_scale > 0.0 { Some(q) } else { None };
        Ok(Self {
            config: config.clone(),
            generator,
            model,
            truth,
            h,
            q,
            background_start,
            analysis_dim,
        })
    }

    /// True parameters, true `R` and the observation series of example `j`.
    pub fn example_data(&self, j: usize) -> Result<ExampleData> {
        let rng = RandomSource::new(self.config.seed).child(j as u64);
        let params = self.generator.config.sample_params(&mut rng.child(0));
        let r_true = params.build()?.scaled(self.config.r_scale)?;
        let series = self.generator.observe_with(&r_true, &mut rng.child(1))?;
        Ok(ExampleData {
            params,
            r_true,
            obs: series_rows(&series, self.generator.config.obs_dim()),
            series,
            da_seed: rng.child(2).seed(),
            tuner_seed: rng.child(3).seed(),
        })
    }

    pub fn window<'a>(&'a self, data: &'a ExampleData) -> EnsembleWindow<'a> {
        EnsembleWindow { setup: self, data }
    }
}

pub struct ExampleData {
    pub params: crate::datagen::CovParams,
    pub r_true: CovarianceMatrix,
    pub series: Vec<f64>,
    pub obs: Vec<DVector<f64>>,
    pub da_seed: u64,
    pub tuner_seed: u64,
}

/// The assimilation of one example, re-runnable with different covariances on identical
/// random draws.
pub struct EnsembleWindow<'a> {
    setup: &'a TwinSetup,
    data: &'a ExampleData,
}

impl EnsembleWindow<'_> {
    /// Runs the window; `assimilate == false` gives the free run. `observe(t, e)` sees the
    /// background ensemble at every time `0..=T`.
    pub fn run_observed(
        &self,
        b_scale: f64,
        r: Option<&CovarianceMatrix>,
        jo: JoResidual,
        observe: &mut dyn FnMut(usize, &Ensemble),
    ) -> Result<Vec<AnalysisDiagnostics>> {
        let s = self.setup;
        let cfg = &s.config;
        let n = s.analysis_dim;
        let da = RandomSource::new(self.data.da_seed);
        let mut init_rng = da.child(0);
        let mut q_rng = da.child(1);
        let mut obs_rng = da.child(2);
        let sd = cfg.init_spread.sqrt();
        let members = (0..cfg.ensemble)
            .map(|_| {
                let mut x = s.background_start.clone();
                for i in 0..n {
                    x[i] += sd * init_rng.normal();
                }
                x
            })
            .collect();
        let mut ens = Ensemble::new(members)?;
        let opts = CycleOptions {
            analysis_dim: n,
            b_scale,
            jo_residual: jo,
        };
        let mut diags = Vec::new();
        observe(0, &ens);
        let mut t = 0;
        while t < cfg.horizon {
            if let Some(r) = r {
                let (next, d) = enda_cycle_diagnosed(&ens, &self.data.obs[t], r, &s.h, &mut obs_rng, &opts, t)?;
                ens = next;
                diags.push(d);
            }
            let steps = cfg.cadence.min(cfg.horizon - t);
            let base = t;
            ens = propagate_ensemble_with(&ens, s.model.as_ref(), s.q.as_ref(), steps, &mut q_rng, |k, e| {
                observe(base + k, e)
            })?;
            t += steps;
        }
        Ok(diags)
    }

    /// Error norms of the background ensemble against the truth at every time.
    pub fn errors(&self, b_scale: f64, r: Option<&CovarianceMatrix>) -> Result<ExampleErrors> {
        let s = self.setup;
        let n = s.analysis_dim;
        let mut norms = Vec::with_capacity((s.config.horizon + 1) * n);
        self.run_observed(b_scale, r, s.config.jo_residual, &mut |t, e| {
            norms.extend(member_error_norms(e, &s.truth[t], n));
        })?;
        let truth: Vec<DVector<f64>> = s.truth.iter().map(|x| x.rows(0, n).into_owned()).collect();
        Ok(ExampleErrors {
            vars: n,
            norms,
            truth_norms: truth_norms(&truth, n),
        })
    }
}

impl AssimilationWindow for EnsembleWindow<'_> {
    fn obs_dim(&self) -> usize {
        self.setup.h.nrows()
    }

    fn run(&self, b_scale: f64, r: &CovarianceMatrix, jo: JoResidual) -> Result<Vec<AnalysisDiagnostics>> {
        self.run_observed(b_scale, Some(r), jo, &mut |_, _| {})
    }
}

/// Outcome of a single example.
#[derive(Debug, Clone)]
pub struct ExampleOutcome {
    pub errors: ExampleErrors,
    pub spec_seconds: f64,
    pub fallbacks: usize,
    pub obs_hash: u64,
    /// Background multiplier found by DI01 (1 for the other methods); not applied in the final run.
    pub b_scale: f64,
    /// Working `R` over the whole observation vector (absent for the free run).
    pub r_used: Option<CovarianceMatrix>,
    pub r_true: CovarianceMatrix,
}

/// Specifies `R` by the configured method and assimilates example `j`.
pub fn run_example(setup: &TwinSetup, j: usize, model: Option<&TrainedModel>) -> Result<ExampleOutcome> {
    let cfg = &setup.config;
    let gen = &setup.generator.config;
    let data = setup.example_data(j)?;
    let window = setup.window(&data);
    let mut fallbacks = 0;
    let start = Instant::now();
    let (b_scale, r) = match cfg.method {
        Method::TrueR => (1.0, Some(gen.obs_covariance(&data.r_true)?)),
        Method::Free => (1.0, None),
        Method::Lstm => {
            let m = model.ok_or_else(|| Error::Config("the lstm method needs a trained model".into()))?;
            let p = predict_covariance(&data.series, m)?;
            fallbacks += p.fallback as usize;
            (1.0, Some(gen.obs_covariance(&p.matrix)?))
        }
        Method::Di01 | Method::D05 => {
            let r0 = gen.obs_covariance(&gen.sample_params(&mut RandomSource::new(data.tuner_seed)).build()?)?;
            if cfg.method == Method::Di01 {
                let out = di01_tune(&window, &r0, cfg.q_di01, cfg.jo_residual)?;
                (out.b_scale, Some(out.r))
            } else {
                let (st, fb) = d05_iterate_with_fallback(&r0, &window, cfg.q_d05, cfg.mu, D05_FALLBACK_FLOOR)?;
                fallbacks += fb;
                (1.0, Some(st.r))
            }
        }
    };
    let spec_seconds = start.elapsed().as_secs_f64();
    // Only the working R is carried into the final run; the DI01 B multiplier is reported.
    let errors = window.errors(1.0, r.as_ref())?;
    Ok(ExampleOutcome {
        errors,
        spec_seconds,
        fallbacks,
        obs_hash: fnv1a(FNV_OFFSET, &data.series),
        b_scale,
        r_used: r,
        r_true: data.r_true,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub method: Method,
    pub kind: ProblemKind,
    pub examples: usize,
    /// `[variable][time]`
    pub eps_std_mse: Vec<Vec<f64>>,
    pub eps_mse: Vec<f64>,
    pub mean_eps_mse: f64,
    /// Mean wall-clock of covariance specification per example.
    pub spec_seconds: f64,
    pub fallbacks: usize,
    /// Hash of every example's observation series, in example order.
    pub obs_hash: u64,
    /// Mean over variables of the time-averaged error, per example.
    pub example_mean_eps: Vec<f64>,
}

/// Runs every example (in parallel) and aggregates in example order.
pub fn run_twin_experiment(cfg: &TwinConfig, model: Option<&TrainedModel>) -> Result<MetricsReport> {
    if cfg.method == Method::Lstm {
        let m = model.ok_or_else(|| Error::Config("the lstm method needs a trained model".into()))?;
        if m.kind != cfg.kind {
            return Err(Error::ConfigMismatch(format!(
                "model trained for {}, experiment is {}",
                m.kind.name(),
                cfg.kind.name()
            )));
        }
        if m.input_steps > cfg.horizon + 1 || m.obs_dim() != cfg.gen_config().obs_dim() {
            return Err(Error::ConfigMismatch(
                "model input does not fit the observation series".into(),
            ));
        }
    }
    let setup = TwinSetup::new(cfg)?;
    let outcomes = (0..cfg.examples)
        .into_par_iter()
        .map(|j| run_example(&setup, j, model))
        .collect::<Result<Vec<_>>>()?;
    report_from(cfg, &outcomes)
}

pub fn report_from(cfg: &TwinConfig, outcomes: &[ExampleOutcome]) -> Result<MetricsReport> {
    let errors: Vec<ExampleErrors> = outcomes.iter().map(|o| o.errors.clone()).collect();
    let eps_std_mse = std_mse_from(&errors)?;
    let eps_mse = mse_from(&errors)?;
    let mean_eps_mse = eps_mse.iter().sum::<f64>() / eps_mse.len() as f64;
    let example_mean_eps = errors
        .iter()
        .map(|e| mse_from(std::slice::from_ref(e)).map(|v| v.iter().sum::<f64>() / v.len() as f64))
        .collect::<Result<Vec<_>>>()?;
    let obs_hash = outcomes
        .iter()
        .fold(FNV_OFFSET, |h, o| fnv1a(h, &[f64::from_bits(o.obs_hash)]));
    Ok(MetricsReport {
        method: cfg.method,
        kind: cfg.kind,
        examples: outcomes.len(),
        eps_std_mse,
        eps_mse,
        mean_eps_mse,
        spec_seconds: outcomes.iter().map(|o| o.spec_seconds).sum::<f64>() / outcomes.len() as f64,
        fallbacks: outcomes.iter().map(|o| o.fallbacks).sum(),
        obs_hash,
        example_mean_eps,
    })
}

/// Paired comparison: all configurations must differ only in the method.
pub fn compare_methods(cfgs: &[TwinConfig], model: Option<&TrainedModel>) -> Result<Vec<MetricsReport>> {
    if cfgs.len() < 2 {
        return Err(Error::Config("a comparison needs at least two methods".into()));
    }
    let key = cfgs[0].pairing_key();
    if let Some(bad) = cfgs.iter().find(|c| c.pairing_key() != key) {
        return Err(Error::ConfigMismatch(format!(
            "configuration for {} differs from the first in more than the method",
            bad.method
        )));
    }
    let reports = cfgs
        .iter()
        .map(|c| run_twin_experiment(c, model))
        .collect::<Result<Vec<_>>>()?;
    if reports.iter().any(|r| r.obs_hash != reports[0].obs_hash) {
        return Err(Error::ConfigMismatch(
            "observation streams differ between methods".into(),
        ));
    }
    Ok(reports)
}

/// `method,mean_eps_mse,spec_seconds,fallbacks,obs_hash`
pub fn write_comparison_csv(reports: &[MetricsReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "method,mean_eps_mse,spec_seconds,fallbacks,obs_hash")?;
    for r in reports {
        writeln!(
            w,
            "{},{:.17e},{:.6e},{},{:016x}",
            r.method, r.mean_eps_mse, r.spec_seconds, r.fallbacks, r.obs_hash
        )?;
    }
    Ok(())
}

/// `method,var,eps_mse`: one row per method and variable.
pub fn write_metrics_csv(reports: &[MetricsReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "method,var,eps_mse")?;
    for r in reports {
        for (i, v) in r.eps_mse.iter().enumerate() {
            writeln!(w, "{},{},{:.17e}", r.method, i, v)?;
        }
    }
    Ok(())
}

/// `t,var,value`: the `ε_std_mse` curves of one report.
pub fn write_plot_csv(r: &MetricsReport, w: &mut impl Write) -> Result<()> {
    writeln!(w, "t,var,value")?;
    let steps = r.eps_std_mse.first().map_or(0, Vec::len);
    for t in 0..steps {
        for (i, series) in r.eps_std_mse.iter().enumerate() {
            writeln!(w, "{},{},{:.17e}", t, i, series[t])?;
        }
    }
    Ok(())
}

/// Structured summary without the per-time curves.
pub fn summary_json(reports: &[MetricsReport]) -> serde_json::Value {
    serde_json::Value::Array(
        reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method,
                    "kind": r.kind,
                    "examples": r.examples,
                    "eps_mse": r.eps_mse,
                    "mean_eps_mse": r.mean_eps_mse,
                    "spec_seconds": r.spec_seconds,
                    "fallbacks": r.fallbacks,
                    "obs_hash": format!("{:016x}", r.obs_hash),
                })
            })
            .collect(),
    )
}
