//! Simulated observation datasets for training the covariance network.
//!
//! A sample is one noisy observation series of the (fixed) true trajectory,
//! generated with an observation-error covariance drawn from the admissible
//! parameter space, together with those parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::binio::{put_f64s, put_len, put_u32, put_u64, Reader};
use crate::covmat::{
    build_sw_covariance, draw_correlated, sample_lorenz_r_params, spd_from_lorenz_params, CovarianceMatrix,
    LorenzRParams, SwRParams, LORENZ_VR_MAX, SW_D_RANGE, SW_LENGTH_SCALE, SW_SHAPE_RANGE,
};
use crate::dynmodels::{
    run_trajectory, Dynamics, LorenzModel, LorenzParams, ObservationOperator, ShallowWater, SwInit, SwParams,
};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const DATASET_MAGIC: &[u8; 8] = b"COVDSET1";

/// Paper-scale training-set sizes, kept as presets.
pub const PAPER_N_LORENZ: usize = 103_486;
pub const PAPER_N_SHALLOW_WATER: usize = 173_000;

/// Fraction of samples held out for validation when none is specified.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Lorenz,
    ShallowWater,
}

impl ProblemKind {
    pub fn code(self) -> u32 {
        match self {
            ProblemKind::Lorenz => 0,
            ProblemKind::ShallowWater => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ProblemKind::Lorenz),
            1 => Ok(ProblemKind::ShallowWater),
            c => Err(Error::Domain(format!("unknown problem kind code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Lorenz => "lorenz",
            ProblemKind::ShallowWater => "shallow-water",
        }
    }

    /// Maps covariance parameters to network targets of order one.
    ///
    /// Lorenz: correlations unchanged, `v_R / 100`. Shallow water: `D / 1000`, `(r − 1) / 4`.
    pub fn normalize_params(self, p: &[f64]) -> Vec<f64> {
        let (scale, offset) = self.param_affine(p.len());
        p.iter()
            .zip(scale.iter().zip(&offset))
            .map(|(v, (s, o))| (v - o) / s)
            .collect()
    }

    pub fn denormalize_params(self, z: &[f64]) -> Vec<f64> {
        let (scale, offset) = self.param_affine(z.len());
        z.iter()
            .zip(scale.iter().zip(&offset))
            .map(|(v, (s, o))| v * s + o)
            .collect()
    }

    fn param_affine(self, n: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            ProblemKind::Lorenz => {
                let mut scale = vec![1.0; n];
                if let Some(last) = scale.last_mut() {
                    *last = LORENZ_VR_MAX;
                }
                (scale, vec![0.0; n])
            }
            ProblemKind::ShallowWater => {
                let mut scale = vec![SW_D_RANGE.1; n];
                let mut offset = vec![0.0; n];
                if n > 0 {
                    scale[n - 1] = SW_SHAPE_RANGE.1 - SW_SHAPE_RANGE.0;
                    offset[n - 1] = SW_SHAPE_RANGE.0;
                }
                (scale, offset)
            }
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorenz" => Ok(ProblemKind::Lorenz),
            "shallow-water" | "shallow_water" | "sw" => Ok(ProblemKind::ShallowWater),
            other => Err(Error::Config(format!("unknown problem kind `{other}`"))),
        }
    }
}

/// Parametric description of an observation-error covariance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum CovParams {
    Lorenz(LorenzRParams),
    ShallowWater(SwRParams),
}

impl CovParams {
    pub fn kind(&self) -> ProblemKind {
        match self {
            CovParams::Lorenz(_) => ProblemKind::Lorenz,
            CovParams::ShallowWater(_) => ProblemKind::ShallowWater,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            CovParams::Lorenz(p) => p.to_vec(),
            CovParams::ShallowWater(p) => p.to_vec(),
        }
    }

    pub fn from_slice(kind: ProblemKind, v: &[f64]) -> Result<Self> {
        Ok(match kind {
            ProblemKind::Lorenz => CovParams::Lorenz(LorenzRParams::from_slice(v)?),
            ProblemKind::ShallowWater => CovParams::ShallowWater(SwRParams::from_slice(v)?),
        })
    }

    pub fn in_range(&self) -> bool {
        match self {
            CovParams::Lorenz(p) => p.in_range(),
            CovParams::ShallowWater(p) => p.in_range(),
        }
    }

    pub fn build(&self) -> Result<CovarianceMatrix> {
        match self {
            CovParams::Lorenz(p) => spd_from_lorenz_params(p),
            CovParams::ShallowWater(p) => build_sw_covariance(p, SW_LENGTH_SCALE),
        }
    }
}

/// Generation settings for one testbed.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub kind: ProblemKind,
    /// Number of model steps; series have `steps + 1` rows.
    pub steps: usize,
    pub lorenz: LorenzParams,
    pub sw: SwParams,
    pub sw_init: SwInit,
}

impl GenConfig {
    pub fn lorenz() -> Self {
        Self {
            kind: ProblemKind::Lorenz,
            steps: 1000,
            lorenz: LorenzParams::default(),
            sw: SwParams::default(),
            sw_init: SwInit::default(),
        }
    }

    pub fn shallow_water() -> Self {
        Self {
            kind: ProblemKind::ShallowWater,
            ..Self::lorenz()
        }
    }

    pub fn for_kind(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::Lorenz => Self::lorenz(),
            ProblemKind::ShallowWater => Self::shallow_water(),
        }
    }

    pub fn model(&self) -> Box<dyn Dynamics> {
        match self.kind {
            ProblemKind::Lorenz => Box::new(LorenzModel::new(self.lorenz)),
            ProblemKind::ShallowWater => Box::new(ShallowWater::new(self.sw)),
        }
    }

    pub fn initial_state(&self) -> Result<DVector<f64>> {
        match self.kind {
            ProblemKind::Lorenz => Ok(LorenzModel::initial_state()),
            ProblemKind::ShallowWater => Ok(crate::dynmodels::sw_init(&self.sw, &self.sw_init)?.to_state()),
        }
    }

    pub fn observation_operator(&self) -> Result<ObservationOperator> {
        match self.kind {
            ProblemKind::Lorenz => Ok(ObservationOperator::lorenz()),
            ProblemKind::ShallowWater => ObservationOperator::grid_average(&self.sw),
        }
    }

    /// Side of the observation lattice (shallow water only).
    pub fn obs_side(&self) -> usize {
        self.sw.nx / 2
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Lorenz => 3,
            ProblemKind::ShallowWater => 2 * self.obs_side() * self.obs_side(),
        }
    }

    /// Covariance of the whole observation vector: `r` repeated on the diagonal once per
    /// observed block (u and v for shallow water).
    pub fn obs_covariance(&self, r: &CovarianceMatrix) -> Result<CovarianceMatrix> {
        let n = self.obs_dim();
        let m = r.dim();
        if m == 0 || !n.is_multiple_of(m) {
            return Err(Error::dims(n, m));
        }
        if m == n {
            return Ok(r.clone());
        }
        let mut full = DMatrix::zeros(n, n);
        for b in 0..n / m {
            full.view_mut((b * m, b * m), (m, m)).copy_from(r.matrix());
        }
        CovarianceMatrix::new(full)
    }

    pub fn param_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Lorenz => 4,
            ProblemKind::ShallowWater => self.obs_side() * self.obs_side() + 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("generation needs at least one step".into()));
        }
        if self.kind == ProblemKind::ShallowWater && self.sw.nx != self.sw.ny {
            return Err(Error::Config("shallow-water observation lattice must be square".into()));
        }
        Ok(())
    }

    /// Draws covariance parameters from the admissible space.
    pub fn sample_params(&self, rng: &mut RandomSource) -> CovParams {
        match self.kind {
            ProblemKind::Lorenz => CovParams::Lorenz(sample_lorenz_r_params(rng)),
            ProblemKind::ShallowWater => CovParams::ShallowWater(SwRParams::sample(self.obs_side(), rng)),
        }
    }
}

/// One simulated training example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub seed: u64,
    pub params: Vec<f64>,
    /// Row-major `(steps + 1) × obs_dim`.
    pub series: Vec<f64>,
}

/// Noise-free observation series of the true trajectory, reused for every sample.
#[derive(Debug, Clone)]
pub struct SampleGenerator {
    pub config: GenConfig,
    clean: Vec<DVector<f64>>,
}

impl SampleGenerator {
    pub fn new(config: GenConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model();
        let h = config.observation_operator()?;
        let traj = run_trajectory(model.as_ref(), &config.initial_state()?, config.steps)?;
        let n = model.analysis_dim();
        let clean = traj
            .iter()
            .map(|x| h.apply(&x.as_slice()[..n]))
            .collect::<Result<_>>()?;
        Ok(Self { config, clean })
    }

    pub fn clean_series(&self) -> &[DVector<f64>] {
        &self.clean
    }

    /// Series of `H x_t + ε_t` for every stored time. Shallow water draws the
    /// `u` and `v` blocks independently from the same `R`.
    pub fn observe_with(&self, r: &CovarianceMatrix, rng: &mut RandomSource) -> Result<Vec<f64>> {
        let obs_dim = self.config.obs_dim();
        let blocks = obs_dim / r.dim();
        if blocks * r.dim() != obs_dim {
            return Err(Error::dims(obs_dim, r.dim()));
        }
        let mut out = Vec::with_capacity(self.clean.len() * obs_dim);
        for y in &self.clean {
            for b in 0..blocks {
                let eps = draw_correlated(r, rng);
                let base = b * r.dim();
                out.extend((0..r.dim()).map(|i| y[base + i] + eps[i]));
            }
        }
        Ok(out)
    }

    /// Draws parameters and a series from the stream seeded by `seed`.
    pub fn generate(&self, seed: u64) -> Result<DatasetSample> {
        let mut rng = RandomSource::new(seed);
        let params = self.config.sample_params(&mut rng);
        let r = params.build()?;
        let series = self.observe_with(&r, &mut rng)?;
        Ok(DatasetSample {
            seed,
            params: params.to_vec(),
            series,
        })
    }
}

/// One Lorenz sample with the default horizon.
pub fn generate_lorenz_sample(rng: &mut RandomSource) -> Result<DatasetSample> {
    SampleGenerator::new(GenConfig::lorenz())?.generate(rng.next_u64())
}

/// One shallow-water sample with the default grid and horizon.
pub fn generate_sw_sample(rng: &mut RandomSource) -> Result<DatasetSample> {
    SampleGenerator::new(GenConfig::shallow_water())?.generate(rng.next_u64())
}

/// Per-(time, channel) mean and standard deviation of observation series.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are replaced by one.
const STD_FLOOR: f64 = 1e-12;

impl InputStats {
    /// Statistics of the first `len` entries of each series.
    pub fn compute<'a>(series: impl IntoIterator<Item = &'a [f64]>, len: usize) -> Result<Self> {
        let mut mean = vec![0.0; len];
        let mut sq = vec![0.0; len];
        let mut n = 0usize;
        for s in series {
            if s.len() < len {
                return Err(Error::dims(len, s.len()));
            }
            n += 1;
            // Welford per entry keeps the large deterministic signal from swamping the variance.
            for (k, &x) in s[..len].iter().enumerate() {
                let d = x - mean[k];
                mean[k] += d / n as f64;
                sq[k] += d * (x - mean[k]);
            }
        }
        if n == 0 {
            return Err(Error::EmptyInput("series for normalisation"));
        }
        let std = sq
            .iter()
            .map(|&s| {
                let sd = if n > 1 { (s / (n - 1) as f64).sqrt() } else { 0.0 };
                if sd > STD_FLOOR {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Normalises the first `len()` entries of `x`.
    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() < self.len() {
            return Err(Error::dims(self.len(), x.len()));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.len() {
            return Err(Error::dims(self.len(), z.len()));
        }
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len > self.len() {
            return Err(Error::dims(self.len(), len));
        }
        Ok(Self {
            mean: self.mean[..len].to_vec(),
            std: self.std[..len].to_vec(),
        })
    }
}

/// Number of validation samples held out of `n` for fraction `rho`.
pub fn validation_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64).round() as usize).min(n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: ProblemKind,
    /// Rows per series (`steps + 1`).
    pub series_len: usize,
    pub obs_dim: usize,
    pub param_dim: usize,
    pub samples: Vec<DatasetSample>,
    /// Statistics over the default training split.
    pub stats: InputStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(train, validation)` split with the last samples held out.
    pub fn split(&self, rho: f64) -> (&[DatasetSample], &[DatasetSample]) {
        let nv = validation_count(self.len(), rho);
        self.samples.split_at(self.len() - nv)
    }

    /// Side of the shallow-water observation lattice.
    pub fn obs_side(&self) -> usize {
        (((self.param_dim.saturating_sub(1)) as f64).sqrt().round()) as usize
    }

    pub fn params_of(&self, i: usize) -> Result<CovParams> {
        CovParams::from_slice(self.kind, &self.samples[i].params)
    }

    fn check_shapes(&self) -> Result<()> {
        for s in &self.samples {
            if s.series.len() != self.series_len * self.obs_dim {
                return Err(Error::dims(self.series_len * self.obs_dim, s.series.len()));
            }
            if s.params.len() != self.param_dim {
                return Err(Error::dims(self.param_dim, s.params.len()));
            }
        }
        Ok(())
    }
}

/// `n` independent samples from child streams of `rng`, generated in parallel.
pub fn build_dataset(config: &GenConfig, n: usize, rng: &RandomSource) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let gen = SampleGenerator::new(config.clone())?;
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| gen.generate(rng.child(i).seed()))
        .collect::<Result<Vec<_>>>()?;
    let series_len = config.steps + 1;
    let obs_dim = config.obs_dim();
    let nv = validation_count(n, DEFAULT_VALIDATION_FRACTION);
    let stats = InputStats::compute(
        samples[..n - nv].iter().map(|s| s.series.as_slice()),
        series_len * obs_dim,
    )?;
    Ok(Dataset {
        kind: config.kind,
        series_len,
        obs_dim,
        param_dim: config.param_dim(),
        samples,
        stats,
    })
}

pub fn write_dataset(d: &Dataset, w: &mut impl Write) -> Result<()> {
    d.check_shapes()?;
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, d.kind.code())?;
    put_u64(w, d.samples.len() as u64)?;
    put_len(w, d.series_len)?;
    put_len(w, d.obs_dim)?;
    put_len(w, d.param_dim)?;
    for s in &d.samples {
        put_u64(w, s.seed)?;
        put_f64s(w, &s.params)?;
        put_f64s(w, &s.series)?;
    }
    put_len(w, d.stats.mean.len())?;
    put_f64s(w, &d.stats.mean)?;
    put_len(w, d.stats.std.len())?;
    put_f64s(w, &d.stats.std)?;
    Ok(())
}

/// Upper bound on any single declared dimension, to reject garbage headers early.
const MAX_DIM: usize = 1 << 28;

pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut rd = Reader::new(r);
    let mut magic = [0u8; 8];
    rd.bytes(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::VersionMismatch {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let kind_at = rd.offset();
    let kind = ProblemKind::from_code(rd.u32("kind")?).map_err(|e| Error::Format {
        offset: kind_at,
        msg: e.to_string(),
    })?;
    let n = rd.u64("sample count")? as usize;
    let series_len = rd.u32("series length")? as usize;
    let obs_dim = rd.u32("observation dimension")? as usize;
    let param_dim = rd.u32("parameter dimension")? as usize;
    if n == 0 || series_len == 0 || obs_dim == 0 || param_dim == 0 {
        return rd.fail("zero dimension in header");
    }
    if series_len.saturating_mul(obs_dim) > MAX_DIM || param_dim > MAX_DIM || n > MAX_DIM {
        return rd.fail("header dimensions out of range");
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let seed = rd.u64(&format!("seed of sample {i}"))?;
        let params = rd.f64s(param_dim, "parameters")?;
        let series = rd.f64s(series_len * obs_dim, "series")?;
        samples.push(DatasetSample { seed, params, series });
    }
    let mean = rd.f64_array("normalisation means", MAX_DIM)?;
    let std = rd.f64_array("normalisation deviations", MAX_DIM)?;
    if mean.len() != series_len * obs_dim || std.len() != mean.len() {
        return rd.fail("normalisation block does not match series shape");
    }
    rd.expect_eof()?;
    Ok(Dataset {
        kind,
        series_len,
        obs_dim,
        param_dim,
        samples,
        stats: InputStats { mean, std },
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Recovers the shallow-water grid of a dataset from its observation lattice.
pub fn sw_params_for(d: &Dataset) -> SwParams {
    let side = d.obs_side();
    SwParams {
        nx: 2 * side,
        ny: 2 * side,
        ..SwParams::default()
    }
}

/// Reshapes a row-major series into per-time vectors.
pub fn series_rows(series: &[f64], obs_dim: usize) -> Vec<DVector<f64>> {
    series.chunks_exact(obs_dim).map(DVector::from_column_slice).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmat::symmetrize;
    use nalgebra::DMatrix;
    use std::collections::HashSet;
    use std::hash::{DefaultHasher, Hash, Hasher};

    fn small_lorenz(steps: usize) -> GenConfig {
        GenConfig {
            steps,
            ..GenConfig::lorenz()
        }
    }

    fn small_sw(steps: usize) -> GenConfig {
        GenConfig {
            steps,
            sw: SwParams {
                nx: 10,
                ny: 10,
                ..SwParams::default()
            },
            ..GenConfig::shallow_water()
        }
    }

    #[test]
    fn obs_covariance_repeats_blocks() {
        let cfg = GenConfig::shallow_water();
        let side = cfg.obs_side();
        let r = build_sw_covariance(&SwRParams::sample(side, &mut RandomSource::new(3)), SW_LENGTH_SCALE).unwrap();
        let full = cfg.obs_covariance(&r).unwrap();
        let m = side * side;
        assert_eq!(full.dim(), 2 * m);
        assert_eq!(full.matrix().view((m, m), (m, m)), r.matrix().view((0, 0), (m, m)));
        assert!(full.matrix().view((0, m), (m, m)).iter().all(|v| *v == 0.0));
        let l = GenConfig::lorenz();
        let r3 = CovarianceMatrix::identity(3);
        assert_eq!(l.obs_covariance(&r3).unwrap(), r3);
        assert!(l.obs_covariance(&CovarianceMatrix::identity(2)).is_err());
    }

    #[test]
    fn vanishing_noise_reproduces_clean_series() {
        let gen = SampleGenerator::new(small_lorenz(1000)).unwrap();
        let mut rng = RandomSource::new(1);
        let s = gen
            .observe_with(&CovarianceMatrix::scaled_identity(3, 1e-12), &mut rng)
            .unwrap();
        assert_eq!(s.len(), 1001 * 3);
        let model = LorenzModel::new(LorenzParams::default());
        let traj = run_trajectory(&model, &LorenzModel::initial_state(), 1000).unwrap();
        let h = ObservationOperator::lorenz().dense();
        for (t, x) in traj.iter().enumerate() {
            let y = &h * x;
            for c in 0..3 {
                assert!((s[t * 3 + c] - y[c]).abs() < 1e-4);
            }
        }

        let gen = SampleGenerator::new(small_sw(20)).unwrap();
        let s = gen
            .observe_with(&CovarianceMatrix::scaled_identity(25, 1e-30), &mut rng)
            .unwrap();
        for (t, y) in gen.clean_series().iter().enumerate() {
            for c in 0..50 {
                assert!((s[t * 50 + c] - y[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn samples_are_reproducible() {
        let mut a = RandomSource::new(5);
        let mut b = RandomSource::new(5);
        assert_eq!(
            generate_lorenz_sample(&mut a).unwrap(),
            generate_lorenz_sample(&mut b).unwrap()
        );
        let gen = SampleGenerator::new(small_sw(10)).unwrap();
        assert_eq!(gen.generate(77).unwrap(), gen.generate(77).unwrap());
    }

    #[test]
    fn full_size_shallow_water_sample_shape() {
        let mut rng = RandomSource::new(3);
        let s = generate_sw_sample(&mut rng).unwrap();
        assert_eq!(s.series.len(), 1001 * 200);
        assert_eq!(s.params.len(), 101);
        assert!(CovParams::from_slice(ProblemKind::ShallowWater, &s.params)
            .unwrap()
            .in_range());
    }

    #[test]
    fn pooled_lorenz_residuals_match_generating_r() {
        let gen = SampleGenerator::new(small_lorenz(1000)).unwrap();
        let p = LorenzRParams {
            r0: 0.4,
            r1: -0.3,
            r2: 0.2,
            v_r: 30.0,
        };
        let r = spd_from_lorenz_params(&p).unwrap();
        let mut rng = RandomSource::new(8);
        let mut acc = DMatrix::zeros(3, 3);
        let mut count = 0.0;
        for _ in 0..10 {
            let s = gen.observe_with(&r, &mut rng).unwrap();
            for (t, y) in gen.clean_series().iter().enumerate() {
                let e = DVector::from_fn(3, |c, _| s[t * 3 + c] - y[c]);
                acc += &e * e.transpose();
                count += 1.0;
            }
        }
        let emp = acc / count;
        let rel = (emp - r.matrix()).norm() / r.matrix().norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn normalised_residuals_are_standard() {
        let gen = SampleGenerator::new(small_lorenz(1000)).unwrap();
        let mut rng = RandomSource::new(10);
        let (mut sum, mut sq, mut n) = ([0.0; 3], [0.0; 3], 0.0);
        for _ in 0..100 {
            let p = gen.config.sample_params(&mut rng);
            let r = p.build().unwrap();
            let s = gen.observe_with(&r, &mut rng).unwrap();
            let l = r.cholesky();
            for (t, y) in gen.clean_series().iter().enumerate() {
                let e = DVector::from_fn(3, |c, _| s[t * 3 + c] - y[c]);
                let z = l.solve_lower_triangular(&e).unwrap();
                for c in 0..3 {
                    sum[c] += z[c];
                    sq[c] += z[c] * z[c];
                }
                n += 1.0;
            }
        }
        assert!(n >= 1e5);
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = sq[c] / n - mean * mean;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((0.95..=1.05).contains(&var), "var {var}");
        }
    }

    #[test]
    fn shallow_water_blocks_are_uncorrelated() {
        let gen = SampleGenerator::new(small_sw(999)).unwrap();
        let p = SwRParams {
            d: vec![500.0; 25],
            r: 2.0,
        };
        let r = build_sw_covariance(&p, SW_LENGTH_SCALE).unwrap();
        let mut rng = RandomSource::new(12);
        let mut acc = DMatrix::zeros(25, 25);
        let mut count = 0.0;
        for _ in 0..10 {
            let s = gen.observe_with(&r, &mut rng).unwrap();
            for (t, y) in gen.clean_series().iter().enumerate() {
                let e = DVector::from_fn(50, |c, _| s[t * 50 + c] - y[c]);
                let eu = e.rows(0, 25).into_owned();
                let ev = e.rows(25, 25).into_owned();
                acc += &eu * ev.transpose();
                count += 1.0;
            }
        }
        let cross = acc / count;
        assert!(cross.norm() < 0.05 * r.matrix().norm());
        let _ = symmetrize(&cross).unwrap();
    }

    #[test]
    fn dataset_of_one_and_unique_children() {
        let rng = RandomSource::new(4);
        let d = build_dataset(&small_lorenz(50), 1, &rng).unwrap();
        assert_eq!(d.len(), 1);
        let d = build_dataset(&small_lorenz(50), 100, &rng).unwrap();
        let hashes: HashSet<u64> = d
            .samples
            .iter()
            .map(|s| {
                let mut h = DefaultHasher::new();
                for x in &s.series {
                    x.to_bits().hash(&mut h);
                }
                h.finish()
            })
            .collect();
        assert_eq!(hashes.len(), 100);
        assert!((0..d.len()).all(|i| d.params_of(i).unwrap().in_range()));
    }

    #[test]
    fn stats_use_training_split_only() {
        let rng = RandomSource::new(6);
        let d = build_dataset(&small_lorenz(20), 20, &rng).unwrap();
        let (train, val) = d.split(DEFAULT_VALIDATION_FRACTION);
        assert_eq!(val.len(), 2);
        let s = InputStats::compute(train.iter().map(|s| s.series.as_slice()), 21 * 3).unwrap();
        assert_eq!(s, d.stats);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let rng = RandomSource::new(9);
        let d = build_dataset(&small_sw(5), 4, &rng).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, d);

        let cut = &buf[..buf.len() - 5];
        match read_dataset(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset <= cut.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset(bad.as_slice()),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_bytes_are_deterministic() {
        let bytes = |seed| {
            let d = build_dataset(&small_lorenz(30), 12, &RandomSource::new(seed)).unwrap();
            let mut buf = Vec::new();
            write_dataset(&d, &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(3), bytes(3));
        assert_ne!(bytes(3), bytes(4));
    }

    #[test]
    fn param_normalisation_round_trip() {
        let mut rng = RandomSource::new(2);
        for kind in [ProblemKind::Lorenz, ProblemKind::ShallowWater] {
            let cfg = if kind == ProblemKind::Lorenz {
                small_lorenz(1)
            } else {
                small_sw(1)
            };
            for _ in 0..50 {
                let p = cfg.sample_params(&mut rng).to_vec();
                let back = kind.denormalize_params(&kind.normalize_params(&p));
                for (a, b) in p.iter().zip(&back) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
        let z = ProblemKind::Lorenz.normalize_params(&[0.1, 0.2, 0.3, 50.0]);
        assert_eq!(z, vec![0.1, 0.2, 0.3, 0.5]);
        let z = ProblemKind::ShallowWater.normalize_params(&[1000.0, 3.0]);
        assert_eq!(z, vec![1.0, 0.5]);
    }

    #[test]
    fn input_stats_round_trip() {
        let series = [vec![1.0, 2.0, 3.0], vec![3.0, 6.0, 3.0], vec![2.0, 4.0, 3.0]];
        let s = InputStats::compute(series.iter().map(|v| v.as_slice()), 3).unwrap();
        assert_eq!(s.mean, vec![2.0, 4.0, 3.0]);
        assert_eq!(s.std[2], 1.0);
        let x = [0.3, -7.0, 11.0];
        let back = s.denormalize(&s.normalize(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
