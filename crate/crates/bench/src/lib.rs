//! Fixed inputs for the kernel benchmarks in `benches/`.

use covtune::assim::Ensemble;
use covtune::covmat::{sample_lorenz_r_params, spd_from_lorenz_params};
use covtune::dynmodels::{sw_init, ObservationOperator, SwField, SwInit, SwParams};
use covtune::lstmnet::LstmParams;
use covtune::{CovarianceMatrix, DMatrix, DVector, RandomSource};

pub struct LstmCase {
    pub params: LstmParams,
    pub seq: Vec<f64>,
    pub target: Vec<f64>,
}

/// Random network and input sequence of `steps` rows.
pub fn lstm_case(input: usize, hidden: usize, steps: usize) -> LstmCase {
    let mut rng = RandomSource::new(1);
    let params = LstmParams::init(input, hidden, 4, &mut rng);
    let seq = (0..input * steps).map(|_| rng.normal()).collect();
    LstmCase {
        params,
        seq,
        target: vec![0.1; 4],
    }
}

pub struct AnalysisCase {
    pub xb: DVector<f64>,
    pub y: DVector<f64>,
    pub b: DMatrix<f64>,
    pub r: CovarianceMatrix,
    pub h: DMatrix<f64>,
    pub ensemble: Ensemble,
}

/// Lorenz-sized analysis problem with an ensemble of `members`.
pub fn analysis_case(members: usize) -> AnalysisCase {
    let mut rng = RandomSource::new(2);
    let h = ObservationOperator::lorenz().dense();
    let r = spd_from_lorenz_params(&sample_lorenz_r_params(&mut rng)).expect("valid parameters");
    let xb = DVector::from_vec(vec![1.0, -2.0, 20.0]);
    let y = &h * &xb + DVector::from_vec(vec![0.5, -0.3, 0.1]);
    let m = (0..members).map(|_| DVector::from_fn(3, |_, _| rng.normal())).collect();
    AnalysisCase {
        xb,
        y,
        b: DMatrix::identity(3, 3) * 2.0,
        r,
        h,
        ensemble: Ensemble::new(m).expect("at least two members"),
    }
}

/// Shallow-water field at rest with the default bump on an `n × n` grid.
pub fn sw_case(n: usize) -> (SwParams, SwField) {
    let p = SwParams {
        nx: n,
        ny: n,
        ..SwParams::default()
    };
    let f = sw_init(&p, &SwInit::default()).expect("valid grid");
    (p, f)
}

/// AR(1) correlation matrix, SPD for `|rho| < 1`.
pub fn ar1_matrix(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi((i as i32 - j as i32).abs()))
}
