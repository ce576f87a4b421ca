//! Forward models and observation operators.
//!
//! Both models are advanced with explicit Euler. A model state is a flat
//! [`DVector`]; the leading [`Dynamics::analysis_dim`] components are the ones
//! seen by the assimilation, trailing components (the shallow-water depth) are
//! carried along by the model only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait Dynamics: Send + Sync {
    /// Length of the full model state.
    fn state_dim(&self) -> usize;

    /// Number of leading state components that are analysed and observed.
    fn analysis_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// States `[x0, M(x0), …, M^steps(x0)]`.
pub fn run_trajectory(model: &dyn Dynamics, initial: &DVector<f64>, steps: usize) -> Result<Vec<DVector<f64>>> {
    if steps == 0 {
        return Err(Error::Domain("trajectory needs at least one step".into()));
    }
    if initial.len() != model.state_dim() {
        return Err(Error::dims(model.state_dim(), initial.len()));
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(initial.clone());
    for k in 0..steps {
        let next = model.step(&out[k])?;
        out.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lorenz

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub dt: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            alpha: 28.0,
            beta: 2.667,
            dt: 0.001,
        }
    }
}

pub const LORENZ_INITIAL: [f64; 3] = [0.0, 1.0, 1.05];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzState(pub [f64; 3]);

pub fn lorenz_step(s: LorenzState, p: &LorenzParams) -> Result<LorenzState> {
    let [x0, x1, x2] = s.0;
    let next = [
        x0 + p.dt * p.sigma * (x1 - x0),
        x1 + p.dt * (p.alpha * x0 - x1 - x0 * x2),
        x2 + p.dt * (x0 * x1 - p.beta * x2),
    ];
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lorenz step overflowed".into()));
    }
    Ok(LorenzState(next))
}

#[derive(Debug, Clone, Default)]
pub struct LorenzModel {
    pub params: LorenzParams,
}

impl LorenzModel {
    pub fn new(params: LorenzParams) -> Self {
        Self { params }
    }

    pub fn initial_state() -> DVector<f64> {
        DVector::from_row_slice(&LORENZ_INITIAL)
    }
}

impl Dynamics for LorenzModel {
    fn state_dim(&self) -> usize {
        3
    }

    fn analysis_dim(&self) -> usize {
        3
    }

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != 3 {
            return Err(Error::dims(3, x.len()));
        }
        let s = lorenz_step(LorenzState([x[0], x[1], x[2]]), &self.params)?;
        Ok(DVector::from_row_slice(&s.0))
    }
}

// ---------------------------------------------------------------------------
// Shallow water

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwParams {
    pub g: f64,
    /// Viscous drag coefficient.
    pub b: f64,
    pub dt: f64,
    pub dx: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for SwParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            b: 0.1,
            dt: 1e-4,
            dx: 1.0,
            nx: 20,
            ny: 20,
        }
    }
}

impl SwParams {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }
}

/// Cylinder initial condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwInit {
    pub background_h: f64,
    pub bump_h: f64,
    pub radius: f64,
}

impl Default for SwInit {
    fn default() -> Self {
        Self {
            background_h: 1.0,
            bump_h: 0.1,
            radius: 2.5,
        }
    }
}

/// Row-major `ny × nx` grids; index `y * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwField {
    pub nx: usize,
    pub ny: usize,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SwField {
    /// State vector `[u, v, h]`.
    pub fn to_state(&self) -> DVector<f64> {
        let mut x = Vec::with_capacity(3 * self.h.len());
        x.extend_from_slice(&self.u);
        x.extend_from_slice(&self.v);
        x.extend_from_slice(&self.h);
        DVector::from_vec(x)
    }

    pub fn from_state(x: &DVector<f64>, nx: usize, ny: usize) -> Result<Self> {
        let n = nx * ny;
        if x.len() != 3 * n {
            return Err(Error::dims(3 * n, x.len()));
        }
        let s = x.as_slice();
        Ok(Self {
            nx,
            ny,
            u: s[..n].to_vec(),
            v: s[n..2 * n].to_vec(),
            h: s[2 * n..].to_vec(),
        })
    }
}

/// Water at rest with a cylinder of extra height `bump_h` centred on the domain.
///
/// Cell `(x, y)` has its centre at `((x + ½) dx, (y + ½) dx)`.
pub fn sw_init(p: &SwParams, init: &SwInit) -> Result<SwField> {
    let half = 0.5 * (p.nx.min(p.ny) as f64) * p.dx;
    if init.radius < 0.0 || init.radius >= half {
        return Err(Error::Domain(format!(
            "cylinder radius {} must lie in [0, {half})",
            init.radius
        )));
    }
    let (cx, cy) = (0.5 * p.nx as f64 * p.dx, 0.5 * p.ny as f64 * p.dx);
    let mut h = vec![init.background_h; p.cells()];
    for y in 0..p.ny {
        for x in 0..p.nx {
            let (px, py) = ((x as f64 + 0.5) * p.dx, (y as f64 + 0.5) * p.dx);
            if ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() <= init.radius {
                h[y * p.nx + x] += init.bump_h;
            }
        }
    }
    Ok(SwField {
        nx: p.nx,
        ny: p.ny,
        h,
        u: vec![0.0; p.cells()],
        v: vec![0.0; p.cells()],
    })
}

/// One forward-Euler step.
///
/// Depth gradients are centred in the interior and one-sided at the walls. The
/// continuity equation is in flux form with face fluxes `½(u_i h_i + u_{i+1} h_{i+1})`
/// and zero flux through the walls, so `Σ h` is conserved.
pub fn sw_step(f: &SwField, p: &SwParams) -> Result<SwField> {
    let (nx, ny) = (p.nx, p.ny);
    if f.nx != nx || f.ny != ny {
        return Err(Error::dims(nx * ny, f.nx * f.ny));
    }
    let vmax = f.u.iter().chain(f.v.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
    let courant = vmax * p.dt / p.dx;
    if courant > 1.0 {
        return Err(Error::CflViolation { courant });
    }
    let idx = |x: usize, y: usize| y * nx + x;
    let (h, u, v) = (&f.h, &f.u, &f.v);
    let mut out = f.clone();

    for y in 0..ny {
        for x in 0..nx {
            let k = idx(x, y);
            let dhdx = if nx == 1 {
                0.0
            } else if x == 0 {
                (h[idx(1, y)] - h[k]) / p.dx
            } else if x == nx - 1 {
                (h[k] - h[idx(x - 1, y)]) / p.dx
            } else {
                (h[idx(x + 1, y)] - h[idx(x - 1, y)]) / (2.0 * p.dx)
            };
            let dhdy = if ny == 1 {
                0.0
            } else if y == 0 {
                (h[idx(x, 1)] - h[k]) / p.dx
            } else if y == ny - 1 {
                (h[k] - h[idx(x, y - 1)]) / p.dx
            } else {
                (h[idx(x, y + 1)] - h[idx(x, y - 1)]) / (2.0 * p.dx)
            };
            out.u[k] = u[k] + p.dt * (-p.g * dhdx - p.b * u[k]);
            out.v[k] = v[k] + p.dt * (-p.g * dhdy - p.b * v[k]);

            let fx = |a: usize, b: usize| 0.5 * (u[a] * h[a] + u[b] * h[b]);
            let fy = |a: usize, b: usize| 0.5 * (v[a] * h[a] + v[b] * h[b]);
            let east = if x + 1 < nx { fx(k, idx(x + 1, y)) } else { 0.0 };
            let west = if x > 0 { fx(idx(x - 1, y), k) } else { 0.0 };
            let north = if y + 1 < ny { fy(k, idx(x, y + 1)) } else { 0.0 };
            let south = if y > 0 { fy(idx(x, y - 1), k) } else { 0.0 };
            out.h[k] = h[k] - p.dt * ((east - west) / p.dx + (north - south) / p.dx);
        }
    }
    if out.h.iter().chain(&out.u).chain(&out.v).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("shallow-water step diverged".into()));
    }
    if out.h.iter().any(|&v| v <= 0.0) {
        return Err(Error::NonFinite("shallow-water depth became non-positive".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ShallowWater {
    pub params: SwParams,
}

impl ShallowWater {
    pub fn new(params: SwParams) -> Self {
        Self { params }
    }
}

impl Dynamics for ShallowWater {
    fn state_dim(&self) -> usize {
        3 * self.params.cells()
    }

    fn analysis_dim(&self) -> usize {
        2 * self.params.cells()
    }

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let f = SwField::from_state(x, self.params.nx, self.params.ny)?;
        Ok(sw_step(&f, &self.params)?.to_state())
    }
}

// ---------------------------------------------------------------------------
// Observation operators

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    /// Dense linear map on the analysed state.
    Matrix(DMatrix<f64>),
    /// 2×2 block means of `u` then `v` on an `nx × ny` grid (both even).
    GridAverage { nx: usize, ny: usize },
}

impl ObservationOperator {
    /// The Lorenz operator `[[1,1,0],[2,0,1],[0,0,3]]`.
    pub fn lorenz() -> Self {
        ObservationOperator::Matrix(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 3.0],
        ))
    }

    pub fn grid_average(p: &SwParams) -> Result<Self> {
        if !p.nx.is_multiple_of(2) || !p.ny.is_multiple_of(2) {
            return Err(Error::Domain("grid-average operator needs an even grid".into()));
        }
        Ok(ObservationOperator::GridAverage { nx: p.nx, ny: p.ny })
    }

    /// Dimension of the analysed state it acts on.
    pub fn input_dim(&self) -> usize {
        match self {
            ObservationOperator::Matrix(h) => h.ncols(),
            ObservationOperator::GridAverage { nx, ny } => 2 * nx * ny,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ObservationOperator::Matrix(h) => h.nrows(),
            ObservationOperator::GridAverage { nx, ny } => nx * ny / 2,
        }
    }

    /// Applies the operator to the analysed part of a state.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), x.len()));
        }
        match self {
            ObservationOperator::Matrix(h) => Ok(h * DVector::from_column_slice(x)),
            ObservationOperator::GridAverage { nx, ny } => {
                let (nx, ny) = (*nx, *ny);
                let (ox, oy) = (nx / 2, ny / 2);
                let cells = nx * ny;
                let mut y = DVector::zeros(2 * ox * oy);
                for (block, field) in [&x[..cells], &x[cells..]].into_iter().enumerate() {
                    for i in 0..oy {
                        for j in 0..ox {
                            let at = |r: usize, c: usize| field[r * nx + c];
                            let s = at(2 * i, 2 * j)
                                + at(2 * i + 1, 2 * j)
                                + at(2 * i, 2 * j + 1)
                                + at(2 * i + 1, 2 * j + 1);
                            y[block * ox * oy + i * ox + j] = 0.25 * s;
                        }
                    }
                }
                Ok(y)
            }
        }
    }

    /// Dense matrix representation (`output_dim × input_dim`).
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            ObservationOperator::Matrix(h) => h.clone(),
            ObservationOperator::GridAverage { nx, .. } => {
                let nx = *nx;
                let (m, n) = (self.output_dim(), self.input_dim());
                let cells = n / 2;
                let ox = nx / 2;
                let per_block = m / 2;
                let mut h = DMatrix::zeros(m, n);
                for block in 0..2 {
                    for o in 0..per_block {
                        let (i, j) = (o / ox, o % ox);
                        for (r, c) in [
                            (2 * i, 2 * j),
                            (2 * i + 1, 2 * j),
                            (2 * i, 2 * j + 1),
                            (2 * i + 1, 2 * j + 1),
                        ] {
                            h[(block * per_block + o, block * cells + r * nx + c)] = 0.25;
                        }
                    }
                }
                h
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_origin_fixed() {
        let p = LorenzParams::default();
        assert_eq!(lorenz_step(LorenzState([0.0; 3]), &p).unwrap(), LorenzState([0.0; 3]));
    }

    #[test]
    fn lorenz_single_step_by_hand() {
        let s = lorenz_step(LorenzState(LORENZ_INITIAL), &LorenzParams::default()).unwrap();
        // x0 = 0 + 0.001·10·1; x1 = 1 + 0.001·(0 − 1 − 0); x2 = 1.05 + 0.001·(0 − 2.667·1.05)
        let want = [0.01, 0.999, 1.05 - 0.001 * 2.667 * 1.05];
        for k in 0..3 {
            assert!((s.0[k] - want[k]).abs() < 1e-15);
        }
        assert!((s.0[2] - 1.04719965).abs() < 1e-12);
    }

    #[test]
    fn lorenz_trajectory_bounded_and_deterministic() {
        let m = LorenzModel::default();
        let a = run_trajectory(&m, &LorenzModel::initial_state(), 1000).unwrap();
        let b = run_trajectory(&m, &LorenzModel::initial_state(), 1000).unwrap();
        assert_eq!(a.len(), 1001);
        assert!(a.iter().all(|x| x.amax() < 100.0));
        assert_eq!(a[1000], b[1000]);
        let one = run_trajectory(&m, &LorenzModel::initial_state(), 1).unwrap();
        assert_eq!(
            one,
            vec![
                LorenzModel::initial_state(),
                m.step(&LorenzModel::initial_state()).unwrap()
            ]
        );
        assert!(run_trajectory(&m, &LorenzModel::initial_state(), 0).is_err());
    }

    #[test]
    fn lorenz_observation_by_hand() {
        let y = ObservationOperator::lorenz().apply(&LORENZ_INITIAL).unwrap();
        for (a, b) in y.iter().zip([1.0, 1.05, 3.15]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(ObservationOperator::lorenz().apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn grid_average_constant_and_block() {
        let p = SwParams::default();
        let op = ObservationOperator::grid_average(&p).unwrap();
        let x = vec![0.7; 800];
        let y = op.apply(&x).unwrap();
        assert_eq!(y.len(), 200);
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut x = vec![0.0; 800];
        // block (i, j) = (1, 2): rows 2..4, cols 4..6 of u
        x[2 * 20 + 4] = 1.0;
        x[3 * 20 + 4] = 2.0;
        x[2 * 20 + 5] = 3.0;
        x[3 * 20 + 5] = 4.0;
        let y = op.apply(&x).unwrap();
        assert_eq!(y[10 + 2], 2.5);
        assert_eq!(y.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn dense_matches_apply() {
        let p = SwParams {
            nx: 6,
            ny: 6,
            ..SwParams::default()
        };
        let op = ObservationOperator::grid_average(&p).unwrap();
        let x: Vec<f64> = (0..72).map(|k| (k as f64 * 0.37).sin()).collect();
        let a = op.apply(&x).unwrap();
        let b = op.dense() * DVector::from_vec(x);
        assert!((a - b).amax() < 1e-15);
    }

    #[test]
    fn sw_equilibrium_is_exact() {
        let p = SwParams::default();
        let f = sw_init(
            &p,
            &SwInit {
                bump_h: 0.0,
                ..SwInit::default()
            },
        )
        .unwrap();
        let mut g = f.clone();
        for _ in 0..100 {
            g = sw_step(&g, &p).unwrap();
        }
        assert_eq!(f, g);
    }

    #[test]
    fn sw_cylinder_volume_and_degenerate_radius() {
        let p = SwParams::default();
        let init = SwInit::default();
        let f = sw_init(&p, &init).unwrap();
        let inside = f.h.iter().filter(|&&h| h > init.background_h).count();
        assert_eq!(inside, 16);
        let excess: f64 = f.h.iter().map(|h| h - init.background_h).sum();
        assert!((excess - init.bump_h * inside as f64).abs() < 1e-12);
        assert!(f.u.iter().chain(&f.v).all(|&v| v == 0.0));

        let f0 = sw_init(&p, &SwInit { radius: 0.0, ..init }).unwrap();
        assert!(f0.h.iter().all(|&h| h == init.background_h));
        assert!(sw_init(&p, &SwInit { radius: 10.0, ..init }).is_err());
    }

    #[test]
    fn sw_drag_only_decay() {
        let p = SwParams {
            g: 0.0,
            ..SwParams::default()
        };
        let mut f = sw_init(
            &p,
            &SwInit {
                bump_h: 0.0,
                ..SwInit::default()
            },
        )
        .unwrap();
        f.u = vec![1.0; p.cells()];
        let mut want = 1.0;
        for _ in 0..10 {
            f = sw_step(&f, &p).unwrap();
            want *= 1.0 - p.b * p.dt;
            assert!(f.u.iter().all(|&u| (u - want).abs() < 1e-15));
        }
    }

    #[test]
    fn sw_mass_conserved() {
        let p = SwParams::default();
        let mut f = sw_init(&p, &SwInit::default()).unwrap();
        let m0: f64 = f.h.iter().sum();
        for _ in 0..1000 {
            f = sw_step(&f, &p).unwrap();
        }
        let m1: f64 = f.h.iter().sum();
        assert!(((m1 - m0) / m0).abs() < 1e-6);
        assert!(f.u.iter().any(|&u| u != 0.0));
    }

    #[test]
    fn sw_cfl_violation() {
        let p = SwParams::default();
        let mut f = sw_init(&p, &SwInit::default()).unwrap();
        f.u[5] = 2.0e4;
        assert!(matches!(sw_step(&f, &p), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn observation_is_linear() {
        let p = SwParams {
            nx: 4,
            ny: 4,
            ..SwParams::default()
        };
        for op in [
            ObservationOperator::lorenz(),
            ObservationOperator::grid_average(&p).unwrap(),
        ] {
            let n = op.input_dim();
            let s1: Vec<f64> = (0..n).map(|k| (k as f64).cos()).collect();
            let s2: Vec<f64> = (0..n).map(|k| (k as f64 * 1.3).sin()).collect();
            let (a, b) = (1.7, -0.4);
            let comb: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = op.apply(&comb).unwrap();
            let rhs = op.apply(&s1).unwrap() * a + op.apply(&s2).unwrap() * b;
            assert!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + rhs.amax()));
        }
    }
}
