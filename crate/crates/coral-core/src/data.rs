//! Observation grids, field samples, and analytic synthetic PDE generators.
//!
//! The generators produce closed-form solutions (spectral heat flow,
//! constant-velocity advection, and a boundary-distance field on deformed
//! domains), so ground truth is available exactly at any resolution and any
//! time. Every generator is deterministic given its seed.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::flt;
use crate::tensor::Tensor;

const TWO_PI: f64 = core::f64::consts::TAU;

// ---------------------------------------------------------------------------
// Grids and samples
// ---------------------------------------------------------------------------

/// A set of observation points in `[-1, 1]^d`, possibly irregular.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    points: Tensor,
    periodic: Vec<bool>,
}

impl Grid {
    /// Checked constructor: points must be an `(n, d)` tensor with all
    /// coordinates in `[-1, 1]` and no duplicate points within `1e-12`.
    pub fn new(points: Tensor, periodic: Vec<bool>) -> Result<Grid> {
        if points.rank() != 2 || points.shape()[0] == 0 {
            return Err(CoreError::InvalidParam {
                what: "grid points",
                detail: alloc::format!("expected nonempty (n, d) tensor, got {:?}", points.shape()),
            });
        }
        let d = points.shape()[1];
        if periodic.len() != d {
            return Err(CoreError::InvalidParam {
                what: "grid periodicity flags",
                detail: alloc::format!("{} flags for dimension {}", periodic.len(), d),
            });
        }
        if points.data().iter().any(|&c| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&c)) {
            return Err(CoreError::InvalidParam {
                what: "grid points",
                detail: "coordinates must lie in [-1, 1]".into(),
            });
        }
        let n = points.shape()[0];
        // Duplicate check via lexicographic sort; exact duplicates and
        // 1e-12-close points end up adjacent.
        let mut idx: Vec<usize> = (0..n).collect();
        let row = |i: usize| &points.data()[i * d..(i + 1) * d];
        idx.sort_unstable_by(|&a, &b| {
            row(a).partial_cmp(row(b)).unwrap_or(core::cmp::Ordering::Equal)
        });
        for w in idx.windows(2) {
            let (a, b) = (row(w[0]), row(w[1]));
            if a.iter().zip(b.iter()).all(|(x, y)| flt::abs(x - y) <= 1e-12) {
                return Err(CoreError::InvalidParam {
                    what: "grid points",
                    detail: "duplicate points within 1e-12".into(),
                });
            }
        }
        Ok(Grid { points, periodic })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    /// Rows of the point tensor for the given indices, as a new grid.
    pub fn select(&self, indices: &[usize]) -> Result<Grid> {
        if indices.is_empty() {
            return Err(CoreError::Empty { what: "grid selection" });
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.points.data()[i * d..(i + 1) * d]);
        }
        Grid::new(Tensor::from_vec(&[indices.len(), d], data)?, self.periodic.clone())
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.points.same_storage(&other.points) || self.points == other.points
    }
}

/// Regular lattice on the periodic domain `[-1, 1)^d` (endpoint excluded, so
/// periodic images are not duplicated).
pub fn regular_grid_periodic(res: usize, d: usize) -> Result<Arc<Grid>> {
    lattice(res, d, true)
}

/// Regular lattice on the closed domain `[-1, 1]^d` (endpoints included).
pub fn regular_grid_closed(res: usize, d: usize) -> Result<Arc<Grid>> {
    lattice(res, d, false)
}

fn lattice(res: usize, d: usize, periodic: bool) -> Result<Arc<Grid>> {
    if res < 2 || d == 0 || d > 3 {
        return Err(CoreError::InvalidParam {
            what: "lattice size",
            detail: alloc::format!("res = {res}, d = {d}"),
        });
    }
    let coord = |j: usize| {
        if periodic {
            -1.0 + 2.0 * j as f64 / res as f64
        } else {
            -1.0 + 2.0 * j as f64 / (res - 1) as f64
        }
    };
    let n = res.pow(d as u32);
    let mut data = Vec::with_capacity(n * d);
    let mut odo = vec![0usize; d];
    for _ in 0..n {
        for &j in odo.iter() {
            data.push(coord(j));
        }
        for axis in (0..d).rev() {
            odo[axis] += 1;
            if odo[axis] < res {
                break;
            }
            odo[axis] = 0;
        }
    }
    Ok(Arc::new(Grid::new(Tensor::from_vec(&[n, d], data)?, vec![periodic; d])?))
}

/// Indices of a uniform without-replacement subsample keeping original
/// order: `ceil(pi * n / 100)` of `n` points.
pub fn subsample_indices<R: Rng>(n: usize, pi: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(pi > 0.0 && pi <= 100.0) {
        return Err(CoreError::InvalidParam {
            what: "subsample ratio",
            detail: alloc::format!("pi = {pi}, expected (0, 100]"),
        });
    }
    let keep = (flt::ceil(pi * n as f64 / 100.0) as usize).clamp(1, n);
    if keep == n {
        return Ok((0..n).collect());
    }
    // Partial Fisher-Yates, then sort to preserve original point order.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut chosen = pool[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Retains a random `pi` percent of the grid's nodes.
pub fn subsample_grid<R: Rng>(grid: &Grid, pi: f64, rng: &mut R) -> Result<Grid> {
    let idx = subsample_indices(grid.len(), pi, rng)?;
    grid.select(&idx)
}

/// A grid together with channel values observed on it.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub grid: Arc<Grid>,
    /// `(n, channels)` values; row `i` belongs to grid point `i`.
    pub values: Tensor,
    pub channels: Vec<String>,
}

impl FieldSample {
    pub fn new(grid: Arc<Grid>, values: Tensor, channels: Vec<String>) -> Result<FieldSample> {
        if values.rank() != 2 || values.shape()[0] != grid.len() {
            return Err(CoreError::ShapeMismatch {
                op: "FieldSample::new",
                detail: alloc::format!(
                    "values {:?} for a grid of {} points",
                    values.shape(),
                    grid.len()
                ),
            });
        }
        if channels.len() != values.shape()[1] {
            return Err(CoreError::ShapeMismatch {
                op: "FieldSample::new",
                detail: alloc::format!(
                    "{} channel names for {} channels",
                    channels.len(),
                    values.shape()[1]
                ),
            });
        }
        Ok(FieldSample { grid, values, channels })
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Restriction of the sample to a subset of its grid points.
    pub fn select(&self, indices: &[usize]) -> Result<FieldSample> {
        let grid = Arc::new(self.grid.select(indices)?);
        let c = self.n_channels();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.values.data()[i * c..(i + 1) * c]);
        }
        FieldSample::new(grid, Tensor::from_vec(&[indices.len(), c], data)?, self.channels.clone())
    }
}

/// A time-ordered sequence of frames on one grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: Arc<Grid>,
    pub timestamps: Vec<f64>,
    /// One `(n, channels)` tensor per timestamp.
    pub frames: Vec<Tensor>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(grid: Arc<Grid>, timestamps: Vec<f64>, frames: Vec<Tensor>, dt: f64) -> Result<Trajectory> {
        if timestamps.is_empty() || timestamps.len() != frames.len() {
            return Err(CoreError::InvalidParam {
                what: "trajectory",
                detail: alloc::format!("{} timestamps, {} frames", timestamps.len(), frames.len()),
            });
        }
        for w in timestamps.windows(2) {
            if !(w[1] > w[0]) || flt::abs(w[1] - w[0] - dt) > 1e-9 * dt.max(1.0) {
                return Err(CoreError::InvalidParam {
                    what: "trajectory timestamps",
                    detail: "must be strictly increasing with uniform spacing".into(),
                });
            }
        }
        for f in &frames {
            if f.rank() != 2 || f.shape()[0] != grid.len() {
                return Err(CoreError::ShapeMismatch {
                    op: "Trajectory::new",
                    detail: alloc::format!("frame {:?} for a grid of {} points", f.shape(), grid.len()),
                });
            }
        }
        Ok(Trajectory { grid, timestamps, frames, dt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_sample(&self, t: usize, channels: &[String]) -> Result<FieldSample> {
        FieldSample::new(self.grid.clone(), self.frames[t].clone(), channels.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Spectral fields on the periodic domain [-1, 1]^2
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Mode {
    kx: i32,
    ky: i32,
    a: f64,
    b: f64,
}

/// A real trigonometric polynomial `sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x)`
/// over the half-space of wave vectors with `|k|_inf <= k_max`, periodic on
/// `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FourierField2d {
    modes: Vec<Mode>,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    flt::sqrt(-2.0 * flt::ln(u1)) * flt::cos(TWO_PI * u2)
}

impl FourierField2d {
    /// Seeded random field with coefficients decaying as `1 / (1 + |k|^2)`.
    pub fn random<R: Rng>(k_max: i32, amplitude: f64, rng: &mut R) -> Result<FourierField2d> {
        if k_max < 1 {
            return Err(CoreError::InvalidParam {
                what: "k_max",
                detail: alloc::format!("{k_max}, expected >= 1"),
            });
        }
        let mut modes = Vec::new();
        for kx in 0..=k_max {
            for ky in -k_max..=k_max {
                // Half-space enumeration: (kx, ky) and (-kx, -ky) span the
                // same real basis functions, so keep one representative.
                if kx == 0 && ky < 0 {
                    continue;
                }
                let k2 = (kx * kx + ky * ky) as f64;
                let decay = amplitude / (1.0 + k2);
                let a = gauss(rng) * decay;
                let b = if kx == 0 && ky == 0 { 0.0 } else { gauss(rng) * decay };
                modes.push(Mode { kx, ky, a, b });
            }
        }
        Ok(FourierField2d { modes })
    }

    /// Single-mode field, used by tests with hand-computable spectra.
    pub fn single_mode(kx: i32, ky: i32, a: f64, b: f64) -> FourierField2d {
        FourierField2d { modes: vec![Mode { kx, ky, a, b }] }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for m in &self.modes {
            let phase = TWO_PI * (m.kx as f64 * x + m.ky as f64 * y);
            v += m.a * flt::cos(phase) + m.b * flt::sin(phase);
        }
        v
    }

    /// Coefficient of the constant (`k = 0`) mode.
    pub fn mean_level(&self) -> f64 {
        self.modes.iter().find(|m| m.kx == 0 && m.ky == 0).map_or(0.0, |m| m.a)
    }

    /// Field evolved by heat flow for time `t`: each mode scaled by
    /// `exp(-nu (2 pi |k|)^2 t)`.
    pub fn heat_evolved(&self, nu: f64, t: f64) -> FourierField2d {
        let modes = self
            .modes
            .iter()
            .map(|m| {
                let k2 = (m.kx * m.kx + m.ky * m.ky) as f64;
                let s = flt::exp(-nu * TWO_PI * TWO_PI * k2 * t);
                Mode { kx: m.kx, ky: m.ky, a: m.a * s, b: m.b * s }
            })
            .collect();
        FourierField2d { modes }
    }
}

/// Exact solution handle for one dynamics trajectory.
#[derive(Clone, Debug)]
pub enum AnalyticSolution {
    /// `u_t` solves the heat equation `du/dt = nu laplacian(u)`.
    Heat { initial: FourierField2d, nu: f64 },
    /// `u_t(x) = u_0(x - c t)` on the periodic domain.
    Advection { initial: FourierField2d, cx: f64, cy: f64 },
}

impl AnalyticSolution {
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self {
            AnalyticSolution::Heat { initial, nu } => initial.heat_evolved(*nu, t).eval(x, y),
            AnalyticSolution::Advection { initial, cx, cy } => {
                initial.eval(x - cx * t, y - cy * t)
            }
        }
    }

    /// Field values on a grid at time `t`, as an `(n, 1)` tensor.
    pub fn frame(&self, grid: &Grid, t: f64) -> Result<Tensor> {
        let n = grid.len();
        let pts = grid.points().data();
        let mut vals = Vec::with_capacity(n);
        // Heat evolution is hoisted out of the point loop: one decay pass per
        // frame instead of one per point.
        let evolved;
        let f: &FourierField2d = match self {
            AnalyticSolution::Heat { initial, nu } => {
                evolved = initial.heat_evolved(*nu, t);
                &evolved
            }
            AnalyticSolution::Advection { initial, .. } => initial,
        };
        let (sx, sy) = match self {
            AnalyticSolution::Heat { .. } => (0.0, 0.0),
            AnalyticSolution::Advection { cx, cy, .. } => (cx * t, cy * t),
        };
        for i in 0..n {
            vals.push(f.eval(pts[2 * i] - sx, pts[2 * i + 1] - sy));
        }
        Tensor::from_vec(&[n, 1], vals)
    }
}

// ---------------------------------------------------------------------------
// Dynamics dataset generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DynamicsPde {
    Heat2d { nu: f64 },
    Advection2d { cx: f64, cy: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DynamicsSpec {
    pub pde: DynamicsPde,
    pub n_traj: usize,
    pub grid_res: usize,
    pub n_frames: usize,
    pub dt: f64,
    pub k_max: i32,
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DynamicsDataset {
    pub spec: DynamicsSpec,
    pub trajectories: Vec<Trajectory>,
}

impl DynamicsSpec {
    fn validate(&self) -> Result<()> {
        if self.n_traj == 0 || self.n_frames < 2 || !(self.dt > 0.0) {
            return Err(CoreError::InvalidParam {
                what: "dynamics spec",
                detail: alloc::format!(
                    "n_traj = {}, n_frames = {}, dt = {}",
                    self.n_traj,
                    self.n_frames,
                    self.dt
                ),
            });
        }
        if let DynamicsPde::Heat2d { nu } = self.pde {
            if !(nu > 0.0) {
                return Err(CoreError::InvalidParam {
                    what: "viscosity",
                    detail: alloc::format!("nu = {nu}, expected > 0"),
                });
            }
        }
        Ok(())
    }

    /// The per-trajectory exact solutions, derived deterministically from
    /// the seed. Trajectory `i` of [`DynamicsSpec::generate`] samples
    /// `solutions()[i]`.
    pub fn solutions(&self) -> Result<Vec<AnalyticSolution>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_traj)
            .map(|_| {
                let initial = FourierField2d::random(self.k_max, self.amplitude, &mut rng)?;
                Ok(match self.pde {
                    DynamicsPde::Heat2d { nu } => AnalyticSolution::Heat { initial, nu },
                    DynamicsPde::Advection2d { cx, cy } => {
                        AnalyticSolution::Advection { initial, cx, cy }
                    }
                })
            })
            .collect()
    }

    /// Trajectories sampled on the full regular periodic grid.
    pub fn generate(&self) -> Result<DynamicsDataset> {
        let grid = regular_grid_periodic(self.grid_res, 2)?;
        let sols = self.solutions()?;
        let timestamps: Vec<f64> = (0..self.n_frames).map(|j| j as f64 * self.dt).collect();
        let mut trajectories = Vec::with_capacity(self.n_traj);
        for sol in &sols {
            let frames = timestamps
                .iter()
                .map(|&t| sol.frame(&grid, t))
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory::new(grid.clone(), timestamps.clone(), frames, self.dt)?);
        }
        Ok(DynamicsDataset { spec: self.clone(), trajectories })
    }
}

/// Heat-equation trajectories with seeded spectral initial conditions.
pub fn gen_heat2d(
    n_traj: usize,
    grid_res: usize,
    n_frames: usize,
    dt: f64,
    nu: f64,
    k_max: i32,
    amplitude: f64,
    seed: u64,
) -> Result<DynamicsDataset> {
    DynamicsSpec {
        pde: DynamicsPde::Heat2d { nu },
        n_traj,
        grid_res,
        n_frames,
        dt,
        k_max,
        amplitude,
        seed,
    }
    .generate()
}

/// Constant-velocity advection trajectories (exact transport of the seeded
/// initial field).
pub fn gen_advection2d(
    n_traj: usize,
    grid_res: usize,
    n_frames: usize,
    dt: f64,
    cx: f64,
    cy: f64,
    k_max: i32,
    amplitude: f64,
    seed: u64,
) -> Result<DynamicsDataset> {
    DynamicsSpec {
        pde: DynamicsPde::Advection2d { cx, cy },
        n_traj,
        grid_res,
        n_frames,
        dt,
        k_max,
        amplitude,
        seed,
    }
    .generate()
}

// ---------------------------------------------------------------------------
// Initial-value-problem dataset generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum IvpMap {
    /// Output equals input; isolates reconstruction quality.
    Identity,
    /// Output is the input evolved to a fixed time.
    Evolve { t_star: f64 },
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IvpSpec {
    pub pde: DynamicsPde,
    pub map: IvpMap,
    pub n_samples: usize,
    pub grid_res: usize,
    /// Percent of the base lattice retained per sample (100 keeps it full);
    /// each sample draws its own grid.
    pub sample_pi: f64,
    pub k_max: i32,
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct IvpDataset {
    pub spec: IvpSpec,
    /// `(input, output)` pairs; both fields of a pair share one grid.
    pub pairs: Vec<(FieldSample, FieldSample)>,
}

impl IvpSpec {
    pub fn generate(&self) -> Result<IvpDataset> {
        if self.n_samples == 0 {
            return Err(CoreError::InvalidParam {
                what: "ivp spec",
                detail: "n_samples = 0".into(),
            });
        }
        let base = regular_grid_periodic(self.grid_res, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut pairs = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let initial = FourierField2d::random(self.k_max, self.amplitude, &mut rng)?;
            let grid = if self.sample_pi >= 100.0 {
                base.clone()
            } else {
                Arc::new(subsample_grid(&base, self.sample_pi, &mut rng)?)
            };
            let sol = match self.pde {
                DynamicsPde::Heat2d { nu } => AnalyticSolution::Heat { initial, nu },
                DynamicsPde::Advection2d { cx, cy } => {
                    AnalyticSolution::Advection { initial, cx, cy }
                }
            };
            let input = FieldSample::new(grid.clone(), sol.frame(&grid, 0.0)?, vec!["a".into()])?;
            let out_vals = match self.map {
                IvpMap::Identity => input.values.clone(),
                IvpMap::Evolve { t_star } => sol.frame(&grid, t_star)?,
            };
            let output = FieldSample::new(grid, out_vals, vec!["u".into()])?;
            pairs.push((input, output));
        }
        Ok(IvpDataset { spec: self.clone(), pairs })
    }
}

// ---------------------------------------------------------------------------
// Geometry task: deformed domains and boundary-distance fields
// ---------------------------------------------------------------------------

/// Number of control nodes of the quadratic deformation lattice (3 x 3).
pub const DEFORM_CONTROLS: usize = 9;

/// Displacements of the 3 x 3 control lattice, one `(x, y)` pair per node;
/// shape `(9, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    pub disp: Tensor,
}

impl DeformParams {
    pub fn new(disp: Tensor) -> Result<DeformParams> {
        if disp.shape() != [DEFORM_CONTROLS, 2] {
            return Err(CoreError::ShapeMismatch {
                op: "DeformParams::new",
                detail: alloc::format!("expected (9, 2), got {:?}", disp.shape()),
            });
        }
        Ok(DeformParams { disp })
    }

    pub fn zero() -> DeformParams {
        DeformParams { disp: Tensor::zeros(&[DEFORM_CONTROLS, 2]) }
    }
}

fn bernstein2(t: f64) -> [f64; 3] {
    let s = 1.0 - t;
    [s * s, 2.0 * s * t, t * t]
}

fn bernstein2_deriv(t: f64) -> [f64; 3] {
    [2.0 * t - 2.0, 2.0 - 4.0 * t, 2.0 * t]
}

/// Maps normalized grid coordinates in `[-1, 1]` to the reference unit
/// square `[0, 1]^2` the deformation basis is defined on.
pub fn to_unit_square(xn: f64) -> f64 {
    (xn + 1.0) * 0.5
}

/// Basis matrix of the deformation at the grid's points: an `(n, 9)` tensor
/// `B` such that the deformed positions are `X_unit + B @ disp`. Linear in
/// the displacement parameters, which keeps the whole geometry pipeline
/// differentiable with respect to them.
pub fn deform_basis(grid: &Grid) -> Result<Tensor> {
    if grid.dim() != 2 {
        return Err(CoreError::InvalidParam {
            what: "deformation grid",
            detail: alloc::format!("dimension {}", grid.dim()),
        });
    }
    let n = grid.len();
    let pts = grid.points().data();
    let mut data = Vec::with_capacity(n * DEFORM_CONTROLS);
    for i in 0..n {
        let bx = bernstein2(to_unit_square(pts[2 * i]));
        let by = bernstein2(to_unit_square(pts[2 * i + 1]));
        for iy in 0..3 {
            for ix in 0..3 {
                data.push(bx[ix] * by[iy]);
            }
        }
    }
    Tensor::from_vec(&[n, DEFORM_CONTROLS], data)
}

/// Deformed position of a reference unit-square point.
pub fn deform_point(p: &DeformParams, x: f64, y: f64) -> [f64; 2] {
    let bx = bernstein2(x);
    let by = bernstein2(y);
    let mut out = [x, y];
    let d = p.disp.data();
    for iy in 0..3 {
        for ix in 0..3 {
            let w = bx[ix] * by[iy];
            let node = iy * 3 + ix;
            out[0] += w * d[2 * node];
            out[1] += w * d[2 * node + 1];
        }
    }
    out
}

fn deform_jacobian(p: &DeformParams, x: f64, y: f64) -> [[f64; 2]; 2] {
    let bx = bernstein2(x);
    let by = bernstein2(y);
    let dbx = bernstein2_deriv(x);
    let dby = bernstein2_deriv(y);
    let mut j = [[1.0, 0.0], [0.0, 1.0]];
    let d = p.disp.data();
    for iy in 0..3 {
        for ix in 0..3 {
            let node = iy * 3 + ix;
            let (px, py) = (d[2 * node], d[2 * node + 1]);
            let wx = dbx[ix] * by[iy];
            let wy = bx[ix] * dby[iy];
            j[0][0] += wx * px;
            j[0][1] += wy * px;
            j[1][0] += wx * py;
            j[1][1] += wy * py;
        }
    }
    j
}

/// True when the deformation Jacobian determinant stays positive on a probe
/// lattice, i.e. the map is locally injective over the sampled domain.
pub fn deformation_is_injective(p: &DeformParams, probe_res: usize) -> bool {
    for iy in 0..probe_res {
        for ix in 0..probe_res {
            let x = ix as f64 / (probe_res - 1) as f64;
            let y = iy as f64 / (probe_res - 1) as f64;
            let j = deform_jacobian(p, x, y);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det <= 1e-3 {
                return false;
            }
        }
    }
    true
}

/// Closed polyline tracing the deformed boundary of the unit square,
/// `samples` vertices around the perimeter.
pub fn boundary_polyline(p: &DeformParams, samples: usize) -> Vec<[f64; 2]> {
    let per_edge = samples / 4;
    let mut pts = Vec::with_capacity(per_edge * 4);
    for e in 0..4 {
        for j in 0..per_edge {
            let t = j as f64 / per_edge as f64;
            let (x, y) = match e {
                0 => (t, 0.0),
                1 => (1.0, t),
                2 => (1.0 - t, 1.0),
                _ => (0.0, 1.0 - t),
            };
            pts.push(deform_point(p, x, y));
        }
    }
    pts
}

fn point_segment_dist2(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (aqx, aqy) = (q[0] - a[0], q[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((aqx * abx + aqy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (aqx - t * abx, aqy - t * aby);
    dx * dx + dy * dy
}

/// Brute-force distance from a point to the closed polyline.
pub fn distance_to_polyline(q: [f64; 2], polyline: &[[f64; 2]]) -> f64 {
    let n = polyline.len();
    let mut best = f64::MAX;
    for i in 0..n {
        let d2 = point_segment_dist2(q, polyline[i], polyline[(i + 1) % n]);
        if d2 < best {
            best = d2;
        }
    }
    flt::sqrt(best)
}

/// The analytic steady field on a deformed domain: `exp(-gamma d^2)` with
/// `d` the distance to the deformed boundary.
pub fn geometry_field(q: [f64; 2], polyline: &[[f64; 2]], gamma: f64) -> f64 {
    let d = distance_to_polyline(q, polyline);
    flt::exp(-gamma * d * d)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeometrySpec {
    pub n_samples: usize,
    /// Resolution of the closed reference lattice.
    pub grid_res: usize,
    /// Percent of the reference lattice retained per sample.
    pub sample_pi: f64,
    /// Bound on control-node displacements.
    pub max_disp: f64,
    pub gamma: f64,
    pub boundary_samples: usize,
    pub seed: u64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec {
            n_samples: 16,
            grid_res: 12,
            sample_pi: 100.0,
            max_disp: 0.12,
            gamma: 4.0,
            boundary_samples: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeometrySample {
    pub deform: DeformParams,
    /// Deformed coordinates at the reference nodes (2 channels).
    pub input: FieldSample,
    /// Boundary-distance field at the deformed nodes (1 channel).
    pub output: FieldSample,
}

#[derive(Clone, Debug)]
pub struct GeometryDataset {
    pub spec: GeometrySpec,
    pub samples: Vec<GeometrySample>,
}

/// Builds the input/output pair for one deformation on the given reference
/// grid (normalized coordinates).
pub fn geometry_sample_on(
    grid: &Arc<Grid>,
    deform: &DeformParams,
    gamma: f64,
    boundary_samples: usize,
) -> Result<GeometrySample> {
    let basis = deform_basis(grid)?;
    let n = grid.len();
    let pts = grid.points().data();
    let mut unit = Vec::with_capacity(n * 2);
    for i in 0..n {
        unit.push(to_unit_square(pts[2 * i]));
        unit.push(to_unit_square(pts[2 * i + 1]));
    }
    let unit = Tensor::from_vec(&[n, 2], unit)?;
    let deformed = unit.add(&basis.matmul(&deform.disp)?)?;

    let polyline = boundary_polyline(deform, boundary_samples);
    let mut field = Vec::with_capacity(n);
    for i in 0..n {
        let q = [deformed.data()[2 * i], deformed.data()[2 * i + 1]];
        field.push(geometry_field(q, &polyline, gamma));
    }
    let input = FieldSample::new(
        grid.clone(),
        deformed,
        vec!["x_def".into(), "y_def".into()],
    )?;
    let output =
        FieldSample::new(grid.clone(), Tensor::from_vec(&[n, 1], field)?, vec!["u".into()])?;
    Ok(GeometrySample { deform: deform.clone(), input, output })
}

impl GeometrySpec {
    pub fn generate(&self) -> Result<GeometryDataset> {
        if self.n_samples == 0 {
            return Err(CoreError::InvalidParam {
                what: "geometry spec",
                detail: "n_samples = 0".into(),
            });
        }
        let base = regular_grid_closed(self.grid_res, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut samples = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let mut deform = None;
            // Rejection-sample until the map is injective on the probe grid.
            for _attempt in 0..200 {
                let disp = Tensor::from_fn(&[DEFORM_CONTROLS, 2], |_| {
                    rng.gen_range(-self.max_disp..self.max_disp)
                })?;
                let cand = DeformParams::new(disp)?;
                if deformation_is_injective(&cand, 12) {
                    deform = Some(cand);
                    break;
                }
            }
            let deform = deform.ok_or(CoreError::InvalidParam {
                what: "deformation prior",
                detail: "no injective deformation found in 200 draws".into(),
            })?;
            let grid = if self.sample_pi >= 100.0 {
                base.clone()
            } else {
                Arc::new(subsample_grid(&base, self.sample_pi, &mut rng)?)
            };
            samples.push(geometry_sample_on(&grid, &deform, self.gamma, self.boundary_samples)?);
        }
        Ok(GeometryDataset { spec: self.clone(), samples })
    }
}

/// Input/output pairs of the deformation task; wrapper matching the
/// generator naming of the dynamics families.
pub fn gen_geometry_task(spec: &GeometrySpec) -> Result<GeometryDataset> {
    spec.generate()
}
